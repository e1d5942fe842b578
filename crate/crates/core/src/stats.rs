//! Knowledge-graph statistics: entity count, density, diameter and
//! connected components.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::graph::{EntityId, KnowledgeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub entities: usize,
    pub relations: usize,
    /// Distinct directed edges over `|V| * (|V| - 1)`.
    pub density: f64,
    /// Longest shortest path inside the largest connected component,
    /// edges taken as undirected.
    pub diameter: usize,
    pub components: usize,
}

pub fn graph_stats(g: &KnowledgeGraph) -> GraphStats {
    let ids: Vec<EntityId> = g.entities.keys().copied().collect();
    let pos: BTreeMap<EntityId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let n = ids.len();

    let mut directed = BTreeSet::new();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for r in &g.relations {
        let (Some(&a), Some(&b)) = (pos.get(&r.source), pos.get(&r.target)) else {
            continue;
        };
        if a == b {
            continue;
        }
        directed.insert((a, b));
        adj[a].insert(b);
        adj[b].insert(a);
    }
    let density = if n < 2 {
        0.0
    } else {
        directed.len() as f64 / (n as f64 * (n as f64 - 1.0))
    };

    let mut comp = vec![usize::MAX; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let c = members.len();
        let mut list = vec![s];
        comp[s] = c;
        let mut i = 0;
        while i < list.len() {
            let u = list[i];
            i += 1;
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = c;
                    list.push(v);
                }
            }
        }
        members.push(list);
    }

    // largest component; the earliest one wins ties
    let diameter = members
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(_, m)| m.iter().map(|&s| eccentricity(&adj, s)).max().unwrap_or(0))
        .unwrap_or(0);

    GraphStats {
        entities: n,
        relations: g.relations.len(),
        density,
        diameter,
        components: members.len(),
    }
}

fn eccentricity(adj: &[BTreeSet<usize>], s: usize) -> usize {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[s] = 0;
    let mut q = VecDeque::from([s]);
    let mut far = 0;
    while let Some(u) = q.pop_front() {
        far = far.max(dist[u]);
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    far
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Entity, Relation};

    fn graph(n: u64, edges: &[(u64, u64)]) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::default();
        for i in 0..n {
            g.insert(Entity::new(EntityId(i), &format!("e{i}"), "X", "", "n"));
        }
        for &(a, b) in edges {
            g.relations.push(Relation {
                source: EntityId(a),
                target: EntityId(b),
                description: String::new(),
                kind: "Related".into(),
            });
        }
        g
    }

    #[test]
    fn singleton() {
        let s = graph_stats(&graph(1, &[]));
        assert_eq!((s.entities, s.components, s.diameter), (1, 1, 0));
        assert_eq!(s.density, 0.0);
    }

    #[test]
    fn disconnected_pair() {
        assert_eq!(graph_stats(&graph(2, &[])).components, 2);
    }

    #[test]
    fn path_of_three() {
        let s = graph_stats(&graph(3, &[(0, 1), (1, 2)]));
        assert_eq!(s.diameter, 2);
        assert_eq!(s.components, 1);
        assert!((s.density - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn diameter_comes_from_the_largest_component() {
        // component {0,1} has diameter 1; {2,3,4,5} is a star of diameter 2
        let s = graph_stats(&graph(6, &[(0, 1), (2, 3), (2, 4), (2, 5)]));
        assert_eq!(s.components, 2);
        assert_eq!(s.diameter, 2);
    }
}
