#include <stdio.h>
#include <string.h>
#include "bookindex.h"

int main(int argc, char **argv) {
    if (argc != 4) return 10;
    double f1 = -1.0, em = -1.0;
    if (bk_token_f1("the cat sat", "cat sat down", &f1) != BK_STATUS_OK) return 11;
    if (bk_exact_match("The  Cat!", "the cat", &em) != BK_STATUS_OK) return 12;
    if (bk_token_f1(NULL, "x", &f1) != BK_STATUS_NULL_POINTER || bk_last_error() == NULL) return 13;

    BkIndex *ix = NULL;
    BkStatus s = bk_index_build(argv[1], argv[2], argv[3], &ix);
    if (s != BK_STATUS_OK) {
        fprintf(stderr, "build: %s\n", bk_last_error());
        return 14;
    }
    char *answer = NULL;
    if (bk_query(ix, "How many figures are there from page 3 to page 10?", &answer) != BK_STATUS_OK) return 15;
    printf("f1=%.4f em=%.1f nodes=%zu entities=%zu\n%s\n", f1, em, bk_index_node_count(ix),
           bk_index_entity_count(ix), answer);
    bk_string_free(answer);
    bk_index_free(ix);
    return 0;
}
