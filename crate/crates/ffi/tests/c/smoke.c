/* Drives the C interface end to end: usage is smoke CHECKPOINT TOKENIZER. */
#include <stdio.h>
#include <string.h>

#include "hiergen.h"

static int fail(const char *what) {
    const char *msg = hg_last_error_message();
    fprintf(stderr, "%s: %s\n", what, msg ? msg : "(no message)");
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke CHECKPOINT TOKENIZER\n");
        return 2;
    }
    if (hg_model_open(NULL, argv[2], NULL, NULL) != HG_STATUS_NULL_ARGUMENT) {
        return fail("null arguments accepted");
    }

    HgModel *model = NULL;
    if (hg_model_open(argv[1], argv[2], NULL, &model) != HG_STATUS_OK) {
        return fail("open");
    }
    size_t n = 0;
    if (hg_model_num_items(model, &n) != HG_STATUS_OK) {
        return fail("num_items");
    }

    HgInteraction history[4] = {
        {1, 0, 0, 100}, {2, 1, 0, 110}, {3, 0, 1, 90000}, {1, 2, 1, 90010},
    };
    uint32_t items[5];
    double scores[5];
    size_t len = 0;
    if (hg_recommend(model, history, 4, 2, 8, items, scores, 5, &len) != HG_STATUS_OK) {
        return fail("recommend");
    }
    if (hg_recommend(model, history, 4, 9, 8, items, scores, 5, &len) != HG_STATUS_CONFIG) {
        return fail("unknown behavior accepted");
    }

    double s[4] = {0.9, 0.1, 0.8, 0.3};
    uint8_t y[4] = {1, 0, 0, 1};
    double area = 0.0;
    if (hg_auroc(s, y, 4, &area) != HG_STATUS_OK) {
        return fail("auroc");
    }

    printf("version %s\nitems %zu\nauroc %.6f\nrecommend", hg_version(), n, area);
    for (size_t i = 0; i < len; i++) {
        printf(" %u", items[i]);
    }
    printf("\n");
    hg_model_free(model);
    return 0;
}
