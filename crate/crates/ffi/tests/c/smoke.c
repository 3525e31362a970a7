/* Drives a scripted run through the C API: argv[1] task dir, argv[2] config, argv[3] output dir. */
#include <stdio.h>
#include <string.h>

#include "cascade_agent.h"

static int check(enum CaStatus status, const char *what) {
    if (status != CA_STATUS_OK) {
        const char *msg = ca_last_error();
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)status, msg ? msg : "(no message)");
        return 1;
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc != 4) {
        fprintf(stderr, "usage: smoke TASK CONFIG OUT\n");
        return 2;
    }
    CaTask *task = NULL;
    CaConfig *config = NULL;
    char *json = NULL;

    if (check(ca_task_load(argv[1], &task), "ca_task_load")) return 1;
    if (check(ca_config_load(argv[2], &config), "ca_config_load")) return 1;
    if (check(ca_run_task(task, config, argv[3], 1, &json), "ca_run_task")) return 1;
    printf("%s\n", json);
    ca_string_free(json);

    double improvement = 0.0;
    bool success = true;
    if (check(ca_evaluate_success(0.55, 0.50, true, true, &improvement, &success), "ca_evaluate_success")) return 1;
    if (success) {
        fprintf(stderr, "0.55 over 0.50 must not count as success\n");
        return 1;
    }

    char *cost = NULL;
    if (check(ca_cost_of(10000, 1000, "10", "30", &cost), "ca_cost_of")) return 1;
    if (strcmp(cost, "0.130000") != 0) {
        fprintf(stderr, "cost %s\n", cost);
        return 1;
    }
    ca_string_free(cost);

    if (ca_task_load("/nonexistent", &task) != CA_STATUS_TASK_ERROR || ca_last_error() == NULL) {
        fprintf(stderr, "missing task not reported\n");
        return 1;
    }
    ca_config_free(config);
    ca_task_free(task);
    return 0;
}
