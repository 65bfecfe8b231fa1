#include <math.h>
#include <stdio.h>
#include "privalign.h"

#define CHECK(call)                                                  \
    do {                                                             \
        PaStatus s_ = (call);                                        \
        if (s_ != PA_STATUS_OK) {                                    \
            char msg[256];                                           \
            pa_last_error_message(msg, sizeof msg);                  \
            fprintf(stderr, "%s failed (%d): %s\n", #call, s_, msg); \
            return 1;                                                \
        }                                                            \
    } while (0)

int main(void) {
    double c = 0.0;
    CHECK(pa_c_eps(log(3.0), &c));
    if (fabs(c - 2.0) > 1e-12) return 2;

    PaEnvironment *env = NULL;
    PaPolicyClass *cls = NULL;
    PaDataset *data = NULL;
    CHECK(pa_environment_generate(4, 6, 2.0, 7, &env));
    CHECK(pa_policy_class_build(env, 1.0, 8, PA_REGULARIZER_CHI_MIX, 7, &cls));
    CHECK(pa_dataset_generate(env, 500, 1.0, 0.0, PA_ORDERING_PRIVACY_ONLY, PA_ADVERSARY_ALWAYS_FLIP, 7, &data));
    size_t chosen = 99;
    CHECK(pa_solve_offline(env, cls, data, PA_OFFLINE_SOLVER_PRIV_CHIPO, 1.0, &chosen));
    if (chosen >= 8) return 3;

    if (pa_c_eps(-1.0, &c) != PA_STATUS_DOMAIN_ERROR) return 4;
    if (pa_last_error_message(NULL, 0) == 0) return 5;

    pa_dataset_free(data);
    pa_policy_class_free(cls);
    pa_environment_free(env);
    printf("ok %zu\n", chosen);
    return 0;
}
