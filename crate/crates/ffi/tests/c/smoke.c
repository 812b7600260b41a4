#include <stdio.h>
#include <string.h>
#include "moelab.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    MoelabStatus s_ = (call);                                              \
    if (s_ != MOELAB_STATUS_OK) {                                          \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,              \
              moelab_last_error());                                        \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(void) {
  MoelabConfig *cfg = NULL;
  MoelabModel *model = NULL;
  uint64_t total = 0, activated = 0, numel = 0;
  double ppl = 0.0;

  CHECK(moelab_config_preset("small-cartesian", &cfg));
  CHECK(moelab_config_param_counts(cfg, &total, &activated));
  CHECK(moelab_model_new(cfg, &model));
  CHECK(moelab_model_numel(model, &numel));
  CHECK(moelab_model_perplexity(model, "binding from C", 8, &ppl));
  if (numel != total || activated >= total || !(ppl > 1.0)) {
    fprintf(stderr, "unexpected values\n");
    return 1;
  }
  if (moelab_config_preset("bogus", &cfg) != MOELAB_STATUS_USAGE ||
      strstr(moelab_last_error(), "bogus") == NULL) {
    fprintf(stderr, "error path not reported\n");
    return 1;
  }
  printf("total=%llu activated=%llu ppl=%.3f\n", (unsigned long long)total,
         (unsigned long long)activated, ppl);
  moelab_model_free(model);
  moelab_config_free(cfg);
  return 0;
}
