#ifndef MOELAB_H
#define MOELAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Values 1 to 4 match the CLI exit codes.
typedef enum MoelabStatus {
  MOELAB_STATUS_OK = 0,
  MOELAB_STATUS_USAGE = 1,
  MOELAB_STATUS_CONFIG = 2,
  MOELAB_STATUS_NUMERIC = 3,
  MOELAB_STATUS_IO = 4,
  MOELAB_STATUS_NULL_POINTER = 5,
  MOELAB_STATUS_INVALID_UTF8 = 6,
  MOELAB_STATUS_PANIC = 7,
} MoelabStatus;

// Opaque model configuration.
typedef struct MoelabConfig MoelabConfig;

// Opaque f32 model.
typedef struct MoelabModel MoelabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if it succeeded.
// The pointer stays valid until the next call on the same thread.
const char *moelab_last_error(void);

// Library version as a static NUL-terminated string.
const char *moelab_version(void);

// Looks up a named preset and stores a new handle in `*out`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum MoelabStatus moelab_config_preset(const char *name, struct MoelabConfig **out);

// Parses `key = value` model configuration text.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum MoelabStatus moelab_config_parse(const char *text, struct MoelabConfig **out);

// Overrides the initialization seed.
//
// # Safety
// `config` must be a live handle.
enum MoelabStatus moelab_config_set_seed(struct MoelabConfig *config, uint64_t seed);

// Total and activated parameter counts of a configuration.
//
// # Safety
// `config` must be a live handle; the outputs must be writable.
enum MoelabStatus moelab_config_param_counts(const struct MoelabConfig *config,
                                             uint64_t *total,
                                             uint64_t *activated);

// # Safety
// `config` must be null or a handle not yet freed.
void moelab_config_free(struct MoelabConfig *config);

// Initializes a model from a configuration.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum MoelabStatus moelab_model_new(const struct MoelabConfig *config, struct MoelabModel **out);

// Loads the model weights of a checkpoint; optimizer state is discarded.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MoelabStatus moelab_model_load(const char *path, struct MoelabModel **out);

// Writes the model weights as a checkpoint without optimizer state.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum MoelabStatus moelab_model_save(const struct MoelabModel *model, const char *path);

// Number of scalar parameters held by the model.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum MoelabStatus moelab_model_numel(const struct MoelabModel *model, uint64_t *out);

// Byte-level perplexity of `text` (an end-of-text token is appended),
// scored in windows of `window` tokens.
//
// # Safety
// `model` must be a live handle; `text` a NUL-terminated string; `out`
// writable.
enum MoelabStatus moelab_model_perplexity(const struct MoelabModel *model,
                                          const char *text,
                                          uintptr_t window,
                                          double *out);

// Perplexity with and without each token's top-1 expert.
//
// # Safety
// `model` must be a live handle; `text` a NUL-terminated string; outputs
// writable.
enum MoelabStatus moelab_model_disable_top1(const struct MoelabModel *model,
                                            const char *text,
                                            uintptr_t window,
                                            uint64_t seed,
                                            double *ppl_normal,
                                            double *ppl_masked);

// # Safety
// `model` must be null or a handle not yet freed.
void moelab_model_free(struct MoelabModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOELAB_H */
