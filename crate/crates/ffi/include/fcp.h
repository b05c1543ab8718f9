#ifndef FCP_H
#define FCP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FcpStatus {
  FCP_STATUS_OK = 0,
  FCP_STATUS_NULL_POINTER = 1,
  FCP_STATUS_INVALID_UTF8 = 2,
  FCP_STATUS_DIMENSION = 3,
  FCP_STATUS_DEGENERATE = 4,
  FCP_STATUS_CONTRACT = 5,
  FCP_STATUS_CONFIG = 6,
  FCP_STATUS_FORMAT = 7,
  FCP_STATUS_SAMPLING = 8,
  FCP_STATUS_NON_FINITE = 9,
  FCP_STATUS_IO = 10,
  FCP_STATUS_PANIC = 11,
} FcpStatus;

// Opaque trained or initialised model.
typedef struct FcpModel FcpModel;

// Mean IoU figures of one evaluation; pseudo-mask fields are negative when
// the variant has no such mask.
typedef struct FcpEvalSummary {
  size_t episodes;
  double miou;
  double conventional_miou;
  double attention_miou;
  double constant_miou;
} FcpEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Most recent error message on this thread, or NULL. Valid until the next
// call into this library from the same thread.
const char *fcp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fcp_version(void);

// Freshly initialised model. `config` holds `key = value` lines and may be
// NULL for the defaults.
//
// # Safety
// `config` is NULL or a NUL-terminated string; `out` is writable.
enum FcpStatus fcp_model_init(const char *config, struct FcpModel **out);

// Train a model from a config (NULL for the defaults).
//
// # Safety
// As [`fcp_model_init`].
enum FcpStatus fcp_model_train(const char *config, struct FcpModel **out);

// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum FcpStatus fcp_model_load(const char *path, struct FcpModel **out);

// # Safety
// `model` comes from this library; `path` is a NUL-terminated string.
enum FcpStatus fcp_model_save(const struct FcpModel *model, const char *path);

// Release a model. NULL is ignored.
//
// # Safety
// `model` comes from this library and is not used afterwards.
void fcp_model_free(struct FcpModel *model);

// # Safety
// `model` comes from this library; `out` is writable.
enum FcpStatus fcp_model_parameter_count(const struct FcpModel *model, size_t *out);

// Feature channels and grid size the model expects.
//
// # Safety
// `model` comes from this library; the outputs are writable.
enum FcpStatus fcp_model_input_shape(const struct FcpModel *model,
                                     size_t *channels,
                                     size_t *height,
                                     size_t *width);

// Evaluate on `episodes` novel-class episodes with `k` support shots.
//
// # Safety
// `model` comes from this library; `out` is writable.
enum FcpStatus fcp_model_evaluate(const struct FcpModel *model,
                                  size_t episodes,
                                  size_t k,
                                  struct FcpEvalSummary *out);

// Predict a soft query mask from one labelled support image.
//
// Feature buffers are channel-major `C × H × W` with the model's input
// shape; `support_mask` and `out_mask` hold `H × W` values, the support
// mask with entries 0 or 1.
//
// # Safety
// Every pointer is valid for the stated number of `f64` values.
enum FcpStatus fcp_model_predict(const struct FcpModel *model,
                                 const double *support_sam,
                                 const double *support_backbone,
                                 const double *support_mask,
                                 const double *query_sam,
                                 const double *query_backbone,
                                 double *out_mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCP_H */
