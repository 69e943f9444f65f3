#ifndef SUBBAND_SHAKE_H
#define SUBBAND_SHAKE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SBS_OK 0

#define SBS_ERR_NULL 1

#define SBS_ERR_SHAPE 2

#define SBS_ERR_PARAM 3

#define SBS_ERR_DEGENERATE 4

#define SBS_ERR_IO 5

#define SBS_ERR_FORMAT 6

#define SBS_ERR_OTHER 7

#define SBS_ERR_PANIC 8

#define SBS_MODEL_SHALLOW 0

#define SBS_MODEL_DEEP 1

#define SBS_SHAKE_NONE 0

#define SBS_SHAKE_FULL 1

#define SBS_SHAKE_UPPER 2

#define SBS_SHAKE_LOWER 3

#define SBS_SHAKE_BOTH 4

/*
 Values per spliced frame (16 context frames of 257 bins).
 */
#define SBS_FRAME_VALUES (16 * 257)

/*
 A built network.
 */
typedef struct SbsModel SbsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Length of the last error message on this thread, excluding the NUL.
 */
size_t sbs_last_error_length(void);

/*
 Copies the last error message on this thread into `buf` as a
 NUL-terminated string, truncating to `capacity - 1` bytes.

 # Safety
 `buf` must point to `capacity` writable bytes.
 */
int32_t sbs_last_error_message(char *buf, size_t capacity);

/*
 Builds a model with deterministic initialization from `seed`.

 # Safety
 `out` must be a valid pointer to a handle slot.
 */
int32_t sbs_model_new(uint32_t kind, uint32_t mode, uint64_t seed, struct SbsModel **out);

/*
 Releases a model; null is ignored.

 # Safety
 `m` must come from `sbs_model_new` and not be used afterwards.
 */
void sbs_model_free(struct SbsModel *m);

/*
 Number of trainable scalars.

 # Safety
 `m` must be a live handle and `out` writable.
 */
int32_t sbs_model_parameter_count(struct SbsModel *m, size_t *out);

/*
 Eval-phase logits for a batch of utterances.

 `frames` holds `sum(frame_counts)` spliced frames of `SBS_FRAME_VALUES`
 values each, utterances back to back. `logits` receives
 `utterances * 4` values, row-major.

 # Safety
 Pointers must be valid for the stated lengths.
 */
int32_t sbs_model_logits(struct SbsModel *m,
                         const double *frames,
                         size_t frames_len,
                         const size_t *frame_counts,
                         size_t utterances,
                         double *logits,
                         size_t logits_len);

/*
 Writes the model's parameters and running statistics.

 # Safety
 `m` must be a live handle and `path` a NUL-terminated string.
 */
int32_t sbs_model_save(struct SbsModel *m, const char *path);

/*
 Loads a checkpoint written for a model of the same architecture.

 # Safety
 `m` must be a live handle and `path` a NUL-terminated string.
 */
int32_t sbs_model_load(struct SbsModel *m, const char *path);

/*
 Number of spliced frames `sbs_extract_features` produces for
 `samples` samples at `sample_rate`.

 # Safety
 `out` must be writable.
 */
int32_t sbs_feature_frame_count(size_t samples, uint32_t sample_rate, size_t *out);

/*
 Spectrogram, CMVN, splicing and downsampling of a mono waveform with
 samples in `[-1, 1]`. `out` receives `frames * SBS_FRAME_VALUES` values;
 `frames_out` the frame count.

 # Safety
 Pointers must be valid for the stated lengths.
 */
int32_t sbs_extract_features(const double *samples,
                             size_t len,
                             uint32_t sample_rate,
                             double *out,
                             size_t out_len,
                             size_t *frames_out);

/*
 Draws `n` simplex coefficients from a stream seeded with `seed`.

 # Safety
 `out` must hold `n` values.
 */
int32_t sbs_sample_simplex(size_t n, uint64_t seed, double *out);

/*
 One-sided paired t-test of `mean(a - b) > 0`.

 # Safety
 `a` and `b` must hold `n` values; `t`, `df`, `p` must be writable.
 */
int32_t sbs_paired_t_test(const double *a,
                          const double *b,
                          size_t n,
                          double *t,
                          size_t *df,
                          double *p);

/*
 Mean per-class recall in percent.

 # Safety
 `preds` and `truth` must hold `n` values; `out` must be writable.
 */
int32_t sbs_unweighted_accuracy(const uint32_t *preds,
                                const uint32_t *truth,
                                size_t n,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUBBAND_SHAKE_H */
