#ifndef FRAMESEL_H
#define FRAMESEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every exported function.
typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_SHAPE = 2,
  FS_STATUS_DOMAIN = 3,
  FS_STATUS_CONTRACT = 4,
  FS_STATUS_VALIDATION = 5,
  FS_STATUS_FORMAT = 6,
  FS_STATUS_IO = 7,
  FS_STATUS_INTERNAL = 8,
} FsStatus;

// Opaque scorer handle.
typedef struct FsModel FsModel;

// Scorer dimensions as seen from C.
typedef struct FsDims {
  size_t d_v;
  size_t d_t;
  size_t d_h;
  size_t d_p;
} FsDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call on the same thread.
const char *fs_last_error_message(void);

// Writes `softmax(scores / tau)` into `out` (length `m`).
//
// # Safety
// `scores` and `out` must point to `m` valid doubles.
enum FsStatus fs_selection_probabilities(const double *scores, size_t m, double tau, double *out);

// Ascending indices of the `k` highest scores into `out_indices` (length `k`).
//
// # Safety
// `scores` must hold `m` doubles and `out_indices` room for `k` entries.
enum FsStatus fs_hard_topk(const double *scores, size_t m, size_t k, size_t *out_indices);

// `k` distinct indices sampled by Gumbel-top-k at temperature `tau`,
// seeded with `seed`, written in ascending order.
//
// # Safety
// `scores` must hold `m` doubles and `out_indices` room for `k` entries.
enum FsStatus fs_wrs_indices(const double *scores,
                             size_t m,
                             size_t k,
                             double tau,
                             uint64_t seed,
                             size_t *out_indices);

// Freshly initialised scorer with every mechanism enabled.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum FsStatus fs_model_new(struct FsDims dims, uint64_t seed, struct FsModel **out);

// Loads a parameter snapshot directory (or its `index.json`).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum FsStatus fs_model_load(const char *path, struct FsModel **out);

// Writes the model's parameters as a snapshot directory.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum FsStatus fs_model_save(const struct FsModel *model, const char *path);

// # Safety
// `model` must come from this library and `out` must be valid.
enum FsStatus fs_model_dims(const struct FsModel *model, struct FsDims *out);

// Switches mechanisms off for later calls; `ablate` is a comma list of
// `qfs`, `qfm`, `ifd` (empty enables all).
//
// # Safety
// `model` must come from this library; `ablate` must be NUL-terminated.
enum FsStatus fs_model_set_ablation(struct FsModel *model, const char *ablate);

// Scores `m` frames (row-major `m x d_v`) against a question (`d_t`) and
// writes the `k` selected indices. `out_scores` (length `m`) receives the
// aggregate scores and may be NULL.
//
// # Safety
// Every non-null pointer must reference buffers of the stated lengths.
enum FsStatus fs_model_select(const struct FsModel *model,
                              const double *frames,
                              size_t m,
                              const double *question,
                              size_t k,
                              size_t *out_indices,
                              double *out_scores);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void fs_model_free(struct FsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRAMESEL_H */
