#ifndef SCENESYNTH_H
#define SCENESYNTH_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_ARGUMENT = 2,
  SS_STATUS_BUFFER_TOO_SMALL = 3,
  SS_STATUS_IO = 4,
  SS_STATUS_PARSE = 5,
  SS_STATUS_INVALID_DATA = 6,
  SS_STATUS_PANIC = 7,
} SsStatus;

// A parsed, integrity-checked dataset.
typedef struct SsDataset SsDataset;

// A list of mosaic plans.
typedef struct SsPlanSet SsPlanSet;

typedef struct SsBox {
  double x;
  double y;
  double w;
  double h;
} SsBox;

typedef struct SsScoredBox {
  struct SsBox bbox;
  double score;
  uint64_t class_id;
} SsScoredBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none. The pointer
// stays valid until the next failing call on the same thread.
const char *ss_last_error(void);

// Library version as a static NUL-terminated string.
const char *ss_version(void);

// # Safety
// `s` must come from this library and not have been freed.
void ss_string_free(char *s);

// Intersection over union of two boxes.
//
// # Safety
// `a`, `b` and `out` must be valid pointers.
enum SsStatus ss_iou(const struct SsBox *a, const struct SsBox *b, double *out);

// Greedy NMS. Writes kept indices, highest score first, into `out_indices`
// (capacity `n`) and their number into `out_len`. With `per_class` set,
// boxes only suppress boxes of their own class.
//
// # Safety
// `boxes` must point to `n` readable elements and `out_indices` to `n`
// writable ones; `out_len` must be valid. `boxes` may be null when `n` is 0.
enum SsStatus ss_nms(const struct SsScoredBox *boxes,
                     uintptr_t n,
                     double iou_threshold,
                     bool per_class,
                     uintptr_t *out_indices,
                     uintptr_t *out_len);

// The six fixed-location boxes of a `width` x `height` image.
//
// # Safety
// `out` must point to 6 writable boxes.
enum SsStatus ss_fixed_boxes(uint32_t width, uint32_t height, struct SsBox *out);

// Calibrated detection threshold of a class with `count` gold images when
// the most frequent class has `max_count`.
//
// # Safety
// `out` must be a valid pointer.
enum SsStatus ss_calibrated_threshold(uint64_t count,
                                      uint64_t max_count,
                                      double gamma,
                                      double base,
                                      double *out);

// Repeat factor of a class present in a fraction `freq` of images.
//
// # Safety
// `out` must be a valid pointer.
enum SsStatus ss_repeat_factor(double freq, double threshold, double *out);

// Parse a COCO/LVIS dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SsStatus ss_dataset_open(const char *path, struct SsDataset **out);

// # Safety
// `dataset` must be null or a handle from [`ss_dataset_open`] not yet freed.
void ss_dataset_free(struct SsDataset *dataset);

// Number of images, annotations and categories.
//
// # Safety
// `dataset` must be a live handle; each output pointer may be null to skip it.
enum SsStatus ss_dataset_counts(const struct SsDataset *dataset,
                                uintptr_t *images,
                                uintptr_t *annotations,
                                uintptr_t *categories);

// Run dataset validation; report totals of fatal and warning findings.
//
// # Safety
// `dataset` must be a live handle; `fatal` and `warnings` valid pointers.
enum SsStatus ss_dataset_validate(const struct SsDataset *dataset,
                                  uintptr_t *fatal,
                                  uintptr_t *warnings);

// Draw `count` mosaic plans from a pool of `(image_id, class_id)` pairs.
// `grid_side` is 2 or 3.
//
// # Safety
// `image_ids` and `class_ids` must point to `n` readable values and `out`
// must be a valid pointer.
enum SsStatus ss_mosaic_plan(const uint64_t *image_ids,
                             const uint64_t *class_ids,
                             uintptr_t n,
                             uint32_t grid_side,
                             bool same_class,
                             uintptr_t count,
                             uint64_t seed,
                             uint32_t cell_w,
                             uint32_t cell_h,
                             struct SsPlanSet **out);

// # Safety
// `plans` must be null or a handle from [`ss_mosaic_plan`] not yet freed.
void ss_plan_set_free(struct SsPlanSet *plans);

// # Safety
// `plans` must be a live handle and `out` a valid pointer.
enum SsStatus ss_plan_set_len(const struct SsPlanSet *plans, uintptr_t *out);

// Copy the row-major cell image ids of plan `index` into `cells`.
// `written` receives the cell count; with a short buffer the call fails with
// [`SsStatus::BufferTooSmall`] and `written` holds the size needed.
//
// # Safety
// `plans` must be a live handle, `cells` must hold `capacity` values and
// `written` must be valid.
enum SsStatus ss_plan_set_cells(const struct SsPlanSet *plans,
                                uintptr_t index,
                                uint64_t *cells,
                                uintptr_t capacity,
                                uintptr_t *written);

// The plan list as a JSON array, the same document `mosaic` writes to
// `plans.json`. Free the result with [`ss_string_free`].
//
// # Safety
// `plans` must be a live handle and `out` a valid pointer.
enum SsStatus ss_plan_set_to_json(const struct SsPlanSet *plans, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCENESYNTH_H */
