#ifndef METALABEL_H
#define METALABEL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MlStatus {
  ML_STATUS_OK = 0,
  ML_STATUS_NULL_POINTER = 1,
  ML_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad config, argument or file contents.
   */
  ML_STATUS_VALIDATION = 3,
  /**
   * Failure while computing (non-finite loss, I/O, ...).
   */
  ML_STATUS_RUNTIME = 4,
  ML_STATUS_PANIC = 5,
} MlStatus;

typedef enum MlSplit {
  ML_SPLIT_TRAIN = 0,
  ML_SPLIT_META = 1,
  ML_SPLIT_TEST = 2,
} MlSplit;

/**
 * Opaque training configuration.
 */
typedef struct MlConfig MlConfig;

/**
 * Opaque dataset.
 */
typedef struct MlDataset MlDataset;

/**
 * Opaque finished run: log, selected model and summary.
 */
typedef struct MlRun MlRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Free with
 * `ml_string_free`.
 */
char *ml_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, freed once.
 */
void ml_string_free(char *s);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MlStatus ml_config_default(struct MlConfig **out);

/**
 * Parses and validates a JSON configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MlStatus ml_config_from_json(const char *json, struct MlConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum MlStatus ml_config_set_seed(struct MlConfig *cfg, uint64_t seed);

/**
 * Canonical JSON of the configuration. Free with `ml_string_free`.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum MlStatus ml_config_to_json(const struct MlConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void ml_config_free(struct MlConfig *cfg);

/**
 * Builds the dataset described by the configuration.
 *
 * # Safety
 * `cfg` must be a live handle and `out` a valid pointer.
 */
enum MlStatus ml_dataset_prepare(const struct MlConfig *cfg, struct MlDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MlStatus ml_dataset_load(const char *path, struct MlDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum MlStatus ml_dataset_save(const struct MlDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be a live handle and `rows`, `dims`, `classes` valid pointers.
 */
enum MlStatus ml_dataset_shape(const struct MlDataset *ds,
                               uintptr_t *rows,
                               uintptr_t *dims,
                               uintptr_t *classes);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void ml_dataset_free(struct MlDataset *ds);

/**
 * Trains one run to completion. With `baseline`, trains plain
 * cross-entropy instead of the label-learning method.
 *
 * # Safety
 * `cfg` and `ds` must be live handles and `out` a valid pointer.
 */
enum MlStatus ml_run_train(const struct MlConfig *cfg,
                           const struct MlDataset *ds,
                           bool baseline,
                           struct MlRun **out);

/**
 * Accuracy of the run's selected model on a split of `ds`.
 *
 * # Safety
 * `run` and `ds` must be live handles and `out` a valid pointer.
 */
enum MlStatus ml_run_accuracy(const struct MlRun *run,
                              const struct MlDataset *ds,
                              enum MlSplit split,
                              double *out);

/**
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum MlStatus ml_run_selected_epoch(const struct MlRun *run, uintptr_t *out);

/**
 * Run summary as JSON. Free with `ml_string_free`.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum MlStatus ml_run_summary_json(const struct MlRun *run, char **out);

/**
 * # Safety
 * `run` must be NULL or a handle not yet freed.
 */
void ml_run_free(struct MlRun *run);

/**
 * Runs the gradient-check suite; `passed` is set to whether every check
 * met its tolerance.
 *
 * # Safety
 * `passed` must be a valid pointer.
 */
enum MlStatus ml_gradcheck(uintptr_t trials, uint64_t seed, bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METALABEL_H */
