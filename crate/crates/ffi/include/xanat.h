#ifndef XANAT_H
#define XANAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum XanatStatus {
  XANAT_STATUS_OK = 0,
  XANAT_STATUS_NULL_POINTER = 1,
  XANAT_STATUS_INVALID_ARGUMENT = 2,
  XANAT_STATUS_CONFIG = 3,
  XANAT_STATUS_SHAPE = 4,
  XANAT_STATUS_PARSE = 5,
  XANAT_STATUS_IO = 6,
  XANAT_STATUS_NUMERICAL = 7,
  XANAT_STATUS_DEGENERATE = 8,
  XANAT_STATUS_PANIC = 9,
} XanatStatus;

/**
 * Opaque cohort handle.
 */
typedef struct XanatCohort XanatCohort;

/**
 * Opaque model-parameter handle.
 */
typedef struct XanatParams XanatParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *xanat_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *xanat_last_error(void);

/**
 * Release a string returned by this library. Null is ignored.
 */
void xanat_string_free(char *s);

/**
 * Generate a cohort from a JSON `CohortConfig` (null or "" for defaults).
 */
enum XanatStatus xanat_cohort_generate(const char *config_json, struct XanatCohort **out);

enum XanatStatus xanat_cohort_read(const char *path, struct XanatCohort **out);

enum XanatStatus xanat_cohort_write(const struct XanatCohort *cohort, const char *path);

/**
 * Hex SHA-256 of the cohort's serialized body.
 */
enum XanatStatus xanat_cohort_checksum(const struct XanatCohort *cohort, char **out);

enum XanatStatus xanat_cohort_shape(const struct XanatCohort *cohort,
                                    size_t *patients,
                                    size_t *anatomies,
                                    size_t *dim);

void xanat_cohort_free(struct XanatCohort *cohort);

/**
 * Seeded initialization matching the trainer's.
 */
enum XanatStatus xanat_params_init(const struct XanatCohort *cohort,
                                   uint64_t seed,
                                   struct XanatParams **out);

enum XanatStatus xanat_params_load(const char *path, struct XanatParams **out);

enum XanatStatus xanat_params_save(const struct XanatParams *params, const char *path);

/**
 * Current temperature `exp(log_tau)`.
 */
enum XanatStatus xanat_params_temperature(const struct XanatParams *params, double *out);

void xanat_params_free(struct XanatParams *params);

/**
 * Train from the seeded initialization. `config_json` is a JSON
 * `TrainConfig` (null or "" for defaults). `out_trace` may be null;
 * otherwise it receives the step trace as JSON Lines.
 */
enum XanatStatus xanat_train(const struct XanatCohort *cohort,
                             const char *config_json,
                             struct XanatParams **out_params,
                             char **out_trace);

/**
 * Zero-shot evaluation over every template; writes the metrics report as
 * JSON. `pooling` is "mean" or "positional" (null for the default).
 */
enum XanatStatus xanat_evaluate(const struct XanatParams *params,
                                const struct XanatCohort *cohort,
                                const char *pooling,
                                char **out_json);

/**
 * Collapse indices and histogram summaries for both modalities, as JSON.
 */
enum XanatStatus xanat_diagnose(const struct XanatParams *params,
                                const struct XanatCohort *cohort,
                                const char *pooling,
                                size_t bins,
                                char **out_json);

enum XanatStatus xanat_cosine(const double *a, const double *b, size_t n, double *out);

/**
 * ROC AUC of `scores` against 0/1 `labels`.
 */
enum XanatStatus xanat_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XANAT_H */
