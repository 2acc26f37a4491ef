#ifndef PSEUDOGLMM_H
#define PSEUDOGLMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_POINTER = 1,
  PG_STATUS_INVALID_ARGUMENT = 2,
  PG_STATUS_SCHEMA = 3,
  PG_STATUS_NUMERICAL = 4,
  PG_STATUS_BUFFER_TOO_SMALL = 5,
  PG_STATUS_PANIC = 6,
} PgStatus;

typedef enum PgVariableKind {
  PG_VARIABLE_KIND_NUMERIC = 0,
  PG_VARIABLE_KIND_NUMERIC_STANDARDIZED = 1,
  PG_VARIABLE_KIND_BINARY = 2,
} PgVariableKind;

typedef struct PgBundle PgBundle;

typedef struct PgDataset PgDataset;

typedef struct PgFit PgFit;

typedef struct PgPseudo PgPseudo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library from the same thread.
const char *pg_last_error_message(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must come from this library or be null.
void pg_string_free(char *s);

// Summarizes one cluster. `x` is `n × p` column-major; `kinds` holds one
// [`PgVariableKind`] per predictor, or is null when every predictor is
// numeric.
//
// # Safety
// Pointers must be valid for the stated lengths; `names` holds `p` strings.
enum PgStatus pg_summarize(const char *cluster_id,
                           const uint8_t *y,
                           const double *x,
                           size_t n,
                           size_t p,
                           const char *const *names,
                           const int32_t *kinds,
                           uint32_t max_order,
                           struct PgBundle **out);

// Parses and validates a bundle from its JSON form.
//
// # Safety
// `json` must be a NUL-terminated string.
enum PgStatus pg_bundle_from_json(const char *json, struct PgBundle **out);

// Serializes a bundle; release the string with [`pg_string_free`].
//
// # Safety
// `bundle` must be a live handle.
enum PgStatus pg_bundle_to_json(const struct PgBundle *bundle, char **out);

// # Safety
// `bundle` must be a live handle or null.
size_t pg_bundle_n(const struct PgBundle *bundle);

// # Safety
// `bundle` must be a live handle or null.
size_t pg_bundle_n_moments(const struct PgBundle *bundle);

// # Safety
// `bundle` must come from this library or be null.
void pg_bundle_free(struct PgBundle *bundle);

// Generates moment-matched pseudo-data for one bundle.
//
// # Safety
// `bundle` must be a live handle.
enum PgStatus pg_generate(const struct PgBundle *bundle, uint64_t seed, struct PgPseudo **out);

// # Safety
// `pseudo` must be a live handle or null.
size_t pg_pseudo_n(const struct PgPseudo *pseudo);

// # Safety
// `pseudo` must be a live handle or null.
size_t pg_pseudo_p(const struct PgPseudo *pseudo);

// Largest absolute gap between target and achieved moments, or NaN for a
// null handle.
//
// # Safety
// `pseudo` must be a live handle or null.
double pg_pseudo_max_abs_difference(const struct PgPseudo *pseudo);

// Number of warnings recorded during generation.
//
// # Safety
// `pseudo` must be a live handle or null.
size_t pg_pseudo_n_warnings(const struct PgPseudo *pseudo);

// Copies the `n` responses into `out`.
//
// # Safety
// `out` must hold `len` bytes.
enum PgStatus pg_pseudo_copy_y(const struct PgPseudo *pseudo, uint8_t *out, size_t len);

// Copies the `n × p` predictors, on the original scale, into `out`.
//
// # Safety
// `out` must hold `len` doubles.
enum PgStatus pg_pseudo_copy_x(const struct PgPseudo *pseudo, double *out, size_t len);

// # Safety
// `pseudo` must come from this library or be null.
void pg_pseudo_free(struct PgPseudo *pseudo);

// Creates an empty dataset with `p` named predictors.
//
// # Safety
// `names` holds `p` NUL-terminated strings.
enum PgStatus pg_dataset_new(const char *const *names, size_t p, struct PgDataset **out);

// Appends a cluster of `n` rows; `x` is `n × p` column-major.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum PgStatus pg_dataset_add_cluster(struct PgDataset *dataset,
                                     const char *cluster_id,
                                     const uint8_t *y,
                                     const double *x,
                                     size_t n);

// Appends generated pseudo-data, on the original scale, as a cluster.
//
// # Safety
// Both handles must be live.
enum PgStatus pg_dataset_add_pseudo(struct PgDataset *dataset, const struct PgPseudo *pseudo);

// # Safety
// `dataset` must come from this library or be null.
void pg_dataset_free(struct PgDataset *dataset);

// Fits the random-intercept logistic model with `n_agq` quadrature points.
//
// # Safety
// `dataset` must be a live handle.
enum PgStatus pg_fit_glmm(const struct PgDataset *dataset, size_t n_agq, struct PgFit **out);

// Number of fixed effects, intercept included.
//
// # Safety
// `fit` must be a live handle or null.
size_t pg_fit_n_coefficients(const struct PgFit *fit);

// Copies the fixed effects, intercept first.
//
// # Safety
// `out` must hold `len` doubles.
enum PgStatus pg_fit_coefficients(const struct PgFit *fit, double *out, size_t len);

// Copies the standard errors of the fixed effects.
//
// # Safety
// `out` must hold `len` doubles.
enum PgStatus pg_fit_std_errors(const struct PgFit *fit, double *out, size_t len);

// # Safety
// `fit` must be a live handle or null.
double pg_fit_sigma(const struct PgFit *fit);

// # Safety
// `fit` must be a live handle or null.
double pg_fit_loglik(const struct PgFit *fit);

// # Safety
// `fit` must be a live handle or null.
double pg_fit_aic(const struct PgFit *fit);

// # Safety
// `fit` must be a live handle or null.
bool pg_fit_converged(const struct PgFit *fit);

// # Safety
// `fit` must come from this library or be null.
void pg_fit_free(struct PgFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSEUDOGLMM_H */
