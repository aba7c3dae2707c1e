#ifndef HERITKIT_H
#define HERITKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HkStatus {
  HK_STATUS_OK = 0,
  HK_STATUS_NULL_POINTER = 1,
  HK_STATUS_INVALID_INPUT = 2,
  HK_STATUS_DIMENSION = 3,
  HK_STATUS_MISSING_VALUES = 4,
  HK_STATUS_MISSING_ACCESSION = 5,
  HK_STATUS_SINGULAR = 6,
  HK_STATUS_NOT_ESTIMABLE = 7,
  HK_STATUS_NO_CONVERGENCE = 8,
  HK_STATUS_DEGENERATE = 9,
  HK_STATUS_IO = 10,
  HK_STATUS_PARSE = 11,
  HK_STATUS_PANIC = 12,
} HkStatus;

typedef enum HkMode {
  HK_MODE_INBRED = 0,
  HK_MODE_OUTBRED = 1,
} HkMode;

typedef enum HkMethod {
  HK_METHOD_REPLICATES = 0,
  HK_METHOD_MEANS = 1,
  HK_METHOD_ANOVA = 2,
} HkMethod;

typedef enum HkStage {
  HK_STAGE_ONE = 0,
  HK_STAGE_TWO = 1,
} HkStage;

/**
 * Opaque kinship matrix with accession ids.
 */
typedef struct HkKinship HkKinship;

/**
 * Opaque phenotype records with their covariate declarations.
 */
typedef struct HkPhenotypes HkPhenotypes;

/**
 * Point estimate and intervals; `ci_log_*` are NaN when not available.
 */
typedef struct HkEstimate {
  double h2;
  double sigma_a2;
  double sigma_e2;
  double ci_std_lo;
  double ci_std_hi;
  double ci_log_lo;
  double ci_log_hi;
  bool monotone;
} HkEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next heritkit call on the same thread.
 */
const char *hk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hk_version(void);

/**
 * Kinship from `n` x `m` row-major allele counts; accessions are named by index.
 *
 * # Safety
 * `calls` must hold `n * m` values and `out` must be writable.
 */
enum HkStatus hk_kinship_from_calls(const double *calls,
                                    size_t n,
                                    size_t m,
                                    enum HkMode mode,
                                    double maf_min,
                                    bool scale,
                                    struct HkKinship **out);

/**
 * Kinship from an `n` x `n` row-major matrix; accessions are named by index.
 *
 * # Safety
 * `values` must hold `n * n` values and `out` must be writable.
 */
enum HkStatus hk_kinship_new(const double *values, size_t n, struct HkKinship **out);

/**
 * Reads a kinship CSV.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HkStatus hk_kinship_read(const char *path, struct HkKinship **out);

/**
 * # Safety
 * `k` must be a valid handle or NULL.
 */
size_t hk_kinship_size(const struct HkKinship *k);

/**
 * Copies the matrix row-major into `buf` of length `len` (at least n * n).
 *
 * # Safety
 * `k` must be a valid handle and `buf` hold `len` values.
 */
enum HkStatus hk_kinship_values(const struct HkKinship *k, double *buf, size_t len);

/**
 * # Safety
 * `k` must be a handle from this library, not yet freed, or NULL.
 */
void hk_kinship_free(struct HkKinship *k);

/**
 * Records without covariates; `genotype[i]` indexes the accessions of `k`.
 *
 * # Safety
 * `genotype` and `values` must hold `len` entries; `k` must be valid.
 */
enum HkStatus hk_phenotypes_new(const struct HkKinship *k,
                                const size_t *genotype,
                                const double *values,
                                size_t len,
                                struct HkPhenotypes **out);

/**
 * Reads a phenotype CSV; `factors` is a comma-separated list or NULL.
 *
 * # Safety
 * `path` (and `factors` when not NULL) must be NUL-terminated; `out` writable.
 */
enum HkStatus hk_phenotypes_read(const char *path, const char *factors, struct HkPhenotypes **out);

/**
 * # Safety
 * `p` must be a valid handle or NULL.
 */
size_t hk_phenotypes_len(const struct HkPhenotypes *p);

/**
 * # Safety
 * `p` must be a handle from this library, not yet freed, or NULL.
 */
void hk_phenotypes_free(struct HkPhenotypes *p);

/**
 * Heritability by one method; `k` may be NULL for `HkMethod::Anova`.
 *
 * # Safety
 * `p` must be valid, `k` valid or NULL, `out` writable.
 */
enum HkStatus hk_estimate(const struct HkPhenotypes *p,
                          const struct HkKinship *k,
                          enum HkMethod method,
                          double alpha,
                          struct HkEstimate *out);

/**
 * G-BLUP of every accession of `k`, written to `g_out` in kinship order:
 * phenotyped accessions get their training BLUP, the rest are predicted.
 *
 * # Safety
 * `p` and `k` must be valid; `g_out` must hold `len >= hk_kinship_size(k)` values.
 */
enum HkStatus hk_gblup(const struct HkPhenotypes *p,
                       const struct HkKinship *k,
                       enum HkStage stage,
                       double *g_out,
                       size_t len);

/**
 * GLS scan of `m` markers. `calls` is row-major with one row per accession of
 * `k`, in kinship order. Untestable markers get NaN in every output.
 *
 * # Safety
 * `calls` must hold `hk_kinship_size(k) * m` values; `effect_out` and
 * `p_out` must hold `m` values; `p` and `k` must be valid.
 */
enum HkStatus hk_gwas(const struct HkPhenotypes *p,
                      const struct HkKinship *k,
                      const double *calls,
                      size_t m,
                      enum HkStage stage,
                      double maf_min,
                      double *effect_out,
                      double *p_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HERITKIT_H */
