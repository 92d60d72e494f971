/* C interface to the mmpc planner, simulator, and privacy auditor.
 * Kept in sync with src/lib.rs by hand; the crate's tests compare the two.
 *
 * Conventions:
 *   - every fallible call returns an MmpcStatus; 0 means success
 *   - on any non-zero status, mmpc_last_error() describes the failure
 *   - handles are opaque and must be released with their _free function
 */

#ifndef MMPC_H
#define MMPC_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum MmpcStatus {
  MMPC_OK = 0,
  MMPC_NULL_ARG = 1,
  MMPC_BAD_PARAMS = 2,
  MMPC_VERIFY_FAILED = 3,
  MMPC_INTERNAL = 4,
} MmpcStatus;

typedef enum MmpcRateKind {
  /* Best baseline built from single-message schemes. */
  MMPC_RATE_R1 = 0,
  /* The multi-message scheme's rate P*L/D. */
  MMPC_RATE_R2 = 1,
  /* Capacity upper bound. */
  MMPC_RATE_UPPER = 2,
  /* Upper bound over the better of R1 and R2. */
  MMPC_RATE_GAP = 3,
} MmpcRateKind;

/* Measurements of one simulated run. */
typedef struct MmpcRunStats {
  /* Symbols per message. */
  uint64_t l;
  /* Symbols actually downloaded. */
  uint64_t download;
  /* Download the plan promises; equals download on success. */
  uint64_t expected;
  uint64_t rate_num;
  uint64_t rate_den;
} MmpcRunStats;

/* Opaque: closed-form plan measurements plus the analytic rates. */
typedef struct MmpcSummary MmpcSummary;

/* Copy the most recent error message into buf (NUL-terminated, truncated
 * to cap bytes) and return the full message length. buf may be NULL to
 * query the length alone. */
size_t mmpc_last_error(char *buf, size_t cap);

/* Static version string; do not free. */
const char *mmpc_version(void);

/* Closed-form measurements and rates for (M, K, P, N). On success *out
 * must be released with mmpc_summary_free. */
MmpcStatus mmpc_summary_new(uint32_t m, uint32_t k, uint32_t p, uint32_t n,
                            MmpcSummary **out);

void mmpc_summary_free(MmpcSummary *handle);

/* Symbols per message; 0 on a NULL handle. */
uint64_t mmpc_summary_l(const MmpcSummary *handle);

/* Total downloaded symbols; 0 on a NULL handle. */
uint64_t mmpc_summary_d(const MmpcSummary *handle);

/* Number of rounds M-P+1; 0 on a NULL handle. */
uint32_t mmpc_summary_rounds(const MmpcSummary *handle);

/* Stages per server in round i (1-based); 0 out of range. */
uint64_t mmpc_summary_alpha(const MmpcSummary *handle, uint32_t i);

/* Coded downloads per stage in round i (1-based); 0 out of range. */
uint64_t mmpc_summary_coded_per_stage(const MmpcSummary *handle, uint32_t i);

/* Smallest field size the widest stage tolerates; 0 on a NULL handle. */
uint64_t mmpc_summary_min_field(const MmpcSummary *handle);

/* One of the exact rates as a reduced fraction. */
MmpcStatus mmpc_rate(const MmpcSummary *handle, MmpcRateKind kind,
                     uint64_t *num, uint64_t *den);

/* Run the full protocol once. Dependent rows are drawn from the seed;
 * q may be 0 to pick the smallest usable prime; demand may be NULL for
 * messages 0..P-1 (0-based labels otherwise). Decode or download mismatch
 * comes back as MMPC_VERIFY_FAILED. */
MmpcStatus mmpc_simulate(uint32_t m, uint32_t k, uint32_t p, uint32_t n,
                         uint64_t q, uint64_t seed, const uint32_t *demand,
                         size_t demand_len, MmpcRunStats *out);

/* Run the structural privacy checks on a freshly built plan and hand back
 * the report as a JSON array (free with mmpc_string_free). Any failing
 * check yields MMPC_VERIFY_FAILED with the report still written. */
MmpcStatus mmpc_structural_audit(uint32_t m, uint32_t k, uint32_t p,
                                 uint32_t n, uint64_t q, uint64_t seed,
                                 char **out_json);

/* Release a string returned by this library. */
void mmpc_string_free(char *s);

#ifdef __cplusplus
}
#endif

#endif /* MMPC_H */
