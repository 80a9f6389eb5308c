/* C interface for the markovtest library. */

#ifndef MARKOVTEST_H
#define MARKOVTEST_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API function.
 */
typedef enum MktStatus {
  /**
   * Success.
   */
  MKT_OK = 0,
  /**
   * A pointer argument was null.
   */
  MKT_NULL_POINTER = 1,
  /**
   * Invalid input or configuration.
   */
  MKT_INVALID_ARGUMENT = 2,
  /**
   * The computation failed at runtime.
   */
  MKT_RUNTIME_ERROR = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  MKT_INVALID_UTF8 = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  MKT_PANIC = 5,
} MktStatus;

/**
 * Opaque time series handle.
 */
typedef struct MktSeries MktSeries;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread. Never null.
 */
const char *mkt_last_error_message(void);

/**
 * Build a series from a row-major `rows` x `cols` array of doubles.
 *
 * # Safety
 * `data` must point to `rows * cols` doubles; `out` must be a valid pointer.
 */
enum MktStatus mkt_series_new(const double *data,
                              uintptr_t rows,
                              uintptr_t cols,
                              struct MktSeries **out);

/**
 * Load a series from a CSV file (optional header, one row per time point).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MktStatus mkt_series_from_csv(const char *path, struct MktSeries **out);

/**
 * Number of time points in the series.
 *
 * # Safety
 * `series` must be a live handle from this library; `out` must be valid.
 */
enum MktStatus mkt_series_len(const struct MktSeries *series, uintptr_t *out);

/**
 * Free a series handle. Null is a no-op.
 *
 * # Safety
 * `series` must be a handle from this library, freed at most once.
 */
void mkt_series_free(struct MktSeries *series);

/**
 * Free a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library, freed at most once.
 */
void mkt_string_free(char *s);

/**
 * Run the order-k Markov property test. `config_json` may be null (defaults)
 * or a JSON object with any subset of the configuration fields. On success,
 * `*out_json` holds the test report as JSON.
 *
 * # Safety
 * `series` must be a live handle; `out_json` must be a valid pointer.
 */
enum MktStatus mkt_run_test(const struct MktSeries *series,
                            uintptr_t k,
                            const char *config_json,
                            char **out_json);

/**
 * Sequentially test k = 1..k_max and report the estimated Markov order.
 * Same conventions as `mkt_run_test`.
 *
 * # Safety
 * `series` must be a live handle; `out_json` must be a valid pointer.
 */
enum MktStatus mkt_estimate_order(const struct MktSeries *series,
                                  uintptr_t k_max,
                                  const char *config_json,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARKOVTEST_H */
