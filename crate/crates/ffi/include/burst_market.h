#ifndef BURST_MARKET_H
#define BURST_MARKET_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum BmStatus {
  BM_STATUS_OK = 0,
  BM_STATUS_NULL_POINTER = 1,
  BM_STATUS_INVALID_UTF8 = 2,
  BM_STATUS_INVALID_JSON = 3,
  BM_STATUS_CONFIG_INVALID = 4,
  /**
   * The platform refused the operation; see the last error code.
   */
  BM_STATUS_REJECTED = 5,
  BM_STATUS_STORAGE_FAILURE = 6,
  BM_STATUS_INVALID_ARGUMENT = 7,
  BM_STATUS_PANIC = 8,
} BmStatus;

/**
 * Opaque platform handle.
 */
typedef struct BmPlatform BmPlatform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a platform from a JSON config. `config_json` may be null for
 * defaults. The clock starts at 2030-01-01T00:00:00Z and moves only through
 * [`bm_platform_advance`].
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string. `out` must be a
 * valid pointer to writable storage for one handle.
 */
enum BmStatus bm_platform_new(const char *config_json, struct BmPlatform **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must be null or a pointer from [`bm_platform_new`] not yet freed.
 */
void bm_platform_free(struct BmPlatform *handle);

/**
 * Runs one command. `request_json` is an object with an `action` key, the
 * action's arguments and an optional `actor` account id. On success the
 * result is written to `out_json` as a JSON string.
 *
 * # Safety
 * `handle` must be a live handle, `request_json` a NUL-terminated string and
 * `out_json` a valid pointer to writable storage for one string pointer.
 */
enum BmStatus bm_platform_execute(struct BmPlatform *handle,
                                  const char *request_json,
                                  char **out_json);

/**
 * Moves the simulated clock forward and fires any due timeouts.
 *
 * # Safety
 * `handle` must be a live handle.
 */
enum BmStatus bm_platform_advance(struct BmPlatform *handle, uint64_t seconds);

/**
 * Current simulated time as Unix seconds.
 *
 * # Safety
 * `handle` must be a live handle and `out` writable.
 */
enum BmStatus bm_platform_now(const struct BmPlatform *handle, int64_t *out);

/**
 * Hex sha256 of the platform state.
 *
 * # Safety
 * `handle` must be a live handle and `out_hex` writable.
 */
enum BmStatus bm_platform_digest(const struct BmPlatform *handle, char **out_hex);

/**
 * Charge in cents for `seconds` at a per-minute rate, rounded half up.
 */
uint64_t bm_compute_charge(uint64_t per_minute_cents, uint64_t seconds);

/**
 * Splits a charge into the platform's commission and the seller's credit.
 *
 * # Safety
 * `out_commission` and `out_credit` must be writable.
 */
enum BmStatus bm_split_commission(uint64_t charge_cents,
                                  uint32_t commission_bps,
                                  uint64_t *out_commission,
                                  uint64_t *out_credit);

/**
 * Seller net in cents over `days` days.
 *
 * # Safety
 * `out_cents` must be writable.
 */
enum BmStatus bm_annual_income(uint64_t per_minute_cents,
                               uint64_t minutes_per_day,
                               uint64_t days,
                               uint32_t commission_bps,
                               uint64_t *out_cents);

/**
 * Whole days of net income needed to cover `loan_cents`. When daily net is
 * zero the loan is never recouped: `out_never` is set and `out_days` is 0.
 *
 * # Safety
 * `out_days` and `out_never` must be writable.
 */
enum BmStatus bm_days_to_recoup(uint64_t loan_cents,
                                uint64_t per_minute_cents,
                                uint64_t minutes_per_day,
                                uint32_t commission_bps,
                                uint64_t *out_days,
                                bool *out_never);

/**
 * Code of the last failure on this thread, such as `InsufficientFunds`, or
 * null. Valid until the next call into this library on the same thread.
 */
const char *bm_last_error_code(void);

/**
 * Message of the last failure on this thread, or null.
 */
const char *bm_last_error_message(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void bm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BURST_MARKET_H */
