#ifndef SPARSETOK_H
#define SPARSETOK_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum StkStatus {
  STK_STATUS_OK = 0,
  STK_STATUS_NULL_ARGUMENT = 1,
  STK_STATUS_INVALID_UTF8 = 2,
  STK_STATUS_CONFIG_ERROR = 3,
  STK_STATUS_RUNTIME_ERROR = 4,
  STK_STATUS_PANIC = 5,
} StkStatus;

/**
 * Opaque engine handle: a validated run configuration ready to execute.
 */
typedef struct StkEngine StkEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the underlying engine, as a static NUL-terminated string.
 */
const char *stk_version(void);

/**
 * Copy the last error message for this thread into `buf` (NUL-terminated,
 * truncated to `len` bytes). Returns the full length including the NUL, so
 * callers can size a retry; zero means no error has been recorded.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (to query the size).
 */
uintptr_t stk_last_error(char *buf, uintptr_t len);

/**
 * Build an engine from a JSON run config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out_engine` a valid
 * pointer; on `STK_STATUS_OK` the caller owns the engine.
 */
enum StkStatus stk_engine_new(const char *config_json, struct StkEngine **out_engine);

/**
 * Build an engine from a named preset (`retain192`, `retain128`,
 * `retain64`).
 *
 * # Safety
 * Same contract as [`stk_engine_new`].
 */
enum StkStatus stk_engine_new_preset(const char *name, struct StkEngine **out_engine);

/**
 * Execute the engine's configured run and hand back the JSON report.
 *
 * # Safety
 * `engine` must come from a constructor and not have been freed;
 * `out_report_json` must be valid. On `STK_STATUS_OK` the caller owns the
 * string and releases it with [`stk_string_free`].
 */
enum StkStatus stk_engine_run_json(struct StkEngine *engine, char **out_report_json);

/**
 * Release an engine.
 *
 * # Safety
 * `engine` must be null or a pointer returned by a constructor, not yet
 * freed.
 */
void stk_engine_free(struct StkEngine *engine);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer produced by this library's out-parameters,
 * not yet freed.
 */
void stk_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSETOK_H */
