#ifndef BFFLOW_H
#define BFFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call.
 */
typedef enum BfStatus {
  BF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  BF_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration could not be parsed or violates an invariant.
   */
  BF_STATUS_CONFIG = 3,
  /**
   * Blow-up, solver non-convergence or invalid numerical input.
   */
  BF_STATUS_RUNTIME = 4,
  BF_STATUS_IO = 5,
  /**
   * Unknown key or out-of-range index.
   */
  BF_STATUS_NOT_FOUND = 6,
  /**
   * Output buffer has the wrong length.
   */
  BF_STATUS_BUFFER_SIZE = 7,
  BF_STATUS_PANIC = 8,
} BfStatus;

typedef enum BfSubcommand {
  BF_SUBCOMMAND_SIMULATE = 0,
  BF_SUBCOMMAND_SPECTRUM = 1,
  BF_SUBCOMMAND_LIPSCHITZ = 2,
  BF_SUBCOMMAND_SPLIT = 3,
  BF_SUBCOMMAND_EXPSPLIT = 4,
  BF_SUBCOMMAND_SMOOTHING = 5,
  BF_SUBCOMMAND_ATTRACTOR = 6,
  BF_SUBCOMMAND_AUDIT = 7,
  BF_SUBCOMMAND_ORACLE = 8,
} BfSubcommand;

typedef enum BfCheckStatus {
  BF_CHECK_STATUS_PASS = 0,
  BF_CHECK_STATUS_FAIL = 1,
  BF_CHECK_STATUS_SKIP = 2,
} BfCheckStatus;

/**
 * Parsed scenario configuration.
 */
typedef struct BfConfig BfConfig;

/**
 * Result of a scenario run: tables, scalar values and checks.
 */
typedef struct BfOutcome BfOutcome;

/**
 * A single trajectory that C code advances step by step.
 */
typedef struct BfSimulation BfSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Borrowed: valid
 * until the next failing call on the same thread.
 */
const char *bf_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void bf_string_free(char *s);

/**
 * Parses configuration text. A relative forcing file path is taken relative
 * to the working directory.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum BfStatus bf_config_parse(const char *text, struct BfConfig **out);

/**
 * Loads a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BfStatus bf_config_load(const char *path, struct BfConfig **out);

/**
 * Overrides the run seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum BfStatus bf_config_set_seed(struct BfConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must come from this library and not be freed twice. Null is ignored.
 */
void bf_config_free(struct BfConfig *cfg);

/**
 * Runs a scenario. A failed check is not an error: inspect the outcome.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_run(const struct BfConfig *cfg, enum BfSubcommand which, struct BfOutcome **out);

/**
 * 1 when no check failed, 0 otherwise, -1 for a null handle.
 *
 * # Safety
 * `o` must be a live handle or null.
 */
int32_t bf_outcome_passed(const struct BfOutcome *o);

/**
 * Looks up a named scalar of the outcome (the `key = value` lines of the
 * summary).
 *
 * # Safety
 * `o` must be a live handle, `key` a NUL-terminated string, `value` writable.
 */
enum BfStatus bf_outcome_value(const struct BfOutcome *o, const char *key, double *value);

/**
 * Number of checks; 0 for a null handle.
 *
 * # Safety
 * `o` must be a live handle or null.
 */
size_t bf_outcome_check_count(const struct BfOutcome *o);

/**
 * Status and name of check `index`. `name` may be null; otherwise it
 * receives an owned string.
 *
 * # Safety
 * `o` must be a live handle; `status` writable; `name` null or writable.
 */
enum BfStatus bf_outcome_check(const struct BfOutcome *o,
                               size_t index,
                               enum BfCheckStatus *status,
                               char **name);

/**
 * Plain-text summary (owned; release with `bf_string_free`). Null for a
 * null handle.
 *
 * # Safety
 * `o` must be a live handle or null.
 */
char *bf_outcome_summary(const struct BfOutcome *o);

/**
 * Writes CSV tables, `summary.txt` and optionally SVG plots into `dir`.
 *
 * # Safety
 * `o` must be a live handle and `dir` a NUL-terminated string.
 */
enum BfStatus bf_outcome_write(const struct BfOutcome *o, const char *dir, bool svg);

/**
 * # Safety
 * `o` must come from this library and not be freed twice. Null is ignored.
 */
void bf_outcome_free(struct BfOutcome *o);

/**
 * Creates a trajectory on the configured grid, starting from the configured
 * initial kind scaled to `amplitude`. With `dt = auto` the step is chosen
 * for `run.sample_every`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_sim_new(const struct BfConfig *cfg, double amplitude, struct BfSimulation **out);

/**
 * Advances by `steps` time steps. On failure the state is left at the last
 * successful step.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum BfStatus bf_sim_advance(struct BfSimulation *sim, size_t steps);

/**
 * Current time; NaN for a null handle.
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
double bf_sim_time(const struct BfSimulation *sim);

/**
 * Time step in use; NaN for a null handle.
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
double bf_sim_dt(const struct BfSimulation *sim);

/**
 * Squared energy norm `|u|_{H1}^2 + |p|^2`; NaN for a null handle.
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
double bf_sim_energy(const struct BfSimulation *sim);

/**
 * Number of interior nodes (length of the pressure buffer).
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
size_t bf_sim_node_count(const struct BfSimulation *sim);

/**
 * Spatial dimension (2 or 3); 0 for a null handle.
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
size_t bf_sim_dim(const struct BfSimulation *sim);

/**
 * Copies nodal pressure values (x fastest). `len` must equal the node count.
 *
 * # Safety
 * `sim` must be a live handle and `buf` valid for `len` writes.
 */
enum BfStatus bf_sim_copy_pressure(const struct BfSimulation *sim, double *buf, size_t len);

/**
 * Copies velocity values, component-major. `len` must equal dim times the
 * node count.
 *
 * # Safety
 * `sim` must be a live handle and `buf` valid for `len` writes.
 */
enum BfStatus bf_sim_copy_velocity(const struct BfSimulation *sim, double *buf, size_t len);

/**
 * # Safety
 * `sim` must come from this library and not be freed twice. Null is ignored.
 */
void bf_sim_free(struct BfSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BFFLOW_H */
