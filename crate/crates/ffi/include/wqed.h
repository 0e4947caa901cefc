#ifndef WQED_H
#define WQED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum WqedStatus {
  WQED_STATUS_OK = 0,
  // A required pointer argument was null.
  WQED_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  WQED_STATUS_INVALID_UTF8 = 2,
  // An argument or configuration value was rejected.
  WQED_STATUS_INVALID_ARGUMENT = 3,
  // A scenario stage failed; the message names the stage and config hash.
  WQED_STATUS_STAGE_FAILED = 4,
  // A numerical routine did not converge or was ill-conditioned.
  WQED_STATUS_NUMERICAL = 5,
  // Reading or writing a file failed.
  WQED_STATUS_IO = 6,
  // The requested quantity does not exist for this object.
  WQED_STATUS_NOT_AVAILABLE = 7,
  // The caller's buffer is too small; the message holds the needed size.
  WQED_STATUS_BUFFER_TOO_SMALL = 8,
  // An internal panic was caught.
  WQED_STATUS_PANIC = 9,
} WqedStatus;

// Scenario configuration.
typedef struct WqedConfig WqedConfig;

// Finished run.
typedef struct WqedReport WqedReport;

// Two-mode photonic state.
typedef struct WqedState WqedState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *wqed_version(void);

// Copy the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length excluding the NUL,
// or 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t wqed_last_error_message(char *buf, size_t len);

// Release a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void wqed_string_free(char *s);

// Parse and validate a JSON scenario configuration.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum WqedStatus wqed_config_from_json(const char *json, struct WqedConfig **out);

// Canonical configuration of a named scenario (`"noon_3l4"`, `"partition_l2"`,
// `"gain_calibration"`, `"spectroscopy_fit"`, `"dynamics_check"`).
//
// # Safety
// `scenario` must be a NUL-terminated string; `out` must be writable.
enum WqedStatus wqed_config_preset(const char *scenario, struct WqedConfig **out);

// # Safety
// `cfg` must be a live configuration handle.
enum WqedStatus wqed_config_set_seed(struct WqedConfig *cfg, uint64_t seed);

// Set the signal shot count (ground and calibration shots follow unless
// set explicitly in the configuration).
//
// # Safety
// `cfg` must be a live configuration handle.
enum WqedStatus wqed_config_set_shots(struct WqedConfig *cfg, size_t n_shots);

// Set (or with null, clear) the output directory.
//
// # Safety
// `cfg` must be a live configuration handle; `dir` null or NUL-terminated.
enum WqedStatus wqed_config_set_output_dir(struct WqedConfig *cfg, const char *dir);

// Configuration as pretty-printed JSON; free with [`wqed_string_free`].
//
// # Safety
// `cfg` must be a live configuration handle; `out` must be writable.
enum WqedStatus wqed_config_to_json(const struct WqedConfig *cfg, char **out);

// SHA-256 configuration hash (64 hex characters) written into `buf`, which
// must hold at least 65 bytes.
//
// # Safety
// `cfg` must be a live configuration handle; `buf` must hold `len` bytes.
enum WqedStatus wqed_config_hash(const struct WqedConfig *cfg, char *buf, size_t len);

// # Safety
// `cfg` must be null or a handle not yet freed.
void wqed_config_free(struct WqedConfig *cfg);

// Execute the scenario; with an output directory set, results are written
// there as well.
//
// # Safety
// `cfg` must be a live configuration handle; `out` must be writable.
enum WqedStatus wqed_run(const struct WqedConfig *cfg, struct WqedReport **out);

// Full report as JSON; free with [`wqed_string_free`].
//
// # Safety
// `report` must be a live report handle; `out` must be writable.
enum WqedStatus wqed_report_json(const struct WqedReport *report, char **out);

// Report as JSON without timings: identical for identical configurations.
//
// # Safety
// `report` must be a live report handle; `out` must be writable.
enum WqedStatus wqed_report_canonical_json(const struct WqedReport *report, char **out);

// Reconstruction fidelity to the ideal state (tomography scenarios only).
//
// # Safety
// `report` must be a live report handle; `out` must be writable.
enum WqedStatus wqed_report_fidelity(const struct WqedReport *report, double *out);

// Efficiencies η of the left and right chains (tomography and gain
// calibration scenarios).
//
// # Safety
// `report` must be a live report handle; both outputs must be writable.
enum WqedStatus wqed_report_efficiency(const struct WqedReport *report,
                                       double *eta_l,
                                       double *eta_r);

// # Safety
// `report` must be null or a handle not yet freed.
void wqed_report_free(struct WqedReport *report);

// Photonic state emitted by `n_qubits` fully excited qubits at `positions`
// (m) with resonance `omega` (rad/s), phase velocity `v` (m/s) and coupling
// `gamma` (rad/s), truncated at `cutoff` photons per mode.
//
// # Safety
// `positions` must point to `n_qubits` doubles; `out` must be writable.
enum WqedStatus wqed_emitted_state(const double *positions,
                                   size_t n_qubits,
                                   double omega,
                                   double v,
                                   double gamma,
                                   size_t cutoff,
                                   struct WqedState **out);

// Moment `⟨a_L†ʷ a_Lˣ a_R†ʸ a_Rᶻ⟩` of a state.
//
// # Safety
// `state` must be a live state handle; `re`/`im` must be writable.
enum WqedStatus wqed_state_moment(const struct WqedState *state,
                                  size_t w,
                                  size_t x,
                                  size_t y,
                                  size_t z,
                                  double *re,
                                  double *im);

// Population of `|n_l, n_r⟩`.
//
// # Safety
// `state` must be a live state handle; `out` must be writable.
enum WqedStatus wqed_state_population(const struct WqedState *state,
                                      size_t n_l,
                                      size_t n_r,
                                      double *out);

// # Safety
// `state` must be null or a handle not yet freed.
void wqed_state_free(struct WqedState *state);

// Steady-state transmission `S21` of a probe detuned by `delta_omega`
// (rad/s) at `power_w` watts past a qubit with coupling `gamma`, pure
// dephasing `gamma_phi` (rad/s) and thermal occupation `n_th`.
//
// # Safety
// `re`/`im` must be writable.
enum WqedStatus wqed_s21(double gamma,
                         double gamma_phi,
                         double n_th,
                         double omega,
                         double delta_omega,
                         double power_w,
                         double *re,
                         double *im);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WQED_H */
