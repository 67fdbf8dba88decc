/* C interface to the kgspec wave-equation analysis toolkit. Generated file, do not edit. */

#ifndef KGSPEC_H
#define KGSPEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code shared by every entry point.
typedef enum kg_status {
  KG_OK = 0,
  KG_NULL_POINTER = 1,
  KG_INVALID_ARGUMENT = 2,
  KG_PARSE_ERROR = 3,
  KG_NUMERICAL_ERROR = 4,
  KG_INCONCLUSIVE = 5,
  KG_PANIC = 6,
} kg_status;

// Opaque handle for a coefficient pair.
typedef struct kg_profile kg_profile;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Parse a profile from TOML text.
//
// The text uses the same layout as CLI profile files: a `[speed]` table
// and a `[mass]` table, each with a `family` tag and its parameters, plus
// an optional top-level `label`. On success `*out` owns the new handle.
enum kg_status kg_profile_from_toml(const char *text, struct kg_profile **out);

// Release a profile handle. Null is a no-op.
void kg_profile_free(struct kg_profile *profile);

// Evaluate the speed `a`, mass `m`, and speed primitive `A` at time `t`.
//
// Out pointers may individually be null when a value is not wanted.
enum kg_status kg_profile_eval(const struct kg_profile *profile,
                               double t,
                               double *a,
                               double *m,
                               double *big_a);

// Classify the profile over `[0, t_max]`; the report arrives as JSON.
enum kg_status kg_classify_json(const struct kg_profile *profile,
                                double t_max,
                                double tol,
                                char **out);

// First time at which `A(t) |xi|` reaches the zone constant.
//
// Writes `+inf` when the boundary is never reached (`|xi| = 0`).
enum kg_status kg_separating_time(const struct kg_profile *profile,
                                  double zone_n,
                                  double xi_norm,
                                  double *out);

// Decay-rate prediction for the scale-invariant model, as JSON.
//
// `alpha` is the speed exponent (< 1), `mu` the mass constant, `a0` the
// initial primitive value in `(0, 1]`. Rates are measured in `L^q` with
// interpolation weight `kappa` in `n` space dimensions. The JSON carries
// the derived model (including its polynomial twin when one exists) and
// the predicted laws.
enum kg_status kg_rates_json(double alpha,
                             double mu,
                             double a0,
                             double q,
                             double kappa,
                             uint32_t n,
                             char **out);

// March one Fourier mode and sample its squared micro-energy norm.
//
// `(u0_re, u0_im)` and `(u1_re, u1_im)` are the complex initial value and
// velocity of the mode. `times` must be strictly increasing, nonnegative,
// and hold `n_times` entries; `out_energy` receives one value per entry.
// Pass `tol <= 0` for the default integration tolerance.
enum kg_status kg_mode_energy_samples(const struct kg_profile *profile,
                                      double xi_norm,
                                      double u0_re,
                                      double u0_im,
                                      double u1_re,
                                      double u1_im,
                                      const double *times,
                                      size_t n_times,
                                      double tol,
                                      double *out_energy);

// Release a string returned by this library. Null is a no-op.
void kg_string_free(char *text);

// Message for the most recent failure on the calling thread, or null when
// the last call succeeded. The pointer stays valid until the next failing
// call on the same thread.
const char *kg_last_error(void);

// Library version as a static NUL-terminated string.
const char *kg_version(void);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* KGSPEC_H */
