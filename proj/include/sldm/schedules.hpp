#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sldm {

enum class ScheduleKind { Sldm, DdpmEdm, Ve, Ddim, Fm, Bfn };

inline constexpr std::array<ScheduleKind, 6> kAllScheduleKinds = {
    ScheduleKind::Sldm, ScheduleKind::DdpmEdm, ScheduleKind::Ve,
    ScheduleKind::Ddim, ScheduleKind::Fm,      ScheduleKind::Bfn};

std::string_view to_string(ScheduleKind kind);
/// Accepts "sldm", "ddpm_edm", "ve", "ddim", "fm", "bfn" (case-insensitive).
ScheduleKind parse_schedule_kind(std::string_view name);

/// Coefficient queries involving 1/mu are only answered up to this time.
inline constexpr double kMaxCoefficientTime = 1.0 - 1e-6;

/// Thrown for queries outside [0, 1] or with invalid parameters.
class ScheduleError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Thrown where a closed form is singular (mu = 0, sigma = 0, or an
/// unbounded derivative). The message names the kind and time.
class SingularityError : public ScheduleError {
 public:
  using ScheduleError::ScheduleError;
};

/// Noise-corrupting schedule x_t = mu(t) x_0 + sigma(t) eps on t in [0, 1].
struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::Sldm;
  double sigma_const = 0.05;  // SLDM
  double sigma_min = 1e-3;    // FM, BFN
  double sigma_max = 10.0;    // VE, DDIM

  static ScheduleSpec sldm(double sigma = 0.05) { return {ScheduleKind::Sldm, sigma, 1e-3, 10.0}; }
  static ScheduleSpec ddpm_edm() { return {ScheduleKind::DdpmEdm, 0.05, 1e-3, 10.0}; }
  static ScheduleSpec ve(double sigma_max = 10.0) { return {ScheduleKind::Ve, 0.05, 1e-3, sigma_max}; }
  static ScheduleSpec ddim(double sigma_max = 10.0) { return {ScheduleKind::Ddim, 0.05, 1e-3, sigma_max}; }
  static ScheduleSpec fm(double sigma_min = 1e-3) { return {ScheduleKind::Fm, 0.05, sigma_min, 10.0}; }
  static ScheduleSpec bfn(double sigma_min = 1e-3) { return {ScheduleKind::Bfn, 0.05, sigma_min, 10.0}; }
  /// Default-parameter spec for `kind`.
  static ScheduleSpec of(ScheduleKind kind);

  /// Throws ScheduleError if the parameters used by `kind` are out of range.
  void validate() const;
};

double mu(const ScheduleSpec& spec, double t);
double sigma(const ScheduleSpec& spec, double t);
double mu_dot(const ScheduleSpec& spec, double t);
double sigma_dot(const ScheduleSpec& spec, double t);

/// sigma(t) * sigma_dot(t), i.e. half the derivative of sigma^2. Finite at
/// t = 0 for VE and DDPM(EDM) where sigma_dot alone is not.
double sigma_sigma_dot(const ScheduleSpec& spec, double t);

/// f(t) = mu_dot / mu. Defined for t <= kMaxCoefficientTime.
double drift_coeff(const ScheduleSpec& spec, double t);
/// g^2(t) = 2 sigma sigma_dot - 2 sigma^2 mu_dot / mu, clamped at 0.
double diffusion_coeff_sq(const ScheduleSpec& spec, double t);
/// (mu / sigma)^2.
double snr(const ScheduleSpec& spec, double t);

struct ConstraintCheck {
  std::string name;
  bool passed = true;
  /// Expected, documented violation (SLDM's sigma(0) != 0).
  bool whitelisted = false;
  std::optional<double> first_violation_t;
  std::string detail;
};

struct ConstraintReport {
  ScheduleSpec spec;
  int grid_size = 0;
  std::vector<ConstraintCheck> checks;

  /// True when every check passed or is whitelisted.
  bool ok() const;
  const ConstraintCheck* find(std::string_view name) const;
};

/// Checks boundary values, monotonicity, g^2 >= 0 and derivative
/// consistency on t_i = i / (grid_size - 1). Monotonicity of sigma/mu is
/// checked on [0, 1); coefficient checks on the open interior.
ConstraintReport validate_schedule(const ScheduleSpec& spec, int grid_size);

}  // namespace sldm
