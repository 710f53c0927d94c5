#include "sldm/schedules.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <fmt/format.h>

namespace sldm {
namespace {

void check_time(const ScheduleSpec& spec, double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw ScheduleError(fmt::format("{}: time {} outside [0, 1]", to_string(spec.kind), t));
}

// BFN in diffusion time: u(t) = sigma_min^(2 (1 - t)), mu = 1 - u.
double bfn_u(const ScheduleSpec& spec, double t) {
  return std::pow(spec.sigma_min, 2.0 * (1.0 - t));
}
double bfn_u_dot(const ScheduleSpec& spec, double t) {
  return -2.0 * std::log(spec.sigma_min) * bfn_u(spec, t);
}

}  // namespace

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Sldm: return "sldm";
    case ScheduleKind::DdpmEdm: return "ddpm_edm";
    case ScheduleKind::Ve: return "ve";
    case ScheduleKind::Ddim: return "ddim";
    case ScheduleKind::Fm: return "fm";
    case ScheduleKind::Bfn: return "bfn";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "ddpm" || lower == "edm") lower = "ddpm_edm";
  for (ScheduleKind k : kAllScheduleKinds)
    if (to_string(k) == lower) return k;
  throw ScheduleError(fmt::format("unknown schedule kind '{}'", name));
}

ScheduleSpec ScheduleSpec::of(ScheduleKind kind) {
  ScheduleSpec s;
  s.kind = kind;
  return s;
}

void ScheduleSpec::validate() const {
  switch (kind) {
    case ScheduleKind::Sldm:
      if (!(sigma_const > 0.0 && std::isfinite(sigma_const)))
        throw ScheduleError(fmt::format("sldm: sigma must be positive, got {}", sigma_const));
      break;
    case ScheduleKind::Ve:
    case ScheduleKind::Ddim:
      if (!(sigma_max > 0.0 && std::isfinite(sigma_max)))
        throw ScheduleError(fmt::format("{}: sigma_max must be positive, got {}", to_string(kind), sigma_max));
      break;
    case ScheduleKind::Fm:
    case ScheduleKind::Bfn:
      if (!(sigma_min > 0.0 && sigma_min < 1.0))
        throw ScheduleError(fmt::format("{}: sigma_min must lie in (0, 1), got {}", to_string(kind), sigma_min));
      break;
    case ScheduleKind::DdpmEdm:
      break;
  }
}

double mu(const ScheduleSpec& spec, double t) {
  check_time(spec, t);
  switch (spec.kind) {
    case ScheduleKind::Sldm: return 1.0 - t;
    case ScheduleKind::DdpmEdm: return 1.0 - t * t;
    case ScheduleKind::Ve:
    case ScheduleKind::Ddim: return 1.0;
    case ScheduleKind::Fm: return 1.0 - t;
    case ScheduleKind::Bfn: return 1.0 - bfn_u(spec, t);
  }
  return 0.0;
}

double sigma(const ScheduleSpec& spec, double t) {
  check_time(spec, t);
  switch (spec.kind) {
    case ScheduleKind::Sldm: return spec.sigma_const;
    // sqrt(1 - (1 - t^2)^2) written to avoid cancellation near t = 0.
    case ScheduleKind::DdpmEdm: return t * std::sqrt(2.0 - t * t);
    case ScheduleKind::Ve: return spec.sigma_max * std::sqrt(t);
    case ScheduleKind::Ddim: return spec.sigma_max * t;
    case ScheduleKind::Fm: return t + (1.0 - t) * spec.sigma_min;
    case ScheduleKind::Bfn: {
      const double u = bfn_u(spec, t);
      return std::sqrt(u * (1.0 - u));
    }
  }
  return 0.0;
}

double mu_dot(const ScheduleSpec& spec, double t) {
  check_time(spec, t);
  switch (spec.kind) {
    case ScheduleKind::Sldm: return -1.0;
    case ScheduleKind::DdpmEdm: return -2.0 * t;
    case ScheduleKind::Ve:
    case ScheduleKind::Ddim: return 0.0;
    case ScheduleKind::Fm: return -1.0;
    case ScheduleKind::Bfn: return -bfn_u_dot(spec, t);
  }
  return 0.0;
}

double sigma_dot(const ScheduleSpec& spec, double t) {
  check_time(spec, t);
  switch (spec.kind) {
    case ScheduleKind::Sldm: return 0.0;
    case ScheduleKind::DdpmEdm: return 2.0 * (1.0 - t * t) / std::sqrt(2.0 - t * t);
    case ScheduleKind::Ve:
      if (t == 0.0) throw SingularityError("ve: sigma_dot unbounded at t = 0");
      return spec.sigma_max / (2.0 * std::sqrt(t));
    case ScheduleKind::Ddim: return spec.sigma_max;
    case ScheduleKind::Fm: return 1.0 - spec.sigma_min;
    case ScheduleKind::Bfn: {
      const double s = sigma(spec, t);
      if (s == 0.0) throw SingularityError(fmt::format("bfn: sigma_dot unbounded at t = {}", t));
      return sigma_sigma_dot(spec, t) / s;
    }
  }
  return 0.0;
}

double sigma_sigma_dot(const ScheduleSpec& spec, double t) {
  check_time(spec, t);
  switch (spec.kind) {
    case ScheduleKind::Sldm: return 0.0;
    case ScheduleKind::DdpmEdm: return 2.0 * t * (1.0 - t * t);
    case ScheduleKind::Ve: return 0.5 * spec.sigma_max * spec.sigma_max;
    case ScheduleKind::Ddim: return spec.sigma_max * spec.sigma_max * t;
    case ScheduleKind::Fm: return (t + (1.0 - t) * spec.sigma_min) * (1.0 - spec.sigma_min);
    case ScheduleKind::Bfn: {
      const double u = bfn_u(spec, t);
      return 0.5 * bfn_u_dot(spec, t) * (1.0 - 2.0 * u);
    }
  }
  return 0.0;
}

double drift_coeff(const ScheduleSpec& spec, double t) {
  check_time(spec, t);
  const double m = mu(spec, t);
  if (t > kMaxCoefficientTime || m <= 0.0)
    throw SingularityError(fmt::format("{}: drift coefficient singular at t = {} (mu = {})",
                                       to_string(spec.kind), t, m));
  return mu_dot(spec, t) / m;
}

double diffusion_coeff_sq(const ScheduleSpec& spec, double t) {
  const double f = drift_coeff(spec, t);
  const double s = sigma(spec, t);
  const double g2 = 2.0 * sigma_sigma_dot(spec, t) - 2.0 * s * s * f;
  if (g2 < -1e-12)
    throw ScheduleError(fmt::format("{}: negative diffusion coefficient {} at t = {}",
                                    to_string(spec.kind), g2, t));
  return std::max(g2, 0.0);
}

double snr(const ScheduleSpec& spec, double t) {
  const double s = sigma(spec, t);
  if (s == 0.0)
    throw SingularityError(fmt::format("{}: infinite SNR at t = {} (sigma = 0)", to_string(spec.kind), t));
  const double r = mu(spec, t) / s;
  return r * r;
}

bool ConstraintReport::ok() const {
  return std::all_of(checks.begin(), checks.end(),
                     [](const ConstraintCheck& c) { return c.passed || c.whitelisted; });
}

const ConstraintCheck* ConstraintReport::find(std::string_view name) const {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

namespace {

// The FM and BFN closed forms only reach mu(0) = 1, sigma(0) = 0 up to
// their cutoff sigma_min.
double boundary_tolerance(const ScheduleSpec& spec) {
  if (spec.kind == ScheduleKind::Fm || spec.kind == ScheduleKind::Bfn) return spec.sigma_min + 1e-15;
  return 1e-12;
}

template <typename Pred>
ConstraintCheck scan(std::string name, const std::vector<double>& grid, Pred&& pred) {
  ConstraintCheck c;
  c.name = std::move(name);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!pred(i)) {
      c.passed = false;
      c.first_violation_t = grid[i];
      break;
    }
  }
  return c;
}

// Richardson-extrapolated central difference. The step scales with the
// distance to the interval ends, where VE and BFN have singular derivatives.
double central_difference(double (*fn)(const ScheduleSpec&, double), const ScheduleSpec& spec, double t) {
  const double h = std::min({1e-3, 0.01 * t, 0.01 * (1.0 - t)});
  auto d = [&](double step) { return (fn(spec, t + step) - fn(spec, t - step)) / (2.0 * step); };
  return (4.0 * d(0.5 * h) - d(h)) / 3.0;
}

}  // namespace

ConstraintReport validate_schedule(const ScheduleSpec& spec, int grid_size) {
  if (grid_size < 3) throw ScheduleError("validate_schedule: grid_size must be at least 3");
  spec.validate();

  ConstraintReport report;
  report.spec = spec;
  report.grid_size = grid_size;

  std::vector<double> grid(static_cast<std::size_t>(grid_size));
  for (int i = 0; i < grid_size; ++i) grid[static_cast<std::size_t>(i)] = static_cast<double>(i) / (grid_size - 1);
  grid.back() = 1.0;

  const double tol = boundary_tolerance(spec);
  {
    ConstraintCheck c;
    c.name = "mu_at_zero_is_one";
    const double m0 = mu(spec, 0.0);
    c.passed = std::abs(m0 - 1.0) <= tol;
    if (!c.passed) c.first_violation_t = 0.0;
    c.detail = fmt::format("mu(0) = {}", m0);
    report.checks.push_back(c);
  }
  {
    ConstraintCheck c;
    c.name = "sigma_at_zero_is_zero";
    const double s0 = sigma(spec, 0.0);
    c.passed = s0 <= tol;
    if (!c.passed) {
      c.first_violation_t = 0.0;
      c.whitelisted = spec.kind == ScheduleKind::Sldm;
    }
    c.detail = c.whitelisted ? fmt::format("sigma(0) = {} (constant-sigma schedule, expected)", s0)
                             : fmt::format("sigma(0) = {}", s0);
    report.checks.push_back(c);
  }

  const std::size_t n = grid.size();
  std::vector<double> mus(n), sigmas(n);
  for (std::size_t i = 0; i < n; ++i) {
    mus[i] = mu(spec, grid[i]);
    sigmas[i] = sigma(spec, grid[i]);
  }

  report.checks.push_back(scan("mu_nonnegative", grid, [&](std::size_t i) { return mus[i] >= 0.0; }));
  report.checks.push_back(scan("sigma_nonnegative", grid, [&](std::size_t i) { return sigmas[i] >= 0.0; }));
  report.checks.push_back(scan("mu_nonincreasing", grid, [&](std::size_t i) {
    return i == 0 || mus[i] <= mus[i - 1] + 1e-15;
  }));
  report.checks.push_back(scan("sigma_over_mu_nondecreasing", grid, [&](std::size_t i) {
    if (i == 0 || i == n - 1) return true;  // [0, 1)
    return sigmas[i] / mus[i] >= sigmas[i - 1] / mus[i - 1] * (1.0 - 1e-12);
  }));

  report.checks.push_back(scan("snr_nonincreasing", grid, [&](std::size_t i) {
    if (i <= 1 || i == n - 1 || sigmas[i - 1] == 0.0) return true;
    return snr(spec, grid[i]) <= snr(spec, grid[i - 1]) * (1.0 + 1e-12);
  }));

  report.checks.push_back(scan("diffusion_coeff_sq_nonnegative", grid, [&](std::size_t i) {
    const double t = grid[i];
    if (i == 0 || t > kMaxCoefficientTime) return true;
    const double f = mu_dot(spec, t) / mus[i];
    return 2.0 * sigma_sigma_dot(spec, t) - 2.0 * sigmas[i] * sigmas[i] * f >= -1e-12;
  }));

  auto derivative_check = [&](std::string name, double (*fn)(const ScheduleSpec&, double),
                              double (*dfn)(const ScheduleSpec&, double)) {
    double worst = 0.0;
    ConstraintCheck c = scan(std::move(name), grid, [&](std::size_t i) {
      if (i == 0 || i == n - 1) return true;
      const double t = grid[i];
      const double analytic = dfn(spec, t);
      const double numeric = central_difference(fn, spec, t);
      const double err = std::abs(analytic - numeric);
      const double rel = err / std::max(std::abs(analytic), 1e-300);
      if (analytic != 0.0) worst = std::max(worst, rel);
      return err <= 1e-6 * std::abs(analytic) + 1e-12;
    });
    c.detail = fmt::format("max relative error {:.3e}", worst);
    report.checks.push_back(c);
  };
  derivative_check("mu_dot_matches_finite_difference", &mu, &mu_dot);
  derivative_check("sigma_dot_matches_finite_difference", &sigma, &sigma_dot);

  return report;
}

}  // namespace sldm
