#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "sldm/autodiff.hpp"
#include "sldm/dynamics.hpp"
#include "sldm/rng.hpp"

namespace sldm {

/// Raised when training produces a non-finite or exploding loss.
class TrainingDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MlpConfig {
  int data_dims = 2;
  int hidden = 128;
  int layers = 5;  // linear layers, SiLU between them
  /// Off: raw t is one input column. On: sin/cos of 2 pi k t, k = 1..fourier_features.
  bool fourier_time = false;
  int fourier_features = 8;

  int time_dims() const { return fourier_time ? 2 * fourier_features : 1; }
  void validate() const;
};

/// eps_hat = phi(x_t, t): a fully connected SiLU network on [x_t, time features].
class Denoiser {
 public:
  Denoiser() = default;
  /// Weights and biases uniform in +-1/sqrt(fan_in), drawn from Rng(seed).
  Denoiser(const MlpConfig& config, std::uint64_t seed);

  const MlpConfig& config() const { return config_; }
  std::vector<ad::Linear>& layers() { return layers_; }
  const std::vector<ad::Linear>& layers() const { return layers_; }
  std::vector<ad::Parameter*> parameters();
  Eigen::Index parameter_count() const;

  /// Inference pass; `t` holds one time per row of `x`.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& t) const;
  /// Same computation recorded on a tape.
  ad::Var forward(ad::Tape& tape, ad::Var x, const Eigen::VectorXd& t);

  Eigen::MatrixXd time_features(const Eigen::VectorXd& t) const;

 private:
  MlpConfig config_;
  std::vector<ad::Linear> layers_;
};

/// Adapter for the sampler: every row evaluated at the same t.
EpsModel denoiser_eps_model(const Denoiser& model);

/// Mean over the batch of ||eps - eps_hat||^2.
double mse_loss(const Eigen::MatrixXd& eps, const Eigen::MatrixXd& eps_hat);

/// Loss for explicit (t, eps); gradients are added to the model's parameters.
double loss_and_grads(Denoiser& model, const Eigen::MatrixXd& x0, const Eigen::VectorXd& t,
                      const Eigen::MatrixXd& eps, double sigma);

enum class TimeSampling { Continuous, Discrete };

struct BatchDraw {
  Eigen::VectorXd t;
  Eigen::MatrixXd eps;
};
/// t ~ U[0, 1) (continuous) or t = i / T with i uniform in {1, ..., T - 1}.
BatchDraw draw_batch_noise(Eigen::Index rows, int dims, TimeSampling mode, int discrete_steps, Rng& rng);

/// Draws t and eps from Rng::stream(seed, 0), then as above.
double loss_and_grads(Denoiser& model, const Eigen::MatrixXd& x0, double sigma, std::uint64_t seed,
                      TimeSampling mode = TimeSampling::Continuous, int discrete_steps = 100);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<ad::Parameter*> params, AdamConfig config = {});
  /// Applies one update from the accumulated gradients.
  void step();
  void zero_grad();
  long steps() const { return step_; }
  const std::vector<Eigen::MatrixXd>& first_moments() const { return m_; }

 private:
  std::vector<ad::Parameter*> params_;
  AdamConfig config_;
  std::vector<Eigen::MatrixXd> m_, v_;
  long step_ = 0;
};

struct TrainConfig {
  Eigen::Index batch = 2048;
  int epochs = 100;
  double lr = 1e-3;
  double sigma = 0.05;
  std::uint64_t seed = 0;
  TimeSampling time_sampling = TimeSampling::Continuous;
  int discrete_steps = 100;
  double divergence_threshold = 1e3;

  void validate() const;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  long optimizer_steps = 0;
};

/// Epoch e visits the data in the order of a shuffle drawn from stream (seed, e).
TrainResult train(Denoiser& model, const Eigen::MatrixXd& data, const TrainConfig& config,
                  const std::function<void(int epoch, double loss)>& on_epoch = {});

/// Mean of `values` over trailing windows of `window` entries.
std::vector<double> smooth(const std::vector<double>& values, int window);

/// Row-major nested arrays.
nlohmann::json matrix_json(const Eigen::MatrixXd& m);
/// Throws std::runtime_error on a shape mismatch or a non-finite entry.
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols);

nlohmann::json to_json(const TrainConfig& config);
nlohmann::json checkpoint_json(const Denoiser& model, const TrainConfig& config);
/// Throws std::runtime_error on a malformed or mismatched checkpoint.
Denoiser denoiser_from_json(const nlohmann::json& checkpoint);

}  // namespace sldm
