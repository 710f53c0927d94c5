#include "sldm/nn.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

namespace sldm {

void MlpConfig::validate() const {
  if (data_dims < 1) throw std::invalid_argument("mlp: data_dims must be >= 1");
  if (hidden < 1) throw std::invalid_argument("mlp: hidden must be >= 1");
  if (layers < 2) throw std::invalid_argument("mlp: layers must be >= 2");
  if (fourier_time && fourier_features < 1) throw std::invalid_argument("mlp: fourier_features must be >= 1");
}

Denoiser::Denoiser(const MlpConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  for (int l = 0; l < config_.layers; ++l) {
    const Eigen::Index in = l == 0 ? config_.data_dims + config_.time_dims() : config_.hidden;
    const Eigen::Index out = l == config_.layers - 1 ? config_.data_dims : config_.hidden;
    ad::Linear layer(in, out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index j = 0; j < out; ++j)
      for (Eigen::Index i = 0; i < in; ++i) layer.weight.value(i, j) = rng.uniform(-bound, bound);
    for (Eigen::Index j = 0; j < out; ++j) layer.bias.value(0, j) = rng.uniform(-bound, bound);
    layers_.push_back(std::move(layer));
  }
}

std::vector<ad::Parameter*> Denoiser::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& l : layers_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

Eigen::Index Denoiser::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers_) n += l.weight.value.size() + l.bias.value.size();
  return n;
}

Eigen::MatrixXd Denoiser::time_features(const Eigen::VectorXd& t) const {
  if (!config_.fourier_time) return t;
  Eigen::MatrixXd f(t.size(), 2 * config_.fourier_features);
  for (int k = 0; k < config_.fourier_features; ++k) {
    const Eigen::ArrayXd arg = 2.0 * std::numbers::pi * (k + 1) * t.array();
    f.col(2 * k) = arg.sin().matrix();
    f.col(2 * k + 1) = arg.cos().matrix();
  }
  return f;
}

Eigen::MatrixXd Denoiser::forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& t) const {
  if (x.cols() != config_.data_dims) throw std::invalid_argument("denoiser: input has the wrong dimension");
  if (t.size() != x.rows()) throw std::invalid_argument("denoiser: one time per row required");
  Eigen::MatrixXd h(x.rows(), x.cols() + config_.time_dims());
  h << x, time_features(t);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = layers_[l].apply(h);
    if (l + 1 < layers_.size()) h = ad::silu(h);
  }
  return h;
}

ad::Var Denoiser::forward(ad::Tape& tape, ad::Var x, const Eigen::VectorXd& t) {
  if (x.cols() != config_.data_dims) throw std::invalid_argument("denoiser: input has the wrong dimension");
  if (t.size() != x.rows()) throw std::invalid_argument("denoiser: one time per row required");
  ad::Var h = ad::concat_cols({x, tape.constant(time_features(t))});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = layers_[l](tape, h);
    if (l + 1 < layers_.size()) h = ad::silu(h);
  }
  return h;
}

EpsModel denoiser_eps_model(const Denoiser& model) {
  return [&model](const Eigen::MatrixXd& x, double t) {
    return model.forward(x, Eigen::VectorXd::Constant(x.rows(), t));
  };
}

double mse_loss(const Eigen::MatrixXd& eps, const Eigen::MatrixXd& eps_hat) {
  if (eps.rows() != eps_hat.rows() || eps.cols() != eps_hat.cols() || eps.rows() == 0)
    throw std::invalid_argument("mse_loss: shape mismatch");
  return (eps - eps_hat).squaredNorm() / static_cast<double>(eps.rows());
}

double loss_and_grads(Denoiser& model, const Eigen::MatrixXd& x0, const Eigen::VectorXd& t,
                      const Eigen::MatrixXd& eps, double sigma) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols() || t.size() != x0.rows())
    throw std::invalid_argument("loss_and_grads: batch shapes differ");
  const Eigen::MatrixXd xt = (x0.array().colwise() * (1.0 - t.array())).matrix() + sigma * eps;
  ad::Tape tape;
  const ad::Var out = model.forward(tape, tape.constant(xt), t);
  const ad::Var resid = ad::sub(tape.constant(eps), out);
  const ad::Var loss = ad::scale(ad::sum(ad::mul(resid, resid)), 1.0 / static_cast<double>(x0.rows()));
  const double value = loss.value()(0, 0);
  if (!std::isfinite(value)) throw TrainingDivergence("loss_and_grads: non-finite loss");
  tape.backward(loss);
  return value;
}

BatchDraw draw_batch_noise(Eigen::Index rows, int dims, TimeSampling mode, int discrete_steps, Rng& rng) {
  BatchDraw d;
  d.t.resize(rows);
  if (mode == TimeSampling::Continuous) {
    for (Eigen::Index i = 0; i < rows; ++i) d.t[i] = rng.uniform();
  } else {
    if (discrete_steps < 2) throw std::invalid_argument("discrete time sampling needs at least two steps");
    for (Eigen::Index i = 0; i < rows; ++i)
      d.t[i] = static_cast<double>(1 + rng.below(static_cast<std::uint64_t>(discrete_steps - 1))) / discrete_steps;
  }
  d.eps = rng.normal_matrix(rows, dims);
  return d;
}

double loss_and_grads(Denoiser& model, const Eigen::MatrixXd& x0, double sigma, std::uint64_t seed,
                      TimeSampling mode, int discrete_steps) {
  Rng rng = Rng::stream(seed, 0);
  const BatchDraw d = draw_batch_noise(x0.rows(), static_cast<int>(x0.cols()), mode, discrete_steps, rng);
  return loss_and_grads(model, x0, d.t, d.eps, sigma);
}

Adam::Adam(std::vector<ad::Parameter*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  for (auto* p : params_) {
    m_.push_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++step_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Eigen::MatrixXd& g = params_[i]->grad;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
    params_[i]->value.array() -=
        config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
}

void TrainConfig::validate() const {
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("train: sigma must be positive");
  if (time_sampling == TimeSampling::Discrete && discrete_steps < 2)
    throw std::invalid_argument("train: discrete_steps must be >= 2");
}

TrainResult train(Denoiser& model, const Eigen::MatrixXd& data, const TrainConfig& config,
                  const std::function<void(int, double)>& on_epoch) {
  config.validate();
  if (data.cols() != model.config().data_dims) throw std::invalid_argument("train: data dimension mismatch");
  if (data.rows() < 1) throw std::invalid_argument("train: empty dataset");
  Adam adam(model.parameters(), {config.lr});
  TrainResult result;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
  Eigen::MatrixXd batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng shuffle = Rng::stream(config.seed, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double acc = 0.0;
    int batches = 0;
    for (Eigen::Index start = 0; start < data.rows(); start += config.batch) {
      const Eigen::Index rows = std::min(config.batch, data.rows() - start);
      batch.resize(rows, data.cols());
      for (Eigen::Index i = 0; i < rows; ++i) batch.row(i) = data.row(order[static_cast<std::size_t>(start + i)]);
      Rng noise = Rng::stream(config.seed ^ 0x5eedULL, static_cast<std::uint64_t>(result.optimizer_steps));
      const BatchDraw d =
          draw_batch_noise(rows, static_cast<int>(data.cols()), config.time_sampling, config.discrete_steps, noise);
      adam.zero_grad();
      const double loss = loss_and_grads(model, batch, d.t, d.eps, config.sigma);
      if (loss > config.divergence_threshold)
        throw TrainingDivergence(
            fmt::format("train: loss {} exceeded {} at epoch {}", loss, config.divergence_threshold, epoch));
      adam.step();
      ++result.optimizer_steps;
      acc += loss;
      ++batches;
    }
    result.epoch_loss.push_back(acc / batches);
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

std::vector<double> smooth(const std::vector<double>& values, int window) {
  if (window < 1) throw std::invalid_argument("smooth: window must be >= 1");
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= static_cast<std::size_t>(window)) acc -= values[i - static_cast<std::size_t>(window)];
    out.push_back(acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window))));
  }
  return out;
}

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw std::runtime_error("checkpoint: matrix row count mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& r = j[static_cast<std::size_t>(i)];
    if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != cols)
      throw std::runtime_error("checkpoint: matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = r[static_cast<std::size_t>(c)].get<double>();
  }
  if (!m.allFinite()) throw std::runtime_error("checkpoint: non-finite parameter");
  return m;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch", c.batch},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"sigma", c.sigma},
          {"seed", c.seed},
          {"time_sampling", c.time_sampling == TimeSampling::Continuous ? "continuous" : "discrete"},
          {"discrete_steps", c.discrete_steps}};
}

nlohmann::json checkpoint_json(const Denoiser& model, const TrainConfig& config) {
  const MlpConfig& c = model.config();
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers())
    layers.push_back({{"in", l.in()}, {"out", l.out()}, {"weight", matrix_json(l.weight.value)},
                      {"bias", matrix_json(l.bias.value)}});
  return {{"format", "sldm-denoiser"},
          {"version", 1},
          {"activation", "silu"},
          {"config",
           {{"data_dims", c.data_dims},
            {"hidden", c.hidden},
            {"layers", c.layers},
            {"fourier_time", c.fourier_time},
            {"fourier_features", c.fourier_features}}},
          {"train", to_json(config)},
          {"parameters", layers}};
}

Denoiser denoiser_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "sldm-denoiser") throw std::runtime_error("checkpoint: not a denoiser checkpoint");
    if (j.at("version") != 1) throw std::runtime_error("checkpoint: unsupported version");
    if (j.at("activation") != "silu") throw std::runtime_error("checkpoint: unsupported activation");
    MlpConfig c;
    const auto& jc = j.at("config");
    c.data_dims = jc.at("data_dims").get<int>();
    c.hidden = jc.at("hidden").get<int>();
    c.layers = jc.at("layers").get<int>();
    c.fourier_time = jc.at("fourier_time").get<bool>();
    c.fourier_features = jc.at("fourier_features").get<int>();
    Denoiser model(c, 0);
    const auto& params = j.at("parameters");
    if (params.size() != model.layers().size()) throw std::runtime_error("checkpoint: layer count mismatch");
    for (std::size_t l = 0; l < params.size(); ++l) {
      auto& layer = model.layers()[l];
      if (params[l].at("in").get<Eigen::Index>() != layer.in() || params[l].at("out").get<Eigen::Index>() != layer.out())
        throw std::runtime_error(fmt::format("checkpoint: layer {} has unexpected shape", l));
      layer.weight.value = matrix_from_json(params[l].at("weight"), layer.in(), layer.out());
      layer.bias.value = matrix_from_json(params[l].at("bias"), 1, layer.out());
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(fmt::format("checkpoint: {}", e.what()));
  }
}

}  // namespace sldm
