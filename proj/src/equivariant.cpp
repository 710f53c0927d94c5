#include "sldm/equivariant.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <fmt/format.h>

#include "sldm/dynamics.hpp"
#include "sldm/nn.hpp"

namespace sldm {

namespace {

constexpr double kComTolerance = 1e-6;

void require_cloud_shape(const Eigen::MatrixXd& coords, Eigen::Index m, const char* who) {
  if (coords.cols() != 3) throw std::invalid_argument(fmt::format("{}: coordinates must have 3 columns", who));
  if (m < 2) throw std::invalid_argument(fmt::format("{}: clouds need at least 2 points", who));
  if (coords.rows() == 0 || coords.rows() % m != 0)
    throw std::invalid_argument(fmt::format("{}: row count must be a positive multiple of M", who));
}

}  // namespace

Eigen::MatrixXd sample_com_gaussian(Eigen::Index m, double scale, Rng& rng) {
  if (m < 2) throw std::invalid_argument("sample_com_gaussian: M must be >= 2");
  if (!(scale >= 0.0)) throw std::invalid_argument("sample_com_gaussian: scale must be non-negative");
  return project_com(scale * rng.normal_matrix(m, 3));
}

Eigen::MatrixXd sample_com_gaussian(Eigen::Index m, double scale, std::uint64_t seed) {
  Rng rng(seed);
  return sample_com_gaussian(m, scale, rng);
}

Eigen::MatrixXd project_com(const Eigen::MatrixXd& coords) {
  if (coords.rows() < 1) throw std::invalid_argument("project_com: empty cloud");
  return coords.rowwise() - coords.colwise().mean();
}

Eigen::MatrixXd project_com_blocks(const Eigen::MatrixXd& coords, Eigen::Index m) {
  require_cloud_shape(coords, m, "project_com_blocks");
  Eigen::MatrixXd out(coords.rows(), coords.cols());
  for (Eigen::Index b = 0; b < coords.rows(); b += m) out.middleRows(b, m) = project_com(coords.middleRows(b, m));
  return out;
}

double com_deviation(const Eigen::MatrixXd& coords, Eigen::Index m) {
  require_cloud_shape(coords, m, "com_deviation");
  double worst = 0.0;
  for (Eigen::Index b = 0; b < coords.rows(); b += m)
    worst = std::max(worst, coords.middleRows(b, m).colwise().mean().cwiseAbs().maxCoeff());
  return worst;
}

Eigen::Matrix3d random_orthogonal(Rng& rng, bool proper) {
  const Eigen::Matrix3d g = rng.normal_matrix(3, 3);
  const Eigen::HouseholderQR<Eigen::Matrix3d> qr(g);
  Eigen::Matrix3d q = qr.householderQ();
  const Eigen::Matrix3d r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int k = 0; k < 3; ++k)
    if (r(k, k) < 0) q.col(k) = -q.col(k);
  if (proper && q.determinant() < 0) q.col(0) = -q.col(0);
  return q;
}

Eigen::MatrixXd rotate(const Eigen::MatrixXd& coords, const Eigen::Matrix3d& r) {
  if (coords.cols() != 3) throw std::invalid_argument("rotate: coordinates must have 3 columns");
  return coords * r.transpose();
}

Eigen::MatrixXd sorted_pair_distances(const std::vector<PointCloud>& clouds) {
  if (clouds.empty()) throw std::invalid_argument("sorted_pair_distances: no clouds");
  const Eigen::Index m = clouds.front().coords.rows();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(clouds.size()), m * (m - 1) / 2);
  std::vector<double> d;
  for (std::size_t c = 0; c < clouds.size(); ++c) {
    const Eigen::MatrixXd& x = clouds[c].coords;
    if (x.rows() != m || x.cols() != 3) throw std::invalid_argument("sorted_pair_distances: clouds differ in shape");
    d.clear();
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = i + 1; j < m; ++j) d.push_back((x.row(i) - x.row(j)).norm());
    std::sort(d.begin(), d.end());
    for (std::size_t k = 0; k < d.size(); ++k) out(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) = d[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser

void EgnnConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("egnn: layers must be >= 1");
  if (hidden < 1) throw std::invalid_argument("egnn: hidden must be >= 1");
  if (num_labels < 1) throw std::invalid_argument("egnn: num_labels must be >= 1");
  if (!(sigma > 0.0)) throw std::invalid_argument("egnn: sigma must be positive");
  if (!(data_variance >= 0.0)) throw std::invalid_argument("egnn: data_variance must be non-negative");
  if (!(coord_range > 0.0)) throw std::invalid_argument("egnn: coord_range must be positive");
}

namespace {

// Linear layout: embed, then eight per layer, then the two label-head layers.
// The first edge layer acts on (h_i, h_j, d2) through three blocks so that the
// h terms are multiplied per node and gathered afterwards.
enum Slot { kEdgeSrc, kEdgeDst, kEdgeDist, kEdge2, kCoord1, kCoord2, kNode1, kNode2, kSlotsPerLayer };

std::size_t slot(int layer, Slot s) { return 1 + static_cast<std::size_t>(layer) * kSlotsPerLayer + s; }

ad::Linear init_linear(Eigen::Index in, Eigen::Index out, Rng& rng) {
  ad::Linear l(in, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index j = 0; j < out; ++j)
    for (Eigen::Index i = 0; i < in; ++i) l.weight.value(i, j) = rng.uniform(-bound, bound);
  for (Eigen::Index j = 0; j < out; ++j) l.bias.value(0, j) = rng.uniform(-bound, bound);
  return l;
}

struct EdgeIndex {
  std::vector<int> src, dst;  // edge k runs from node src[k] to node dst[k]
};

EdgeIndex full_edges(Eigen::Index clouds, Eigen::Index m) {
  EdgeIndex e;
  e.src.reserve(static_cast<std::size_t>(clouds * m * (m - 1)));
  e.dst.reserve(e.src.capacity());
  for (Eigen::Index b = 0; b < clouds; ++b)
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < m; ++j)
        if (i != j) {
          e.src.push_back(static_cast<int>(b * m + i));
          e.dst.push_back(static_cast<int>(b * m + j));
        }
  return e;
}

}  // namespace

EquivariantDenoiser::EquivariantDenoiser(const EgnnConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const Eigen::Index h = config_.hidden;
  linears_.push_back(init_linear(1, h, rng));
  for (int l = 0; l < config_.layers; ++l) {
    // One fan-in bound across the three blocks of the first edge layer.
    for (Eigen::Index in : {h, h, Eigen::Index{1}}) {
      ad::Linear block = init_linear(in, h, rng);
      block.weight.value *= std::sqrt(static_cast<double>(in) / static_cast<double>(2 * h + 1));
      block.bias.value *= std::sqrt(static_cast<double>(in) / static_cast<double>(2 * h + 1)) / 3.0;
      linears_.push_back(std::move(block));
    }
    linears_.push_back(init_linear(h, h, rng));
    linears_.push_back(init_linear(h, h, rng));
    // Near-zero coordinate steps at initialization.
    ad::Linear coord_out = init_linear(h, 1, rng);
    coord_out.weight.value *= 0.01 / config_.coord_range;
    coord_out.bias.value.setZero();
    linears_.push_back(std::move(coord_out));
    linears_.push_back(init_linear(2 * h, h, rng));
    linears_.push_back(init_linear(h, h, rng));
  }
  linears_.push_back(init_linear(h, h, rng));
  linears_.push_back(init_linear(h, config_.num_labels, rng));
}

std::vector<ad::Parameter*> EquivariantDenoiser::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& l : linears_) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

Eigen::Index EquivariantDenoiser::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : linears_) n += l.weight.value.size() + l.bias.value.size();
  return n;
}

double EquivariantDenoiser::input_scale(double t) const {
  return std::sqrt((1.0 - t) * (1.0 - t) * config_.data_variance + config_.sigma * config_.sigma);
}

template <class Self>
EquivariantDenoiser::TapeOutput EquivariantDenoiser::run(Self& self, ad::Tape& tape, ad::Var coords, Eigen::Index m,
                                                         const Eigen::VectorXd& t, std::vector<LayerState>* trace) {
  const Eigen::MatrixXd& x0 = coords.value();
  require_cloud_shape(x0, m, "egnn");
  const Eigen::Index clouds = x0.rows() / m, n = x0.rows();
  if (t.size() != clouds) throw std::invalid_argument("egnn: one time per cloud required");
  if (!x0.allFinite()) throw std::invalid_argument("egnn: non-finite coordinates");
  const double off = com_deviation(x0, m);
  if (off > kComTolerance)
    throw std::invalid_argument(fmt::format("egnn: input is off the zero-CoM manifold by {:.3g}", off));

  auto lin = [&](std::size_t k, ad::Var in) {
    auto& l = self.linears_[k];
    if constexpr (std::is_const_v<Self>)
      return ad::affine(in, tape.constant(l.weight.value), tape.constant(l.bias.value));
    else
      return l(tape, in);
  };

  Eigen::VectorXd node_t(n), inv_scale(n);
  for (Eigen::Index b = 0; b < clouds; ++b) {
    node_t.segment(b * m, m).setConstant(t[b]);
    inv_scale.segment(b * m, m).setConstant(1.0 / self.input_scale(t[b]));
  }
  const EdgeIndex e = full_edges(clouds, m);
  const double inv_neighbours = 1.0 / static_cast<double>(m - 1);

  const ad::Var x_in = ad::mul_colwise(coords, tape.constant(inv_scale));
  ad::Var x = x_in;
  ad::Var h = lin(0, tape.constant(node_t));
  if (trace) trace->push_back({h.value(), x.value()});
  for (int l = 0; l < self.config_.layers; ++l) {
    const ad::Var diff = ad::sub(ad::gather_rows(x, e.src), ad::gather_rows(x, e.dst));
    const ad::Var d2 = ad::row_sq_norm(diff);
    const ad::Var pre = ad::add(ad::add(ad::gather_rows(lin(slot(l, kEdgeSrc), h), e.src),
                                        ad::gather_rows(lin(slot(l, kEdgeDst), h), e.dst)),
                                lin(slot(l, kEdgeDist), d2));
    const ad::Var msg = ad::silu(lin(slot(l, kEdge2), ad::silu(pre)));

    const ad::Var w = ad::scale(ad::tanh(lin(slot(l, kCoord2), ad::silu(lin(slot(l, kCoord1), msg)))),
                                self.config_.coord_range);
    const ad::Var dist = ad::sqrt(ad::add_scalar(d2, 1e-12));
    const ad::Var coef = ad::scale(ad::mul(w, ad::reciprocal(ad::add_scalar(dist, 1.0))), inv_neighbours);
    x = ad::add(x, ad::scatter_add_rows(ad::mul_colwise(diff, coef), e.src, n));

    const ad::Var agg = ad::scale(ad::scatter_add_rows(msg, e.src, n), inv_neighbours);
    h = ad::add(h, lin(slot(l, kNode2), ad::silu(lin(slot(l, kNode1), ad::concat_cols({h, agg})))));
    if (trace) trace->push_back({h.value(), x.value()});
  }
  const std::size_t head = slot(self.config_.layers, kEdgeSrc);
  TapeOutput out;
  out.eps = ad::center_blocks(ad::sub(x, x_in), m);
  out.logits = lin(head + 1, ad::silu(lin(head, h)));
  return out;
}

EgnnOutput EquivariantDenoiser::forward(const Eigen::MatrixXd& coords, Eigen::Index m,
                                        const Eigen::VectorXd& t) const {
  ad::Tape tape;
  const TapeOutput out = run(*this, tape, tape.constant(coords), m, t, nullptr);
  return {out.eps.value(), out.logits.value()};
}

EquivariantDenoiser::TapeOutput EquivariantDenoiser::forward(ad::Tape& tape, ad::Var coords, Eigen::Index m,
                                                             const Eigen::VectorXd& t) {
  return run(*this, tape, coords, m, t, nullptr);
}

std::vector<LayerState> EquivariantDenoiser::trace(const Eigen::MatrixXd& coords, Eigen::Index m,
                                                   const Eigen::VectorXd& t) const {
  ad::Tape tape;
  std::vector<LayerState> states;
  run(*this, tape, tape.constant(coords), m, t, &states);
  return states;
}

// ---------------------------------------------------------------------------
// Training

std::string_view to_string(LabelLoss loss) { return loss == LabelLoss::L1 ? "l1" : "cross_entropy"; }

LabelLoss parse_label_loss(std::string_view name) {
  if (name == "l1") return LabelLoss::L1;
  if (name == "cross_entropy") return LabelLoss::CrossEntropy;
  throw std::invalid_argument(fmt::format("unknown label loss '{}' (expected l1 or cross_entropy)", name));
}

void NucleationConfig::validate() const {
  if (!(t_n >= 0.0 && t_n <= 1.0)) throw std::invalid_argument("nucleation: t_n must lie in [0, 1]");
  if (!(branch_weight >= 0.0 && branch_weight <= 1.0))
    throw std::invalid_argument("nucleation: branch_weight must lie in [0, 1]");
  if (!(coord_weight >= 0.0) || !(label_weight >= 0.0))
    throw std::invalid_argument("nucleation: loss weights must be non-negative");
}

double draw_nucleation_time(const NucleationConfig& config, Rng& rng) {
  // A zero-length branch has no density; its mass goes to the other branch.
  const double w = config.t_n == 0.0 ? 0.0 : config.t_n == 1.0 ? 1.0 : config.branch_weight;
  const bool low = rng.uniform() < w;
  const double u = rng.uniform();
  return low ? config.t_n * u : config.t_n + (1.0 - config.t_n) * u;
}

CloudLoss cloud_loss_and_grads(EquivariantDenoiser& model, const std::vector<const PointCloud*>& batch,
                               const Eigen::VectorXd& t, const Eigen::MatrixXd& eps, const NucleationConfig& config) {
  config.validate();
  if (batch.empty()) throw std::invalid_argument("cloud_loss: empty batch");
  if (static_cast<Eigen::Index>(batch.size()) != t.size()) throw std::invalid_argument("cloud_loss: one t per cloud");
  const Eigen::Index m = batch.front()->coords.rows();
  const Eigen::Index n = m * static_cast<Eigen::Index>(batch.size());
  if (eps.rows() != n || eps.cols() != 3) throw std::invalid_argument("cloud_loss: noise shape mismatch");
  const int k = model.config().num_labels;
  const double sigma = model.config().sigma;

  Eigen::MatrixXd xt(n, 3), onehot = Eigen::MatrixXd::Zero(n, k);
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(n);
  CloudLoss result;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PointCloud& c = *batch[b];
    if (c.coords.rows() != m || c.coords.cols() != 3) throw std::invalid_argument("cloud_loss: clouds differ in shape");
    if (static_cast<Eigen::Index>(c.labels.size()) != m) throw std::invalid_argument("cloud_loss: labels required");
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * m;
    const double tb = t[static_cast<Eigen::Index>(b)];
    xt.middleRows(r0, m) = (1.0 - tb) * c.coords + sigma * eps.middleRows(r0, m);
    const bool active = tb <= config.t_n;
    result.label_active += active;
    for (Eigen::Index i = 0; i < m; ++i) {
      const int lab = c.labels[static_cast<std::size_t>(i)];
      if (lab < 0 || lab >= k) throw std::invalid_argument("cloud_loss: label out of range");
      onehot(r0 + i, lab) = 1.0;
      mask[r0 + i] = active ? 1.0 : 0.0;
    }
  }

  ad::Tape tape;
  const auto out = model.forward(tape, tape.constant(xt), m, t);
  const double inv_n = 1.0 / static_cast<double>(n);
  const ad::Var coord = ad::scale(ad::sum(ad::row_sq_norm(ad::sub(tape.constant(eps), out.eps))), inv_n);
  ad::Var per_point;
  if (config.label_loss == LabelLoss::L1) {
    per_point = ad::matmul(ad::abs(ad::sub(tape.constant(onehot), out.logits)), tape.constant(Eigen::VectorXd::Ones(k)));
  } else {
    per_point = ad::scale(ad::matmul(ad::mul(tape.constant(onehot), ad::log_softmax_rows(out.logits)),
                                     tape.constant(Eigen::VectorXd::Ones(k))),
                          -1.0);
  }
  const ad::Var label = ad::scale(ad::sum(ad::mul(per_point, tape.constant(mask))), inv_n);
  const ad::Var total = ad::add(ad::scale(coord, config.coord_weight), ad::scale(label, config.label_weight));
  result.total = total.value()(0, 0);
  result.coord = coord.value()(0, 0);
  result.label = label.value()(0, 0);
  if (!std::isfinite(result.total)) throw TrainingDivergence("cloud_loss: non-finite loss");
  tape.backward(total);
  return result;
}

// ---------------------------------------------------------------------------
// Shapes

std::string_view to_string(Shape shape) {
  switch (shape) {
    case Shape::Cuboctahedron: return "cuboctahedron";
    case Shape::Icosahedron: return "icosahedron";
    case Shape::HexagonalPrism: return "hexagonal_prism";
  }
  return "?";
}

Shape parse_shape(std::string_view name) {
  for (Shape s : {Shape::Cuboctahedron, Shape::Icosahedron, Shape::HexagonalPrism})
    if (name == to_string(s)) return s;
  throw std::invalid_argument(
      fmt::format("unknown shape '{}' (expected cuboctahedron, icosahedron or hexagonal_prism)", name));
}

PointCloud shape_template(Shape shape) {
  std::vector<Eigen::Vector3d> shell;
  switch (shape) {
    case Shape::Cuboctahedron:
      for (double a : {-1.0, 1.0})
        for (double b : {-1.0, 1.0}) {
          shell.emplace_back(a, b, 0.0);
          shell.emplace_back(a, 0.0, b);
          shell.emplace_back(0.0, a, b);
        }
      break;
    case Shape::Icosahedron: {
      const double phi = std::numbers::phi;
      for (double a : {-1.0, 1.0})
        for (double b : {-phi, phi}) {
          shell.emplace_back(0.0, a, b);
          shell.emplace_back(a, b, 0.0);
          shell.emplace_back(b, 0.0, a);
        }
      break;
    }
    case Shape::HexagonalPrism:
      for (double z : {-0.5, 0.5})
        for (int k = 0; k < 6; ++k) {
          const double a = k * std::numbers::pi / 3.0;
          shell.emplace_back(std::cos(a), std::sin(a), z);
        }
      break;
  }
  PointCloud c;
  c.coords = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(shell.size()) + 1, 3);
  c.labels.assign(shell.size() + 1, 1 + static_cast<int>(shape));
  c.labels[0] = 0;
  for (std::size_t i = 0; i < shell.size(); ++i)
    c.coords.row(static_cast<Eigen::Index>(i) + 1) = shell[i].normalized().transpose();
  return c;
}

std::vector<PointCloud> make_shape_dataset(const std::vector<Shape>& shapes, Eigen::Index count, double jitter,
                                           std::uint64_t seed) {
  if (shapes.empty()) throw std::invalid_argument("shape dataset: no shapes");
  if (count < 1) throw std::invalid_argument("shape dataset: count must be >= 1");
  if (!(jitter >= 0.0)) throw std::invalid_argument("shape dataset: jitter must be non-negative");
  std::vector<PointCloud> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Eigen::Index i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    PointCloud c = shape_template(shapes[static_cast<std::size_t>(i) % shapes.size()]);
    const Eigen::Matrix3d r = random_orthogonal(rng);
    c.coords = project_com(rotate(c.coords, r) + jitter * rng.normal_matrix(c.coords.rows(), 3));
    out.push_back(std::move(c));
  }
  return out;
}

void CloudTrainConfig::validate() const {
  if (batch < 1) throw std::invalid_argument("train-cloud: batch must be >= 1");
  if (steps < 0) throw std::invalid_argument("train-cloud: steps must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("train-cloud: lr must be positive");
  if (!(sigma > 0.0)) throw std::invalid_argument("train-cloud: sigma must be positive");
  nucleation.validate();
}

CloudTrainResult train_cloud(EquivariantDenoiser& model, const std::vector<PointCloud>& data,
                             const CloudTrainConfig& config, const std::function<void(int, const CloudLoss&)>& on_step) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train-cloud: empty dataset");
  if (config.sigma != model.config().sigma)
    throw std::invalid_argument("train-cloud: sigma differs from the model's input scaling sigma");
  const Eigen::Index m = data.front().coords.rows();
  Adam adam(model.parameters(), {config.lr});
  CloudTrainResult result;
  std::vector<const PointCloud*> batch(static_cast<std::size_t>(config.batch));
  Eigen::VectorXd t(config.batch);
  Eigen::MatrixXd eps(config.batch * m, 3);
  for (int step = 0; step < config.steps; ++step) {
    Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(step));
    for (Eigen::Index b = 0; b < config.batch; ++b) {
      batch[static_cast<std::size_t>(b)] = &data[rng.below(data.size())];
      t[b] = draw_nucleation_time(config.nucleation, rng);
      eps.middleRows(b * m, m) = sample_com_gaussian(m, 1.0, rng);
    }
    adam.zero_grad();
    const CloudLoss loss = cloud_loss_and_grads(model, batch, t, eps, config.nucleation);
    if (loss.total > config.divergence_threshold)
      throw TrainingDivergence(
          fmt::format("train-cloud: loss {} exceeded {} at step {}", loss.total, config.divergence_threshold, step));
    adam.step();
    result.loss.push_back(loss.total);
    result.coord_loss.push_back(loss.coord);
    result.label_loss.push_back(loss.label);
    result.clouds_seen += config.batch;
    result.label_active += loss.label_active;
    if (on_step) on_step(step, loss);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sampling

CloudModel cloud_model(const EquivariantDenoiser& model) {
  CloudModel cm;
  cm.eps = [&model](const Eigen::MatrixXd& x, Eigen::Index m, double t) {
    return model.forward(x, m, Eigen::VectorXd::Constant(x.rows() / m, t)).eps;
  };
  cm.logits = [&model](const Eigen::MatrixXd& x, Eigen::Index m) {
    return model.forward(x, m, Eigen::VectorXd::Zero(x.rows() / m)).logits;
  };
  return cm;
}

void CloudSamplerConfig::validate() const {
  if (steps < 2) throw std::invalid_argument("sample-cloud: steps must be >= 2");
  if (!(sigma > 0.0)) throw std::invalid_argument("sample-cloud: sigma must be positive");
  if (!(nu >= 0.0)) throw std::invalid_argument("sample-cloud: nu must be non-negative");
  if (chains_per_batch < 1) throw std::invalid_argument("sample-cloud: chains_per_batch must be >= 1");
  if (!(divergence_bound > 0.0)) throw std::invalid_argument("sample-cloud: divergence_bound must be positive");
  if (noise_rotation) {
    const double err = (*noise_rotation * noise_rotation->transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (err > 1e-12) throw std::invalid_argument("sample-cloud: noise_rotation is not orthogonal");
  }
}

CloudSample sample_cloud(const CloudModel& model, Eigen::Index m, Eigen::Index count, const CloudSamplerConfig& config) {
  config.validate();
  if (m < 2) throw std::invalid_argument("sample-cloud: M must be >= 2");
  if (count < 1) throw std::invalid_argument("sample-cloud: count must be >= 1");
  if (!model.eps || !model.logits) throw std::invalid_argument("sample-cloud: incomplete model");
  const int steps = config.steps;
  const double dt = 1.0 / steps;
  auto noise = [&](Rng& rng) {
    Eigen::MatrixXd e = sample_com_gaussian(m, 1.0, rng);
    return config.noise_rotation ? rotate(e, *config.noise_rotation) : e;
  };

  CloudSample out;
  out.clouds.reserve(static_cast<std::size_t>(count));
  long coord_rows = 0, label_rows = 0;
  for (Eigen::Index c0 = 0; c0 < count; c0 += config.chains_per_batch) {
    const Eigen::Index chains = std::min(config.chains_per_batch, count - c0);
    std::vector<Rng> rngs;
    Eigen::MatrixXd x(chains * m, 3);
    for (Eigen::Index c = 0; c < chains; ++c) {
      rngs.push_back(Rng::stream(config.seed, static_cast<std::uint64_t>(c0 + c)));
      x.middleRows(c * m, m) = config.sigma * noise(rngs.back());
    }
    out.max_com_deviation = std::max(out.max_com_deviation, com_deviation(x, m));
    for (int i = steps - 1; i >= 1; --i) {
      const double t = static_cast<double>(i) / steps;
      const Eigen::MatrixXd eps = model.eps(x, m, t);
      if (eps.rows() != x.rows() || eps.cols() != 3) throw std::runtime_error("sample-cloud: model output shape");
      coord_rows += x.rows();
      x = project_com_blocks((1.0 - t + dt) / (1.0 - t) * (x - config.sigma * eps), m);
      if (i > 1) {
        const double s = annealed_noise_scale(t, config.nu, config.sigma);
        for (Eigen::Index c = 0; c < chains; ++c) x.middleRows(c * m, m) += s * noise(rngs[static_cast<std::size_t>(c)]);
      }
      if (!x.allFinite() || x.cwiseAbs().maxCoeff() > config.divergence_bound)
        throw DivergenceError(fmt::format("sample-cloud: state left the bound {} at step {}", config.divergence_bound, i));
      out.max_com_deviation = std::max(out.max_com_deviation, com_deviation(x, m));
    }
    const Eigen::MatrixXd logits = model.logits(x, m);
    if (logits.rows() != x.rows()) throw std::runtime_error("sample-cloud: label head output shape");
    label_rows += x.rows();
    for (Eigen::Index c = 0; c < chains; ++c) {
      PointCloud pc;
      pc.coords = x.middleRows(c * m, m);
      for (Eigen::Index i = 0; i < m; ++i) {
        Eigen::Index best = 0;
        logits.row(c * m + i).maxCoeff(&best);
        pc.labels.push_back(static_cast<int>(best));
      }
      out.clouds.push_back(std::move(pc));
    }
  }
  out.coordinate_evals = coord_rows / (m * count);
  out.label_evals = label_rows / (m * count);
  return out;
}

// ---------------------------------------------------------------------------
// Invariance test

InvarianceReport invariance_statistic_test(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double alpha,
                                           int permutations, std::uint64_t seed) {
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("invariance test: need at least two rows per set");
  if (a.cols() != b.cols()) throw std::invalid_argument("invariance test: feature dimensions differ");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("invariance test: alpha must lie in (0, 1)");
  if (permutations < 1) throw std::invalid_argument("invariance test: permutations must be >= 1");
  const Eigen::Index na = a.rows(), n = a.rows() + b.rows();
  Eigen::MatrixXd pooled(n, a.cols());
  pooled << a, b;
  const Eigen::VectorXd sq = pooled.rowwise().squaredNorm();
  Eigen::MatrixXd d = -2.0 * pooled * pooled.transpose();
  d.colwise() += sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(0.0).cwiseSqrt();

  // Energy distance from group membership: only the within-group sums change.
  auto statistic = [&](const std::vector<char>& in_a) {
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = d(i, j);
        if (in_a[static_cast<std::size_t>(i)] && in_a[static_cast<std::size_t>(j)]) saa += v;
        else if (!in_a[static_cast<std::size_t>(i)] && !in_a[static_cast<std::size_t>(j)]) sbb += v;
        else sab += v;
      }
    const auto fa = static_cast<double>(na), fb = static_cast<double>(n - na);
    return sab / (fa * fb) - saa / (fa * fa) - sbb / (fb * fb);
  };

  std::vector<char> member(static_cast<std::size_t>(n), 0);
  std::fill(member.begin(), member.begin() + na, 1);
  InvarianceReport rep;
  rep.alpha = alpha;
  rep.permutations = permutations;
  rep.statistic = statistic(member);
  Rng rng(seed);
  int exceed = 0;
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(member.begin(), member.end(), rng.engine());
    exceed += statistic(member) >= rep.statistic - 1e-12 * std::abs(rep.statistic);
  }
  rep.p_value = (1.0 + exceed) / (1.0 + permutations);
  rep.reject = rep.p_value <= alpha;
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

void write_clouds(std::ostream& out, const std::vector<PointCloud>& clouds) {
  out << "sldm-pointcloud 1\ncount " << clouds.size() << '\n';
  for (const PointCloud& c : clouds) {
    const bool labelled = !c.labels.empty();
    if (c.coords.cols() != 3) throw std::invalid_argument("write_clouds: coordinates must have 3 columns");
    if (labelled && static_cast<Eigen::Index>(c.labels.size()) != c.coords.rows())
      throw std::invalid_argument("write_clouds: one label per point required");
    out << "cloud " << c.coords.rows() << ' ' << (labelled ? 1 : 0) << '\n';
    for (Eigen::Index i = 0; i < c.coords.rows(); ++i) {
      out << fmt::format("{:.17g} {:.17g} {:.17g}", c.coords(i, 0), c.coords(i, 1), c.coords(i, 2));
      if (labelled) out << ' ' << c.labels[static_cast<std::size_t>(i)];
      out << '\n';
    }
  }
}

std::vector<PointCloud> read_clouds(std::istream& in) {
  auto fail = [](const std::string& what) { throw std::runtime_error("read_clouds: " + what); };
  std::string magic, word;
  int version = 0;
  std::size_t count = 0;
  if (!(in >> magic >> version) || magic != "sldm-pointcloud") fail("missing header");
  if (version != 1) fail(fmt::format("unsupported version {}", version));
  if (!(in >> word >> count) || word != "count") fail("missing count");
  std::vector<PointCloud> clouds;
  for (std::size_t k = 0; k < count; ++k) {
    Eigen::Index m = 0;
    int labelled = 0;
    if (!(in >> word >> m >> labelled) || word != "cloud" || m < 1) fail(fmt::format("bad header for cloud {}", k));
    PointCloud c;
    c.coords.resize(m, 3);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (!(in >> c.coords(i, 0) >> c.coords(i, 1) >> c.coords(i, 2))) fail(fmt::format("bad row {} of cloud {}", i, k));
      if (labelled) {
        int lab = 0;
        if (!(in >> lab)) fail(fmt::format("missing label in row {} of cloud {}", i, k));
        c.labels.push_back(lab);
      }
    }
    clouds.push_back(std::move(c));
  }
  return clouds;
}

nlohmann::json to_json(const CloudTrainConfig& c) {
  return {{"batch", c.batch},
          {"steps", c.steps},
          {"lr", c.lr},
          {"sigma", c.sigma},
          {"seed", c.seed},
          {"t_n", c.nucleation.t_n},
          {"branch_weight", c.nucleation.branch_weight},
          {"coord_weight", c.nucleation.coord_weight},
          {"label_weight", c.nucleation.label_weight},
          {"label_loss", to_string(c.nucleation.label_loss)}};
}

nlohmann::json checkpoint_json(const EquivariantDenoiser& model, const CloudTrainConfig& config) {
  const EgnnConfig& c = model.config();
  nlohmann::json params = nlohmann::json::array();
  for (const auto& l : model.linears())
    params.push_back({{"in", l.in()}, {"out", l.out()}, {"weight", matrix_json(l.weight.value)},
                      {"bias", matrix_json(l.bias.value)}});
  return {{"format", "sldm-egnn"},
          {"version", 1},
          {"config",
           {{"layers", c.layers},
            {"hidden", c.hidden},
            {"num_labels", c.num_labels},
            {"sigma", c.sigma},
            {"data_variance", c.data_variance},
            {"coord_range", c.coord_range}}},
          {"train", to_json(config)},
          {"parameters", params}};
}

EquivariantDenoiser egnn_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "sldm-egnn") throw std::runtime_error("checkpoint: not an equivariant denoiser checkpoint");
    if (j.at("version") != 1) throw std::runtime_error("checkpoint: unsupported version");
    const auto& jc = j.at("config");
    EgnnConfig c;
    c.layers = jc.at("layers").get<int>();
    c.hidden = jc.at("hidden").get<int>();
    c.num_labels = jc.at("num_labels").get<int>();
    c.sigma = jc.at("sigma").get<double>();
    c.data_variance = jc.at("data_variance").get<double>();
    c.coord_range = jc.at("coord_range").get<double>();
    EquivariantDenoiser model(c, 0);
    const auto& params = j.at("parameters");
    if (params.size() != model.linears().size()) throw std::runtime_error("checkpoint: layer count mismatch");
    for (std::size_t l = 0; l < params.size(); ++l) {
      auto& layer = model.linears()[l];
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
