#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "sldm/autodiff.hpp"
#include "sldm/rng.hpp"

namespace sldm {

/// M points in three dimensions with optional per-point labels.
struct PointCloud {
  Eigen::MatrixXd coords;  // M x 3
  std::vector<int> labels;  // empty or one per point
};

/// eps' ~ N(0, scale^2 I) on M x 3, minus its per-axis mean.
Eigen::MatrixXd sample_com_gaussian(Eigen::Index m, double scale, Rng& rng);
Eigen::MatrixXd sample_com_gaussian(Eigen::Index m, double scale, std::uint64_t seed);

Eigen::MatrixXd project_com(const Eigen::MatrixXd& coords);
/// Projects each consecutive block of `m` rows on its own.
Eigen::MatrixXd project_com_blocks(const Eigen::MatrixXd& coords, Eigen::Index m);
/// Largest |per-axis mean| over the blocks of `m` rows.
double com_deviation(const Eigen::MatrixXd& coords, Eigen::Index m);

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian
/// matrix; `proper` flips one column when needed so that det = +1.
Eigen::Matrix3d random_orthogonal(Rng& rng, bool proper = true);
/// Applies R to every row: x_i -> R x_i.
Eigen::MatrixXd rotate(const Eigen::MatrixXd& coords, const Eigen::Matrix3d& r);

/// Pairwise distances of each cloud, sorted ascending; one row per cloud.
Eigen::MatrixXd sorted_pair_distances(const std::vector<PointCloud>& clouds);

struct EgnnConfig {
  int layers = 3;
  int hidden = 32;
  int num_labels = 4;
  /// Inputs are divided by sqrt((1 - t)^2 data_variance + sigma^2), the
  /// standard deviation of x_t per coordinate.
  double sigma = 0.05;
  double data_variance = 0.3;
  /// phi_x = coord_range * tanh(.)
  double coord_range = 10.0;

  void validate() const;
};

/// Snapshot after the embedding and after each message-passing layer.
struct LayerState {
  Eigen::MatrixXd h;  // node features, N x hidden
  Eigen::MatrixXd x;  // coordinates in scaled units, N x 3
};

struct EgnnOutput {
  Eigen::MatrixXd eps;     // N x 3, zero mean per cloud
  Eigen::MatrixXd logits;  // N x num_labels
};

/// E(3)-equivariant message-passing denoiser on fully connected clouds.
///   m_ij = phi_e(h_i, h_j, |x_i - x_j|^2)
///   x_i += sum_j (x_i - x_j) phi_x(m_ij) / ((d_ij + 1)(M - 1)), |phi_x| < coord_range
///   h_i += phi_h(h_i, sum_j m_ij / (M - 1))
/// eps_hat is the total coordinate displacement, projected to zero CoM;
/// logits come from a head on the final node features.
class EquivariantDenoiser {
 public:
  EquivariantDenoiser() = default;
  EquivariantDenoiser(const EgnnConfig& config, std::uint64_t seed);

  const EgnnConfig& config() const { return config_; }
  std::vector<ad::Linear>& linears() { return linears_; }
  const std::vector<ad::Linear>& linears() const { return linears_; }
  std::vector<ad::Parameter*> parameters();
  Eigen::Index parameter_count() const;
  double input_scale(double t) const;

  /// `coords` stacks clouds of `m` points; `t` holds one time per cloud.
  /// Throws std::invalid_argument if a cloud is off the zero-CoM manifold by
  /// more than 1e-6.
  EgnnOutput forward(const Eigen::MatrixXd& coords, Eigen::Index m, const Eigen::VectorXd& t) const;

  struct TapeOutput {
    ad::Var eps;
    ad::Var logits;
  };
  TapeOutput forward(ad::Tape& tape, ad::Var coords, Eigen::Index m, const Eigen::VectorXd& t);

  std::vector<LayerState> trace(const Eigen::MatrixXd& coords, Eigen::Index m, const Eigen::VectorXd& t) const;

 private:
  template <class Self>
  static TapeOutput run(Self& self, ad::Tape& tape, ad::Var coords, Eigen::Index m, const Eigen::VectorXd& t,
                        std::vector<LayerState>* trace);

  EgnnConfig config_;
  std::vector<ad::Linear> linears_;
};

enum class LabelLoss { L1, CrossEntropy };
std::string_view to_string(LabelLoss loss);
LabelLoss parse_label_loss(std::string_view name);

struct NucleationConfig {
  double t_n = 0.01;
  double branch_weight = 0.5;  // probability of drawing t from [0, t_n]
  double coord_weight = 1.0;
  double label_weight = 1.0;
  LabelLoss label_loss = LabelLoss::L1;

  void validate() const;
};

/// t ~ w U[0, t_n] + (1 - w) U[t_n, 1]; at t_n = 0 or 1 all mass goes to the
/// non-degenerate branch.
double draw_nucleation_time(const NucleationConfig& config, Rng& rng);

struct CloudLoss {
  double total = 0.0;
  double coord = 0.0;  // mean over points of ||eps - eps_hat||^2
  double label = 0.0;  // mean over all points, zero where t > t_n
  int label_active = 0;  // clouds with t <= t_n
};

/// One batch of equal-size clouds, x_t = (1 - t) x0 + sigma eps. The L1 label
/// term is sum_k |onehot_k - logit_k| per point; cross-entropy uses
/// log-softmax. Gradients are added to the model's parameters.
CloudLoss cloud_loss_and_grads(EquivariantDenoiser& model, const std::vector<const PointCloud*>& batch,
                               const Eigen::VectorXd& t, const Eigen::MatrixXd& eps, const NucleationConfig& config);

enum class Shape { Cuboctahedron, Icosahedron, HexagonalPrism };
std::string_view to_string(Shape shape);
Shape parse_shape(std::string_view name);

/// 12 shell vertices at unit circumradius plus a centre point. Label 0 is the
/// centre; shell points of the k-th shape carry label k + 1.
PointCloud shape_template(Shape shape);

/// `count` clouds cycling through `shapes`, each randomly rotated, jittered by
/// N(0, jitter^2) and projected to zero CoM.
std::vector<PointCloud> make_shape_dataset(const std::vector<Shape>& shapes, Eigen::Index count, double jitter,
                                           std::uint64_t seed);

struct CloudTrainConfig {
  Eigen::Index batch = 32;
  int steps = 2000;
  double lr = 1e-3;
  double sigma = 0.05;
  std::uint64_t seed = 0;
  NucleationConfig nucleation;
  double divergence_threshold = 1e3;

  void validate() const;
};

struct CloudTrainResult {
  std::vector<double> loss, coord_loss, label_loss;  // per step
  long clouds_seen = 0;
  long label_active = 0;
};

/// Step s draws its batch and noise from Rng::stream(seed, s).
CloudTrainResult train_cloud(EquivariantDenoiser& model, const std::vector<PointCloud>& data,
                             const CloudTrainConfig& config,
                             const std::function<void(int step, const CloudLoss&)>& on_step = {});

/// Model seen by the cloud sampler; every call evaluates all stacked clouds once.
struct CloudModel {
  std::function<Eigen::MatrixXd(const Eigen::MatrixXd& coords, Eigen::Index m, double t)> eps;
  std::function<Eigen::MatrixXd(const Eigen::MatrixXd& coords, Eigen::Index m)> logits;
};
CloudModel cloud_model(const EquivariantDenoiser& model);

struct CloudSamplerConfig {
  int steps = 100;
  double sigma = 0.05;
  double nu = 0.5;
  std::uint64_t seed = 0;
  /// Applied to the initial draw and to every injected noise.
  std::optional<Eigen::Matrix3d> noise_rotation;
  Eigen::Index chains_per_batch = 256;
  /// DivergenceError once any coordinate exceeds this in magnitude.
  double divergence_bound = 1e6;

  void validate() const;
};

struct CloudSample {
  std::vector<PointCloud> clouds;
  long coordinate_evals = 0;  // per chain
  long label_evals = 0;       // per chain
  double max_com_deviation = 0.0;  // over every intermediate state
};

/// x_1 ~ sigma N_CoM; for i = T-1..1: x <- (1 - t + dt)/(1 - t) (x - sigma eps_hat),
/// project, then add t^nu sqrt(2) sigma N_CoM unless i = 1; labels from the
/// head at t = 0. Chain c uses Rng::stream(seed, c).
CloudSample sample_cloud(const CloudModel& model, Eigen::Index m, Eigen::Index count,
                         const CloudSamplerConfig& config);

struct InvarianceReport {
  double statistic = 0.0;  // energy distance between the two sets of rows
  double p_value = 1.0;
  int permutations = 0;
  double alpha = 0.01;
  bool reject = false;
};

/// Two-sample permutation test with the energy distance between rows of
/// rotation-invariant features (e.g. sorted pair distances).
InvarianceReport invariance_statistic_test(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double alpha = 0.01,
                                           int permutations = 199, std::uint64_t seed = 0);

/// Text format: "sldm-pointcloud 1", "count N", then per cloud "cloud M L"
/// (L = 1 with labels) followed by M rows "x y z [label]".
void write_clouds(std::ostream& out, const std::vector<PointCloud>& clouds);
std::vector<PointCloud> read_clouds(std::istream& in);

nlohmann::json to_json(const CloudTrainConfig& config);
nlohmann::json checkpoint_json(const EquivariantDenoiser& model, const CloudTrainConfig& config);
EquivariantDenoiser egnn_from_json(const nlohmann::json& checkpoint);

}  // namespace sldm
