#pragma once

// Benchmark reports (CD, EMD, F-score per task and level), report
// comparison, and task-token analysis (PCA projection, k-means purity).

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "deformpic/dataset.hpp"
#include "deformpic/model.hpp"
#include "deformpic/train.hpp"

namespace deformpic::eval {

/// Maps one example to a predicted query-target cloud.
using Predictor = std::function<PointCloud(const train::Example&)>;

/// Flattened m*k-point prediction of a trained model; `net` must outlive the predictor.
Predictor model_predictor(const model::Model<float>& net);
/// Returns the ground-truth query target.
Predictor oracle_predictor();
/// Returns the query input unchanged.
Predictor identity_predictor();

enum class Subset : std::uint8_t { all = 0, heldout = 1, train = 2 };

std::string_view subset_name(Subset s);
Subset parse_subset(std::string_view name);

/// Dataset record indices in the subset, ascending.
std::vector<std::size_t> select_records(std::size_t record_count, Subset subset);

struct EvalConfig {
  Subset subset = Subset::heldout;
  /// Both clouds are subsampled to min(emd_points, |pred|, |target|) for EMD.
  std::size_t emd_points = 256;
  std::uint64_t seed = 0;
  double tau = 0.01;
  double tau_strict = 0.001;

  void validate() const;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

nlohmann::ordered_json to_json(const EvalConfig& cfg);
EvalConfig eval_config_from_json(const nlohmann::ordered_json& j);

struct SampleMetrics {
  std::size_t record = 0;
  Task task = Task::reconstruction;
  int level = 1;
  double cd = 0.0;
  double emd = 0.0;
  double f = 0.0;         // F-score at tau
  double f_strict = 0.0;  // F-score at tau_strict
};

/// EMD subsample of `n` out of `size` points, keyed on (seed, record, size) so
/// equal-size clouds of one record share their index draw.
std::vector<std::size_t> emd_subsample(std::size_t size, std::size_t n, std::size_t record, std::uint64_t seed);

/// Metrics of one prediction against the full query target.
SampleMetrics score_sample(const PointCloud& prediction, const InContextSample& sample, std::size_t record,
                           const EvalConfig& cfg);

/// Mean metrics of one (task, level) cell; level 0 marks a task average and
/// `all` the average over tasks. CD and EMD are scaled by 1000.
struct Cell {
  Task task = Task::reconstruction;
  int level = 0;
  bool all = false;
  std::size_t count = 0;
  double cd = 0.0;
  double emd = 0.0;
  double f = 0.0;
  double f_strict = 0.0;

  friend bool operator==(const Cell&, const Cell&) = default;
};

struct MetricsReport {
  std::string model_label;
  std::string model_fingerprint;
  std::string dataset_fingerprint;
  EvalConfig config;
  std::vector<Cell> cells;  // non-empty (task, level) cells, task-major
  std::vector<Cell> task_means;  // mean of each task's cells
  Cell overall;                  // mean of the task means

  /// Fingerprint of the evaluation settings.
  std::string config_fingerprint() const;
  const Cell* find(Task task, int level) const;
  const Cell* task_mean(Task task) const;
};

/// Aggregates per-sample metrics (in any order) into a report.
MetricsReport aggregate(const std::vector<SampleMetrics>& samples, const EvalConfig& cfg);

/// Throws MismatchError when the dataset was patched for a different (m, k).
void check_compatible(const model::ModelConfig& cfg, const dataset::DatasetManifest& manifest);

/// Scores every record of the configured subset. Records are evaluated in
/// parallel and aggregated in index order.
MetricsReport evaluate(const Predictor& predictor, const dataset::Dataset& ds, const model::ModelConfig& patch_cfg,
                       const EvalConfig& cfg, int threads = 1);

/// Hex CRC32 over the model config and parameters.
std::string checkpoint_fingerprint(const train::Checkpoint& ckpt);

std::string report_csv(const MetricsReport& report);
nlohmann::ordered_json report_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::ordered_json& j);

// --- comparison -------------------------------------------------------------------------------

/// Per-metric sign: +1 when A is better, -1 when B is better, 0 on a tie.
struct CellDelta {
  Cell key;  // task, level, all; counts of A
  double cd = 0.0;  // A - B
  double emd = 0.0;
  double f = 0.0;
  double f_strict = 0.0;
  int cd_sign = 0;
  int emd_sign = 0;
  int f_sign = 0;
  int f_strict_sign = 0;
};

struct SignTally {
  int wins = 0;
  int losses = 0;
  int ties = 0;
};

struct Comparison {
  std::string label_a;
  std::string label_b;
  std::string dataset_fingerprint;
  std::vector<CellDelta> cells;       // per (task, level)
  std::vector<CellDelta> task_means;  // per task average
  CellDelta overall;
  /// Over the per-level cells, from A's point of view.
  SignTally cd, emd, f, f_strict;
};

/// Throws MismatchError unless both reports cover the same dataset, settings and cells.
Comparison compare(const MetricsReport& a, const MetricsReport& b);

std::string comparison_csv(const Comparison& c);
nlohmann::ordered_json comparison_json(const Comparison& c);
/// One line per metric, e.g. "cd: A better in 12/15 cells, worse in 3, tied in 0".
std::string sign_summary(const Comparison& c);

// --- task features ------------------------------------------------------------------------------

struct FeatureRow {
  std::size_t record = 0;
  Task task = Task::reconstruction;
  int level = 1;
  std::vector<double> feature;
};

struct TaskFeatureSet {
  std::vector<FeatureRow> rows;

  Eigen::MatrixXd matrix() const;
  std::vector<int> labels() const;  // task ids
  /// Number of distinct feature vectors (exact comparison).
  std::size_t distinct() const;
};

/// DEN task token of every example; ConfigError for variants without a DEN.
TaskFeatureSet extract_task_features(const model::Model<float>& net, const std::vector<train::Example>& examples,
                                     int threads = 1);

struct Projection {
  Eigen::MatrixXd coords;      // n x c
  Eigen::MatrixXd components;  // d x c, unit columns
  Eigen::VectorXd mean;        // d
  Eigen::VectorXd explained;   // c, fraction of total variance
};

/// Top principal components of the row covariance. Each component's
/// largest-magnitude loading is made positive; rank-0 data gives zero
/// components and zero explained variance.
Projection pca_project(const Eigen::MatrixXd& x, int components = 2);

struct KMeansResult {
  std::vector<int> assignment;
  Eigen::MatrixXd centroids;
  double inertia = 0.0;
};

/// k-means++ seeding and Lloyd iterations; best inertia over `restarts`.
KMeansResult kmeans(const Eigen::MatrixXd& x, int k, std::uint64_t seed = 0, int restarts = 10);

/// Mean over non-empty clusters of the majority-label fraction.
double purity(const std::vector<int>& assignment, const std::vector<int>& labels);

/// kmeans followed by purity; ConfigError when k < 2 or there are fewer rows than k.
double cluster_purity(const Eigen::MatrixXd& x, const std::vector<int>& labels, int k, std::uint64_t seed = 0,
                      int restarts = 10);

/// CSV `task,level,f0..f{d-1}`.
std::string features_csv(const TaskFeatureSet& set);
/// CSV `task,level,x,y`.
std::string projection_csv(const TaskFeatureSet& set, const Projection& projection);

}  // namespace deformpic::eval
