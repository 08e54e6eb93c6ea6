#include "deformpic/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "deformpic/errors.hpp"
#include "deformpic/geometry.hpp"
#include "deformpic/io.hpp"
#include "deformpic/parallel.hpp"
#include "deformpic/rng.hpp"

namespace deformpic::eval {

namespace {

using json = nlohmann::ordered_json;

constexpr std::uint64_t kEmdKey = 0x454D44;
constexpr std::uint64_t kKMeansKey = 0x4B4D;
constexpr int kMaxLloydIterations = 300;

std::string hex_crc(const std::string& text) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x",
                dataset::crc32(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return buf;
}

std::string level_text(const Cell& c) { return c.level == 0 ? "avg" : std::to_string(c.level); }

std::string task_text(const Cell& c) { return c.all ? "all" : std::string(task_tag(c.task)); }

Cell mean_of(const std::vector<Cell>& cells) {
  Cell out;
  if (cells.empty()) return out;
  for (const Cell& c : cells) {
    out.count += c.count;
    out.cd += c.cd;
    out.emd += c.emd;
    out.f += c.f;
    out.f_strict += c.f_strict;
  }
  const double n = static_cast<double>(cells.size());
  out.cd /= n;
  out.emd /= n;
  out.f /= n;
  out.f_strict /= n;
  return out;
}

json cell_json(const Cell& c) {
  return {{"task", task_text(c)}, {"level", level_text(c)}, {"count", c.count}, {"cd_x1000", c.cd},
          {"emd_x1000", c.emd},   {"f", c.f},               {"f_strict", c.f_strict}};
}

Cell cell_from_json(const json& j) {
  Cell c;
  const auto task = j.at("task").get<std::string>();
  c.all = task == "all";
  if (!c.all) c.task = parse_task(task);
  const auto level = j.at("level").get<std::string>();
  c.level = level == "avg" ? 0 : std::stoi(level);
  c.count = j.at("count").get<std::size_t>();
  c.cd = j.at("cd_x1000").get<double>();
  c.emd = j.at("emd_x1000").get<double>();
  c.f = j.at("f").get<double>();
  c.f_strict = j.at("f_strict").get<double>();
  return c;
}

int lower_better(double a, double b) { return a < b ? 1 : (a > b ? -1 : 0); }

CellDelta delta_of(const Cell& a, const Cell& b) {
  CellDelta d;
  d.key = a;
  d.cd = a.cd - b.cd;
  d.emd = a.emd - b.emd;
  d.f = a.f - b.f;
  d.f_strict = a.f_strict - b.f_strict;
  d.cd_sign = lower_better(a.cd, b.cd);
  d.emd_sign = lower_better(a.emd, b.emd);
  d.f_sign = -lower_better(a.f, b.f);
  d.f_strict_sign = -lower_better(a.f_strict, b.f_strict);
  return d;
}

void tally(SignTally& t, int sign) {
  if (sign > 0) ++t.wins;
  else if (sign < 0) ++t.losses;
  else ++t.ties;
}

json delta_json(const CellDelta& d) {
  return {{"task", task_text(d.key)},
          {"level", level_text(d.key)},
          {"delta_cd_x1000", d.cd},
          {"delta_emd_x1000", d.emd},
          {"delta_f", d.f},
          {"delta_f_strict", d.f_strict},
          {"sign_cd", d.cd_sign},
          {"sign_emd", d.emd_sign},
          {"sign_f", d.f_sign},
          {"sign_f_strict", d.f_strict_sign}};
}

json tally_json(const SignTally& t) { return {{"wins", t.wins}, {"losses", t.losses}, {"ties", t.ties}}; }

std::string tau_text(double tau) { return io::format_double(tau); }

}  // namespace

// --- predictors ---------------------------------------------------------------------------------

Predictor model_predictor(const model::Model<float>& net) {
  return [&net](const train::Example& ex) {
    const auto pred = train::predict(net, ex);
    return PointCloud(std::vector<float>(pred.data().begin(), pred.data().end()));
  };
}

Predictor oracle_predictor() {
  return [](const train::Example& ex) { return ex.sample.query_target; };
}

Predictor identity_predictor() {
  return [](const train::Example& ex) { return ex.sample.query_input; };
}

// --- configuration --------------------------------------------------------------------------------

std::string_view subset_name(Subset s) {
  switch (s) {
    case Subset::all: return "all";
    case Subset::heldout: return "heldout";
    case Subset::train: return "train";
  }
  return "?";
}

Subset parse_subset(std::string_view name) {
  for (Subset s : {Subset::all, Subset::heldout, Subset::train})
    if (subset_name(s) == name) return s;
  throw ConfigError("unknown subset '" + std::string(name) + "' (expected all, heldout or train)");
}

std::vector<std::size_t> select_records(std::size_t record_count, Subset subset) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < record_count; ++i) {
    const bool held = dataset::is_heldout(i);
    if (subset == Subset::all || (subset == Subset::heldout) == held) out.push_back(i);
  }
  return out;
}

void EvalConfig::validate() const {
  if (emd_points < 1 || emd_points > geometry::kEmdMaxPoints) {
    throw ConfigError("emd_points must lie in 1.." + std::to_string(geometry::kEmdMaxPoints));
  }
  if (!(tau > 0.0) || !(tau_strict > 0.0)) throw ConfigError("F-score thresholds must be positive");
}

json to_json(const EvalConfig& c) {
  return {{"subset", subset_name(c.subset)},
          {"emd_points", c.emd_points},
          {"seed", c.seed},
          {"tau", c.tau},
          {"tau_strict", c.tau_strict}};
}

EvalConfig eval_config_from_json(const json& j) {
  EvalConfig c;
  c.subset = parse_subset(j.at("subset").get<std::string>());
  c.emd_points = j.at("emd_points").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.tau = j.at("tau").get<double>();
  c.tau_strict = j.at("tau_strict").get<double>();
  c.validate();
  return c;
}

std::vector<std::size_t> emd_subsample(std::size_t size, std::size_t n, std::size_t record, std::uint64_t seed) {
  return Rng::keyed(seed, {kEmdKey, record, size}).sample_without_replacement(size, n);
}

// --- scoring --------------------------------------------------------------------------------------

SampleMetrics score_sample(const PointCloud& prediction, const InContextSample& sample, std::size_t record,
                           const EvalConfig& cfg) {
  const PointCloud& target = sample.query_target;
  if (prediction.empty()) throw ShapeError("empty prediction for record " + std::to_string(record));
  SampleMetrics m;
  m.record = record;
  m.task = sample.task;
  m.level = sample.level;
  m.cd = geometry::chamfer_l2(prediction, target);
  const std::size_t n = std::min({cfg.emd_points, prediction.size(), target.size()});
  m.emd = geometry::emd(prediction.select(emd_subsample(prediction.size(), n, record, cfg.seed)),
                        target.select(emd_subsample(target.size(), n, record, cfg.seed)));
  m.f = geometry::fscore(prediction, target, cfg.tau).f;
  m.f_strict = geometry::fscore(prediction, target, cfg.tau_strict).f;
  return m;
}

MetricsReport aggregate(const std::vector<SampleMetrics>& samples, const EvalConfig& cfg) {
  std::vector<const SampleMetrics*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const SampleMetrics* a, const SampleMetrics* b) { return a->record < b->record; });

  std::map<std::pair<int, int>, Cell> cells;
  for (const SampleMetrics* s : order) {
    Cell& c = cells[{static_cast<int>(s->task), s->level}];
    c.task = s->task;
    c.level = s->level;
    ++c.count;
    c.cd += s->cd;
    c.emd += s->emd;
    c.f += s->f;
    c.f_strict += s->f_strict;
  }
  MetricsReport r;
  r.config = cfg;
  std::map<int, std::vector<Cell>> by_task;
  for (auto& [key, c] : cells) {
    const double n = static_cast<double>(c.count);
    c.cd = 1000.0 * c.cd / n;
    c.emd = 1000.0 * c.emd / n;
    c.f /= n;
    c.f_strict /= n;
    r.cells.push_back(c);
    by_task[key.first].push_back(c);
  }
  for (const auto& [task, list] : by_task) {
    Cell m = mean_of(list);
    m.task = static_cast<Task>(task);
    m.level = 0;
    r.task_means.push_back(m);
  }
  r.overall = mean_of(r.task_means);
  r.overall.all = true;
  return r;
}

void check_compatible(const model::ModelConfig& cfg, const dataset::DatasetManifest& manifest) {
  if (manifest.patches != cfg.patches || manifest.patch_size != cfg.patch_size) {
    throw MismatchError("dataset is patched as (m=" + std::to_string(manifest.patches) +
                        ", k=" + std::to_string(manifest.patch_size) + ") but the model expects (m=" +
                        std::to_string(cfg.patches) + ", k=" + std::to_string(cfg.patch_size) + ")");
  }
}

MetricsReport evaluate(const Predictor& predictor, const dataset::Dataset& ds, const model::ModelConfig& patch_cfg,
                       const EvalConfig& cfg, int threads) {
  cfg.validate();
  check_compatible(patch_cfg, ds.manifest);
  const auto records = select_records(ds.records.size(), cfg.subset);
  if (records.empty()) throw ConfigError("no records in subset '" + std::string(subset_name(cfg.subset)) + "'");
  std::vector<SampleMetrics> metrics(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const std::size_t rec = records[i];
    train::Example ex;
    ex.record = rec;
    ex.sample = ds.records[rec];
    ex.patches = geometry::joint_sample(ex.sample, static_cast<std::size_t>(patch_cfg.patches),
                                        static_cast<std::size_t>(patch_cfg.patch_size));
    metrics[i] = score_sample(predictor(ex), ex.sample, rec, cfg);
  });
  MetricsReport r = aggregate(metrics, cfg);
  r.dataset_fingerprint = dataset::fingerprint(ds.manifest);
  return r;
}

std::string checkpoint_fingerprint(const train::Checkpoint& ckpt) {
  std::string text = model::to_json(ckpt.model).dump();
  std::vector<std::uint8_t> bytes;
  io::put_f32s(bytes, ckpt.params);
  text.append(bytes.begin(), bytes.end());
  return hex_crc(text);
}

std::string MetricsReport::config_fingerprint() const { return hex_crc(to_json(config).dump()); }

const Cell* MetricsReport::find(Task task, int level) const {
  for (const Cell& c : cells)
    if (c.task == task && c.level == level) return &c;
  return nullptr;
}

const Cell* MetricsReport::task_mean(Task task) const {
  for (const Cell& c : task_means)
    if (c.task == task) return &c;
  return nullptr;
}

std::string report_csv(const MetricsReport& r) {
  std::string s = "task,level,count,cd_x1000,emd_x1000,f@" + tau_text(r.config.tau) + ",f@" +
                  tau_text(r.config.tau_strict) + "\n";
  auto row = [&](const Cell& c) {
    s += task_text(c) + "," + level_text(c) + "," + std::to_string(c.count) + "," + io::format_double(c.cd) + "," +
         io::format_double(c.emd) + "," + io::format_double(c.f) + "," + io::format_double(c.f_strict) + "\n";
  };
  for (const Cell& c : r.cells) row(c);
  for (const Cell& c : r.task_means) row(c);
  row(r.overall);
  return s;
}

json report_json(const MetricsReport& r) {
  json cells = json::array(), means = json::array();
  for (const Cell& c : r.cells) cells.push_back(cell_json(c));
  for (const Cell& c : r.task_means) means.push_back(cell_json(c));
  return {{"version", 1},
          {"model", {{"label", r.model_label}, {"fingerprint", r.model_fingerprint}}},
          {"dataset_fingerprint", r.dataset_fingerprint},
          {"eval", to_json(r.config)},
          {"eval_fingerprint", r.config_fingerprint()},
          {"cells", cells},
          {"task_means", means},
          {"overall", cell_json(r.overall)}};
}

MetricsReport report_from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw FormatError("unsupported report version");
    MetricsReport r;
    r.model_label = j.at("model").at("label").get<std::string>();
    r.model_fingerprint = j.at("model").at("fingerprint").get<std::string>();
    r.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    r.config = eval_config_from_json(j.at("eval"));
    for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
    for (const auto& c : j.at("task_means")) r.task_means.push_back(cell_from_json(c));
    r.overall = cell_from_json(j.at("overall"));
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

// --- comparison -----------------------------------------------------------------------------------

Comparison compare(const MetricsReport& a, const MetricsReport& b) {
  if (a.dataset_fingerprint != b.dataset_fingerprint) {
    throw MismatchError("reports cover different datasets (" + a.dataset_fingerprint + " vs " +
                        b.dataset_fingerprint + ")");
  }
  if (!(a.config == b.config)) throw MismatchError("reports use different evaluation settings");
  if (a.cells.size() != b.cells.size() || a.task_means.size() != b.task_means.size()) {
    throw MismatchError("reports cover different cells");
  }
  Comparison c;
  c.label_a = a.model_label;
  c.label_b = b.model_label;
  c.dataset_fingerprint = a.dataset_fingerprint;
  for (const Cell& ca : a.cells) {
    const Cell* cb = b.find(ca.task, ca.level);
    if (!cb || cb->count != ca.count) throw MismatchError("reports cover different cells");
    CellDelta d = delta_of(ca, *cb);
    tally(c.cd, d.cd_sign);
    tally(c.emd, d.emd_sign);
    tally(c.f, d.f_sign);
    tally(c.f_strict, d.f_strict_sign);
    c.cells.push_back(d);
  }
  for (const Cell& ma : a.task_means) {
    const Cell* mb = b.task_mean(ma.task);
    if (!mb) throw MismatchError("reports cover different tasks");
    c.task_means.push_back(delta_of(ma, *mb));
  }
  c.overall = delta_of(a.overall, b.overall);
  return c;
}

std::string comparison_csv(const Comparison& c) {
  std::string s =
      "task,level,delta_cd_x1000,delta_emd_x1000,delta_f,delta_f_strict,sign_cd,sign_emd,sign_f,sign_f_strict\n";
  auto row = [&](const CellDelta& d) {
    s += task_text(d.key) + "," + level_text(d.key) + "," + io::format_double(d.cd) + "," +
         io::format_double(d.emd) + "," + io::format_double(d.f) + "," + io::format_double(d.f_strict) + "," +
         std::to_string(d.cd_sign) + "," + std::to_string(d.emd_sign) + "," + std::to_string(d.f_sign) + "," +
         std::to_string(d.f_strict_sign) + "\n";
  };
  for (const auto& d : c.cells) row(d);
  for (const auto& d : c.task_means) row(d);
  row(c.overall);
  return s;
}

json comparison_json(const Comparison& c) {
  json cells = json::array(), means = json::array();
  for (const auto& d : c.cells) cells.push_back(delta_json(d));
  for (const auto& d : c.task_means) means.push_back(delta_json(d));
  return {{"a", c.label_a},
          {"b", c.label_b},
          {"dataset_fingerprint", c.dataset_fingerprint},
          {"convention", "delta = a - b; sign +1 when a is better"},
          {"cells", cells},
          {"task_means", means},
          {"overall", delta_json(c.overall)},
          {"summary",
           {{"cd", tally_json(c.cd)},
            {"emd", tally_json(c.emd)},
            {"f", tally_json(c.f)},
            {"f_strict", tally_json(c.f_strict)}}}};
}

std::string sign_summary(const Comparison& c) {
  const std::size_t n = c.cells.size();
  auto line = [&](const char* name, const SignTally& t) {
    return std::string(name) + ": " + c.label_a + " better in " + std::to_string(t.wins) + "/" + std::to_string(n) +
           " cells, worse in " + std::to_string(t.losses) + ", tied in " + std::to_string(t.ties) + "\n";
  };
  return line("cd", c.cd) + line("emd", c.emd) + line("f", c.f) + line("f_strict", c.f_strict);
}

// --- task features --------------------------------------------------------------------------------

Eigen::MatrixXd TaskFeatureSet::matrix() const {
  const Eigen::Index d = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().feature.size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = rows[i].feature[static_cast<std::size_t>(j)];
  return x;
}

std::vector<int> TaskFeatureSet::labels() const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(static_cast<int>(r.task));
  return out;
}

std::size_t TaskFeatureSet::distinct() const {
  std::set<std::vector<double>> seen;
  for (const auto& r : rows) seen.insert(r.feature);
  return seen.size();
}

TaskFeatureSet extract_task_features(const model::Model<float>& net, const std::vector<train::Example>& examples,
                                     int threads) {
  const auto v = net.config().variant;
  if (model::is_mpm(v)) {
    throw ConfigError("variant " + std::string(model::variant_name(v)) + " has no task token");
  }
  TaskFeatureSet set;
  set.rows.resize(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    NoGradGuard guard;
    const auto& ex = examples[i];
    const auto t = net.task_feature(ex.patches, ex.sample.task, net.params().views());
    set.rows[i] = {ex.record, ex.sample.task, ex.sample.level, std::vector<double>(t.data().begin(), t.data().end())};
  });
  return set;
}

Projection pca_project(const Eigen::MatrixXd& x, int components) {
  if (x.rows() < 1 || components < 1 || components > x.cols()) {
    throw ConfigError("pca_project: need at least one row and 1 <= components <= columns");
  }
  Projection p;
  p.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const double total = std::max(cov.trace(), 0.0);
  const double floor = 1e-12 * total;
  p.components = Eigen::MatrixXd::Zero(x.cols(), components);
  p.explained = Eigen::VectorXd::Zero(components);
  for (int c = 0; c < components; ++c) {
    const Eigen::Index src = x.cols() - 1 - c;
    const double lambda = values(src);
    if (!(total > 0.0) || lambda <= floor) continue;
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0.0) v = -v;
    p.components.col(c) = v;
    p.explained(c) = lambda / total;
  }
  p.coords = centered * p.components;
  return p;
}

KMeansResult kmeans(const Eigen::MatrixXd& x, int k, std::uint64_t seed, int restarts) {
  const Eigen::Index n = x.rows();
  if (k < 1 || n < k) throw ConfigError("kmeans: need k >= 1 and at least k rows");
  if (restarts < 1) throw ConfigError("kmeans: restarts must be positive");
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    Rng rng = Rng::keyed(seed, {kKMeansKey, static_cast<std::uint64_t>(r)});
    Eigen::MatrixXd centroids(k, x.cols());
    centroids.row(0) = x.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd d2 = (x.rowwise() - centroids.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
      const double total = d2.sum();
      Eigen::Index pick = n - 1;
      if (total > 0.0) {
        double u = rng.uniform() * total;
        for (Eigen::Index i = 0; i < n; ++i) {
          u -= d2(i);
          if (u < 0.0) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      }
      centroids.row(c) = x.row(pick);
      d2 = d2.cwiseMin((x.rowwise() - centroids.row(c)).rowwise().squaredNorm());
    }
    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    double inertia = 0.0;
    for (int it = 0; it < kMaxLloydIterations; ++it) {
      bool changed = false;
      inertia = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        int arg = 0;
        double bestd = (x.row(i) - centroids.row(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
          const double d = (x.row(i) - centroids.row(c)).squaredNorm();
          if (d < bestd) {
            bestd = d;
            arg = c;
          }
        }
        inertia += bestd;
        if (assign[static_cast<std::size_t>(i)] != arg) {
          assign[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      if (!changed) break;
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
      std::vector<int> counts(static_cast<std::size_t>(k), 0);
      for (Eigen::Index i = 0; i < n; ++i) {
        sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
        ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
      }
      for (int c = 0; c < k; ++c)
        if (counts[static_cast<std::size_t>(c)] > 0) centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
    if (inertia < best.inertia) {
      best.assignment = assign;
      best.centroids = centroids;
      best.inertia = inertia;
    }
  }
  return best;
}

double purity(const std::vector<int>& assignment, const std::vector<int>& labels) {
  if (assignment.size() != labels.size()) throw ShapeError("purity: assignment and labels differ in length");
  std::map<int, std::map<int, int>> table;
  for (std::size_t i = 0; i < labels.size(); ++i) ++table[assignment[i]][labels[i]];
  if (table.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [cluster, counts] : table) {
    int total = 0, top = 0;
    for (const auto& [label, n] : counts) {
      total += n;
      top = std::max(top, n);
    }
    sum += static_cast<double>(top) / total;
  }
  return sum / static_cast<double>(table.size());
}

double cluster_purity(const Eigen::MatrixXd& x, const std::vector<int>& labels, int k, std::uint64_t seed,
                      int restarts) {
  if (k < 2) throw ConfigError("cluster_purity: k must be at least 2");
  if (x.rows() < k) throw ConfigError("cluster_purity: fewer rows than clusters");
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("cluster_purity: one label per row");
  return purity(kmeans(x, k, seed, restarts).assignment, labels);
}

std::string features_csv(const TaskFeatureSet& set) {
  std::string s = "task,level";
  const std::size_t d = set.rows.empty() ? 0 : set.rows.front().feature.size();
  for (std::size_t j = 0; j < d; ++j) s += ",f" + std::to_string(j);
  s += "\n";
  for (const auto& r : set.rows) {
    s += std::string(task_tag(r.task)) + "," + std::to_string(r.level);
    for (double v : r.feature) s += "," + io::format_double(v);
    s += "\n";
  }
  return s;
}

std::string projection_csv(const TaskFeatureSet& set, const Projection& p) {
  if (static_cast<std::size_t>(p.coords.rows()) != set.rows.size() || p.coords.cols() < 2) {
    throw ShapeError("projection_csv: need a 2-column projection of every row");
  }
  std::string s = "task,level,x,y\n";
  for (std::size_t i = 0; i < set.rows.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    s += std::string(task_tag(set.rows[i].task)) + "," + std::to_string(set.rows[i].level) + "," +
         io::format_double(p.coords(row, 0)) + "," + io::format_double(p.coords(row, 1)) + "\n";
  }
  return s;
}

}  // namespace deformpic::eval
