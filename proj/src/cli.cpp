#include "deformpic/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <set>
#include <thread>

#include "deformpic/dataset.hpp"
#include "deformpic/errors.hpp"
#include "deformpic/eval.hpp"
#include "deformpic/io.hpp"
#include "deformpic/model.hpp"
#include "deformpic/train.hpp"

namespace deformpic::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

constexpr const char* kConfigFooter =
    "Options may also come from a TOML file given as --config FILE, with one\n"
    "[subcommand] section; command-line flags take precedence over the file.";

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

/// What a subcommand needs besides its parsed flags.
struct Context {
  std::ostream& out;
  const std::vector<std::string>& args;
};

/// Writes the resolved options of `sub` as a reusable TOML section.
void write_resolved_config(const CLI::App& sub, const fs::path& dir) {
  io::write_text_atomic(dir / "config.toml", "[" + sub.get_name() + "]\n" + sub.config_to_str(true, false));
}

/// Timestamps and the command line; the only output that differs between reruns.
void write_run_meta(const fs::path& dir, const Context& ctx, const std::string& started,
                    std::chrono::steady_clock::time_point t0) {
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json j{{"started", started}, {"finished", utc_now()}, {"elapsed_seconds", seconds}, {"args", ctx.args}};
  io::write_text_atomic(dir / "run.meta", j.dump(2) + "\n");
}

/// Applies a preset value unless the flag was set on the command line or in the config file.
/// The option default is updated too, so the persisted config shows the value used.
template <typename T>
void preset_unless_given(CLI::App& sub, const std::string& flag, const T& value) {
  auto* opt = sub.get_option(flag);
  if (opt->count() == 0) opt->default_val(value);
}

// --- gen-data -------------------------------------------------------------------------------------

struct GenDataFlags {
  std::string out;
  int samples_per_cell = 2;
  int n_points = 1024;
  std::uint64_t seed = 0;
  int patches = 16;
  int patch_size = 8;
  std::vector<std::string> tasks{"reconstruction", "denoising", "registration"};
  std::vector<int> levels{1, 2, 3, 4, 5};
  int threads = 0;
};

void add_gen_data(CLI::App& sub, GenDataFlags& f) {
  sub.add_option("--out", f.out, "Output dataset directory")->required();
  sub.add_option("--samples-per-cell", f.samples_per_cell, "Records per (task, level) cell")->capture_default_str();
  sub.add_option("--n-points", f.n_points, "Points per clean cloud")->capture_default_str();
  sub.add_option("--seed", f.seed, "Dataset seed")->capture_default_str();
  sub.add_option("--patches", f.patches, "Patch count m recorded for models")->capture_default_str();
  sub.add_option("--patch-size", f.patch_size, "Points per patch k recorded for models")->capture_default_str();
  sub.add_option("--tasks", f.tasks, "Tasks to generate")->capture_default_str();
  sub.add_option("--levels", f.levels, "Difficulty levels to generate")->capture_default_str();
  sub.add_option("--threads", f.threads, "Worker threads (0: DEFORMPIC_THREADS or all cores)")->capture_default_str();
}

void cmd_gen_data(const CLI::App& sub, const GenDataFlags& f, const Context& ctx) {
  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  dataset::DatasetConfig cfg;
  cfg.samples_per_cell = f.samples_per_cell;
  cfg.n_points = f.n_points;
  cfg.seed = f.seed;
  cfg.patches = f.patches;
  cfg.patch_size = f.patch_size;
  cfg.tasks.clear();
  for (const auto& t : f.tasks) cfg.tasks.push_back(parse_task(t));
  cfg.levels = f.levels;
  cfg.validate();
  const fs::path dir = f.out;
  const auto manifest = dataset::build_dataset(cfg, dir, resolve_threads(f.threads));
  write_resolved_config(sub, dir);
  write_run_meta(dir, ctx, started, t0);
  ctx.out << "wrote " << manifest.records.size() << " records to " << dir.string() << " (fingerprint "
          << dataset::fingerprint(manifest) << ")\n";
}

// --- train ----------------------------------------------------------------------------------------

struct TrainFlags {
  std::string data;
  std::string out;
  std::string variant = "deformpic";
  std::string preset = "desk";
  train::TrainConfig train = train::TrainConfig::desk();
  model::ModelConfig model = model::ModelConfig::desk();
  std::size_t max_train = 0;
  std::string resume;
  int stop_after = 0;
  int threads = 0;
};

void add_train(CLI::App& sub, TrainFlags& f) {
  const auto paper = train::TrainConfig::paper();
  const auto paper_model = model::ModelConfig::paper();
  auto preset_note = [](auto v) { return " (paper preset: " + std::to_string(v) + ")"; };
  sub.add_option("--data", f.data, "Dataset directory")->required();
  sub.add_option("--out", f.out, "Run directory for metrics and checkpoints")->required();
  sub.add_option("--variant", f.variant, "Model variant: " + model::variant_list())->capture_default_str();
  sub.add_option("--preset", f.preset, "Hyperparameter preset: desk or paper")->capture_default_str();
  sub.add_option("--epochs", f.train.epochs, "Training epochs" + preset_note(paper.epochs))->capture_default_str();
  sub.add_option("--batch-size", f.train.batch_size, "Batch size" + preset_note(paper.batch_size))
      ->capture_default_str();
  sub.add_option("--lr-peak", f.train.lr_peak, "Peak learning rate (paper preset: 1e-4)")->capture_default_str();
  sub.add_option("--lr-init", f.train.lr_init, "Warmup start learning rate (paper preset: 1e-6)")
      ->capture_default_str();
  sub.add_option("--warmup-epochs", f.train.warmup_epochs, "Linear warmup epochs" + preset_note(paper.warmup_epochs))
      ->capture_default_str();
  sub.add_option("--weight-decay", f.train.weight_decay, "AdamW weight decay")->capture_default_str();
  sub.add_option("--seed", f.train.seed, "Run seed (initialisation, shuffling, masks, drop path)")
      ->capture_default_str();
  sub.add_option("--dim", f.model.dim, "Token width" + preset_note(paper_model.dim))->capture_default_str();
  sub.add_option("--heads", f.model.heads, "Attention heads" + preset_note(paper_model.heads))->capture_default_str();
  sub.add_option("--den-blocks", f.model.den_blocks, "DEN depth" + preset_note(paper_model.den_blocks))
      ->capture_default_str();
  sub.add_option("--dtn-blocks", f.model.dtn_blocks, "DTN depth" + preset_note(paper_model.dtn_blocks))
      ->capture_default_str();
  sub.add_option("--drop-path", f.model.drop_path_rate, "Drop-path rate (paper preset: 0.1)")->capture_default_str();
  sub.add_option("--mask-ratio", f.model.mask_ratio, "Target-patch mask ratio for mpm-baseline")
      ->capture_default_str();
  sub.add_option("--max-train", f.max_train, "Use only the first N training records (0: all)")
      ->capture_default_str();
  sub.add_option("--resume", f.resume, "Checkpoint directory to continue from")->capture_default_str();
  sub.add_option("--stop-after", f.stop_after, "Stop once N epochs are complete, without a final checkpoint (0: run all)")
      ->capture_default_str();
  sub.add_option("--threads", f.threads, "Worker threads (0: DEFORMPIC_THREADS or all cores)")->capture_default_str();
}

void cmd_train(CLI::App& sub, TrainFlags& f, const Context& ctx) {
  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const auto preset = train::parse_preset(f.preset);
  if (preset == train::Preset::paper) {
    const auto tp = train::TrainConfig::paper();
    const auto mp = model::ModelConfig::paper();
    preset_unless_given(sub, "--epochs", tp.epochs);
    preset_unless_given(sub, "--batch-size", tp.batch_size);
    preset_unless_given(sub, "--lr-peak", tp.lr_peak);
    preset_unless_given(sub, "--lr-init", tp.lr_init);
    preset_unless_given(sub, "--warmup-epochs", tp.warmup_epochs);
    preset_unless_given(sub, "--weight-decay", tp.weight_decay);
    preset_unless_given(sub, "--dim", mp.dim);
    preset_unless_given(sub, "--heads", mp.heads);
    preset_unless_given(sub, "--den-blocks", mp.den_blocks);
    preset_unless_given(sub, "--dtn-blocks", mp.dtn_blocks);
    preset_unless_given(sub, "--drop-path", mp.drop_path_rate);
    f.model.patches = mp.patches;
    f.model.patch_size = mp.patch_size;
  }
  f.train.preset = preset;
  f.model.variant = model::parse_variant(f.variant);
  f.train.validate();
  f.model.validate();

  const int threads = resolve_threads(f.threads);
  const auto ds = dataset::load_dataset(f.data);
  eval::check_compatible(f.model, ds.manifest);
  auto split = train::split_dataset(ds, f.model, threads);
  if (f.max_train > 0 && split.train.size() > f.max_train) split.train.resize(f.max_train);
  if (split.train.empty()) throw ConfigError("the dataset has no training records");

  const fs::path dir = f.out;
  ensure_dir(dir);
  write_resolved_config(sub, dir);
  model::Model<float> net(f.model, f.train.seed);
  train::TrainOptions opt;
  opt.out_dir = dir;
  opt.threads = threads;
  opt.dataset_fingerprint = dataset::fingerprint(ds.manifest);
  opt.resume = f.resume;
  opt.stop_after_epochs = f.stop_after;
  opt.on_epoch = [&](const train::MetricsRow& row) { ctx.out << train::metrics_line(row) << "\n" << std::flush; };
  ctx.out << train::metrics_header() << "\n";
  const auto result = train::train(net, split.train, split.val, f.train, opt);
  write_run_meta(dir, ctx, started, t0);
  ctx.out << "trained " << model::variant_name(f.model.variant) << " for " << result.steps << " steps on "
          << split.train.size() << " records; checkpoints in " << dir.string() << "\n";
}

// --- eval -----------------------------------------------------------------------------------------

struct EvalFlags {
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string stub;
  std::string subset = "heldout";
  eval::EvalConfig cfg;
  int threads = 0;
};

void add_eval(CLI::App& sub, EvalFlags& f) {
  sub.add_option("--data", f.data, "Dataset directory")->required();
  sub.add_option("--out", f.out, "Report directory")->required();
  auto* ckpt = sub.add_option("--checkpoint", f.checkpoint, "Checkpoint directory to evaluate")->capture_default_str();
  auto* stub = sub.add_option("--stub", f.stub, "Reference model instead of a checkpoint: oracle or identity")
                   ->capture_default_str();
  ckpt->excludes(stub);
  sub.add_option("--subset", f.subset, "Records to score: heldout, train or all")->capture_default_str();
  sub.add_option("--emd-points", f.cfg.emd_points, "EMD subsample size")->capture_default_str();
  sub.add_option("--seed", f.cfg.seed, "EMD subsampling seed")->capture_default_str();
  sub.add_option("--tau", f.cfg.tau, "F-score threshold")->capture_default_str();
  sub.add_option("--tau-strict", f.cfg.tau_strict, "Second, stricter F-score threshold")->capture_default_str();
  sub.add_option("--threads", f.threads, "Worker threads (0: DEFORMPIC_THREADS or all cores)")->capture_default_str();
}

void cmd_eval(const CLI::App& sub, EvalFlags f, const Context& ctx) {
  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  if (f.checkpoint.empty() == f.stub.empty()) throw ConfigError("give exactly one of --checkpoint or --stub");
  f.cfg.subset = eval::parse_subset(f.subset);
  f.cfg.validate();
  const auto ds = dataset::load_dataset(f.data);

  eval::MetricsReport report;
  if (!f.stub.empty()) {
    eval::Predictor pred;
    if (f.stub == "oracle") pred = eval::oracle_predictor();
    else if (f.stub == "identity") pred = eval::identity_predictor();
    else throw ConfigError("unknown stub '" + f.stub + "' (expected oracle or identity)");
    model::ModelConfig patch_cfg;
    patch_cfg.patches = ds.manifest.patches;
    patch_cfg.patch_size = ds.manifest.patch_size;
    report = eval::evaluate(pred, ds, patch_cfg, f.cfg, resolve_threads(f.threads));
    report.model_label = f.stub;
    report.model_fingerprint = "stub-" + f.stub;
  } else {
    const auto ckpt = train::load_checkpoint(f.checkpoint);
    const auto net = train::restore_model(ckpt);
    report = eval::evaluate(eval::model_predictor(net), ds, ckpt.model, f.cfg, resolve_threads(f.threads));
    report.model_label = std::string(model::variant_name(ckpt.model.variant));
    report.model_fingerprint = eval::checkpoint_fingerprint(ckpt);
  }
  const fs::path dir = f.out;
  ensure_dir(dir);
  write_resolved_config(sub, dir);
  const auto csv = eval::report_csv(report);
  io::write_text_atomic(dir / "report.csv", csv);
  io::write_text_atomic(dir / "report.json", eval::report_json(report).dump(2) + "\n");
  write_run_meta(dir, ctx, started, t0);
  ctx.out << csv;
}

// --- compare --------------------------------------------------------------------------------------

struct CompareFlags {
  std::string a;
  std::string b;
  std::string out;
};

void add_compare(CLI::App& sub, CompareFlags& f) {
  sub.add_option("--a", f.a, "report.json of model A")->required();
  sub.add_option("--b", f.b, "report.json of model B")->required();
  sub.add_option("--out", f.out, "Comparison directory")->required();
}

eval::MetricsReport read_report(const fs::path& path) {
  const auto text = io::read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return eval::report_from_json(j);
}

void cmd_compare(const CLI::App& sub, const CompareFlags& f, const Context& ctx) {
  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = eval::compare(read_report(f.a), read_report(f.b));
  const fs::path dir = f.out;
  ensure_dir(dir);
  write_resolved_config(sub, dir);
  const auto summary = eval::sign_summary(c);
  io::write_text_atomic(dir / "comparison.csv", eval::comparison_csv(c));
  io::write_text_atomic(dir / "comparison.json", eval::comparison_json(c).dump(2) + "\n");
  io::write_text_atomic(dir / "summary.txt", summary);
  write_run_meta(dir, ctx, started, t0);
  ctx.out << "A = " << c.label_a << ", B = " << c.label_b << "\n" << summary;
}

// --- analyze --------------------------------------------------------------------------------------

struct AnalyzeFlags {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string subset = "heldout";
  std::uint64_t seed = 0;
  int restarts = 10;
  int threads = 0;
};

void add_analyze(CLI::App& sub, AnalyzeFlags& f) {
  sub.add_option("--checkpoint", f.checkpoint, "Checkpoint directory (deformpic or static-den)")->required();
  sub.add_option("--data", f.data, "Dataset directory")->required();
  sub.add_option("--out", f.out, "Analysis directory")->required();
  sub.add_option("--subset", f.subset, "Records to analyse: heldout, train or all")->capture_default_str();
  sub.add_option("--seed", f.seed, "k-means seed")->capture_default_str();
  sub.add_option("--restarts", f.restarts, "k-means restarts")->capture_default_str();
  sub.add_option("--threads", f.threads, "Worker threads (0: DEFORMPIC_THREADS or all cores)")->capture_default_str();
}

void cmd_analyze(const CLI::App& sub, const AnalyzeFlags& f, const Context& ctx) {
  const auto started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  const int threads = resolve_threads(f.threads);
  const auto subset = eval::parse_subset(f.subset);
  const auto ckpt = train::load_checkpoint(f.checkpoint);
  const auto net = train::restore_model(ckpt);
  const auto ds = dataset::load_dataset(f.data);
  eval::check_compatible(ckpt.model, ds.manifest);

  const auto records = eval::select_records(ds.records.size(), subset);
  std::vector<InContextSample> samples;
  for (auto r : records) samples.push_back(ds.records[r]);
  const auto examples = train::make_examples(samples, records, ckpt.model, threads);
  const auto features = eval::extract_task_features(net, examples, threads);
  const auto labels = features.labels();
  const int k = static_cast<int>(std::set<int>(labels.begin(), labels.end()).size());
  if (features.rows.size() < 3) throw ConfigError("analysis needs at least 3 records");
  const auto x = features.matrix();
  const auto projection = eval::pca_project(x, 2);
  const double purity = eval::cluster_purity(x, labels, k, f.seed, f.restarts);
  const std::size_t distinct = features.distinct();

  const fs::path dir = f.out;
  ensure_dir(dir);
  write_resolved_config(sub, dir);
  io::write_text_atomic(dir / "features.csv", eval::features_csv(features));
  io::write_text_atomic(dir / "projection.csv", eval::projection_csv(features, projection));
  json j{{"model", {{"variant", model::variant_name(ckpt.model.variant)}, {"fingerprint", eval::checkpoint_fingerprint(ckpt)}}},
         {"dataset_fingerprint", dataset::fingerprint(ds.manifest)},
         {"subset", eval::subset_name(subset)},
         {"rows", features.rows.size()},
         {"clusters", k},
         {"purity", purity},
         {"distinct_features", distinct},
         {"explained_variance", {projection.explained(0), projection.explained(1)}}};
  io::write_text_atomic(dir / "analysis.json", j.dump(2) + "\n");
  write_run_meta(dir, ctx, started, t0);
  ctx.out << "rows " << features.rows.size() << ", clusters " << k << ", purity " << io::format_double(purity)
          << "\n";
  ctx.out << "distinct feature rows: " << distinct;
  if (ckpt.model.variant == model::Variant::static_den) ctx.out << " (static-den lookup: at most 3)";
  ctx.out << "\n";
}

}  // namespace

int resolve_threads(int flag) {
  if (flag > 0) return flag;
  if (const char* env = std::getenv("DEFORMPIC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("DEFORMPIC_THREADS must be a positive integer");
    return static_cast<int>(v);
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DeformPIC: point-cloud in-context learning by deformation", "deformpic"};
  app.set_config("--config", "", "TOML file with [subcommand] sections; flags take precedence");
  app.allow_config_extras(false);
  app.fallthrough();
  app.require_subcommand(1, 1);

  GenDataFlags gen;
  TrainFlags tr;
  EvalFlags ev;
  CompareFlags cmp;
  AnalyzeFlags an;
  auto* gen_sub = app.add_subcommand("gen-data", "Generate a synthetic in-context dataset");
  auto* train_sub = app.add_subcommand("train", "Train a model variant");
  auto* eval_sub = app.add_subcommand("eval", "Score a checkpoint or reference stub per task and level");
  auto* compare_sub = app.add_subcommand("compare", "Per-cell deltas between two eval reports");
  auto* analyze_sub = app.add_subcommand("analyze", "Task-token PCA projection and cluster purity");
  add_gen_data(*gen_sub, gen);
  add_train(*train_sub, tr);
  add_eval(*eval_sub, ev);
  add_compare(*compare_sub, cmp);
  add_analyze(*analyze_sub, an);
  for (auto* sub : app.get_subcommands({})) sub->footer(kConfigFooter);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::FileError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  const Context ctx{out, args};
  try {
    if (gen_sub->parsed()) cmd_gen_data(*gen_sub, gen, ctx);
    else if (train_sub->parsed()) cmd_train(*train_sub, tr, ctx);
    else if (eval_sub->parsed()) cmd_eval(*eval_sub, ev, ctx);
    else if (compare_sub->parsed()) cmd_compare(*compare_sub, cmp, ctx);
    else if (analyze_sub->parsed()) cmd_analyze(*analyze_sub, an, ctx);
    return kOk;
  } catch (const MismatchError& e) {
    err << "mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace deformpic::cli
