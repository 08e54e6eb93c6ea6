#include "deformpic/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "deformpic/errors.hpp"
#include "deformpic/io.hpp"
#include "deformpic/parallel.hpp"

namespace deformpic::train {

namespace {

using json = nlohmann::ordered_json;

// Keys separating the random streams drawn from the run seed.
constexpr std::uint64_t kShuffleKey = 0x5348;
constexpr std::uint64_t kMaskKey = 0x4D41;

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double null_to(const json& j, double fallback) { return j.is_null() ? fallback : j.get<double>(); }

json row_to_json(const MetricsRow& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"lr", r.lr},
          {"train_loss", r.train_loss},
          {"val_cd", {nan_to_null(r.val_cd[0]), nan_to_null(r.val_cd[1]), nan_to_null(r.val_cd[2])}}};
}

MetricsRow row_from_json(const json& j) {
  MetricsRow r;
  r.epoch = j.at("epoch").get<int>();
  r.step = j.at("step").get<std::uint64_t>();
  r.lr = j.at("lr").get<double>();
  r.train_loss = j.at("train_loss").get<double>();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t t = 0; t < 3; ++t) r.val_cd[t] = null_to(j.at("val_cd").at(t), nan);
  return r;
}

std::vector<Tensor<float>> constant_params(const model::ParameterSet<float>& params) {
  std::vector<Tensor<float>> p;
  p.reserve(params.size());
  for (const auto& prm : params.all()) p.push_back(prm.value.detach());
  return p;
}

}  // namespace

// --- config ---------------------------------------------------------------------------

std::string_view preset_name(Preset p) { return p == Preset::paper ? "paper" : "desk"; }

Preset parse_preset(std::string_view name) {
  if (name == "paper") return Preset::paper;
  if (name == "desk") return Preset::desk;
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected one of: paper, desk)");
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.epochs = 300;
  c.batch_size = 128;
  c.lr_peak = 1e-4;
  c.lr_init = 1e-6;
  c.warmup_epochs = 10;
  c.weight_decay = 0.05;
  c.preset = Preset::paper;
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::for_preset(Preset p) { return p == Preset::paper ? paper() : desk(); }

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(lr_init > 0.0 && lr_init < lr_peak)) throw ConfigError("learning rates must satisfy 0 < lr_init < lr_peak");
  if (warmup_epochs < 0) throw ConfigError("warmup epochs must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},       {"batch_size", c.batch_size},       {"lr_peak", c.lr_peak},
          {"lr_init", c.lr_init},     {"warmup_epochs", c.warmup_epochs}, {"weight_decay", c.weight_decay},
          {"seed", c.seed},           {"preset", preset_name(c.preset)},  {"beta1", c.beta1},
          {"beta2", c.beta2},         {"adam_eps", c.adam_eps},           {"clip_norm", c.clip_norm}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr_peak = j.at("lr_peak").get<double>();
  c.lr_init = j.at("lr_init").get<double>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.preset = parse_preset(j.at("preset").get<std::string>());
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.validate();
  return c;
}

// --- schedule and optimizer ----------------------------------------------------------------

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, const TrainConfig& cfg) {
  if (step < warmup_steps) {
    return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const std::size_t decay_steps = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

OptimizerState OptimizerState::zeros_like(const model::ParameterSet<float>& params) {
  OptimizerState s;
  for (const auto& p : params.all()) {
    s.m.emplace_back(p.value.numel(), 0.0f);
    s.v.emplace_back(p.value.numel(), 0.0f);
  }
  return s;
}

void adamw_step(model::ParameterSet<float>& params, const Gradients& grads, OptimizerState& state, double lr,
                const TrainConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: gradient or moment count does not match the parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].value.numel()) throw ShapeError("adamw_step: gradient shape of " + params[i].name);
    for (float g : grads[i])
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + params[i].name);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double shrink = params[i].decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grads[i][j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.adam_eps);
      theta[j] = static_cast<float>(theta[j] * shrink - lr * update);
    }
  }
}

double clip_global_norm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (float x : g) sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (auto& g : grads)
      for (float& x : g) x *= factor;
  }
  return norm;
}

// --- examples and validation ---------------------------------------------------------------

std::vector<Example> make_examples(const std::vector<InContextSample>& samples,
                                   const std::vector<std::size_t>& records, const model::ModelConfig& cfg,
                                   int threads) {
  if (samples.size() != records.size()) throw std::invalid_argument("make_examples: samples and records differ in size");
  std::vector<Example> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    out[i].record = records[i];
    out[i].sample = samples[i];
    out[i].patches = geometry::joint_sample(samples[i], static_cast<std::size_t>(cfg.patches),
                                            static_cast<std::size_t>(cfg.patch_size));
  });
  return out;
}

Split split_dataset(const dataset::Dataset& ds, const model::ModelConfig& cfg, int threads) {
  std::vector<InContextSample> tr, va;
  std::vector<std::size_t> tr_ix, va_ix;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (dataset::is_heldout(i)) {
      va.push_back(ds.records[i]);
      va_ix.push_back(i);
    } else {
      tr.push_back(ds.records[i]);
      tr_ix.push_back(i);
    }
  }
  return {make_examples(tr, tr_ix, cfg, threads), make_examples(va, va_ix, cfg, threads)};
}

double prediction_cd(const Tensor<float>& prediction, const InContextSample& sample) {
  return geometry::chamfer_l2(PointCloud(std::vector<float>(prediction.data().begin(), prediction.data().end())),
                              sample.query_target);
}

Tensor<float> predict(const model::Model<float>& net, const Example& ex) {
  NoGradGuard guard;
  return net.forward(ex.patches, ex.sample.task, constant_params(net.params()), model::ForwardOptions{}).prediction;
}

double MetricsRow::val_mean() const {
  double sum = 0.0;
  int n = 0;
  for (double v : val_cd) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / n;
}

std::string metrics_header() { return "epoch,step,lr,train_loss,val_cd_rec,val_cd_den,val_cd_reg"; }

std::string metrics_line(const MetricsRow& r) {
  std::string s = std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + io::format_double(r.lr) + "," +
                  io::format_double(r.train_loss);
  for (double v : r.val_cd) s += "," + io::format_double(v);
  return s;
}

std::array<double, 3> validate_cd(const model::Model<float>& net, const std::vector<Example>& val, int threads) {
  std::vector<double> cd(val.size());
  parallel_for(val.size(), threads, [&](std::size_t i) { cd[i] = prediction_cd(predict(net, val[i]), val[i].sample); });
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  std::array<int, 3> count{0, 0, 0};
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto t = static_cast<std::size_t>(val[i].sample.task);
    sum[t] += cd[i];
    ++count[t];
  }
  std::array<double, 3> out{};
  for (std::size_t t = 0; t < 3; ++t) out[t] = count[t] ? sum[t] / count[t] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// --- checkpoints ------------------------------------------------------------------------------

Checkpoint make_checkpoint(const model::Model<float>& net, const TrainConfig& cfg, const OptimizerState& opt) {
  Checkpoint c;
  c.model = net.config();
  c.train = cfg;
  std::size_t off = 0;
  for (const auto& p : net.params().all()) {
    c.table.push_back({p.name, p.value.shape(), off, p.decay});
    off += p.value.numel();
  }
  c.params = net.params().flat_values();
  c.optimizer = opt;
  return c;
}

model::Model<float> restore_model(const Checkpoint& ckpt) {
  model::Model<float> net(ckpt.model, 0);
  const auto& params = net.params();
  if (params.size() != ckpt.table.size()) throw MismatchError("checkpoint parameter table does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ckpt.table[i].name || params[i].value.shape() != ckpt.table[i].shape) {
      throw MismatchError("checkpoint parameter " + ckpt.table[i].name + " does not match the model");
    }
  }
  net.params().set_flat_values(ckpt.params);
  return net;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::size_t n = c.params.size();
  std::vector<std::uint8_t> blob;
  blob.reserve(12 * n);
  io::put_f32s(blob, c.params);
  for (const auto* moments : {&c.optimizer.m, &c.optimizer.v}) {
    std::size_t total = 0;
    for (const auto& part : *moments) {
      io::put_f32s(blob, part);
      total += part.size();
    }
    if (total != n) throw ShapeError("optimizer moments do not match the parameter count");
  }

  json table = json::array();
  for (const auto& e : c.table) {
    table.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"decay", e.decay}});
  }
  json history = json::array();
  for (const auto& r : c.history) history.push_back(row_to_json(r));
  const json j = {{"version", kCheckpointVersion},
                  {"model", model::to_json(c.model)},
                  {"train", to_json(c.train)},
                  {"epoch", c.epoch},
                  {"step", c.step},
                  {"best_val", nan_to_null(c.best_val)},
                  {"dataset_fingerprint", c.dataset_fingerprint},
                  {"rng", {{"scheme", "keyed"}, {"seed", c.train.seed}}},
                  {"optimizer", {{"step", c.optimizer.step}}},
                  {"history", history},
                  {"blob",
                   {{"file", "params.bin"},
                    {"floats", n},
                    {"layout", {"params", "adam_m", "adam_v"}},
                    {"crc32", dataset::crc32(blob.data(), blob.size())}}},
                  {"params", table}};
  io::write_file_atomic(dir / "params.bin", blob.data(), blob.size());
  io::write_text_atomic(dir / "checkpoint.json", j.dump(1) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  json j;
  try {
    j = json::parse(io::read_text(dir / "checkpoint.json"));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint.json: " + std::string(e.what()));
  }
  try {
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint version " + j.at("version").dump());
    }
    Checkpoint c;
    c.model = model::model_config_from_json(j.at("model"));
    c.train = train_config_from_json(j.at("train"));
    c.epoch = j.at("epoch").get<int>();
    c.step = j.at("step").get<std::uint64_t>();
    c.best_val = null_to(j.at("best_val"), std::numeric_limits<double>::infinity());
    c.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    for (const auto& r : j.at("history")) c.history.push_back(row_from_json(r));
    std::size_t expect = 0;
    for (const auto& e : j.at("params")) {
      ParamEntry pe{e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>(),
                    e.at("decay").get<bool>()};
      if (pe.offset != expect) throw FormatError("checkpoint parameter " + pe.name + " has a bad offset");
      expect += shape_numel(pe.shape);
      c.table.push_back(std::move(pe));
    }
    const std::size_t n = j.at("blob").at("floats").get<std::size_t>();
    if (n != expect) throw FormatError("checkpoint blob size disagrees with the parameter table");
    const auto blob = io::read_file(dir / "params.bin");
    if (blob.size() != 12 * n) throw FormatError("params.bin: expected " + std::to_string(12 * n) + " bytes");
    if (dataset::crc32(blob.data(), blob.size()) != j.at("blob").at("crc32").get<std::uint32_t>()) {
      throw FormatError("params.bin: checksum mismatch");
    }
    c.params.resize(n);
    io::get_f32s(blob.data(), c.params);
    c.optimizer.step = j.at("optimizer").at("step").get<std::uint64_t>();
    for (std::size_t which = 0; which < 2; ++which) {
      auto& moments = which == 0 ? c.optimizer.m : c.optimizer.v;
      const std::uint8_t* base = blob.data() + 4 * n * (which + 1);
      for (const auto& e : c.table) {
        std::vector<float> part(shape_numel(e.shape));
        io::get_f32s(base + 4 * e.offset, part);
        moments.push_back(std::move(part));
      }
    }
    return c;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint.json: " + std::string(e.what()));
  }
}

// --- loop -------------------------------------------------------------------------------------

BatchResult batch_gradients(const model::Model<float>& net, const std::vector<const Example*>& batch,
                            const TrainConfig& cfg, std::uint64_t step, int threads) {
  const auto& params = net.params();
  std::vector<double> losses(batch.size());
  std::vector<Gradients> per_sample(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t b) {
    const Example& ex = *batch[b];
    Rng mask_rng = Rng::keyed(cfg.seed, {kMaskKey, step, ex.record});
    const model::MaskPlan plan = model::training_mask(net.config(), mask_rng);
    model::ForwardOptions opt;
    opt.training = true;
    opt.seed = cfg.seed;
    opt.step = step;
    opt.sample = ex.record;
    opt.mask = &plan;
    const auto p = params.views();
    const auto r = net.forward(ex.patches, ex.sample.task, p, opt);
    r.loss.backward();
    losses[b] = r.loss.item();
    Gradients& g = per_sample[b];
    g.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i].has_grad()) {
        g[i].assign(p[i].grad().begin(), p[i].grad().end());
      } else {
        g[i].assign(p[i].numel(), 0.0f);
      }
    }
  });
  BatchResult out;
  out.grads = std::move(per_sample[0]);
  for (std::size_t b = 1; b < batch.size(); ++b) {
    for (std::size_t i = 0; i < out.grads.size(); ++i) {
      float* dst = out.grads[i].data();
      const float* src = per_sample[b][i].data();
      for (std::size_t j = 0; j < out.grads[i].size(); ++j) dst[j] += src[j];
    }
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (auto& g : out.grads)
    for (float& x : g) x *= inv;
  for (double l : losses) out.loss += l;
  out.loss /= static_cast<double>(batch.size());
  return out;
}

TrainResult train(model::Model<float>& net, const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  const std::size_t n = train_set.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  const std::size_t warmup_steps = std::min(total_steps, steps_per_epoch * static_cast<std::size_t>(cfg.warmup_epochs));

  OptimizerState state = OptimizerState::zeros_like(net.params());
  TrainResult result;
  int first_epoch = 0;
  if (!options.resume.empty()) {
    Checkpoint c = load_checkpoint(options.resume);
    if (!(c.model == net.config())) throw MismatchError("resume checkpoint has a different model config");
    if (!(c.train == cfg)) throw MismatchError("resume checkpoint has a different training config");
    if (c.dataset_fingerprint != options.dataset_fingerprint) {
      throw MismatchError("resume checkpoint was trained on dataset " + c.dataset_fingerprint + ", not " +
                          options.dataset_fingerprint);
    }
    net.params().set_flat_values(restore_model(c).params().flat_values());
    state = std::move(c.optimizer);
    first_epoch = c.epoch;
    result.steps = c.step;
    result.history = std::move(c.history);
    result.best_val = c.best_val;
  }

  auto checkpoint_to = [&](const std::string& name, int epoch) {
    if (options.out_dir.empty()) return;
    Checkpoint c = make_checkpoint(net, cfg, state);
    c.epoch = epoch;
    c.step = result.steps;
    c.best_val = result.best_val;
    c.dataset_fingerprint = options.dataset_fingerprint;
    c.history = result.history;
    save_checkpoint(c, options.out_dir / name);
  };
  auto write_metrics = [&] {
    if (options.out_dir.empty()) return;
    std::string text = metrics_header() + "\n";
    for (const auto& r : result.history) text += metrics_line(r) + "\n";
    io::write_text_atomic(options.out_dir / "metrics.csv", text);
  };
  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
  }

  std::vector<const Example*> batch;
  for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    Rng shuffle = Rng::keyed(cfg.seed, {kShuffleKey, static_cast<std::uint64_t>(epoch)});
    const auto order = shuffle.sample_without_replacement(n, n);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < n; begin += bs) {
      batch.clear();
      for (std::size_t i = begin; i < std::min(n, begin + bs); ++i) batch.push_back(&train_set[order[i]]);
      lr = lr_at(result.steps, total_steps, warmup_steps, cfg);
      BatchResult br;
      try {
        br = batch_gradients(net, batch, cfg, result.steps, options.threads);
        if (!std::isfinite(br.loss)) throw NumericError("non-finite loss");
        clip_global_norm(br.grads, cfg.clip_norm);
        adamw_step(net.params(), br.grads, state, lr, cfg);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(result.steps));
      }
      loss_sum += br.loss * static_cast<double>(batch.size());
      result.steps += 1;
      if (options.on_step) options.on_step(result.steps, br.loss);
    }

    MetricsRow row;
    row.epoch = epoch + 1;
    row.step = result.steps;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(n);
    try {
      row.val_cd = validate_cd(net, val_set, options.threads);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " during validation at step " + std::to_string(result.steps));
    }
    result.history.push_back(row);
    const double score = std::isnan(row.val_mean()) ? row.train_loss : row.val_mean();
    if (score < result.best_val) {
      result.best_val = score;
      checkpoint_to("best", epoch + 1);
    }
    checkpoint_to("last", epoch + 1);
    write_metrics();
    if (options.on_epoch) options.on_epoch(row);
    if (options.stop_after_epochs > 0 && epoch + 1 >= options.stop_after_epochs && epoch + 1 < cfg.epochs) {
      return result;
    }
  }
  checkpoint_to("final", cfg.epochs);
  write_metrics();
  return result;
}

}  // namespace deformpic::train
