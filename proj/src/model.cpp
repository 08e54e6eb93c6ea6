#include "deformpic/model.hpp"

#include <algorithm>
#include <cmath>

#include "deformpic/errors.hpp"

namespace deformpic::model {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kTokenStd = 0.02;

// Drop-path layer keys, disjoint per network.
constexpr std::uint64_t kDenLayer = 0;
constexpr std::uint64_t kDtnLayer = 1000;
constexpr std::uint64_t kMpmLayer = 2000;

}  // namespace

// --- variants and config -----------------------------------------------------------

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::deformpic: return "deformpic";
    case Variant::mpm_baseline: return "mpm-baseline";
    case Variant::mpm_consistent: return "mpm-consistent";
    case Variant::static_den: return "static-den";
  }
  return "?";
}

std::string variant_list() {
  std::string out;
  for (Variant v : kAllVariants) {
    if (!out.empty()) out += ", ";
    out += variant_name(v);
  }
  return out;
}

Variant parse_variant(std::string_view name) {
  std::string norm(name);
  std::replace(norm.begin(), norm.end(), '_', '-');
  for (Variant v : kAllVariants)
    if (variant_name(v) == norm) return v;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected one of: " + variant_list() + ")");
}

bool is_mpm(Variant v) { return v == Variant::mpm_baseline || v == Variant::mpm_consistent; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.dim = 384;
  c.heads = 6;
  c.den_blocks = 4;
  c.dtn_blocks = 8;
  c.patches = 64;
  c.patch_size = 32;
  c.drop_path_rate = 0.1;
  return c;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

void ModelConfig::validate() const {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("dim must be a positive even number");
  if (heads < 1 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
  if (den_blocks < 1 || dtn_blocks < 1) throw ConfigError("block counts must be positive");
  if (patches < 1 || patch_size < 1) throw ConfigError("patch config (m, k) must be positive");
  if (mlp_ratio < 1) throw ConfigError("mlp ratio must be positive");
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw ConfigError("drop-path rate must lie in [0, 1)");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"dim", c.dim},
          {"heads", c.heads},
          {"den_blocks", c.den_blocks},
          {"dtn_blocks", c.dtn_blocks},
          {"patches", c.patches},
          {"patch_size", c.patch_size},
          {"drop_path_rate", c.drop_path_rate},
          {"variant", variant_name(c.variant)},
          {"mlp_ratio", c.mlp_ratio},
          {"mask_ratio", c.mask_ratio}};
}

ModelConfig model_config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.den_blocks = j.at("den_blocks").get<int>();
  c.dtn_blocks = j.at("dtn_blocks").get<int>();
  c.patches = j.at("patches").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.drop_path_rate = j.at("drop_path_rate").get<double>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.validate();
  return c;
}

// --- parameters ----------------------------------------------------------------------

template <typename T>
std::size_t ParameterSet<T>::add(std::string name, Tensor<T> value, bool decay) {
  if (find(name)) throw std::logic_error("duplicate parameter " + name);
  params_.push_back({std::move(name), std::move(value), decay});
  return params_.size() - 1;
}

template <typename T>
std::optional<std::size_t> ParameterSet<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

template <typename T>
std::size_t ParameterSet<T>::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
std::vector<Tensor<T>> ParameterSet<T>::views() const {
  std::vector<Tensor<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value.share_leaf());
  return out;
}

template <typename T>
std::vector<T> ParameterSet<T>::flat_values() const {
  std::vector<T> out;
  out.reserve(numel());
  for (const auto& p : params_) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

template <typename T>
void ParameterSet<T>::set_flat_values(std::span<const T> values) {
  if (values.size() != numel()) throw ShapeError("parameter blob size does not match the model");
  std::size_t off = 0;
  for (auto& p : params_) {
    auto dst = p.value.mutable_data();
    std::copy(values.begin() + off, values.begin() + off + dst.size(), dst.begin());
    off += dst.size();
  }
}

template <typename To, typename From>
void copy_params(const ParameterSet<From>& from, ParameterSet<To>& to) {
  if (from.size() != to.size()) throw ShapeError("parameter sets differ in size");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].value.shape() != to[i].value.shape()) {
      throw ShapeError("parameter sets differ at " + from[i].name);
    }
    auto dst = to[i].value.mutable_data();
    const auto src = from[i].value.data();
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<To>(src[j]);
  }
}

// --- masks ---------------------------------------------------------------------------------

std::size_t MaskPlan::masked() const {
  return static_cast<std::size_t>(std::count(prompt_target.begin(), prompt_target.end(), true) +
                                  std::count(query_target.begin(), query_target.end(), true));
}

MaskPlan random_mask(std::size_t m, double ratio, Rng& rng) {
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(m)));
  MaskPlan plan{std::vector<bool>(m, false), std::vector<bool>(m, false)};
  for (std::size_t i : rng.sample_without_replacement(m, count)) plan.prompt_target[i] = true;
  for (std::size_t i : rng.sample_without_replacement(m, count)) plan.query_target[i] = true;
  return plan;
}

MaskPlan query_only_mask(std::size_t m) { return {std::vector<bool>(m, false), std::vector<bool>(m, true)}; }

MaskPlan training_mask(const ModelConfig& cfg, Rng& rng) {
  const auto m = static_cast<std::size_t>(cfg.patches);
  return cfg.variant == Variant::mpm_baseline ? random_mask(m, cfg.mask_ratio, rng) : query_only_mask(m);
}

// --- tensors from patches -----------------------------------------------------------------

template <typename T>
Tensor<T> patches_tensor(const geometry::PatchedCloud& pc) {
  return Tensor<T>::from_data({pc.count(), pc.k, 3}, std::vector<T>(pc.patches.begin(), pc.patches.end()));
}

template <typename T>
Tensor<T> centers_tensor(const geometry::PatchedCloud& pc) {
  const auto xyz = pc.centers.xyz();
  return Tensor<T>::from_data({pc.count(), 3}, std::vector<T>(xyz.begin(), xyz.end()));
}

template <typename T>
Tensor<T> cloud_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
  return chamfer_l2(reshape(pred, {pred.numel() / 3, 3}), reshape(gt, {gt.numel() / 3, 3}));
}

template <typename T>
Tensor<T> masked_patch_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::size_t>& rows) {
  if (rows.empty()) return Tensor<T>::scalar(T(0));
  const std::size_t k = pred.dim(1);
  std::vector<Tensor<T>> terms;
  terms.reserve(rows.size());
  for (std::size_t r : rows) {
    terms.push_back(reshape(chamfer_l2(reshape(slice(pred, 0, r, r + 1), {k, 3}), reshape(slice(gt, 0, r, r + 1), {k, 3})),
                            {1}));
  }
  return mean(concat(terms, 0));
}

// --- construction ---------------------------------------------------------------------------

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  const int d = cfg_.dim;
  if (is_mpm(cfg_.variant)) {
    enc_prompt_ = add_encoder("encoder", rng);
    mask_token_ = add_token("mask_token", {1, static_cast<std::size_t>(d)}, rng);
    stream_embed_ = add_token("stream_embed", {4, static_cast<std::size_t>(d)}, rng);
    for (int i = 0; i < cfg_.mpm_blocks(); ++i) mpm_.push_back(add_block("mpm." + std::to_string(i), false, false, rng));
    mpm_norm_ = add_norm("mpm.norm");
  } else {
    if (cfg_.variant == Variant::static_den) {
      task_table_ = add_token("task_table", {kAllTasks.size(), static_cast<std::size_t>(d)}, rng);
    } else {
      enc_prompt_ = add_encoder("enc_prompt", rng);
      task_token_ = add_token("task_token", {1, static_cast<std::size_t>(d)}, rng);
      for (int i = 0; i < cfg_.den_blocks; ++i) den_.push_back(add_block("den." + std::to_string(i), false, true, rng));
      den_norm_ = add_norm("den.norm");
    }
    enc_query_ = add_encoder("enc_query", rng);
    for (int i = 0; i < cfg_.dtn_blocks; ++i) dtn_.push_back(add_block("dtn." + std::to_string(i), true, false, rng));
    dtn_norm_ = add_norm("dtn.norm");
  }
  head1_ = add_linear("head.fc1", d, d, true, false, rng);
  head2_ = add_linear("head.fc2", d, 3 * cfg_.patch_size, true, true, rng);
}

template <typename T>
typename Model<T>::LinearIx Model<T>::add_linear(const std::string& name, int in, int out, bool bias, bool zero,
                                                 Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  auto init = [&](std::size_t n) {
    std::vector<T> v(n, T(0));
    if (!zero)
      for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return v;
  };
  LinearIx ix;
  const auto ui = static_cast<std::size_t>(in), uo = static_cast<std::size_t>(out);
  ix.w = params_.add(name + ".w", Tensor<T>::from_data({ui, uo}, init(ui * uo), true), true);
  ix.bias = bias;
  if (bias) ix.b = params_.add(name + ".b", Tensor<T>::from_data({uo}, init(uo), true), false);
  return ix;
}

template <typename T>
typename Model<T>::NormIx Model<T>::add_norm(const std::string& name) {
  const auto d = static_cast<std::size_t>(cfg_.dim);
  NormIx ix;
  ix.gamma = params_.add(name + ".gamma", Tensor<T>::full({d}, T(1), true), false);
  ix.beta = params_.add(name + ".beta", Tensor<T>::zeros({d}, true), false);
  return ix;
}

template <typename T>
typename Model<T>::BlockIx Model<T>::add_block(const std::string& name, bool modulated, bool zero_out, Rng& rng) {
  const int d = cfg_.dim, hidden = cfg_.mlp_ratio * cfg_.dim;
  BlockIx ix;
  if (!modulated) {
    ix.ln1 = add_norm(name + ".ln1");
    ix.ln2 = add_norm(name + ".ln2");
  }
  ix.qkv = add_linear(name + ".attn.qkv", d, 3 * d, true, false, rng);
  ix.proj = add_linear(name + ".attn.proj", d, d, true, zero_out, rng);
  ix.fc1 = add_linear(name + ".mlp.fc1", d, hidden, true, false, rng);
  ix.fc2 = add_linear(name + ".mlp.fc2", hidden, d, true, zero_out, rng);
  if (modulated) {
    const auto ud = static_cast<std::size_t>(d);
    ix.modulation = params_.add(name + ".adaln.w", Tensor<T>::zeros({ud, 6 * ud}, true), true);
  }
  return ix;
}

template <typename T>
typename Model<T>::EncoderIx Model<T>::add_encoder(const std::string& name, Rng& rng) {
  const int d = cfg_.dim;
  EncoderIx ix;
  ix.fc1 = add_linear(name + ".point.fc1", 3, d / 2, true, false, rng);
  ix.fc2 = add_linear(name + ".point.fc2", d / 2, d, true, false, rng);
  ix.pos1 = add_linear(name + ".pos.fc1", 3, d, true, false, rng);
  ix.pos2 = add_linear(name + ".pos.fc2", d, d, true, false, rng);
  return ix;
}

template <typename T>
std::size_t Model<T>::add_token(const std::string& name, Shape shape, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(kTokenStd * rng.normal());
  return params_.add(name, Tensor<T>::from_data(std::move(shape), std::move(v), true), false);
}

// --- layers --------------------------------------------------------------------------------

template <typename T>
Tensor<T> Model<T>::linear(const Tensor<T>& x, const LinearIx& ix, const std::vector<Tensor<T>>& p) const {
  Tensor<T> y = matmul(x, p[ix.w]);
  return ix.bias ? add(y, p[ix.b]) : y;
}

template <typename T>
Tensor<T> Model<T>::position(int which, const Tensor<T>& centers, const std::vector<Tensor<T>>& p) const {
  const EncoderIx& e = which == 0 ? enc_prompt_ : enc_query_;
  return linear(gelu(linear(centers, e.pos1, p)), e.pos2, p);
}

template <typename T>
Tensor<T> Model<T>::encode_raw(int which, const Tensor<T>& patches, const Tensor<T>& centers,
                               const std::vector<Tensor<T>>& p) const {
  const EncoderIx& e = which == 0 ? enc_prompt_ : enc_query_;
  const std::size_t m = patches.dim(0);
  // Re-center each patch on its center; the input is data, not a parameter.
  Tensor<T> local;
  {
    std::vector<T> v(patches.data().begin(), patches.data().end());
    const std::size_t k = patches.dim(1);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = 0; c < 3; ++c) v[(j * k + r) * 3 + c] -= centers.data()[j * 3 + c];
    local = Tensor<T>::from_data(patches.shape(), std::move(v));
  }
  Tensor<T> h = linear(gelu(linear(local, e.fc1, p)), e.fc2, p);  // [m, k, d]
  return add(max_pool_axis(h, 1), position(which, centers, p));
}

template <typename T>
Tensor<T> Model<T>::encode(int which, const geometry::PatchedCloud& pc, const std::vector<Tensor<T>>& p) const {
  return encode_raw(which, patches_tensor<T>(pc), centers_tensor<T>(pc), p);
}

template <typename T>
Tensor<T> Model<T>::attention(const Tensor<T>& x, const BlockIx& ix, const std::vector<Tensor<T>>& p) const {
  const std::size_t n = x.dim(0), d = static_cast<std::size_t>(cfg_.dim), h = static_cast<std::size_t>(cfg_.heads);
  const std::size_t dh = d / h;
  Tensor<T> qkv = permute(reshape(linear(x, ix.qkv, p), {n, 3, h, dh}), {1, 2, 0, 3});  // [3, h, n, dh]
  auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {h, n, dh}); };
  Tensor<T> o = softmax_attention(part(0), part(1), part(2));  // [h, n, dh]
  return linear(reshape(permute(o, {1, 0, 2}), {n, d}), ix.proj, p);
}

template <typename T>
Tensor<T> Model<T>::mlp(const Tensor<T>& x, const BlockIx& ix, const std::vector<Tensor<T>>& p) const {
  return linear(gelu(linear(x, ix.fc1, p)), ix.fc2, p);
}

template <typename T>
Tensor<T> Model<T>::residual(const Tensor<T>& x, const Tensor<T>& branch, const ForwardOptions& opt,
                             std::uint64_t layer) const {
  const double rate = cfg_.drop_path_rate;
  if (!opt.training || rate <= 0.0) return add(x, branch);
  Rng rng = Rng::keyed(opt.seed, {opt.step, opt.sample, layer});
  if (rng.uniform() < rate) return x;
  return add(x, scale(branch, static_cast<T>(1.0 / (1.0 - rate))));
}

template <typename T>
Tensor<T> Model<T>::block(const Tensor<T>& x, const BlockIx& ix, const std::vector<Tensor<T>>& p,
                          const ForwardOptions& opt, std::uint64_t layer) const {
  const T eps = static_cast<T>(kNormEps);
  Tensor<T> h = residual(x, attention(layer_norm(x, p[ix.ln1.gamma], p[ix.ln1.beta], eps), ix, p), opt, 2 * layer);
  return residual(h, mlp(layer_norm(h, p[ix.ln2.gamma], p[ix.ln2.beta], eps), ix, p), opt, 2 * layer + 1);
}

template <typename T>
Tensor<T> Model<T>::modulated_block(const Tensor<T>& x, const Tensor<T>& task, const BlockIx& ix,
                                    const std::vector<Tensor<T>>& p, const ForwardOptions& opt,
                                    std::uint64_t layer) const {
  const std::size_t d = static_cast<std::size_t>(cfg_.dim);
  const T eps = static_cast<T>(kNormEps);
  // (sigma, eta, kappa) for attention, then for the MLP; each [1, d].
  const Tensor<T> mod = matmul(reshape(task, {1, d}), p[ix.modulation]);
  auto chunk = [&](std::size_t i) { return slice(mod, 1, i * d, (i + 1) * d); };
  auto modulate = [&](const Tensor<T>& h, std::size_t base) {
    return add(mul(add_scalar(chunk(base + 1), T(1)), layer_norm(h, Tensor<T>(), Tensor<T>(), eps)), chunk(base + 2));
  };
  Tensor<T> h = residual(x, mul(chunk(0), attention(modulate(x, 0), ix, p)), opt, 2 * layer);
  return residual(h, mul(chunk(3), mlp(modulate(h, 3), ix, p)), opt, 2 * layer + 1);
}

// --- networks ---------------------------------------------------------------------------------

template <typename T>
Tensor<T> Model<T>::den_forward(const Tensor<T>& prompt_in, const Tensor<T>& prompt_tgt,
                                const std::vector<Tensor<T>>& p, const ForwardOptions& opt) const {
  if (den_.empty()) throw ConfigError(std::string(variant_name(cfg_.variant)) + " has no DEN");
  if (prompt_in.shape() != prompt_tgt.shape()) throw ShapeError("den_forward: prompt token sequences differ in length");
  Tensor<T> h = concat<T>({p[task_token_], prompt_in, prompt_tgt}, 0);
  for (std::size_t i = 0; i < den_.size(); ++i) h = block(h, den_[i], p, opt, kDenLayer + i);
  h = layer_norm(h, p[den_norm_.gamma], p[den_norm_.beta], static_cast<T>(kNormEps));
  return reshape(slice(h, 0, 0, 1), {static_cast<std::size_t>(cfg_.dim)});
}

template <typename T>
Tensor<T> Model<T>::dtn_forward(const Tensor<T>& tokens, const Tensor<T>& task, const std::vector<Tensor<T>>& p,
                                const ForwardOptions& opt, bool final_norm) const {
  if (dtn_.empty()) throw ConfigError(std::string(variant_name(cfg_.variant)) + " has no DTN");
  Tensor<T> h = tokens;
  for (std::size_t i = 0; i < dtn_.size(); ++i) h = modulated_block(h, task, dtn_[i], p, opt, kDtnLayer + i);
  if (!final_norm) return h;
  return layer_norm(h, p[dtn_norm_.gamma], p[dtn_norm_.beta], static_cast<T>(kNormEps));
}

template <typename T>
Tensor<T> Model<T>::head_project(const Tensor<T>& tokens, const Tensor<T>& centers,
                                 const std::vector<Tensor<T>>& p) const {
  const std::size_t m = tokens.dim(0), k = static_cast<std::size_t>(cfg_.patch_size);
  Tensor<T> offsets = reshape(linear(gelu(linear(tokens, head1_, p)), head2_, p), {m, k, 3});
  return add(offsets, reshape(centers, {m, 1, 3}));
}

template <typename T>
Tensor<T> Model<T>::task_feature(const geometry::JointPatches& jp, Task task, const std::vector<Tensor<T>>& p) const {
  if (cfg_.variant == Variant::static_den) {
    return reshape(index_select(p[task_table_], {static_cast<std::size_t>(task)}), {static_cast<std::size_t>(cfg_.dim)});
  }
  if (cfg_.variant != Variant::deformpic) {
    throw ConfigError("task features need a DEN or task table; variant " + std::string(variant_name(cfg_.variant)) +
                      " has neither");
  }
  return den_forward(encode(0, jp.prompt_input, p), encode(0, jp.prompt_target, p), p, ForwardOptions{});
}

template <typename T>
ForwardResult<T> Model<T>::forward(const geometry::JointPatches& jp, Task task, const std::vector<Tensor<T>>& p,
                                   const ForwardOptions& opt) const {
  if (p.size() != params_.size()) throw ShapeError("parameter view count does not match the model");
  const auto m = static_cast<std::size_t>(cfg_.patches), k = static_cast<std::size_t>(cfg_.patch_size);
  for (const auto* pc : {&jp.prompt_input, &jp.prompt_target, &jp.query_input, &jp.query_target}) {
    if (pc->count() != m || pc->k != k) {
      throw ShapeError("patched sample is " + std::to_string(pc->count()) + "x" + std::to_string(pc->k) +
                       ", model expects " + std::to_string(m) + "x" + std::to_string(k));
    }
  }
  return is_mpm(cfg_.variant) ? forward_mpm(jp, p, opt) : forward_deformpic(jp, task, p, opt);
}

template <typename T>
ForwardResult<T> Model<T>::forward_deformpic(const geometry::JointPatches& jp, Task task,
                                             const std::vector<Tensor<T>>& p, const ForwardOptions& opt) const {
  ForwardResult<T> r;
  if (cfg_.variant == Variant::static_den) {
    r.task_feature = task_feature(jp, task, p);
  } else {
    r.task_feature = den_forward(encode(0, jp.prompt_input, p), encode(0, jp.prompt_target, p), p, opt);
  }
  const Tensor<T> h = dtn_forward(encode(1, jp.query_input, p), r.task_feature, p, opt);
  r.prediction = head_project(h, centers_tensor<T>(jp.query_input), p);
  r.loss = cloud_loss(r.prediction, patches_tensor<T>(jp.query_target));
  return r;
}

template <typename T>
ForwardResult<T> Model<T>::forward_mpm(const geometry::JointPatches& jp, const std::vector<Tensor<T>>& p,
                                       const ForwardOptions& opt) const {
  const auto m = static_cast<std::size_t>(cfg_.patches);
  const MaskPlan plan = opt.mask ? *opt.mask : query_only_mask(m);
  if (plan.prompt_target.size() != m || plan.query_target.size() != m) throw ShapeError("mask plan length differs from m");

  auto stream = [&](std::size_t s) { return slice(p[stream_embed_], 0, s, s + 1); };
  // Masked target patches become the mask token placed at the aligned input
  // center; visible ones are encoded from their own patch and center.
  auto target_stream = [&](const geometry::PatchedCloud& tgt, const geometry::PatchedCloud& in,
                           const std::vector<bool>& masked) {
    const Tensor<T> placeholder = add(p[mask_token_], position(0, centers_tensor<T>(in), p));
    if (std::none_of(masked.begin(), masked.end(), [](bool b) { return b; })) return encode(0, tgt, p);
    if (std::all_of(masked.begin(), masked.end(), [](bool b) { return b; })) return placeholder;
    std::vector<std::size_t> rows(m);
    for (std::size_t j = 0; j < m; ++j) rows[j] = masked[j] ? m + j : j;
    return index_select(concat<T>({encode(0, tgt, p), placeholder}, 0), rows);
  };

  Tensor<T> seq = concat<T>({add(encode(0, jp.prompt_input, p), stream(0)),
                             add(target_stream(jp.prompt_target, jp.prompt_input, plan.prompt_target), stream(1)),
                             add(encode(0, jp.query_input, p), stream(2)),
                             add(target_stream(jp.query_target, jp.query_input, plan.query_target), stream(3))},
                            0);
  for (std::size_t i = 0; i < mpm_.size(); ++i) seq = block(seq, mpm_[i], p, opt, kMpmLayer + i);
  seq = layer_norm(seq, p[mpm_norm_.gamma], p[mpm_norm_.beta], static_cast<T>(kNormEps));

  // Head rows: masked prompt-target positions, then every query-target position.
  std::vector<std::size_t> rows, prompt_rows;
  for (std::size_t j = 0; j < m; ++j)
    if (plan.prompt_target[j]) prompt_rows.push_back(j);
  for (std::size_t j : prompt_rows) rows.push_back(m + j);
  for (std::size_t j = 0; j < m; ++j) rows.push_back(3 * m + j);
  std::vector<T> centers;
  const auto pc = jp.prompt_input.centers.xyz(), qc = jp.query_input.centers.xyz();
  for (std::size_t j : prompt_rows) centers.insert(centers.end(), pc.begin() + 3 * j, pc.begin() + 3 * j + 3);
  centers.insert(centers.end(), qc.begin(), qc.end());
  const Tensor<T> pred = head_project(index_select(seq, rows), Tensor<T>::from_data({rows.size(), 3}, std::move(centers)), p);

  ForwardResult<T> r;
  const std::size_t np = prompt_rows.size();
  r.prediction = slice(pred, 0, np, np + m);

  std::vector<T> gt;
  std::vector<std::size_t> loss_rows;
  const auto& ptp = jp.prompt_target.patches;
  const auto& qtp = jp.query_target.patches;
  const std::size_t stride = jp.query_target.k * 3;
  for (std::size_t i = 0; i < np; ++i) {
    gt.insert(gt.end(), ptp.begin() + prompt_rows[i] * stride, ptp.begin() + (prompt_rows[i] + 1) * stride);
    loss_rows.push_back(i);
  }
  for (std::size_t j = 0; j < m; ++j) {
    gt.insert(gt.end(), qtp.begin() + j * stride, qtp.begin() + (j + 1) * stride);
    if (plan.query_target[j]) loss_rows.push_back(np + j);
  }
  r.loss = masked_patch_loss(pred, Tensor<T>::from_data(pred.shape(), std::move(gt)), loss_rows);
  return r;
}

// --- instantiation ------------------------------------------------------------------------------

#define DEFORMPIC_MODEL_INSTANTIATE(T)                                                                        \
  template class ParameterSet<T>;                                                                             \
  template class Model<T>;                                                                                    \
  template Tensor<T> patches_tensor<T>(const geometry::PatchedCloud&);                                        \
  template Tensor<T> centers_tensor<T>(const geometry::PatchedCloud&);                                        \
  template Tensor<T> cloud_loss<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> masked_patch_loss<T>(const Tensor<T>&, const Tensor<T>&, const std::vector<std::size_t>&);

DEFORMPIC_MODEL_INSTANTIATE(float)
DEFORMPIC_MODEL_INSTANTIATE(double)

#undef DEFORMPIC_MODEL_INSTANTIATE

template void copy_params<double, float>(const ParameterSet<float>&, ParameterSet<double>&);
template void copy_params<float, double>(const ParameterSet<double>&, ParameterSet<float>&);
template void copy_params<float, float>(const ParameterSet<float>&, ParameterSet<float>&);

}  // namespace deformpic::model
