#pragma once

// DeformPIC and its masked-point-modeling baselines.
//
// Parameters live in a ParameterSet; forward passes read them through
// per-call views (Tensor::share_leaf) so several samples can be
// differentiated concurrently, each with private gradient buffers.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deformpic/geometry.hpp"
#include "deformpic/sample.hpp"
#include "deformpic/tensor.hpp"

namespace deformpic::model {

enum class Variant : std::uint8_t { deformpic = 0, mpm_baseline = 1, mpm_consistent = 2, static_den = 3 };

inline constexpr std::array<Variant, 4> kAllVariants = {Variant::deformpic, Variant::mpm_baseline,
                                                        Variant::mpm_consistent, Variant::static_den};

/// CLI spelling: deformpic, mpm-baseline, mpm-consistent, static-den.
std::string_view variant_name(Variant v);
/// Accepts '-' or '_' separators; the error lists the valid names.
Variant parse_variant(std::string_view name);
std::string variant_list();

bool is_mpm(Variant v);

struct ModelConfig {
  int dim = 64;
  int heads = 4;
  int den_blocks = 2;
  int dtn_blocks = 4;
  int patches = 16;    // m
  int patch_size = 8;  // k
  double drop_path_rate = 0.0;
  Variant variant = Variant::deformpic;
  int mlp_ratio = 4;
  /// Fraction of target-stream patches masked while training mpm_baseline.
  double mask_ratio = 0.7;

  static ModelConfig paper();
  static ModelConfig desk();

  /// Depth of the single MPM transformer, chosen to match the DeformPIC
  /// parameter count: den_blocks + ceil(1.5 * dtn_blocks).
  int mpm_blocks() const { return den_blocks + (3 * dtn_blocks + 1) / 2; }

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  bool decay = true;  // false for norms, biases, tokens and embedding tables
};

template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value, bool decay);

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }
  const std::vector<Param<T>>& all() const { return params_; }

  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t numel() const;

  /// Leaf views sharing the parameter values with private gradients.
  std::vector<Tensor<T>> views() const;

  /// All values concatenated in parameter order.
  std::vector<T> flat_values() const;
  void set_flat_values(std::span<const T> values);

 private:
  std::vector<Param<T>> params_;
};

/// Which target-stream patches the MPM models replace by the mask token.
struct MaskPlan {
  std::vector<bool> prompt_target;
  std::vector<bool> query_target;

  std::size_t masked() const;
};

/// round(ratio * m) random positions per target stream.
MaskPlan random_mask(std::size_t m, double ratio, Rng& rng);
/// Query target fully masked, prompt target visible.
MaskPlan query_only_mask(std::size_t m);

/// Mask used for a training step of the given variant.
MaskPlan training_mask(const ModelConfig& cfg, Rng& rng);

struct ForwardOptions {
  bool training = false;
  /// Keys for the drop-path stream: (seed, step, sample, layer).
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t sample = 0;
  /// MPM only; defaults to query_only_mask.
  const MaskPlan* mask = nullptr;
};

template <typename T>
struct ForwardResult {
  Tensor<T> prediction;  // [m, k, 3] predicted query-target patches (absolute)
  Tensor<T> loss;        // scalar
  Tensor<T> task_feature;  // [d]; undefined for MPM variants
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  /// Prediction and objective for one patched sample.
  ForwardResult<T> forward(const geometry::JointPatches& jp, Task task, const std::vector<Tensor<T>>& p,
                           const ForwardOptions& opt) const;

  /// Task token for one sample (deformpic and static_den only).
  Tensor<T> task_feature(const geometry::JointPatches& jp, Task task, const std::vector<Tensor<T>>& p) const;

  // --- building blocks, exposed for tests ------------------------------------

  /// Mini-PointNet over re-centered patches plus positional MLP on centers.
  /// which: 0 = prompt encoder (or the shared MPM encoder), 1 = query encoder.
  Tensor<T> encode(int which, const geometry::PatchedCloud& pc, const std::vector<Tensor<T>>& p) const;
  Tensor<T> encode_raw(int which, const Tensor<T>& patches, const Tensor<T>& centers,
                       const std::vector<Tensor<T>>& p) const;

  Tensor<T> den_forward(const Tensor<T>& prompt_in, const Tensor<T>& prompt_tgt, const std::vector<Tensor<T>>& p,
                        const ForwardOptions& opt) const;

  /// DTN over [m, d] tokens; final_norm = false returns the pre-LN stream.
  Tensor<T> dtn_forward(const Tensor<T>& tokens, const Tensor<T>& task, const std::vector<Tensor<T>>& p,
                        const ForwardOptions& opt, bool final_norm = true) const;

  /// Per-token MLP to k offsets, added to `centers` [m, 3] -> [m, k, 3].
  Tensor<T> head_project(const Tensor<T>& tokens, const Tensor<T>& centers, const std::vector<Tensor<T>>& p) const;

 private:
  struct LinearIx {
    std::size_t w = 0, b = 0;
    bool bias = true;
  };
  struct NormIx {
    std::size_t gamma = 0, beta = 0;
  };
  struct BlockIx {
    NormIx ln1, ln2;  // unused (affine-free) in modulated blocks
    LinearIx qkv, proj, fc1, fc2;
    std::size_t modulation = 0;  // [d, 6d], modulated blocks only
  };
  struct EncoderIx {
    LinearIx fc1, fc2, pos1, pos2;
  };

  LinearIx add_linear(const std::string& name, int in, int out, bool bias, bool zero, Rng& rng);
  NormIx add_norm(const std::string& name);
  BlockIx add_block(const std::string& name, bool modulated, bool zero_out, Rng& rng);
  EncoderIx add_encoder(const std::string& name, Rng& rng);
  std::size_t add_token(const std::string& name, Shape shape, Rng& rng);

  Tensor<T> linear(const Tensor<T>& x, const LinearIx& ix, const std::vector<Tensor<T>>& p) const;
  Tensor<T> position(int which, const Tensor<T>& centers, const std::vector<Tensor<T>>& p) const;
  Tensor<T> attention(const Tensor<T>& x, const BlockIx& ix, const std::vector<Tensor<T>>& p) const;
  Tensor<T> mlp(const Tensor<T>& x, const BlockIx& ix, const std::vector<Tensor<T>>& p) const;
  Tensor<T> block(const Tensor<T>& x, const BlockIx& ix, const std::vector<Tensor<T>>& p, const ForwardOptions& opt,
                  std::uint64_t layer) const;
  Tensor<T> modulated_block(const Tensor<T>& x, const Tensor<T>& task, const BlockIx& ix,
                            const std::vector<Tensor<T>>& p, const ForwardOptions& opt, std::uint64_t layer) const;
  /// Residual add with stochastic depth on the branch.
  Tensor<T> residual(const Tensor<T>& x, const Tensor<T>& branch, const ForwardOptions& opt, std::uint64_t layer) const;

  ForwardResult<T> forward_deformpic(const geometry::JointPatches& jp, Task task, const std::vector<Tensor<T>>& p,
                                     const ForwardOptions& opt) const;
  ForwardResult<T> forward_mpm(const geometry::JointPatches& jp, const std::vector<Tensor<T>>& p,
                               const ForwardOptions& opt) const;

  ModelConfig cfg_;
  ParameterSet<T> params_;
  EncoderIx enc_prompt_{}, enc_query_{};
  std::size_t task_token_ = 0, task_table_ = 0, mask_token_ = 0, stream_embed_ = 0;
  std::vector<BlockIx> den_, dtn_, mpm_;
  NormIx den_norm_{}, dtn_norm_{}, mpm_norm_{};
  LinearIx head1_{}, head2_{};
};

/// Patches and centers of a PatchedCloud as tensors: [m, k, 3] and [m, 3].
template <typename T>
Tensor<T> patches_tensor(const geometry::PatchedCloud& pc);
template <typename T>
Tensor<T> centers_tensor(const geometry::PatchedCloud& pc);

/// Chamfer-L2 between the flattened prediction and flattened ground truth.
template <typename T>
Tensor<T> cloud_loss(const Tensor<T>& pred_patches, const Tensor<T>& gt_patches);

/// Mean per-patch Chamfer-L2 over the selected rows; 0 when none are selected.
template <typename T>
Tensor<T> masked_patch_loss(const Tensor<T>& pred_patches, const Tensor<T>& gt_patches,
                            const std::vector<std::size_t>& rows);

/// Copies parameter values across precisions (float model -> double gradcheck).
template <typename To, typename From>
void copy_params(const ParameterSet<From>& from, ParameterSet<To>& to);

}  // namespace deformpic::model
