#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rep/errors.hpp"
#include "rep/ops.hpp"
#include "rep/rng.hpp"
#include "rep/tensor.hpp"

namespace rep {

struct ViTConfig {
  std::size_t image_side = 32;
  std::size_t patch_side = 8;
  std::size_t depth = 6;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t n_classes = 10;

  std::size_t grid_side() const { return image_side / patch_side; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  /// Patches plus CLS, before any prompt is prepended.
  std::size_t base_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_side * patch_side; }
  std::size_t head_dim() const { return width / heads; }
  std::size_t mlp_width() const { return width * mlp_ratio; }

  void validate() const {
    if (image_side == 0 || patch_side == 0 || image_side % patch_side != 0) {
      throw ConfigError("image_side must be a positive multiple of patch_side");
    }
    if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("width must be divisible by heads");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (n_classes == 0) throw ConfigError("n_classes must be positive");
  }

  bool same_body(const ViTConfig& o) const {
    return image_side == o.image_side && patch_side == o.patch_side && depth == o.depth && width == o.width &&
           heads == o.heads && mlp_ratio == o.mlp_ratio;
  }
};

/// Token sequence laid out [CLS | prompts | patches] for a batch.
struct TokenBatch {
  Tensor x;                        // [B, T, D]
  std::size_t prompt_tokens = 0;   // rows 1..prompt_tokens
  bool prompted = false;
  std::vector<double> sizes;       // [B * T] merged-cardinality per token

  std::size_t batch() const { return x.dim(0); }
  std::size_t tokens() const { return x.dim(1); }
  /// CLS plus prompts; these rows are never merged.
  std::size_t protected_count() const { return 1 + prompt_tokens; }
};

/// Inserts per-sample prompts [B, L_p, D] right after CLS.
inline TokenBatch prepend(TokenBatch tokens, const Tensor& prompts) {
  if (tokens.prompted) throw ConfigError("prompts already prepended to this token batch");
  if (prompts.rank() != 3 || prompts.dim(0) != tokens.batch() || prompts.dim(2) != tokens.x.dim(2)) {
    throw ConfigError("prompt block shape " + shape_str(prompts.shape()) + " does not fit tokens " +
                      shape_str(tokens.x.shape()));
  }
  tokens.prompted = true;
  const std::size_t lp = prompts.dim(1);
  if (lp == 0) return tokens;
  const std::size_t B = tokens.batch(), T = tokens.tokens();
  tokens.x = insert_rows(tokens.x, 1, prompts);
  std::vector<double> sizes;
  sizes.reserve(B * (T + lp));
  for (std::size_t b = 0; b < B; ++b) {
    sizes.push_back(tokens.sizes[b * T]);
    sizes.insert(sizes.end(), lp, 1.0);
    sizes.insert(sizes.end(), tokens.sizes.begin() + static_cast<std::ptrdiff_t>(b * T + 1),
                 tokens.sizes.begin() + static_cast<std::ptrdiff_t>((b + 1) * T));
  }
  tokens.sizes = std::move(sizes);
  tokens.prompt_tokens = lp;
  return tokens;
}

/// Per-layer injection points used by token merging and layer dropping.
/// Layer indices passed to hooks are 0-based.
class BlockHooks {
 public:
  virtual ~BlockHooks() = default;
  /// Returning false skips the whole residual block (identity).
  virtual bool execute_block(std::size_t /*layer*/) { return true; }
  virtual bool wants_merge(std::size_t /*layer*/) const { return false; }
  /// Called between attention and MLP. `keys` is [B, T, key_dim]: the
  /// attention keys averaged over heads.
  virtual void after_attention(std::size_t /*layer*/, TokenBatch& /*tokens*/, std::span<const double> /*keys*/,
                               std::size_t /*key_dim*/) {}
};

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t sample = 0;
  Tensor weights;  // [T x T], rows sum to 1
};

struct ForwardOptions {
  BlockHooks* hooks = nullptr;
  bool record_attention = false;
  bool record_activations = false;
  bool skip_head = false;  // leave logits undefined
};

struct ForwardResult {
  Tensor logits;                           // [B x C]
  Tensor features;                         // [B x D] normalized CLS
  std::vector<AttentionRecord> attention;
  std::vector<Tensor> block_outputs;       // [B, T_l, D] per layer, when requested
  std::vector<bool> executed;              // per layer
};

struct TransformerBlock {
  Parameter ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  Parameter ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

  std::vector<Parameter*> parameters() {
    return {&ln1_g, &ln1_b, &qkv_w, &qkv_b, &proj_w, &proj_b, &ln2_g, &ln2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
  }
};

inline constexpr double kLayerNormEps = 1e-6;

namespace detail {

inline Tensor init_normal(Shape shape, double stddev, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * rng.normal();
  return t;
}

}  // namespace detail

/// Pre-norm vision transformer with a CLS token and linear head.
class VisionTransformer {
 public:
  VisionTransformer() = default;

  VisionTransformer(const ViTConfig& cfg, RngStream rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.width, P = cfg_.patch_dim(), M = cfg_.mlp_width();
    auto w = [&](const std::string& name, Shape s, double sd) {
      return Parameter(name, detail::init_normal(std::move(s), sd, rng), true);
    };
    auto c = [&](const std::string& name, Shape s, double v) { return Parameter(name, Tensor(std::move(s), v), true); };
    patch_w_ = w("patch.w", {P, D}, 1.0 / std::sqrt(static_cast<double>(P)));
    patch_b_ = c("patch.b", {D}, 0.0);
    cls_ = w("cls", {1, D}, 0.02);
    pos_ = w("pos", {cfg_.base_tokens(), D}, 0.02);
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(D));
    const double sd_m = 1.0 / std::sqrt(static_cast<double>(M));
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      blocks_.push_back(TransformerBlock{
          c(p + "ln1.g", {D}, 1.0), c(p + "ln1.b", {D}, 0.0),
          w(p + "qkv.w", {D, 3 * D}, sd_d), c(p + "qkv.b", {3 * D}, 0.0),
          w(p + "proj.w", {D, D}, sd_d), c(p + "proj.b", {D}, 0.0),
          c(p + "ln2.g", {D}, 1.0), c(p + "ln2.b", {D}, 0.0),
          w(p + "fc1.w", {D, M}, sd_d), c(p + "fc1.b", {M}, 0.0),
          w(p + "fc2.w", {M, D}, sd_m), c(p + "fc2.b", {D}, 0.0)});
    }
    norm_g_ = c("norm.g", {D}, 1.0);
    norm_b_ = c("norm.b", {D}, 0.0);
    reset_head(cfg_.n_classes, rng.child("head"));
  }

  const ViTConfig& config() const { return cfg_; }

  /// Fresh trainable classifier over `n_classes`.
  void reset_head(std::size_t n_classes, RngStream rng) {
    cfg_.n_classes = n_classes;
    head_w_ = Parameter("head.w", detail::init_normal({cfg_.width, n_classes}, 0.01, rng), true);
    head_b_ = Parameter("head.b", Tensor({n_classes}, 0.0), true);
  }

  /// Everything except the classifier head, in checkpoint order.
  std::vector<Parameter*> body_parameters() {
    std::vector<Parameter*> out{&patch_w_, &patch_b_, &cls_, &pos_};
    for (auto& b : blocks_)
      for (Parameter* p : b.parameters()) out.push_back(p);
    out.push_back(&norm_g_);
    out.push_back(&norm_b_);
    return out;
  }
  std::vector<Parameter*> head_parameters() { return {&head_w_, &head_b_}; }
  std::vector<Parameter*> parameters() {
    auto out = body_parameters();
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
  }

  void set_body_trainable(bool on) {
    for (Parameter* p : body_parameters()) p->set_trainable(on);
  }

  std::size_t parameter_bytes() {
    std::size_t n = 0;
    for (Parameter* p : parameters()) n += p->tensor.numel() * sizeof(double);
    return n;
  }

  /// images[B, S, S] -> patches[B, g*g, p*p], row-major patch order.
  Tensor patchify(const Tensor& images) const {
    const std::size_t S = cfg_.image_side, p = cfg_.patch_side, g = cfg_.grid_side();
    if (images.rank() != 3 || images.dim(1) != S || images.dim(2) != S) {
      throw InputError("images must be [B, " + std::to_string(S) + ", " + std::to_string(S) + "], got " +
                       shape_str(images.shape()));
    }
    const std::size_t B = images.dim(0);
    Tensor out({B, g * g, p * p});
    auto o = out.data();
    auto in = images.data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t gy = 0; gy < g; ++gy)
        for (std::size_t gx = 0; gx < g; ++gx)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              o[((b * g * g) + gy * g + gx) * p * p + y * p + x] = in[b * S * S + (gy * p + y) * S + gx * p + x];
    return out;
  }

  /// Patch embedding + CLS + positions. Output tokens are [CLS | patches].
  TokenBatch embed(const Tensor& images) const {
    const Tensor patches = patchify(images);
    const std::size_t B = patches.dim(0);
    Tensor x = linear(patches, patch_w_.tensor, patch_b_.tensor);
    std::vector<std::size_t> zeros(B, 0);
    const Tensor cls_rows = gather_stack(std::span<const Tensor>(&cls_.tensor, 1), zeros);
    x = insert_rows(x, 0, cls_rows);
    x = add(x, pos_.tensor);
    TokenBatch tb;
    tb.x = std::move(x);
    tb.sizes.assign(B * cfg_.base_tokens(), 1.0);
    return tb;
  }

  ForwardResult forward(TokenBatch tokens, const ForwardOptions& opts = {}) const {
    ForwardResult res;
    const std::size_t H = cfg_.heads, D = cfg_.width, hd = cfg_.head_dim();
    res.executed.assign(cfg_.depth, false);
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      if (opts.hooks && !opts.hooks->execute_block(l)) {
        if (opts.record_activations) res.block_outputs.push_back(tokens.x);
        continue;
      }
      res.executed[l] = true;
      const TransformerBlock& blk = blocks_[l];
      std::vector<double> probs;
      Tensor h = layer_norm(tokens.x, blk.ln1_g.tensor, blk.ln1_b.tensor, kLayerNormEps);
      Tensor qkv = linear(h, blk.qkv_w.tensor, blk.qkv_b.tensor);
      Tensor a = self_attention(qkv, H, tokens.sizes, opts.record_attention ? &probs : nullptr);
      tokens.x = add(tokens.x, linear(a, blk.proj_w.tensor, blk.proj_b.tensor));
      if (opts.record_attention) record_attention(res, l, tokens.batch(), tokens.tokens(), probs);

      if (opts.hooks && opts.hooks->wants_merge(l)) {
        const std::size_t B = tokens.batch(), T = tokens.tokens();
        std::vector<double> keys(B * T * hd, 0.0);
        auto qv = qkv.data();
        for (std::size_t r = 0; r < B * T; ++r)
          for (std::size_t hh = 0; hh < H; ++hh)
            for (std::size_t j = 0; j < hd; ++j) keys[r * hd + j] += qv[r * 3 * D + D + hh * hd + j] / static_cast<double>(H);
        const std::size_t prot = tokens.protected_count();
        opts.hooks->after_attention(l, tokens, keys, hd);
        if (tokens.protected_count() > prot || tokens.x.rank() != 3 || tokens.batch() != B ||
            tokens.sizes.size() != B * tokens.tokens() || tokens.tokens() < prot) {
          throw InternalError("hook at layer " + std::to_string(l) + " returned an inconsistent token layout");
        }
      }

      Tensor m = layer_norm(tokens.x, blk.ln2_g.tensor, blk.ln2_b.tensor, kLayerNormEps);
      m = linear(gelu(linear(m, blk.fc1_w.tensor, blk.fc1_b.tensor)), blk.fc2_w.tensor, blk.fc2_b.tensor);
      tokens.x = add(tokens.x, m);
      if (opts.record_activations) res.block_outputs.push_back(tokens.x);
    }
    res.features = layer_norm(select_row(tokens.x, 0), norm_g_.tensor, norm_b_.tensor, kLayerNormEps);
    if (!opts.skip_head) res.logits = linear(res.features, head_w_.tensor, head_b_.tensor);
    return res;
  }

  /// Query feature: normalized CLS of a clean (prompt-free, hook-free) pass.
  Tensor query_features(const Tensor& images) const {
    NoGradGuard no_grad;
    ForwardOptions opts;
    opts.skip_head = true;
    return forward(embed(images), opts).features;
  }

 private:
  void record_attention(ForwardResult& res, std::size_t layer, std::size_t B, std::size_t T,
                        const std::vector<double>& probs) const {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const auto first = probs.begin() + static_cast<std::ptrdiff_t>((b * cfg_.heads + h) * T * T);
        res.attention.push_back(AttentionRecord{layer, h, b, Tensor({T, T}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(T * T)))});
      }
  }

  ViTConfig cfg_;
  Parameter patch_w_, patch_b_, cls_, pos_;
  std::vector<TransformerBlock> blocks_;
  Parameter norm_g_, norm_b_;
  Parameter head_w_, head_b_;
};

}  // namespace rep
