// Patch-transformer temporal encoder with exogenous embeddings and a
// relational GCN over the hierarchy graph.
#pragma once

#include "powerpm/autograd.hpp"
#include "powerpm/data.hpp"
#include "powerpm/errors.hpp"
#include "powerpm/hierarchy.hpp"
#include "powerpm/mask.hpp"
#include "powerpm/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace powerpm {

using ag::Matrix;
using ag::Var;

// ---------------------------------------------------------------------------
// Patching

struct PatchConfig {
  int patch_len = 48;
  int stride = 24;

  /// ceil((T_w - P) / S) + 1.
  int num_patches(int window) const {
    validate(window);
    return (window - patch_len + stride - 1) / stride + 1;
  }

  void validate(int window) const {
    if (stride < 1 || patch_len < stride) {
      throw std::invalid_argument("patch config needs 1 <= stride <= patch_len");
    }
    if (window < patch_len) {
      throw std::invalid_argument("window length " + std::to_string(window) + " shorter than patch length " +
                                  std::to_string(patch_len));
    }
  }
};

/// Maps patch slots to window time indices. Patch j starts at j * S; a final
/// patch that would run past the window keeps its real points at the right
/// end and is left-padded by repeating its first covered point.
struct PatchLayout {
  int window = 0;
  int patch_len = 0;
  int stride = 0;
  int count = 0;
  std::vector<int> starts;
  std::vector<int> pad;

  PatchLayout() = default;
  PatchLayout(int window_len, const PatchConfig& cfg)
      : window(window_len), patch_len(cfg.patch_len), stride(cfg.stride), count(cfg.num_patches(window_len)) {
    for (int j = 0; j < count; ++j) {
      const int s = j * stride;
      starts.push_back(s);
      pad.push_back(std::max(0, s + patch_len - window));
    }
  }

  int time_index(int j, int slot) const {
    const int p = pad[static_cast<std::size_t>(j)];
    return slot < p ? starts[static_cast<std::size_t>(j)] : starts[static_cast<std::size_t>(j)] + slot - p;
  }
  bool is_real(int j, int slot) const { return slot >= pad[static_cast<std::size_t>(j)]; }
};

/// [N_p, P] patch matrix of a window.
inline Matrix patch(std::span<const double> x, const PatchConfig& cfg) {
  const PatchLayout layout(static_cast<int>(x.size()), cfg);
  Matrix p(layout.count, cfg.patch_len);
  for (int j = 0; j < layout.count; ++j) {
    for (int s = 0; s < cfg.patch_len; ++s) p(j, s) = x[static_cast<std::size_t>(layout.time_index(j, s))];
  }
  return p;
}

// ---------------------------------------------------------------------------
// Configuration and parameters

struct ModelConfig {
  std::string scale = "tiny";
  int d_model = 768;
  int n_layers = 4;
  int d_ffn = 768;
  int n_heads = 16;
  int rgcn_layers = 2;
  /// Nonlinearity of the relational update: "relu" or "identity".
  std::string rgcn_activation = "relu";
  /// Adds the node's input representation to each relational update.
  bool rgcn_residual = true;

  static ModelConfig for_scale(const std::string& scale) {
    ModelConfig m;
    m.scale = scale;
    if (scale == "tiny") {
      m.n_layers = 4, m.d_model = 768, m.d_ffn = 768, m.n_heads = 16;
    } else if (scale == "small") {
      m.n_layers = 12, m.d_model = 768, m.d_ffn = 1024, m.n_heads = 16;
    } else if (scale == "medium") {
      m.n_layers = 18, m.d_model = 768, m.d_ffn = 2048, m.n_heads = 16;
    } else if (scale == "full") {
      m.n_layers = 26, m.d_model = 1024, m.d_ffn = 2048, m.n_heads = 16;
    } else {
      throw ConfigError("unknown model scale '" + scale + "'", "model.scale");
    }
    return m;
  }

  void validate() const {
    if (d_model < 1 || n_layers < 0 || d_ffn < 1 || n_heads < 1 || rgcn_layers < 0) {
      throw ConfigError("model dimensions must be positive", "model");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads", "model.n_heads");
    if (rgcn_activation != "relu" && rgcn_activation != "identity") {
      throw ConfigError("rgcn_activation must be relu or identity", "model.rgcn_activation");
    }
  }
};

struct TransformerLayer {
  Var ln1_gain, ln1_bias;
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln2_gain, ln2_bias;
  Var w1, b1, w2, b2;
};

struct RgcnLayer {
  Var w_self;
  std::array<Var, kRelationCount> w_rel;
};

namespace detail {

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double sd) {
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = sd * normal01(rng);
  }
  return m;
}

}  // namespace detail

/// All encoder parameters plus the masked-reconstruction head.
class EncoderState {
 public:
  ModelConfig model;
  PatchConfig patching;
  int window = 0;
  ExogenousSchema exogenous;
  std::uint64_t seed = 0;

  Var patch_weight;  // [P, d]
  Var patch_bias;    // [1, d]
  Var positional;    // [N_p, d]
  Var exo_table;     // [sum M_k, d]
  Var mask_token;    // [1, d]
  std::vector<TransformerLayer> layers;
  std::vector<RgcnLayer> rgcn;
  Var recon_weight;  // [d, P]
  Var recon_bias;    // [1, P]

  EncoderState() = default;

  static EncoderState init(const ModelConfig& model, const PatchConfig& patching, int window,
                           const ExogenousSchema& exogenous, std::uint64_t seed) {
    model.validate();
    exogenous.validate();
    EncoderState s;
    s.model = model;
    s.patching = patching;
    s.window = window;
    s.exogenous = exogenous;
    s.seed = seed;
    const int np = patching.num_patches(window);
    const int d = model.d_model, P = patching.patch_len, f = model.d_ffn;
    Rng rng(seed);
    auto param = [&](Eigen::Index r, Eigen::Index c, double sd) {
      return Var::parameter(detail::random_matrix(rng, r, c, sd));
    };
    auto zeros = [](Eigen::Index r, Eigen::Index c) { return Var::parameter(Matrix::Zero(r, c)); };
    auto ones = [](Eigen::Index r, Eigen::Index c) { return Var::parameter(Matrix::Ones(r, c)); };
    const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
    s.patch_weight = param(P, d, 1.0 / std::sqrt(static_cast<double>(P)));
    s.patch_bias = zeros(1, d);
    s.positional = param(np, d, 0.02);
    s.exo_table = param(std::max(exogenous.total_rows(), 0), d, 0.02);
    s.mask_token = param(1, d, 0.02);
    const double out_sd = sd_d / std::sqrt(2.0 * std::max(1, model.n_layers));
    for (int l = 0; l < model.n_layers; ++l) {
      TransformerLayer L;
      L.ln1_gain = ones(1, d);
      L.ln1_bias = zeros(1, d);
      L.wq = param(d, d, sd_d);
      L.bq = zeros(1, d);
      L.wk = param(d, d, sd_d);
      L.bk = zeros(1, d);
      L.wv = param(d, d, sd_d);
      L.bv = zeros(1, d);
      L.wo = param(d, d, out_sd);
      L.bo = zeros(1, d);
      L.ln2_gain = ones(1, d);
      L.ln2_bias = zeros(1, d);
      L.w1 = param(d, f, sd_d);
      L.b1 = zeros(1, f);
      L.w2 = param(f, d, 1.0 / std::sqrt(static_cast<double>(f)) / std::sqrt(2.0 * std::max(1, model.n_layers)));
      L.b2 = zeros(1, d);
      s.layers.push_back(std::move(L));
    }
    for (int l = 0; l < model.rgcn_layers; ++l) {
      RgcnLayer R;
      const double sd = model.rgcn_residual ? 0.1 * sd_d : sd_d;
      R.w_self = model.rgcn_residual ? param(d, d, sd) : Var::parameter(Matrix::Identity(d, d) + detail::random_matrix(rng, d, d, 0.1 * sd_d));
      for (auto& w : R.w_rel) w = param(d, d, sd);
      s.rgcn.push_back(std::move(R));
    }
    s.recon_weight = param(d, P, sd_d);
    s.recon_bias = zeros(1, P);
    return s;
  }

  EncoderState(const EncoderState& o) { copy_from(o); }
  EncoderState& operator=(const EncoderState& o) {
    if (this != &o) copy_from(o);
    return *this;
  }
  EncoderState(EncoderState&&) = default;
  EncoderState& operator=(EncoderState&&) = default;

  int num_patches() const { return patching.num_patches(window); }

  /// Encoder parameters (everything except the reconstruction head), in a
  /// fixed order with stable names.
  std::vector<std::pair<std::string, Var>> encoder_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    out.emplace_back("patch.weight", patch_weight);
    out.emplace_back("patch.bias", patch_bias);
    out.emplace_back("positional", positional);
    out.emplace_back("exogenous.table", exo_table);
    out.emplace_back("mask_token", mask_token);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "temporal." + std::to_string(l) + ".";
      const auto& L = layers[l];
      out.emplace_back(p + "ln1.gain", L.ln1_gain);
      out.emplace_back(p + "ln1.bias", L.ln1_bias);
      out.emplace_back(p + "attn.wq", L.wq);
      out.emplace_back(p + "attn.bq", L.bq);
      out.emplace_back(p + "attn.wk", L.wk);
      out.emplace_back(p + "attn.bk", L.bk);
      out.emplace_back(p + "attn.wv", L.wv);
      out.emplace_back(p + "attn.bv", L.bv);
      out.emplace_back(p + "attn.wo", L.wo);
      out.emplace_back(p + "attn.bo", L.bo);
      out.emplace_back(p + "ln2.gain", L.ln2_gain);
      out.emplace_back(p + "ln2.bias", L.ln2_bias);
      out.emplace_back(p + "ffn.w1", L.w1);
      out.emplace_back(p + "ffn.b1", L.b1);
      out.emplace_back(p + "ffn.w2", L.w2);
      out.emplace_back(p + "ffn.b2", L.b2);
    }
    for (std::size_t l = 0; l < rgcn.size(); ++l) {
      const std::string p = "rgcn." + std::to_string(l) + ".";
      out.emplace_back(p + "self", rgcn[l].w_self);
      for (int r = 0; r < kRelationCount; ++r) {
        out.emplace_back(p + relation_name(static_cast<Relation>(r)), rgcn[l].w_rel[static_cast<std::size_t>(r)]);
      }
    }
    return out;
  }

  std::vector<std::pair<std::string, Var>> head_parameters() const {
    return {{"head.reconstruct.weight", recon_weight}, {"head.reconstruct.bias", recon_bias}};
  }

  std::vector<std::pair<std::string, Var>> named_parameters() const {
    auto out = encoder_parameters();
    for (auto& p : head_parameters()) out.push_back(std::move(p));
    return out;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (auto& [_, v] : named_parameters()) out.push_back(v);
    return out;
  }

  /// FNV-1a over the raw bytes of every encoder parameter.
  std::uint64_t encoder_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, v] : encoder_parameters()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(v.value().data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(v.value().size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

 private:
  void copy_from(const EncoderState& o) {
    model = o.model;
    patching = o.patching;
    window = o.window;
    exogenous = o.exogenous;
    seed = o.seed;
    auto deep = [](const Var& v) { return v.defined() ? Var::parameter(v.value()) : Var(); };
    patch_weight = deep(o.patch_weight);
    patch_bias = deep(o.patch_bias);
    positional = deep(o.positional);
    exo_table = deep(o.exo_table);
    mask_token = deep(o.mask_token);
    layers.clear();
    for (const auto& L : o.layers) {
      layers.push_back({deep(L.ln1_gain), deep(L.ln1_bias), deep(L.wq), deep(L.bq), deep(L.wk), deep(L.bk),
                        deep(L.wv), deep(L.bv), deep(L.wo), deep(L.bo), deep(L.ln2_gain), deep(L.ln2_bias),
                        deep(L.w1), deep(L.b1), deep(L.w2), deep(L.b2)});
    }
    rgcn.clear();
    for (const auto& R : o.rgcn) {
      RgcnLayer n;
      n.w_self = deep(R.w_self);
      for (int r = 0; r < kRelationCount; ++r) n.w_rel[static_cast<std::size_t>(r)] = deep(R.w_rel[static_cast<std::size_t>(r)]);
      rgcn.push_back(std::move(n));
    }
    recon_weight = deep(o.recon_weight);
    recon_bias = deep(o.recon_bias);
  }
};

// ---------------------------------------------------------------------------
// Embedding

/// One node's window prepared for encoding.
struct PatchInput {
  Matrix patches;   // [N_p, P]; timestamps hidden by the mask are zero
  Matrix exo_pool;  // [N_p, sum M_k]; per-patch code frequencies / P
  std::vector<int> masked;
  bool causal = false;
};

/// Window values as the model sees them: every timestamp covered by a masked
/// patch is replaced by 0.
inline std::vector<double> masked_view(std::span<const double> x, const PatchLayout& layout,
                                       const std::vector<int>& masked) {
  std::vector<double> v(x.begin(), x.end());
  for (int j : masked) {
    for (int s = 0; s < layout.patch_len; ++s) {
      if (layout.is_real(j, s)) v[static_cast<std::size_t>(layout.time_index(j, s))] = 0.0;
    }
  }
  return v;
}

/// Per-patch averaging matrix over embedding rows: entry (j, offset_k + c) is
/// the share of patch j's P slots whose code for variable k equals c.
inline Matrix exogenous_pooling(const CodeMatrix& codes, const PatchLayout& layout, const ExogenousSchema& schema) {
  const int K = schema.count();
  Matrix a = Matrix::Zero(layout.count, schema.total_rows());
  if (K == 0) return a;
  if (codes.rows() < layout.window || codes.cols() != K) {
    throw EncodingError("exogenous codes have shape " + std::to_string(codes.rows()) + "x" +
                        std::to_string(codes.cols()) + ", expected " + std::to_string(layout.window) + "x" +
                        std::to_string(K));
  }
  const double w = 1.0 / static_cast<double>(layout.patch_len);
  for (int k = 0; k < K; ++k) {
    const int off = schema.offset(k);
    const int card = schema.variables[static_cast<std::size_t>(k)].cardinality;
    for (int j = 0; j < layout.count; ++j) {
      for (int s = 0; s < layout.patch_len; ++s) {
        const int c = codes(layout.time_index(j, s), k);
        if (c < 0 || c >= card) {
          throw EncodingError("exogenous code " + std::to_string(c) + " out of range for variable '" +
                              schema.variables[static_cast<std::size_t>(k)].name + "'");
        }
        a(j, off + c) += w;
      }
    }
  }
  return a;
}

inline PatchInput make_patch_input(std::span<const double> x, const CodeMatrix& codes, const EncoderState& state,
                                   const MaskSpec* mask = nullptr) {
  const PatchLayout layout(static_cast<int>(x.size()), state.patching);
  if (layout.count != state.num_patches()) {
    throw std::invalid_argument("window length " + std::to_string(x.size()) + " does not match encoder window " +
                                std::to_string(state.window));
  }
  PatchInput in;
  if (mask) {
    in.masked = mask->masked_indices;
    in.causal = mask->causal();
    for (int j : in.masked) {
      if (j < 0 || j >= layout.count) throw MaskError("masked patch index out of range");
    }
  }
  const std::vector<double> view = masked_view(x, layout, in.masked);
  in.patches = patch(view, state.patching);
  in.exo_pool = exogenous_pooling(codes, layout, state.exogenous);
  return in;
}

/// u = patches * W_p + b + positional (+ pooled exogenous embeddings), with
/// masked rows of the projection replaced by the mask token.
inline Var embed_window(const PatchInput& in, const EncoderState& state, bool use_exogenous = true) {
  Var h = ag::add_row(ag::matmul(Var::constant(in.patches), state.patch_weight), state.patch_bias);
  if (!in.masked.empty()) h = ag::replace_rows(h, in.masked, state.mask_token);
  h = ag::add(h, state.positional);
  if (use_exogenous && state.exogenous.count() > 0) {
    h = ag::add(h, ag::matmul(Var::constant(in.exo_pool), state.exo_table));
  }
  return h;
}

/// Convenience overload from a patch matrix built by `patch()` and [T_w, K] codes.
inline Var embed_window(const Matrix& patches, const CodeMatrix& codes, const EncoderState& state) {
  PatchInput in;
  in.patches = patches;
  in.exo_pool = exogenous_pooling(codes, PatchLayout(state.window, state.patching), state.exogenous);
  return embed_window(in, state, true);
}

// ---------------------------------------------------------------------------
// Temporal encoder

enum class Attention { bidirectional, causal };

inline void check_finite(const Var& v, const std::string& where) {
  if (!v.value().allFinite()) throw NumericError("non-finite activation in " + where);
}

/// Pre-norm transformer stack over patch tokens.
inline Var temporal_encode(const Var& u, const EncoderState& state, Attention attention = Attention::bidirectional) {
  check_finite(u, "temporal encoder input");
  const bool causal = attention == Attention::causal;
  const int heads = state.model.n_heads;
  const int hd = state.model.d_model / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Var x = u;
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const TransformerLayer& L = state.layers[l];
    Var h = ag::layer_norm(x, L.ln1_gain, L.ln1_bias);
    Var q = ag::add_row(ag::matmul(h, L.wq), L.bq);
    Var k = ag::add_row(ag::matmul(h, L.wk), L.bk);
    Var v = ag::add_row(ag::matmul(h, L.wv), L.bv);
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int i = 0; i < heads; ++i) {
      Var qh = heads == 1 ? q : ag::cols(q, i * hd, hd);
      Var kh = heads == 1 ? k : ag::cols(k, i * hd, hd);
      Var vh = heads == 1 ? v : ag::cols(v, i * hd, hd);
      Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt);
      outs.push_back(ag::matmul(ag::softmax_rows(scores, causal), vh));
    }
    Var attn = heads == 1 ? outs.front() : ag::hcat(outs);
    x = ag::add(x, ag::add_row(ag::matmul(attn, L.wo), L.bo));
    Var h2 = ag::layer_norm(x, L.ln2_gain, L.ln2_bias);
    Var f = ag::add_row(ag::matmul(ag::gelu(ag::add_row(ag::matmul(h2, L.w1), L.b1)), L.w2), L.b2);
    x = ag::add(x, f);
    check_finite(x, "temporal layer " + std::to_string(l));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Hierarchical encoder

/// Relational message passing, applied to every patch row:
///   z'_v = act(z_v W_self + sum_r mean_{u in N_r(v)} z_u W_r)  (+ z_v if residual).
/// With `stop_grad_background`, nodes outside `in_loss` enter every layer as
/// constants and are evaluated without recording gradients.
inline std::vector<Var> hierarchical_encode(const std::vector<Var>& reprs, const HierGraph& graph,
                                            const EncoderState& state, const std::vector<bool>& in_loss,
                                            bool stop_grad_background) {
  if (reprs.size() != graph.nodes.size()) {
    throw GraphError("hierarchical_encode: " + std::to_string(reprs.size()) + " representations for " +
                     std::to_string(graph.nodes.size()) + " nodes");
  }
  for (std::size_t v = 0; v < reprs.size(); ++v) {
    if (!reprs[v].defined()) throw GraphError("node '" + graph.nodes[v].id + "' has no representation");
  }
  const auto incoming = graph.incoming();
  const bool relu = state.model.rgcn_activation == "relu";
  std::vector<Var> h = reprs;
  for (std::size_t l = 0; l < state.rgcn.size(); ++l) {
    const RgcnLayer& R = state.rgcn[l];
    std::vector<Var> in(h.size());
    for (std::size_t v = 0; v < h.size(); ++v) {
      const bool background = stop_grad_background && !(v < in_loss.size() && in_loss[v]);
      in[v] = background ? ag::detach(h[v]) : h[v];
    }
    std::vector<Var> next(h.size());
    for (std::size_t v = 0; v < h.size(); ++v) {
      const bool background = stop_grad_background && !(v < in_loss.size() && in_loss[v]);
      std::optional<ag::NoGradGuard> guard;
      if (background) guard.emplace();
      std::vector<Var> terms{ag::matmul(in[v], R.w_self)};
      for (int r = 0; r < kRelationCount; ++r) {
        const auto& nbrs = incoming[v][static_cast<std::size_t>(r)];
        if (nbrs.empty()) continue;
        std::vector<Var> msgs;
        for (int u : nbrs) msgs.push_back(in[static_cast<std::size_t>(u)]);
        Var mean = ag::scale(ag::sum_of(msgs), 1.0 / static_cast<double>(nbrs.size()));
        terms.push_back(ag::matmul(mean, R.w_rel[static_cast<std::size_t>(r)]));
      }
      Var pre = terms.size() == 1 ? terms.front() : ag::sum_of(terms);
      Var out = relu ? ag::relu(pre) : pre;
      if (state.model.rgcn_residual) out = ag::add(in[v], out);
      next[v] = out;
    }
    h = std::move(next);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Full forward pass

struct ForwardFlags {
  bool use_hierarchy = true;
  bool use_exogenous = true;
  bool stop_grad_background = false;
};

/// A batch of equal-length windows. For hierarchical encoding every instance
/// node of the graph must have a window at each start time present.
struct WindowBatch {
  std::vector<std::vector<double>> x;
  std::vector<CodeMatrix> o;
  std::vector<std::string> node_ids;
  std::vector<std::int64_t> t_start;
  std::vector<std::int64_t> t_end;
  /// Optional per-window masks (nullopt = unmasked).
  std::vector<std::optional<MaskSpec>> masks;
  /// Optional loss-set membership (empty = every window is in the loss set).
  std::vector<bool> in_loss;

  std::size_t size() const { return x.size(); }

  void add(std::vector<double> values, CodeMatrix codes, std::string id, std::int64_t start, std::int64_t end,
           std::optional<MaskSpec> mask = std::nullopt, bool loss = true) {
    x.push_back(std::move(values));
    o.push_back(std::move(codes));
    node_ids.push_back(std::move(id));
    t_start.push_back(start);
    t_end.push_back(end);
    masks.push_back(std::move(mask));
    in_loss.push_back(loss);
  }

  const MaskSpec* mask(std::size_t i) const {
    return i < masks.size() && masks[i] ? &*masks[i] : nullptr;
  }
  bool loss(std::size_t i) const { return in_loss.empty() || in_loss[i]; }
};

/// Patch embedding and temporal encoding of one window.
inline Var encode_temporal(std::span<const double> x, const CodeMatrix& codes, const EncoderState& state,
                           const MaskSpec* mask, bool use_exogenous) {
  const PatchInput in = make_patch_input(x, codes, state, mask);
  return temporal_encode(embed_window(in, state, use_exogenous), state,
                         in.causal ? Attention::causal : Attention::bidirectional);
}

/// z_i for every window of the batch, each [N_p, d].
inline std::vector<Var> forward(const WindowBatch& batch, const HierGraph* graph, const EncoderState& state,
                                const ForwardFlags& flags) {
  std::vector<Var> out(batch.size());
  if (!flags.use_hierarchy || graph == nullptr || state.rgcn.empty()) {
    if (flags.use_hierarchy && graph == nullptr && !state.rgcn.empty()) {
      throw GraphError("forward: hierarchy requested without a graph");
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out[i] = encode_temporal(batch.x[i], batch.o[i], state, batch.mask(i), flags.use_exogenous);
    }
    return out;
  }

  std::map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) groups[batch.t_start[i]].push_back(i);
  const PatchLayout layout(state.window, state.patching);

  for (const auto& [t0, members] : groups) {
    std::vector<int> window_of(graph->nodes.size(), -1);
    for (std::size_t i : members) {
      const int v = graph->index_of(batch.node_ids[i]);
      if (v < 0) throw GraphError("batch node '" + batch.node_ids[i] + "' not in graph");
      window_of[static_cast<std::size_t>(v)] = static_cast<int>(i);
    }
    std::vector<bool> in_loss(graph->nodes.size(), false);
    for (std::size_t v = 0; v < graph->nodes.size(); ++v) {
      if (window_of[v] >= 0) in_loss[v] = batch.loss(static_cast<std::size_t>(window_of[v]));
    }
    std::vector<Var> reprs(graph->nodes.size());
    for (std::size_t v = 0; v < graph->nodes.size(); ++v) {
      const bool background = flags.stop_grad_background && !in_loss[v];
      std::optional<ag::NoGradGuard> guard;
      if (background) guard.emplace();
      if (graph->nodes[v].level == Level::cluster) {
        // Mean of the members' windows as the model sees them.
        const auto members_v = graph->cluster_members(static_cast<int>(v));
        if (members_v.empty()) throw GraphError("cluster '" + graph->nodes[v].id + "' has no members");
        std::vector<double> mean(static_cast<std::size_t>(state.window), 0.0);
        const CodeMatrix* codes = nullptr;
        for (int u : members_v) {
          const int wi = window_of[static_cast<std::size_t>(u)];
          if (wi < 0) {
            throw GraphError("node '" + graph->nodes[static_cast<std::size_t>(u)].id + "' missing representation");
          }
          const MaskSpec* m = batch.mask(static_cast<std::size_t>(wi));
          const auto view = masked_view(batch.x[static_cast<std::size_t>(wi)], layout,
                                        m ? m->masked_indices : std::vector<int>{});
          for (std::size_t t = 0; t < mean.size(); ++t) mean[t] += view[t];
          if (!codes) codes = &batch.o[static_cast<std::size_t>(wi)];
        }
        for (double& m : mean) m /= static_cast<double>(members_v.size());
        reprs[v] = encode_temporal(mean, *codes, state, nullptr, flags.use_exogenous);
      } else {
        const int wi = window_of[v];
        if (wi < 0) throw GraphError("node '" + graph->nodes[v].id + "' missing representation");
        reprs[v] = encode_temporal(batch.x[static_cast<std::size_t>(wi)], batch.o[static_cast<std::size_t>(wi)], state,
                                   batch.mask(static_cast<std::size_t>(wi)), flags.use_exogenous);
      }
    }
    std::vector<Var> z = hierarchical_encode(reprs, *graph, state, in_loss, flags.stop_grad_background);
    for (std::size_t v = 0; v < graph->nodes.size(); ++v) {
      if (window_of[v] >= 0) out[static_cast<std::size_t>(window_of[v])] = z[v];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patch stitching

/// Maps per-patch predictions [N_p, P] back to a [1, T_w] series, averaging
/// every real slot that covers the same timestamp. Padding slots are ignored.
inline Var stitch_patches(const Var& pred, const PatchLayout& layout) {
  if (pred.rows() != layout.count || pred.cols() != layout.patch_len) {
    throw std::invalid_argument("stitch_patches: prediction shape does not match layout");
  }
  std::vector<double> counts(static_cast<std::size_t>(layout.window), 0.0);
  for (int j = 0; j < layout.count; ++j) {
    for (int s = 0; s < layout.patch_len; ++s) {
      if (layout.is_real(j, s)) counts[static_cast<std::size_t>(layout.time_index(j, s))] += 1.0;
    }
  }
  Matrix v = Matrix::Zero(1, layout.window);
  for (int j = 0; j < layout.count; ++j) {
    for (int s = 0; s < layout.patch_len; ++s) {
      if (!layout.is_real(j, s)) continue;
      v(0, layout.time_index(j, s)) += pred.value()(j, s);
    }
  }
  for (int t = 0; t < layout.window; ++t) v(0, t) /= counts[static_cast<std::size_t>(t)];
  return ag::detail::make_result(std::move(v), {pred}, [layout, counts = std::move(counts)](ag::Node& self) {
    Matrix g = Matrix::Zero(layout.count, layout.patch_len);
    for (int j = 0; j < layout.count; ++j) {
      for (int s = 0; s < layout.patch_len; ++s) {
        if (!layout.is_real(j, s)) continue;
        const int t = layout.time_index(j, s);
        g(j, s) = self.grad(0, t) / counts[static_cast<std::size_t>(t)];
      }
    }
    self.parents[0]->accumulate(g);
  });
}

}  // namespace powerpm
