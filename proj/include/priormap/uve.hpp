// SPDX-License-Identifier: Apache-2.0
#pragma once

// Unified vector encoder: hybrid prior embedding of map points, M layers of
// attention restricted to each instance, N layers of attention across the
// whole map, and a small MLP head that decodes point coordinates.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "priormap/errors.hpp"
#include "priormap/rng.hpp"
#include "priormap/tensor.hpp"
#include "priormap/vector_core.hpp"

namespace priormap {

struct UveConfig {
  std::size_t m_intra = 2;
  std::size_t n_inter = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t fourier_bands = 8;
  std::size_t max_instances = 32;
  std::size_t max_points = 20;
  std::size_t n_types = kNumElementTypes;
  PerceptionWindow window{};

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) throw UsageError("UveConfig: dim must be a positive multiple of heads");
    if (fourier_bands < 1) throw UsageError("UveConfig: fourier_bands must be at least 1");
    if (ffn_dim == 0 || max_instances == 0 || max_points < 2 || n_types == 0)
      throw UsageError("UveConfig: ffn_dim, max_instances, n_types must be positive and max_points >= 2");
    window.validate();
  }

  /// Width of the concatenated position + direction Fourier block.
  std::size_t feature_width() const { return 8 * fourier_bands; }

  nlohmann::ordered_json to_json() const {
    return {{"m_intra", m_intra},       {"n_inter", n_inter},         {"dim", dim},
            {"heads", heads},           {"ffn_dim", ffn_dim},         {"fourier_bands", fourier_bands},
            {"max_instances", max_instances}, {"max_points", max_points}, {"n_types", n_types},
            {"window", {window.x_min, window.x_max, window.y_min, window.y_max}}};
  }

  static UveConfig from_json(const nlohmann::ordered_json& j) {
    UveConfig c;
    try {
      c.m_intra = j.at("m_intra").get<std::size_t>();
      c.n_inter = j.at("n_inter").get<std::size_t>();
      c.dim = j.at("dim").get<std::size_t>();
      c.heads = j.at("heads").get<std::size_t>();
      c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
      c.fourier_bands = j.at("fourier_bands").get<std::size_t>();
      c.max_instances = j.at("max_instances").get<std::size_t>();
      c.max_points = j.at("max_points").get<std::size_t>();
      c.n_types = j.at("n_types").get<std::size_t>();
      const auto& w = j.at("window");
      c.window = {w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>(), w.at(3).get<double>()};
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("UveConfig: ") + e.what());
    }
    c.validate();
    return c;
  }

  friend bool operator==(const UveConfig&, const UveConfig&) = default;
};

// ---------------------------------------------------------------------------
// Fourier features

/// Frequency of band k. The base band has period 4 in normalized units so
/// the two edges of the [-1, 1] window (and opposite unit directions) map to
/// distinct features.
inline double fourier_frequency(std::size_t k) {
  return std::ldexp(std::numbers::pi, static_cast<int>(k) - 1);
}

/// Appends [sin(f_k u)]_k then [cos(f_k u)]_k.
inline void fourier_encode(double u, std::size_t bands, double* out) {
  for (std::size_t k = 0; k < bands; ++k) {
    const double a = fourier_frequency(k) * u;
    out[k] = std::sin(a);
    out[bands + k] = std::cos(a);
  }
}

/// Position features of (x, y) normalized by the window, followed by
/// direction features of (vx, vy).
inline std::vector<double> point_features(const VectorPoint& p, const UveConfig& cfg) {
  const auto& w = cfg.window;
  const double ux = (2.0 * p.x - (w.x_min + w.x_max)) / w.width();
  const double uy = (2.0 * p.y - (w.y_min + w.y_max)) / w.height();
  const std::size_t b = cfg.fourier_bands;
  std::vector<double> f(cfg.feature_width());
  fourier_encode(ux, b, f.data());
  fourier_encode(uy, b, f.data() + 2 * b);
  fourier_encode(p.vx, b, f.data() + 4 * b);
  fourier_encode(p.vy, b, f.data() + 6 * b);
  return f;
}

// ---------------------------------------------------------------------------
// Tokens

/// Per instance: one [VEC] token followed by its point tokens.
struct TokenSequence {
  std::vector<std::size_t> instance;  // instance slot of each token
  std::vector<std::size_t> position;  // 0 for [VEC], 1.. for points
  std::vector<std::size_t> type;
  std::vector<bool> is_vec;
  std::vector<bool> valid;
  Array features;  // [T, feature_width]; zero rows for [VEC] and padding

  std::size_t num_instances = 0;               // real (unpadded) instances
  std::vector<std::size_t> points_per_instance;
  std::vector<std::size_t> vec_rows;           // per real instance
  std::vector<std::size_t> point_rows;         // all valid point tokens, instance-major

  std::size_t size() const { return instance.size(); }
};

struct PaddingSpec {
  std::size_t points_to = 0;     // pad every block to this many point tokens
  std::size_t instances_to = 0;  // append fully padded blocks up to this many instances
};

inline TokenSequence tokenize(const VectorMap& map, const UveConfig& cfg, const PaddingSpec& pad = {}) {
  if (map.frame != Frame::ego) throw DataError("tokenize: map must be in the ego frame");
  const std::size_t m = map.instances.size();
  const std::size_t slots = std::max(m, pad.instances_to);
  if (slots > cfg.max_instances)
    throw DataError("capacity overflow: " + std::to_string(slots) + " instances exceed max_instances=" +
                    std::to_string(cfg.max_instances));
  std::size_t block_points = pad.points_to;
  for (const auto& inst : map.instances) block_points = std::max(block_points, inst.size());
  if (block_points > cfg.max_points)
    throw DataError("capacity overflow: " + std::to_string(block_points) + " points exceed max_points=" +
                    std::to_string(cfg.max_points));

  TokenSequence ts;
  ts.num_instances = m;
  std::vector<std::vector<double>> feats;
  auto push = [&](std::size_t slot, std::size_t pos, std::size_t type, bool vec, bool valid,
                  std::vector<double> f) {
    ts.instance.push_back(slot);
    ts.position.push_back(pos);
    ts.type.push_back(type);
    ts.is_vec.push_back(vec);
    ts.valid.push_back(valid);
    feats.push_back(std::move(f));
  };
  const std::vector<double> zero(cfg.feature_width(), 0.0);
  for (std::size_t i = 0; i < slots; ++i) {
    const bool real = i < m;
    const std::size_t type = real ? static_cast<std::size_t>(type_code(map.instances[i].element_type)) : 0;
    if (type >= cfg.n_types) throw DataError("tokenize: element type outside the configured vocabulary");
    if (real) ts.vec_rows.push_back(ts.size());
    push(i, 0, type, true, real, zero);
    const std::size_t n = real ? map.instances[i].size() : 0;
    if (real) ts.points_per_instance.push_back(n);
    const std::size_t block = real ? std::max(n, pad.points_to) : std::max<std::size_t>(pad.points_to, 1);
    for (std::size_t j = 0; j < block; ++j) {
      if (j < n) {
        ts.point_rows.push_back(ts.size());
        push(i, j + 1, type, false, true, point_features(map.instances[i].points[j], cfg));
      } else {
        push(i, j + 1, type, false, false, zero);
      }
    }
  }
  ts.features = Array(Shape{ts.size(), cfg.feature_width()});
  for (std::size_t r = 0; r < feats.size(); ++r)
    std::copy(feats[r].begin(), feats[r].end(), ts.features.data().begin() + static_cast<std::ptrdiff_t>(r * cfg.feature_width()));
  return ts;
}

/// Additive masks (0 = attend, kMaskedLogit = blocked). Intra: same
/// instance and both valid. Inter: both valid. Padding rows are blocked
/// everywhere.
inline std::pair<Array, Array> build_attention_masks(const TokenSequence& ts) {
  const std::size_t n = ts.size();
  Array intra(Shape{n, n}, kMaskedLogit);
  Array inter(Shape{n, n}, kMaskedLogit);
  for (std::size_t i = 0; i < n; ++i) {
    if (!ts.valid[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!ts.valid[j]) continue;
      inter.at(i, j) = 0.0;
      if (ts.instance[i] == ts.instance[j]) intra.at(i, j) = 0.0;
    }
  }
  return {std::move(intra), std::move(inter)};
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {
inline Array random_normal(Shape shape, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Array a(std::move(shape));
  for (auto& v : a.storage()) v = stddev * rng.normal();
  return a;
}

inline std::string layer_prefix(bool intra, std::size_t l) {
  return std::string(intra ? "enc.intra." : "enc.inter.") + std::to_string(l) + ".";
}

inline void add_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed,
                       double gain = 1.0) {
  ps.add(name + ".w", random_normal({in, out}, gain / std::sqrt(static_cast<double>(in)), derive_seed(seed, name)));
  ps.add(name + ".b", Array(Shape{out}));
}

inline void add_layer_norm(ParamStore& ps, const std::string& name, std::size_t d) {
  ps.add(name + ".gamma", Array(Shape{d}, 1.0));
  ps.add(name + ".beta", Array(Shape{d}));
}
}  // namespace detail

/// Randomly initialized encoder + coordinate head parameters.
inline ParamStore init_uve_params(const UveConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore ps(seed);
  const std::size_t d = cfg.dim;
  ps.add("embed.point_proj.w",
         detail::random_normal({cfg.feature_width(), d}, 1.0 / std::sqrt(static_cast<double>(cfg.feature_width())),
                               derive_seed(seed, "embed.point_proj.w")));
  // Row 0: learnable [VEC] token. Row 1: bias of the point projection.
  ps.add("embed.token_kind", detail::random_normal({2, d}, 0.02, derive_seed(seed, "embed.token_kind")));
  ps.add("embed.instance", detail::random_normal({cfg.max_instances, d}, 0.02, derive_seed(seed, "embed.instance")));
  ps.add("embed.type", detail::random_normal({cfg.n_types, d}, 0.02, derive_seed(seed, "embed.type")));
  ps.add("embed.position", detail::random_normal({cfg.max_instances * (cfg.max_points + 1), d}, 0.02,
                                                 derive_seed(seed, "embed.position")));
  for (int pass = 0; pass < 2; ++pass) {
    const bool intra = pass == 0;
    const std::size_t layers = intra ? cfg.m_intra : cfg.n_inter;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto p = detail::layer_prefix(intra, l);
      detail::add_layer_norm(ps, p + "ln1", d);
      detail::add_linear(ps, p + "attn.qkv", d, 3 * d, seed);
      detail::add_linear(ps, p + "attn.out", d, d, seed, 0.5);
      detail::add_layer_norm(ps, p + "ln2", d);
      detail::add_linear(ps, p + "ffn.in", d, cfg.ffn_dim, seed);
      detail::add_linear(ps, p + "ffn.out", cfg.ffn_dim, d, seed, 0.5);
    }
  }
  detail::add_layer_norm(ps, "enc.final_ln", d);
  detail::add_linear(ps, "head.hidden", d, cfg.ffn_dim, seed);
  detail::add_linear(ps, "head.coord", cfg.ffn_dim, 2, seed, 0.1);
  return ps;
}

/// Closed-form count of init_uve_params scalars.
inline std::size_t uve_param_count(const UveConfig& c) {
  const std::size_t d = c.dim;
  const std::size_t embed = c.feature_width() * d + 2 * d + c.max_instances * d + c.n_types * d +
                            c.max_instances * (c.max_points + 1) * d;
  const std::size_t layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * c.ffn_dim + c.ffn_dim) +
                            (c.ffn_dim * d + d);
  const std::size_t head = 2 * d + (d * c.ffn_dim + c.ffn_dim) + (c.ffn_dim * 2 + 2);
  return embed + (c.m_intra + c.n_inter) * layer + head;
}

// ---------------------------------------------------------------------------
// Forward

/// Hybrid prior embedding: projected Fourier features plus instance, type
/// and 2D position embeddings. [VEC] tokens take the learnable token
/// embedding in place of the projected features.
inline Var hybrid_prior_embed(Tape& t, const TokenSequence& ts, const UveConfig& cfg, const ParamStore& ps) {
  const std::size_t n = ts.size();
  std::vector<std::size_t> kind(n), inst(n), type(n), pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    kind[i] = ts.is_vec[i] ? 0 : 1;
    inst[i] = ts.instance[i];
    type[i] = ts.type[i];
    pos[i] = ts.instance[i] * (cfg.max_points + 1) + ts.position[i];
  }
  Var feats = t.constant(ts.features);
  Var e = matmul(feats, t.param(ps, "embed.point_proj.w"));
  e = add(e, embedding_lookup(t.param(ps, "embed.token_kind"), kind));
  e = add(e, embedding_lookup(t.param(ps, "embed.instance"), inst));
  e = add(e, embedding_lookup(t.param(ps, "embed.type"), type));
  e = add(e, embedding_lookup(t.param(ps, "embed.position"), pos));
  return e;
}

namespace detail {
inline Var linear(Tape& t, const ParamStore& ps, const std::string& name, Var x) {
  return add(matmul(x, t.param(ps, name + ".w")), t.param(ps, name + ".b"));
}

inline Var norm(Tape& t, const ParamStore& ps, const std::string& name, Var x) {
  return layer_norm(x, t.param(ps, name + ".gamma"), t.param(ps, name + ".beta"));
}
}  // namespace detail

/// Multi-head self-attention under an additive mask.
inline Var masked_self_attention(Tape& t, const ParamStore& ps, const std::string& prefix, Var x, const Array& mask,
                                 std::size_t heads) {
  const std::size_t d = x.value().cols();
  const std::size_t dh = d / heads;
  Var qkv = detail::linear(t, ps, prefix + "qkv", x);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = slice_last_dim(qkv, h * dh, dh);
    Var k = slice_last_dim(qkv, d + h * dh, dh);
    Var v = slice_last_dim(qkv, 2 * d + h * dh, dh);
    Var w = softmax_last_dim(scale(matmul_nt(q, k), inv_sqrt), &mask);
    outs.push_back(matmul(w, v));
  }
  Var o = heads == 1 ? outs[0] : concat_last_dim(std::span<const Var>(outs));
  return detail::linear(t, ps, prefix + "out", o);
}

/// Pre-norm residual block: x + MHA(LN(x)), then x + FFN(LN(x)).
inline Var encoder_layer(Tape& t, const ParamStore& ps, const std::string& prefix, Var x, const Array& mask,
                         const UveConfig& cfg) {
  x = add(x, masked_self_attention(t, ps, prefix + "attn.", detail::norm(t, ps, prefix + "ln1", x), mask, cfg.heads));
  Var h = detail::norm(t, ps, prefix + "ln2", x);
  h = detail::linear(t, ps, prefix + "ffn.out", gelu(detail::linear(t, ps, prefix + "ffn.in", h)));
  return add(x, h);
}

/// Token states after all encoder layers, [T, dim].
inline Var encode_tokens(Tape& t, const TokenSequence& ts, const UveConfig& cfg, const ParamStore& ps) {
  Var x = hybrid_prior_embed(t, ts, cfg, ps);
  if (ts.size() == 0) return x;
  const auto [intra, inter] = build_attention_masks(ts);
  for (std::size_t l = 0; l < cfg.m_intra; ++l) x = encoder_layer(t, ps, detail::layer_prefix(true, l), x, intra, cfg);
  for (std::size_t l = 0; l < cfg.n_inter; ++l) x = encoder_layer(t, ps, detail::layer_prefix(false, l), x, inter, cfg);
  return detail::norm(t, ps, "enc.final_ln", x);
}

/// Coordinate head on the valid point tokens: dim -> ffn_dim -> 2, output
/// scaled from the normalized window back to meters. Returns [P, 2].
inline Var decode_coordinates(Tape& t, Var states, const TokenSequence& ts, const UveConfig& cfg,
                              const ParamStore& ps) {
  Var pts = embedding_lookup(states, ts.point_rows);
  Var h = gelu(detail::linear(t, ps, "head.hidden", pts));
  Var o = detail::linear(t, ps, "head.coord", h);
  const std::size_t p = ts.point_rows.size();
  const auto& w = cfg.window;
  Array scale_arr(Shape{p, 2});
  Array offset_arr(Shape{p, 2});
  for (std::size_t i = 0; i < p; ++i) {
    scale_arr.at(i, 0) = 0.5 * w.width();
    scale_arr.at(i, 1) = 0.5 * w.height();
    offset_arr.at(i, 0) = 0.5 * (w.x_min + w.x_max);
    offset_arr.at(i, 1) = 0.5 * (w.y_min + w.y_max);
  }
  return add(mul(o, t.constant(std::move(scale_arr))), t.constant(std::move(offset_arr)));
}

// ---------------------------------------------------------------------------
// Array-level API

/// f_ins from [VEC] outputs, f_pt from point outputs (zero rows past each
/// instance's point count).
struct PriorFeatureBundle {
  Array f_ins{Shape{0, 0}};
  Array f_pt{Shape{0, 0, 0}};
  std::vector<std::size_t> points_per_instance;

  std::size_t num_instances() const { return points_per_instance.size(); }
  std::size_t dim() const { return f_ins.rank() == 2 ? f_ins.dim(1) : 0; }
};

inline PriorFeatureBundle bundle_from_states(const Array& states, const TokenSequence& ts, std::size_t dim) {
  const std::size_t m = ts.num_instances;
  std::size_t n = 0;
  for (auto c : ts.points_per_instance) n = std::max(n, c);
  PriorFeatureBundle b;
  b.points_per_instance = ts.points_per_instance;
  b.f_ins = Array(Shape{m, dim});
  b.f_pt = Array(Shape{m, n, dim});
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < dim; ++k) b.f_ins.at(i, k) = states.at(ts.vec_rows[i], k);
    for (std::size_t j = 0; j < ts.points_per_instance[i]; ++j, ++cursor)
      for (std::size_t k = 0; k < dim; ++k) b.f_pt.at(i, j, k) = states.at(ts.point_rows[cursor], k);
  }
  return b;
}

/// f_prior = E_uve(M_prior).
inline PriorFeatureBundle encode(const VectorMap& map, const UveConfig& cfg, const ParamStore& ps,
                                 const PaddingSpec& pad = {}) {
  const TokenSequence ts = tokenize(map, cfg, pad);
  Tape t;
  Var states = encode_tokens(t, ts, cfg, ps);
  return bundle_from_states(states.value(), ts, cfg.dim);
}

/// Encodes then decodes; returns a copy of the map with reconstructed
/// coordinates (directions and types untouched).
inline VectorMap reconstruct(const VectorMap& map, const UveConfig& cfg, const ParamStore& ps) {
  const TokenSequence ts = tokenize(map, cfg);
  VectorMap out = map;
  if (ts.point_rows.empty()) return out;
  Tape t;
  Var states = encode_tokens(t, ts, cfg, ps);
  const Array& xy = decode_coordinates(t, states, ts, cfg, ps).value();
  std::size_t r = 0;
  for (auto& inst : out.instances)
    for (auto& p : inst.points) {
      p.x = xy.at(r, 0);
      p.y = xy.at(r, 1);
      ++r;
    }
  return out;
}

}  // namespace priormap
