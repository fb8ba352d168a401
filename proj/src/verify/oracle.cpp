// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/verify/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "mmfuse/rng.hpp"

namespace mmfuse::verify {

namespace {

Mat loop_matmul(const Mat& a, const Mat& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("oracle: inner dimensions differ");
  Mat c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

double loop_abs_diff(const Mat& a, const Mat& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

struct Projections {
  Mat q, k, v;
};

Projections loop_project(const FrozenAttention<double>& f, const LoraFactors<double>* lora, const Mat& h) {
  const std::size_t n = h.dim(0), d = h.dim(1);
  Projections p{Mat({n, d}), Mat({n, d}), Mat({n, d})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double q = 0, k = 0, v = 0;
      for (std::size_t c = 0; c < d; ++c) {
        q += h(i, c) * f.wq(c, j);
        k += h(i, c) * f.wk(c, j);
        v += h(i, c) * f.wv(c, j);
      }
      if (lora) {
        const std::size_t r = lora->ak.dim(1);
        for (std::size_t t = 0; t < r; ++t) {
          double uk = 0, uv = 0;
          for (std::size_t c = 0; c < d; ++c) {
            uk += h(i, c) * lora->ak(c, t);
            uv += h(i, c) * lora->av(c, t);
          }
          k += uk * lora->bk(t, j);
          v += uv * lora->bv(t, j);
        }
      }
      p.q(i, j) = q;
      p.k(i, j) = k;
      p.v(i, j) = v;
    }
  return p;
}

Mat loop_scores(const FrozenAttention<double>& f, const Projections& p) {
  const std::size_t n = p.q.dim(0), d = p.q.dim(1), heads = f.n_heads, dh = d / heads;
  const double width = f.scale_mode == ScaleMode::per_head ? static_cast<double>(dh) : static_cast<double>(d);
  const double s = 1.0 / std::sqrt(width);
  Mat out({heads, n, n});
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < dh; ++c) acc += p.q(i, hd * dh + c) * p.k(j, hd * dh + c);
        out(hd, i, j) = acc * s;
      }
  return out;
}

Mat loop_attend(const FrozenAttention<double>& f, const Mat& maps, const Mat& v) {
  const std::size_t heads = maps.dim(0), n = maps.dim(1), d = v.dim(1), dh = d / f.n_heads;
  Mat out({n, d});
  std::vector<double> p(n);
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, maps(hd, i, j));
      double z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        p[j] = std::exp(maps(hd, i, j) - mx);
        z += p[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += (p[j] / z) * v(j, hd * dh + c);
        out(i, hd * dh + c) = acc;
      }
    }
  return out;
}

}  // namespace

// ---- attention -------------------------------------------------------------

std::pair<Mat, Mat> oracle_amg(double w_x, double w_rgb, const Mat& raw_rgb, const Mat& raw_x) {
  if (raw_rgb.shape() != raw_x.shape()) throw DimensionError("oracle_amg: shape mismatch");
  Mat a(raw_rgb.shape()), b(raw_x.shape());
  for (std::size_t i = 0; i < raw_rgb.size(); ++i) {
    a[i] = raw_rgb[i] + w_x * (raw_x[i] - raw_rgb[i]);
    b[i] = raw_x[i] + w_rgb * (raw_rgb[i] - raw_x[i]);
  }
  return {a, b};
}

OracleAttention oracle_attention(const FrozenAttention<double>& frozen, const LoraFactors<double>* lora,
                                 const Guidance<double>& guidance, const Mat& h_rgb, const Mat& h_x) {
  if (h_rgb.shape() != h_x.shape() || h_rgb.dim(1) != frozen.wq.dim(0)) {
    throw DimensionError("oracle_attention: stream shapes");
  }
  OracleAttention o;
  const auto pr = loop_project(frozen, lora, h_rgb);
  const auto px = loop_project(frozen, lora, h_x);
  o.raw_rgb = loop_scores(frozen, pr);
  o.raw_x = loop_scores(frozen, px);
  std::tie(o.maps_rgb, o.maps_x) = oracle_amg(guidance.w_x, guidance.w_rgb, o.raw_rgb, o.raw_x);
  o.out_rgb = loop_attend(frozen, o.maps_rgb, pr.v);
  o.out_x = loop_attend(frozen, o.maps_x, px.v);
  return o;
}

std::pair<Mat, Mat> oracle_self_attention(const FrozenAttention<double>& frozen, const Mat& h) {
  const auto p = loop_project(frozen, nullptr, h);
  auto maps = loop_scores(frozen, p);
  return {loop_attend(frozen, maps, p.v), maps};
}

// ---- HMoE -------------------------------------------------------------------

Mat oracle_split(const Mat& x, std::size_t h) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (h == 0 || d % h != 0) throw ConfigError("oracle_split: D not divisible by h");
  const std::size_t s = d / h;
  Mat out({n * h, s});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t c = 0; c < s; ++c) out(i * h + j, c) = x(i, j * s + c);
  return out;
}

OracleMix oracle_mix(const Mat& phi, const Mat& x_split) {
  const std::size_t rows = x_split.dim(0), s = x_split.dim(1), cols = phi.dim(1);
  if (phi.dim(0) != s) throw DimensionError("oracle_mix: phi rows != sub-token width");
  OracleMix m{Mat({rows, cols}), Mat({rows, cols}), Mat({cols, s})};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t q = 0; q < cols; ++q) {
      double acc = 0;
      for (std::size_t c = 0; c < s; ++c) acc += x_split(i, c) * phi(c, q);
      m.logits(i, q) = acc;
    }
  for (std::size_t q = 0; q < cols; ++q) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < rows; ++i) mx = std::max(mx, m.logits(i, q));
    double z = 0;
    for (std::size_t i = 0; i < rows; ++i) z += std::exp(m.logits(i, q) - mx);
    for (std::size_t i = 0; i < rows; ++i) m.weights(i, q) = std::exp(m.logits(i, q) - mx) / z;
  }
  for (std::size_t q = 0; q < cols; ++q)
    for (std::size_t c = 0; c < s; ++c) {
      double acc = 0;
      for (std::size_t i = 0; i < rows; ++i) acc += m.weights(i, q) * x_split(i, c);
      m.x_mix(q, c) = acc;
    }
  return m;
}

Mat oracle_experts(const HmoeLayer<double>& layer, const Mat& x_mix) {
  const auto& cfg = layer.config;
  const std::size_t e = cfg.n_experts, h = cfg.heads_per_expert, s = cfg.sub_dim(), r = cfg.expert_rank,
                    d = cfg.d_model;
  if (x_mix.dim(0) != e * h) throw DimensionError("oracle_experts: row count != e*h");
  Mat y_cat({e, d});
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = 0; j < h; ++j) {
      std::vector<double> z(r, 0.0);
      for (std::size_t t = 0; t < r; ++t)
        for (std::size_t c = 0; c < s; ++c) z[t] += x_mix(i * h + j, c) * layer.experts[i].a(c, t);
      for (std::size_t c = 0; c < s; ++c) {
        double acc = 0;
        for (std::size_t t = 0; t < r; ++t) acc += z[t] * layer.experts[i].b(t, c);
        y_cat(i, j * s + c) = acc;
      }
    }
  return loop_matmul(loop_matmul(y_cat, layer.post.a), layer.post.b);
}

Mat oracle_affinity(const Mat& logits, std::size_t h, PatchAgg agg) {
  if (logits.dim(0) % h != 0 || logits.dim(1) % h != 0) throw ConfigError("oracle_affinity: blocks do not tile");
  const std::size_t n = logits.dim(0) / h, e = logits.dim(1) / h;
  Mat p({n, e});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t k = 0; k < e; ++k) {
      double acc = 0;
      for (std::size_t a = 0; a < h; ++a)
        for (std::size_t b = 0; b < h; ++b) acc += logits(t * h + a, k * h + b);
      p(t, k) = agg == PatchAgg::mean ? acc / static_cast<double>(h * h) : acc;
    }
  Mat out({n, e});
  for (std::size_t t = 0; t < n; ++t) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < e; ++k) mx = std::max(mx, p(t, k));
    double z = 0;
    for (std::size_t k = 0; k < e; ++k) z += std::exp(p(t, k) - mx);
    for (std::size_t k = 0; k < e; ++k) out(t, k) = std::exp(p(t, k) - mx) / z;
  }
  return out;
}

Mat oracle_hmoe(const HmoeLayer<double>& layer, const Mat& x_in) {
  const auto& cfg = layer.config;
  if (x_in.dim(1) != cfg.d_model) throw DimensionError("oracle_hmoe: width mismatch");
  const auto x_pre = loop_matmul(loop_matmul(x_in, layer.pre.a), layer.pre.b);
  const auto x_split = oracle_split(x_pre, cfg.heads_per_expert);
  const auto mix = oracle_mix(layer.phi, x_split);
  const auto y_exp = oracle_experts(layer, mix.x_mix);
  const auto aff = oracle_affinity(mix.logits, cfg.heads_per_expert, cfg.patch_agg);
  return loop_matmul(aff, y_exp);
}

// ---- encoder ------------------------------------------------------------------

Mat oracle_layer_norm(const LayerNormParams<double>& p, const Mat& x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Mat y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(d);
    const double sd = std::sqrt(var + 1e-6);
    for (std::size_t j = 0; j < d; ++j) y(i, j) = p.gamma[j] * ((x(i, j) - mean) / sd) + p.beta[j];
  }
  return y;
}

Mat oracle_ffn(const FeedForward<double>& f, const Mat& x) {
  const std::size_t n = x.dim(0), d = x.dim(1), hid = f.w1.dim(1);
  Mat y({n, d});
  std::vector<double> a(hid);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < hid; ++k) {
      double z = f.b1[k];
      for (std::size_t j = 0; j < d; ++j) z += x(i, j) * f.w1(j, k);
      a[k] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
    }
    for (std::size_t j = 0; j < d; ++j) {
      double acc = f.b2[j];
      for (std::size_t k = 0; k < hid; ++k) acc += a[k] * f.w2(k, j);
      y(i, j) = acc;
    }
  }
  return y;
}

namespace {

void loop_add(Mat& a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void oracle_hmoe_rows(const HmoeLayer<double>& layer, Mat& a, Mat& b, std::size_t begin, std::size_t end) {
  const std::size_t n = end - begin, d = a.dim(1);
  Mat x({2 * n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      x(i, j) = a(begin + i, j);
      x(n + i, j) = b(begin + i, j);
    }
  const auto y = oracle_hmoe(layer, x);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      a(begin + i, j) += y(i, j);
      b(begin + i, j) += y(n + i, j);
    }
}

}  // namespace

OracleEncoder oracle_encoder(const EncoderWeights<double>& w, const DualStream<double>& stream) {
  const auto& cfg = w.config;
  const std::size_t nz = cfg.n_z, n = cfg.n_z + cfg.n_c, d = cfg.d_model;
  OracleEncoder o;
  Mat a = stream.h_rgb, b = stream.h_x;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& blk = w.blocks[l];
    const auto na = oracle_layer_norm(blk.ln1, a);
    const auto nb = oracle_layer_norm(blk.ln1, b);
    const auto* ad = w.adapters[l] ? &*w.adapters[l] : nullptr;
    if (ad) {
      const auto att = oracle_attention(blk.attn, &ad->lora, ad->guidance, na, nb);
      loop_add(a, att.out_rgb);
      loop_add(b, att.out_x);
      o.maps.emplace_back(att.maps_rgb, att.maps_x);
      oracle_hmoe_rows(ad->hmoe_attn, a, b, 0, nz);
      oracle_hmoe_rows(ad->hmoe_attn, a, b, nz, n);
    } else {
      const auto [oa, ma] = oracle_self_attention(blk.attn, na);
      const auto [ob, mb] = oracle_self_attention(blk.attn, nb);
      loop_add(a, oa);
      loop_add(b, ob);
      o.maps.emplace_back(ma, mb);
    }
    loop_add(a, oracle_ffn(blk.ffn, oracle_layer_norm(blk.ln2, a)));
    loop_add(b, oracle_ffn(blk.ffn, oracle_layer_norm(blk.ln2, b)));
    if (ad) {
      oracle_hmoe_rows(ad->hmoe_ffn, a, b, 0, nz);
      oracle_hmoe_rows(ad->hmoe_ffn, a, b, nz, n);
    }
  }
  o.fused = Mat({cfg.n_c, d});
  for (std::size_t i = 0; i < cfg.n_c; ++i)
    for (std::size_t j = 0; j < d; ++j) o.fused(i, j) = a(nz + i, j) + b(nz + i, j);
  o.h_rgb = std::move(a);
  o.h_x = std::move(b);
  return o;
}

// ---- suite -------------------------------------------------------------------

void to_json(nlohmann::json& j, const OracleReport& r) {
  j = {{"name", r.name}, {"config", r.config}, {"error", r.max_abs_diff}, {"tolerance", r.tolerance}, {"pass", r.pass}};
}

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.next_u64() % (hi - lo + 1));
}

template <typename V>
V pick_from(Rng& rng, const std::vector<V>& values) {
  return values[rng.next_u64() % values.size()];
}

void finish(OracleReport& r) { r.pass = r.max_abs_diff < r.tolerance; }

}  // namespace

OracleReport check_attention_case(std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  const std::size_t d = pick_from<std::size_t>(rng, {4, 6, 8, 12, 16});
  std::vector<std::size_t> divisors;
  for (std::size_t k = 1; k <= d; ++k)
    if (d % k == 0 && k <= 4) divisors.push_back(k);
  AttentionConfig cfg;
  cfg.d_model = d;
  cfg.n_heads = pick_from(rng, divisors);
  cfg.rank = pick(rng, 1, std::min<std::size_t>(d - 1, 4));
  cfg.scale_mode = rng.uniform() < 0.5 ? ScaleMode::per_head : ScaleMode::full_dim;
  const std::size_t n_z = pick(rng, 1, 4), n_c = pick(rng, 1, 6);

  auto layer = AlignedAttentionLayer<double>::init(cfg, rng);
  layer.lora.bk = xavier_init<double>(rng, layer.lora.bk.shape());
  layer.lora.bv = xavier_init<double>(rng, layer.lora.bv.shape());
  layer.guidance = {rng.uniform(-0.5, 1.5), rng.uniform(-0.5, 1.5)};
  DualStream<double> s{uniform_tensor<double>(rng, {n_z + n_c, d}, -1.0, 1.0),
                       uniform_tensor<double>(rng, {n_z + n_c, d}, -1.0, 1.0), n_z, n_c};

  const auto fast = attention_forward(layer, s);
  const auto ref = oracle_attention(layer.frozen, &layer.lora, layer.guidance, s.h_rgb, s.h_x);
  OracleReport r;
  r.name = "attention";
  r.config = cfg;
  r.config["n_z"] = n_z;
  r.config["n_c"] = n_c;
  r.config["seed"] = seed;
  r.tolerance = tolerance;
  r.max_abs_diff = std::max({loop_abs_diff(fast.out_rgb, ref.out_rgb), loop_abs_diff(fast.out_x, ref.out_x),
                             loop_abs_diff(fast.maps.rgb, ref.maps_rgb), loop_abs_diff(fast.maps.x, ref.maps_x)});
  finish(r);
  return r;
}

OracleReport check_hmoe_case(std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  HmoeConfig cfg;
  cfg.heads_per_expert = pick(rng, 1, 4);
  cfg.d_model = cfg.heads_per_expert * pick(rng, 2, 6);
  cfg.n_experts = pick(rng, 1, 4);
  cfg.expert_rank = pick(rng, 1, cfg.sub_dim() - 1);
  cfg.patch_agg = rng.uniform() < 0.5 ? PatchAgg::sum : PatchAgg::mean;
  const std::size_t n = pick(rng, 1, 8);

  const auto layer = HmoeLayer<double>::init_dense(cfg, rng);
  const auto x = uniform_tensor<double>(rng, {n, cfg.d_model}, -1.0, 1.0);
  const auto fast = hmoe_forward(layer, x);
  const auto ref = oracle_hmoe(layer, x);
  OracleReport r;
  r.name = "hmoe";
  r.config = cfg;
  r.config["n_tokens"] = n;
  r.config["seed"] = seed;
  r.tolerance = tolerance;
  r.max_abs_diff = loop_abs_diff(fast.y_out, ref);
  finish(r);
  return r;
}

OracleReport check_encoder_case(std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  auto cfg = EncoderConfig::toy(pick(rng, 2, 4), 8, pick_from<std::size_t>(rng, {1, 2, 4}), pick(rng, 1, 3),
                                pick(rng, 2, 4));
  cfg.ffn_hidden = 16;
  cfg.w_init = rng.uniform(0.0, 1.0);
  const auto w = EncoderWeights<double>::init_dense(cfg, rng);
  DualStream<double> s{uniform_tensor<double>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0),
                       uniform_tensor<double>(rng, {cfg.n_tokens(), cfg.d_model}, -1.0, 1.0), cfg.n_z, cfg.n_c};
  const auto fast = encoder_forward(w, s);
  const auto ref = oracle_encoder(w, s);
  OracleReport r;
  r.name = "encoder";
  r.config = cfg;
  r.config["seed"] = seed;
  r.tolerance = tolerance;
  r.max_abs_diff = std::max(loop_abs_diff(fast.fused, ref.fused), loop_abs_diff(fast.h_rgb, ref.h_rgb));
  r.max_abs_diff = std::max(r.max_abs_diff, loop_abs_diff(fast.h_x, ref.h_x));
  for (std::size_t l = 0; l < ref.maps.size(); ++l) {
    r.max_abs_diff = std::max({r.max_abs_diff, loop_abs_diff(fast.maps[l].rgb, ref.maps[l].first),
                               loop_abs_diff(fast.maps[l].x, ref.maps[l].second)});
  }
  finish(r);
  return r;
}

std::vector<OracleReport> run_oracle_suite(std::size_t n_configs, std::uint64_t seed) {
  Rng root(seed);
  std::vector<OracleReport> out;
  for (std::size_t i = 0; i < n_configs; ++i) out.push_back(check_attention_case(root.next_u64()));
  for (std::size_t i = 0; i < n_configs; ++i) out.push_back(check_hmoe_case(root.next_u64()));
  for (std::size_t i = 0; i < 5; ++i) out.push_back(check_encoder_case(root.next_u64()));
  return out;
}

}  // namespace mmfuse::verify
