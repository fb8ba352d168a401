// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/hmoe.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "mmfuse/ops.hpp"

namespace mmfuse {

void HmoeConfig::validate() const {
  if (d_model == 0 || heads_per_expert == 0 || n_experts == 0 || expert_rank == 0) {
    throw ConfigError("hmoe: d_model, heads_per_expert, n_experts and expert_rank must be positive");
  }
  if (d_model % heads_per_expert != 0) {
    throw ConfigError("hmoe: d_model " + std::to_string(d_model) + " not divisible by heads_per_expert " +
                      std::to_string(heads_per_expert));
  }
  if (expert_rank >= sub_dim()) {
    throw ConfigError("hmoe: expert_rank " + std::to_string(expert_rank) + " must be < D/h = " +
                      std::to_string(sub_dim()));
  }
}

void to_json(nlohmann::json& j, const HmoeConfig& c) {
  j = {{"d_model", c.d_model},
       {"heads_per_expert", c.heads_per_expert},
       {"n_experts", c.n_experts},
       {"expert_rank", c.expert_rank},
       {"patch_agg", c.patch_agg == PatchAgg::sum ? "sum" : "mean"}};
}

void from_json(const nlohmann::json& j, HmoeConfig& c) {
  c.d_model = j.value("d_model", c.d_model);
  c.heads_per_expert = j.value("heads_per_expert", c.heads_per_expert);
  c.n_experts = j.value("n_experts", c.n_experts);
  c.expert_rank = j.value("expert_rank", c.expert_rank);
  const auto agg = j.value("patch_agg", std::string("sum"));
  if (agg == "sum") {
    c.patch_agg = PatchAgg::sum;
  } else if (agg == "mean") {
    c.patch_agg = PatchAgg::mean;
  } else {
    throw ConfigError("hmoe: unknown patch_agg '" + agg + "'");
  }
}

std::size_t hmoe_param_count(const HmoeConfig& c) {
  c.validate();
  const std::size_t phi = c.sub_dim() * c.n_heads_total();
  const std::size_t experts = c.n_experts * 2 * c.sub_dim() * c.expert_rank;
  const std::size_t pre_post = 2 * 2 * c.d_model * c.expert_rank;
  return phi + experts + pre_post;
}

std::uint64_t hmoe_mac_count(const HmoeConfig& c, std::size_t n_tokens) {
  c.validate();
  const std::uint64_t n = n_tokens, d = c.d_model, e = c.n_experts, h = c.heads_per_expert, r = c.expert_rank;
  const std::uint64_t pre = 2 * n * d * r;
  const std::uint64_t logits = (n * h) * (d / h) * (e * h);
  const std::uint64_t mixing = (e * h) * (n * h) * (d / h);
  const std::uint64_t experts = (e * h) * 2 * (d / h) * r;
  const std::uint64_t post = 2 * e * d * r;
  const std::uint64_t combine = n * e * d;
  return pre + logits + mixing + experts + post + combine;
}

// ---- layer ----------------------------------------------------------------

template <typename T>
std::size_t HmoeLayer<T>::param_count() const {
  std::size_t n = phi.size() + pre.param_count() + post.param_count();
  for (const auto& ex : experts) n += ex.param_count();
  return n;
}

template <typename T>
void HmoeLayer<T>::validate() const {
  config.validate();
  const std::size_t d = config.d_model, s = config.sub_dim(), r = config.expert_rank;
  auto expect = [](const Tensor<T>& t, const Shape& shape, const char* what) {
    if (t.shape() != shape) {
      throw ConfigError(std::string("hmoe: ") + what + " has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(shape));
    }
  };
  expect(phi, {s, config.n_heads_total()}, "phi");
  if (experts.size() != config.n_experts) throw ConfigError("hmoe: expert count does not match config");
  for (const auto& ex : experts) {
    expect(ex.a, {s, r}, "expert.a");
    expect(ex.b, {r, s}, "expert.b");
  }
  expect(pre.a, {d, r}, "pre.a");
  expect(pre.b, {r, d}, "pre.b");
  expect(post.a, {d, r}, "post.a");
  expect(post.b, {r, d}, "post.b");
}

template <typename T>
HmoeLayer<T> HmoeLayer<T>::init_dense(const HmoeConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.d_model, s = config.sub_dim(), r = config.expert_rank;
  HmoeLayer layer;
  layer.config = config;
  layer.phi = xavier_init<T>(rng, {s, config.n_heads_total()});
  for (std::size_t i = 0; i < config.n_experts; ++i) {
    layer.experts.push_back({xavier_init<T>(rng, {s, r}), xavier_init<T>(rng, {r, s})});
  }
  layer.pre = {xavier_init<T>(rng, {d, r}), xavier_init<T>(rng, {r, d})};
  layer.post = {xavier_init<T>(rng, {d, r}), xavier_init<T>(rng, {r, d})};
  return layer;
}

template <typename T>
HmoeLayer<T> HmoeLayer<T>::init(const HmoeConfig& config, Rng& rng) {
  auto layer = init_dense(config, rng);
  layer.post.b = Tensor<T>(layer.post.b.shape());
  return layer;
}

template <typename T>
HmoeLayer<T> HmoeLayer<T>::zeros_like(const HmoeLayer& other) {
  HmoeLayer z;
  z.config = other.config;
  z.phi = Tensor<T>(other.phi.shape());
  for (const auto& ex : other.experts) z.experts.push_back({Tensor<T>(ex.a.shape()), Tensor<T>(ex.b.shape())});
  z.pre = {Tensor<T>(other.pre.a.shape()), Tensor<T>(other.pre.b.shape())};
  z.post = {Tensor<T>(other.post.a.shape()), Tensor<T>(other.post.b.shape())};
  return z;
}

// ---- forward pieces -------------------------------------------------------

template <typename T>
Tensor<T> split_subtokens(const HmoeLayer<T>& layer, const Tensor<T>& x_pre) {
  const auto& c = layer.config;
  c.validate();
  if (x_pre.rank() != 2 || x_pre.cols() != c.d_model) {
    throw DimensionError("split_subtokens: expected [N x " + std::to_string(c.d_model) + "], got " +
                         shape_str(x_pre.shape()));
  }
  return reshape(x_pre, {x_pre.rows() * c.heads_per_expert, c.sub_dim()});
}

template <typename T>
Tensor<T> unsplit_subtokens(const HmoeLayer<T>& layer, const Tensor<T>& x_split) {
  const auto& c = layer.config;
  if (x_split.rank() != 2 || x_split.cols() != c.sub_dim() || x_split.rows() % c.heads_per_expert != 0) {
    throw DimensionError("unsplit_subtokens: bad shape " + shape_str(x_split.shape()));
  }
  return reshape(x_split, {x_split.rows() / c.heads_per_expert, c.d_model});
}

template <typename T>
MixResult<T> mix_subtokens(const HmoeLayer<T>& layer, const Tensor<T>& x_split) {
  if (x_split.rank() != 2 || x_split.cols() != layer.config.sub_dim()) {
    throw DimensionError("mix_subtokens: expected [(N h) x " + std::to_string(layer.config.sub_dim()) + "], got " +
                         shape_str(x_split.shape()));
  }
  MixResult<T> m;
  m.logits = matmul(x_split, layer.phi);
  m.weights = softmax(m.logits, 0);
  m.x_mix = matmul_tn(m.weights, x_split);
  return m;
}

namespace {

template <typename T>
struct ExpertPass {
  Tensor<T> z_head, y_cat, u_post, y_expert;
};

template <typename T>
ExpertPass<T> run_experts(const HmoeLayer<T>& layer, const Tensor<T>& x_mix) {
  const auto& c = layer.config;
  const std::size_t h = c.heads_per_expert, e = c.n_experts, s = c.sub_dim(), r = c.expert_rank;
  if (x_mix.rank() != 2 || x_mix.rows() != e * h || x_mix.cols() != s) {
    throw DimensionError("expert_transform: expected [" + std::to_string(e * h) + " x " + std::to_string(s) +
                         "], got " + shape_str(x_mix.shape()));
  }
  ExpertPass<T> p;
  p.z_head = Tensor<T>({e * h, r});
  Tensor<T> y_head({e * h, s});
  for (std::size_t i = 0; i < e; ++i) {
    const auto rows = slice_rows(x_mix, i * h, (i + 1) * h);
    const auto z = matmul(rows, layer.experts[i].a);
    const auto y = matmul(z, layer.experts[i].b);
    std::copy_n(z.raw(), z.size(), p.z_head.row_ptr(i * h));
    std::copy_n(y.raw(), y.size(), y_head.row_ptr(i * h));
  }
  p.y_cat = reshape(y_head, {e, c.d_model});
  p.u_post = matmul(p.y_cat, layer.post.a);
  p.y_expert = matmul(p.u_post, layer.post.b);
  return p;
}

template <typename T>
Tensor<T> patchify(const HmoeConfig& c, const Tensor<T>& logits) {
  const std::size_t h = c.heads_per_expert;
  if (logits.rank() != 2 || logits.rows() % h != 0 || logits.cols() % h != 0) {
    throw ConfigError("token_affinity: logits " + shape_str(logits.shape()) + " do not tile into " +
                      std::to_string(h) + "x" + std::to_string(h) + " blocks");
  }
  const std::size_t n = logits.rows() / h, e = logits.cols() / h;
  Tensor<T> p({n, e});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t a = 0; a < h; ++a) {
      const T* row = logits.row_ptr(t * h + a);
      for (std::size_t k = 0; k < e; ++k)
        for (std::size_t b = 0; b < h; ++b) p(t, k) += row[k * h + b];
    }
  if (c.patch_agg == PatchAgg::mean) p = scale(p, T(1) / static_cast<T>(h * h));
  return p;
}

}  // namespace

template <typename T>
Tensor<T> expert_transform(const HmoeLayer<T>& layer, const Tensor<T>& x_mix) {
  return run_experts(layer, x_mix).y_expert;
}

template <typename T>
Tensor<T> token_affinity(const HmoeLayer<T>& layer, const Tensor<T>& logits) {
  return softmax(patchify(layer.config, logits), 1);
}

template <typename T>
HmoeResult<T> hmoe_forward(const HmoeLayer<T>& layer, const Tensor<T>& x_in) {
  layer.validate();
  if (x_in.rank() != 2 || x_in.cols() != layer.config.d_model) {
    throw DimensionError("hmoe_forward: expected [N x " + std::to_string(layer.config.d_model) + "], got " +
                         shape_str(x_in.shape()));
  }
  HmoeResult<T> res;
  auto& c = res.cache;
  c.config = layer.config;
  c.x_in = x_in;
  c.u_pre = matmul(x_in, layer.pre.a);
  c.x_split = split_subtokens(layer, matmul(c.u_pre, layer.pre.b));
  c.mix = mix_subtokens(layer, c.x_split);
  auto ex = run_experts(layer, c.mix.x_mix);
  c.z_head = std::move(ex.z_head);
  c.y_cat = std::move(ex.y_cat);
  c.u_post = std::move(ex.u_post);
  c.y_expert = std::move(ex.y_expert);
  c.affinity = token_affinity(layer, c.mix.logits);
  res.y_out = matmul(c.affinity, c.y_expert);
  return res;
}

// ---- backward -------------------------------------------------------------

template <typename T>
HmoeGrads<T> hmoe_backward(const HmoeLayer<T>& layer, const HmoeCache<T>& cache, const Tensor<T>& grad_y) {
  const auto& c = layer.config;
  if (cache.x_in.empty() || cache.config.d_model != c.d_model || cache.config.heads_per_expert != c.heads_per_expert ||
      cache.config.n_experts != c.n_experts || cache.config.expert_rank != c.expert_rank ||
      cache.config.patch_agg != c.patch_agg) {
    throw StateError("hmoe_backward: cache was produced by a differently configured layer");
  }
  if (grad_y.shape() != cache.x_in.shape()) {
    throw DimensionError("hmoe_backward: upstream gradient " + shape_str(grad_y.shape()) + " vs output " +
                         shape_str(cache.x_in.shape()));
  }
  const std::size_t n = cache.x_in.rows(), h = c.heads_per_expert, e = c.n_experts;
  auto g = HmoeLayer<T>::zeros_like(layer);
  HmoeGrads<T> out;

  // Y_out = A Y_expert
  const auto d_aff = matmul_nt(grad_y, cache.y_expert);
  const auto d_yexp = matmul_tn(cache.affinity, grad_y);

  // A = softmax_rows(P), P = patchify(L)
  Tensor<T> d_logits(cache.mix.logits.shape());
  const T patch_scale = c.patch_agg == PatchAgg::mean ? T(1) / static_cast<T>(h * h) : T(1);
  for (std::size_t t = 0; t < n; ++t) {
    T inner = T(0);
    for (std::size_t k = 0; k < e; ++k) inner += d_aff(t, k) * cache.affinity(t, k);
    for (std::size_t k = 0; k < e; ++k) {
      const T dp = cache.affinity(t, k) * (d_aff(t, k) - inner) * patch_scale;
      for (std::size_t a = 0; a < h; ++a)
        for (std::size_t b = 0; b < h; ++b) d_logits(t * h + a, k * h + b) = dp;
    }
  }

  // Y_expert = (Y_cat A_post) B_post
  g.post.b = matmul_tn(cache.u_post, d_yexp);
  const auto du_post = matmul_nt(d_yexp, layer.post.b);
  g.post.a = matmul_tn(cache.y_cat, du_post);
  const auto d_ycat = matmul_nt(du_post, layer.post.a);
  const auto d_yhead = reshape(d_ycat, {e * h, c.sub_dim()});

  // Y_head rows of expert i = (X_mix rows A_i) B_i
  Tensor<T> d_xmix(cache.mix.x_mix.shape());
  for (std::size_t i = 0; i < e; ++i) {
    const auto dy = slice_rows(d_yhead, i * h, (i + 1) * h);
    const auto z = slice_rows(cache.z_head, i * h, (i + 1) * h);
    const auto xm = slice_rows(cache.mix.x_mix, i * h, (i + 1) * h);
    g.experts[i].b = matmul_tn(z, dy);
    const auto dz = matmul_nt(dy, layer.experts[i].b);
    g.experts[i].a = matmul_tn(xm, dz);
    const auto dx = matmul_nt(dz, layer.experts[i].a);
    std::copy_n(dx.raw(), dx.size(), d_xmix.row_ptr(i * h));
  }

  // X_mix = M^T X_split with M = softmax over sub-tokens (columns) of L
  const auto& m = cache.mix.weights;
  const auto dm = matmul_nt(cache.x_split, d_xmix);
  auto d_xsplit = matmul(m, d_xmix);
  for (std::size_t col = 0; col < m.cols(); ++col) {
    T inner = T(0);
    for (std::size_t row = 0; row < m.rows(); ++row) inner += dm(row, col) * m(row, col);
    for (std::size_t row = 0; row < m.rows(); ++row) d_logits(row, col) += m(row, col) * (dm(row, col) - inner);
  }

  // L = X_split Phi
  g.phi = matmul_tn(cache.x_split, d_logits);
  add_into(d_xsplit, matmul_nt(d_logits, layer.phi));

  // X_pre = (X_in A_pre) B_pre
  const auto d_xpre = reshape(d_xsplit, {n, c.d_model});
  g.pre.b = matmul_tn(cache.u_pre, d_xpre);
  const auto du_pre = matmul_nt(d_xpre, layer.pre.b);
  g.pre.a = matmul_tn(cache.x_in, du_pre);
  out.x_in = matmul_nt(du_pre, layer.pre.a);

  out.phi = std::move(g.phi);
  out.experts = std::move(g.experts);
  out.pre = std::move(g.pre);
  out.post = std::move(g.post);
  return out;
}

#define MMFUSE_INSTANTIATE_HMOE(T)                                                                 \
  template struct HmoeLayer<T>;                                                                    \
  template Tensor<T> split_subtokens(const HmoeLayer<T>&, const Tensor<T>&);                       \
  template Tensor<T> unsplit_subtokens(const HmoeLayer<T>&, const Tensor<T>&);                     \
  template MixResult<T> mix_subtokens(const HmoeLayer<T>&, const Tensor<T>&);                      \
  template Tensor<T> expert_transform(const HmoeLayer<T>&, const Tensor<T>&);                      \
  template Tensor<T> token_affinity(const HmoeLayer<T>&, const Tensor<T>&);                        \
  template HmoeResult<T> hmoe_forward(const HmoeLayer<T>&, const Tensor<T>&);                      \
  template HmoeGrads<T> hmoe_backward(const HmoeLayer<T>&, const HmoeCache<T>&, const Tensor<T>&);

MMFUSE_INSTANTIATE_HMOE(float)
MMFUSE_INSTANTIATE_HMOE(double)

#undef MMFUSE_INSTANTIATE_HMOE

}  // namespace mmfuse
