#include "auditlm/model.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace auditlm {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kRmsNormEps = 1e-6;
constexpr double kRopeBase = 10000.0;

struct LayerSlots {
  int norm1_w = -1, norm1_b = -1;
  int qkv_w = -1, qkv_b = -1;  // absolute
  int q = -1, k = -1, v = -1;  // rotary
  int out_w = -1, out_b = -1;
  int norm2_w = -1, norm2_b = -1;
  int fc_w = -1, fc_b = -1, proj_w = -1, proj_b = -1;  // absolute
  int gate = -1, up = -1, down = -1;                   // rotary
};

struct Slots {
  int tok_emb = -1, pos_emb = -1;
  std::vector<LayerSlots> layers;
  int final_w = -1, final_b = -1;
  int head_w = -1, head_b = -1;
};

Slots make_slots(const ModelConfig& c, std::vector<ParameterSpec>* specs) {
  Slots s;
  int next = 0;
  auto add = [&](const char* name, Eigen::Index rows, Eigen::Index cols, ParameterInit init, int layer = -1) {
    if (specs) {
      std::string full = layer < 0 ? name : "layers." + std::to_string(layer) + "." + name;
      specs->push_back(ParameterSpec{std::move(full), rows, cols, init});
    }
    return next++;
  };
  const Eigen::Index d = c.d_model, ff = c.d_ff, V = c.vocab_size();
  const bool absolute = c.arch == Architecture::DecoderAbsolute;

  s.tok_emb = add("tok_emb", V, d, ParameterInit::Normal);
  if (absolute) s.pos_emb = add("pos_emb", c.context_len, d, ParameterInit::Normal);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerSlots ls;
    ls.norm1_w = add("norm1.weight", 1, d, ParameterInit::Ones, l);
    if (absolute) {
      ls.norm1_b = add("norm1.bias", 1, d, ParameterInit::Zeros, l);
      ls.qkv_w = add("attn.qkv.weight", d, 3 * d, ParameterInit::Normal, l);
      ls.qkv_b = add("attn.qkv.bias", 1, 3 * d, ParameterInit::Zeros, l);
      ls.out_w = add("attn.out.weight", d, d, ParameterInit::ResidualNormal, l);
      ls.out_b = add("attn.out.bias", 1, d, ParameterInit::Zeros, l);
      ls.norm2_w = add("norm2.weight", 1, d, ParameterInit::Ones, l);
      ls.norm2_b = add("norm2.bias", 1, d, ParameterInit::Zeros, l);
      ls.fc_w = add("mlp.fc.weight", d, ff, ParameterInit::Normal, l);
      ls.fc_b = add("mlp.fc.bias", 1, ff, ParameterInit::Zeros, l);
      ls.proj_w = add("mlp.proj.weight", ff, d, ParameterInit::ResidualNormal, l);
      ls.proj_b = add("mlp.proj.bias", 1, d, ParameterInit::Zeros, l);
    } else {
      ls.q = add("attn.q.weight", d, d, ParameterInit::Normal, l);
      ls.k = add("attn.k.weight", d, d, ParameterInit::Normal, l);
      ls.v = add("attn.v.weight", d, d, ParameterInit::Normal, l);
      ls.out_w = add("attn.out.weight", d, d, ParameterInit::ResidualNormal, l);
      ls.norm2_w = add("norm2.weight", 1, d, ParameterInit::Ones, l);
      ls.gate = add("mlp.gate.weight", d, ff, ParameterInit::Normal, l);
      ls.up = add("mlp.up.weight", d, ff, ParameterInit::Normal, l);
      ls.down = add("mlp.down.weight", ff, d, ParameterInit::ResidualNormal, l);
    }
    s.layers.push_back(ls);
  }
  s.final_w = add("final_norm.weight", 1, d, ParameterInit::Ones);
  if (absolute) s.final_b = add("final_norm.bias", 1, d, ParameterInit::Zeros);
  s.head_w = add("head.weight", d, V, ParameterInit::Normal);
  if (absolute) s.head_b = add("head.bias", 1, V, ParameterInit::Zeros);
  return s;
}

template <typename Scalar>
using Mat = MatrixX<Scalar>;
template <typename Scalar>
using Vec = VectorX<Scalar>;

// Per-layer activations kept for the backward pass.
template <typename Scalar>
struct LayerCache {
  Mat<Scalar> x_in;
  Mat<Scalar> xhat1;
  Vec<Scalar> inv1;
  Mat<Scalar> a1;
  Mat<Scalar> q, k, v;  // post-rotation for rotary
  std::vector<Mat<Scalar>> probs;
  Mat<Scalar> attn;
  Mat<Scalar> x_mid;
  Mat<Scalar> xhat2;
  Vec<Scalar> inv2;
  Mat<Scalar> a2;
  Mat<Scalar> pre;   // fc pre-activation (absolute) or gate (rotary)
  Mat<Scalar> up;    // rotary only
  Mat<Scalar> act;   // gelu(pre) or silu(gate) * up
};

template <typename Scalar>
struct Trace {
  std::vector<LayerCache<Scalar>> layers;
  Mat<Scalar> x_final;
  Mat<Scalar> xhat_f;
  Vec<Scalar> inv_f;
  Mat<Scalar> rope_cos, rope_sin;
};

template <typename Scalar>
void layer_norm(const Mat<Scalar>& x, const Mat<Scalar>& g, const Mat<Scalar>& b, Mat<Scalar>& xhat,
                Vec<Scalar>& inv, Mat<Scalar>& y) {
  const Scalar d = static_cast<Scalar>(x.cols());
  const Vec<Scalar> mean = x.rowwise().sum() / d;
  xhat = x.colwise() - mean;
  inv = ((xhat.array().square().rowwise().sum() / d) + static_cast<Scalar>(kLayerNormEps)).rsqrt();
  xhat.array().colwise() *= inv.array();
  y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& xhat, const Vec<Scalar>& inv,
                                const Mat<Scalar>& g, Mat<Scalar>* dg, Mat<Scalar>* db) {
  const Scalar d = static_cast<Scalar>(dy.cols());
  if (dg) dg->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db) db->row(0) += dy.colwise().sum();
  Mat<Scalar> dxhat = dy.array().rowwise() * g.row(0).array();
  const Vec<Scalar> mean_d = dxhat.rowwise().sum() / d;
  const Vec<Scalar> mean_dx = (dxhat.array() * xhat.array()).rowwise().sum() / d;
  Mat<Scalar> dx = (dxhat.colwise() - mean_d) - (xhat.array().colwise() * mean_dx.array()).matrix();
  dx.array().colwise() *= inv.array();
  return dx;
}

template <typename Scalar>
void rms_norm(const Mat<Scalar>& x, const Mat<Scalar>& g, Mat<Scalar>& xn, Vec<Scalar>& inv, Mat<Scalar>& y) {
  const Scalar d = static_cast<Scalar>(x.cols());
  inv = ((x.array().square().rowwise().sum() / d) + static_cast<Scalar>(kRmsNormEps)).rsqrt();
  xn = x.array().colwise() * inv.array();
  y = xn.array().rowwise() * g.row(0).array();
}

template <typename Scalar>
Mat<Scalar> rms_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& xn, const Vec<Scalar>& inv,
                              const Mat<Scalar>& g, Mat<Scalar>* dg) {
  const Scalar d = static_cast<Scalar>(dy.cols());
  if (dg) dg->row(0) += (dy.array() * xn.array()).colwise().sum().matrix();
  Mat<Scalar> dxn = dy.array().rowwise() * g.row(0).array();
  const Vec<Scalar> mean_dx = (dxn.array() * xn.array()).rowwise().sum() / d;
  Mat<Scalar> dx = dxn - (xn.array().colwise() * mean_dx.array()).matrix();
  dx.array().colwise() *= inv.array();
  return dx;
}

template <typename Scalar>
void rope_tables(Eigen::Index T, int head_dim, Mat<Scalar>& cos_t, Mat<Scalar>& sin_t) {
  const int half = head_dim / 2;
  cos_t.resize(T, half);
  sin_t.resize(T, half);
  for (Eigen::Index p = 0; p < T; ++p) {
    for (int i = 0; i < half; ++i) {
      const double theta = std::pow(kRopeBase, -2.0 * i / head_dim);
      const double angle = static_cast<double>(p) * theta;
      cos_t(p, i) = static_cast<Scalar>(std::cos(angle));
      sin_t(p, i) = static_cast<Scalar>(std::sin(angle));
    }
  }
}

// Rotate (x_i, x_{i+half}) pairs of every head; direction -1 applies the inverse rotation.
template <typename Scalar>
void apply_rope(Mat<Scalar>& x, const Mat<Scalar>& cos_t, const Mat<Scalar>& sin_t, int n_heads, int head_dim,
                Scalar direction) {
  const int half = head_dim / 2;
  for (int h = 0; h < n_heads; ++h) {
    for (int i = 0; i < half; ++i) {
      const Eigen::Index c1 = h * head_dim + i, c2 = c1 + half;
      const Vec<Scalar> x1 = x.col(c1), x2 = x.col(c2);
      const Vec<Scalar> c = cos_t.col(i);
      const Vec<Scalar> s = direction * sin_t.col(i);
      x.col(c1) = (x1.array() * c.array() - x2.array() * s.array()).matrix();
      x.col(c2) = (x2.array() * c.array() + x1.array() * s.array()).matrix();
    }
  }
}

template <typename Scalar>
Scalar gelu(Scalar u) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar a = static_cast<Scalar>(0.044715);
  return Scalar(0.5) * u * (Scalar(1) + std::tanh(c * (u + a * u * u * u)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar u) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar a = static_cast<Scalar>(0.044715);
  const Scalar t = std::tanh(c * (u + a * u * u * u));
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * u * (Scalar(1) - t * t) * c * (Scalar(1) + Scalar(3) * a * u * u);
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

// Causal multi-head attention over already-projected q, k, v.
template <typename Scalar>
Mat<Scalar> attention(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v, int n_heads,
                      std::vector<Mat<Scalar>>* probs_out) {
  const Eigen::Index T = q.rows();
  const int hd = static_cast<int>(q.cols()) / n_heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  Mat<Scalar> out(T, q.cols());
  if (probs_out) probs_out->resize(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Mat<Scalar> s;
    s.noalias() = q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose();
    s *= scale;
    for (Eigen::Index i = 0; i < T; ++i) {
      auto row = s.row(i).head(i + 1);
      const Scalar m = row.maxCoeff();
      row = (row.array() - m).exp().matrix();
      row /= row.sum();
      s.row(i).tail(T - i - 1).setZero();
    }
    out.middleCols(h * hd, hd).noalias() = s * v.middleCols(h * hd, hd);
    if (probs_out) (*probs_out)[static_cast<std::size_t>(h)] = std::move(s);
  }
  return out;
}

template <typename Scalar>
void attention_backward(const Mat<Scalar>& dout, const LayerCache<Scalar>& cache, int n_heads, Mat<Scalar>& dq,
                        Mat<Scalar>& dk, Mat<Scalar>& dv) {
  const Eigen::Index T = dout.rows(), d = dout.cols();
  const int hd = static_cast<int>(d) / n_heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  dq.setZero(T, d);
  dk.setZero(T, d);
  dv.setZero(T, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto& a = cache.probs[static_cast<std::size_t>(h)];
    const auto d_o = dout.middleCols(h * hd, hd);
    Mat<Scalar> da;
    da.noalias() = d_o * cache.v.middleCols(h * hd, hd).transpose();
    dv.middleCols(h * hd, hd).noalias() = a.transpose() * d_o;
    const Vec<Scalar> r = (da.array() * a.array()).rowwise().sum();
    Mat<Scalar> ds = a.array() * (da.array().colwise() - r.array());
    ds *= scale;
    dq.middleCols(h * hd, hd).noalias() = ds * cache.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd).noalias() = ds.transpose() * cache.q.middleCols(h * hd, hd);
  }
}

template <typename Scalar>
void add_row_bias(Mat<Scalar>& x, const Mat<Scalar>& b) {
  x.rowwise() += b.row(0);
}

template <typename Scalar>
ForwardResult<Scalar> run_forward(const ModelState<Scalar>& state, const Slots& slots, std::span<const TokenId> tokens,
                                  Trace<Scalar>* trace) {
  const auto& c = state.config;
  const auto& P = state.params;
  const Eigen::Index T = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index d = c.d_model;
  if (T == 0) throw ContractViolation("forward needs at least one token");
  if (T > c.context_len)
    throw ContractViolation("input of " + std::to_string(T) + " tokens exceeds context length " +
                            std::to_string(c.context_len));
  const bool absolute = c.arch == Architecture::DecoderAbsolute;

  Mat<Scalar> x(T, d);
  for (Eigen::Index p = 0; p < T; ++p) {
    const TokenId t = tokens[static_cast<std::size_t>(p)];
    if (t < 0 || t >= c.vocab_size()) throw ContractViolation("token id out of range: " + std::to_string(t));
    x.row(p) = P[slots.tok_emb].row(t);
    if (absolute) x.row(p) += P[slots.pos_emb].row(p);
  }

  Mat<Scalar> rope_cos, rope_sin;
  if (!absolute) rope_tables<Scalar>(T, c.head_dim(), rope_cos, rope_sin);

  Trace<Scalar> local;
  Trace<Scalar>& tr = trace ? *trace : local;
  tr.layers.assign(static_cast<std::size_t>(c.n_layers), {});
  const bool keep = trace != nullptr;

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& s = slots.layers[static_cast<std::size_t>(l)];
    auto& lc = tr.layers[static_cast<std::size_t>(l)];
    if (keep) lc.x_in = x;

    if (absolute) {
      layer_norm<Scalar>(x, P[s.norm1_w], P[s.norm1_b], lc.xhat1, lc.inv1, lc.a1);
      Mat<Scalar> qkv;
      qkv.noalias() = lc.a1 * P[s.qkv_w];
      add_row_bias(qkv, P[s.qkv_b]);
      lc.q = qkv.leftCols(d);
      lc.k = qkv.middleCols(d, d);
      lc.v = qkv.rightCols(d);
    } else {
      rms_norm<Scalar>(x, P[s.norm1_w], lc.xhat1, lc.inv1, lc.a1);
      lc.q.noalias() = lc.a1 * P[s.q];
      lc.k.noalias() = lc.a1 * P[s.k];
      lc.v.noalias() = lc.a1 * P[s.v];
      apply_rope<Scalar>(lc.q, rope_cos, rope_sin, c.n_heads, c.head_dim(), Scalar(1));
      apply_rope<Scalar>(lc.k, rope_cos, rope_sin, c.n_heads, c.head_dim(), Scalar(1));
    }
    lc.attn = attention<Scalar>(lc.q, lc.k, lc.v, c.n_heads, keep ? &lc.probs : nullptr);
    x.noalias() += lc.attn * P[s.out_w];
    if (absolute) add_row_bias(x, P[s.out_b]);
    if (keep) lc.x_mid = x;

    Mat<Scalar> z;
    if (absolute) {
      layer_norm<Scalar>(x, P[s.norm2_w], P[s.norm2_b], lc.xhat2, lc.inv2, lc.a2);
      lc.pre.noalias() = lc.a2 * P[s.fc_w];
      add_row_bias(lc.pre, P[s.fc_b]);
      lc.act = lc.pre.unaryExpr([](Scalar u) { return gelu(u); });
      z.noalias() = lc.act * P[s.proj_w];
      add_row_bias(z, P[s.proj_b]);
    } else {
      rms_norm<Scalar>(x, P[s.norm2_w], lc.xhat2, lc.inv2, lc.a2);
      lc.pre.noalias() = lc.a2 * P[s.gate];
      lc.up.noalias() = lc.a2 * P[s.up];
      lc.act = lc.pre.unaryExpr([](Scalar g) { return g * sigmoid(g); }).cwiseProduct(lc.up);
      z.noalias() = lc.act * P[s.down];
    }
    x += z;
    if (!keep) lc = LayerCache<Scalar>{};
  }

  ForwardResult<Scalar> out;
  if (absolute)
    layer_norm<Scalar>(x, P[slots.final_w], P[slots.final_b], tr.xhat_f, tr.inv_f, out.hidden);
  else
    rms_norm<Scalar>(x, P[slots.final_w], tr.xhat_f, tr.inv_f, out.hidden);
  out.logits.noalias() = out.hidden * P[slots.head_w];
  if (absolute) add_row_bias(out.logits, P[slots.head_b]);
  if (keep) {
    tr.x_final = std::move(x);
    tr.rope_cos = std::move(rope_cos);
    tr.rope_sin = std::move(rope_sin);
  }
  return out;
}

template <typename Scalar>
void run_backward(const ModelState<Scalar>& state, const Slots& slots, std::span<const TokenId> tokens,
                  const Trace<Scalar>& tr, const Mat<Scalar>& hidden, const Mat<Scalar>& dlogits,
                  ParameterList<Scalar>& G) {
  const auto& c = state.config;
  const auto& P = state.params;
  const bool absolute = c.arch == Architecture::DecoderAbsolute;
  const Eigen::Index T = dlogits.rows();

  G[slots.head_w].noalias() += hidden.transpose() * dlogits;
  if (absolute) G[slots.head_b].row(0) += dlogits.colwise().sum();
  Mat<Scalar> dh;
  dh.noalias() = dlogits * P[slots.head_w].transpose();
  Mat<Scalar> dx = absolute ? layer_norm_backward<Scalar>(dh, tr.xhat_f, tr.inv_f, P[slots.final_w],
                                                          &G[slots.final_w], &G[slots.final_b])
                            : rms_norm_backward<Scalar>(dh, tr.xhat_f, tr.inv_f, P[slots.final_w], &G[slots.final_w]);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& s = slots.layers[static_cast<std::size_t>(l)];
    const auto& lc = tr.layers[static_cast<std::size_t>(l)];

    // MLP branch: x_out = x_mid + z
    Mat<Scalar> da2;
    if (absolute) {
      G[s.proj_w].noalias() += lc.act.transpose() * dx;
      G[s.proj_b].row(0) += dx.colwise().sum();
      Mat<Scalar> dact;
      dact.noalias() = dx * P[s.proj_w].transpose();
      Mat<Scalar> dpre = dact.cwiseProduct(lc.pre.unaryExpr([](Scalar u) { return gelu_grad(u); }));
      G[s.fc_w].noalias() += lc.a2.transpose() * dpre;
      G[s.fc_b].row(0) += dpre.colwise().sum();
      da2.noalias() = dpre * P[s.fc_w].transpose();
      dx += layer_norm_backward<Scalar>(da2, lc.xhat2, lc.inv2, P[s.norm2_w], &G[s.norm2_w], &G[s.norm2_b]);
    } else {
      G[s.down].noalias() += lc.act.transpose() * dx;
      Mat<Scalar> dact;
      dact.noalias() = dx * P[s.down].transpose();
      const Mat<Scalar> sig = lc.pre.unaryExpr([](Scalar g) { return sigmoid(g); });
      const Mat<Scalar> silu = lc.pre.cwiseProduct(sig);
      const Mat<Scalar> silu_grad =
          (sig.array() * (Scalar(1) + lc.pre.array() * (Scalar(1) - sig.array()))).matrix();
      Mat<Scalar> dgate = dact.cwiseProduct(lc.up).cwiseProduct(silu_grad);
      Mat<Scalar> dup = dact.cwiseProduct(silu);
      G[s.gate].noalias() += lc.a2.transpose() * dgate;
      G[s.up].noalias() += lc.a2.transpose() * dup;
      da2.noalias() = dgate * P[s.gate].transpose();
      da2.noalias() += dup * P[s.up].transpose();
      dx += rms_norm_backward<Scalar>(da2, lc.xhat2, lc.inv2, P[s.norm2_w], &G[s.norm2_w]);
    }

    // Attention branch: x_mid = x_in + attn * W_out
    G[s.out_w].noalias() += lc.attn.transpose() * dx;
    if (absolute) G[s.out_b].row(0) += dx.colwise().sum();
    Mat<Scalar> dattn;
    dattn.noalias() = dx * P[s.out_w].transpose();
    Mat<Scalar> dq, dk, dv;
    attention_backward<Scalar>(dattn, lc, c.n_heads, dq, dk, dv);

    Mat<Scalar> da1;
    if (absolute) {
      const Eigen::Index d = c.d_model;
      Mat<Scalar> dqkv(T, 3 * d);
      dqkv.leftCols(d) = dq;
      dqkv.middleCols(d, d) = dk;
      dqkv.rightCols(d) = dv;
      G[s.qkv_w].noalias() += lc.a1.transpose() * dqkv;
      G[s.qkv_b].row(0) += dqkv.colwise().sum();
      da1.noalias() = dqkv * P[s.qkv_w].transpose();
      dx += layer_norm_backward<Scalar>(da1, lc.xhat1, lc.inv1, P[s.norm1_w], &G[s.norm1_w], &G[s.norm1_b]);
    } else {
      apply_rope<Scalar>(dq, tr.rope_cos, tr.rope_sin, c.n_heads, c.head_dim(), Scalar(-1));
      apply_rope<Scalar>(dk, tr.rope_cos, tr.rope_sin, c.n_heads, c.head_dim(), Scalar(-1));
      G[s.q].noalias() += lc.a1.transpose() * dq;
      G[s.k].noalias() += lc.a1.transpose() * dk;
      G[s.v].noalias() += lc.a1.transpose() * dv;
      da1.noalias() = dq * P[s.q].transpose();
      da1.noalias() += dk * P[s.k].transpose();
      da1.noalias() += dv * P[s.v].transpose();
      dx += rms_norm_backward<Scalar>(da1, lc.xhat1, lc.inv1, P[s.norm1_w], &G[s.norm1_w]);
    }
  }

  for (Eigen::Index p = 0; p < T; ++p) {
    G[slots.tok_emb].row(tokens[static_cast<std::size_t>(p)]) += dx.row(p);
    if (absolute) G[slots.pos_emb].row(p) += dx.row(p);
  }
}

}  // namespace

std::vector<ParameterSpec> parameter_specs(const ModelConfig& config) {
  std::vector<ParameterSpec> specs;
  make_slots(config, &specs);
  return specs;
}

template <typename Scalar>
ModelState<Scalar> init_model(const ModelConfig& config, std::uint64_t seed, std::uint64_t vocab_hash) {
  config.validate();
  ModelState<Scalar> state;
  state.config = config;
  state.config.seed = seed;
  state.vocab_hash = vocab_hash;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * config.n_layers);
  for (const auto& spec : parameter_specs(config)) {
    MatrixX<Scalar> m(spec.rows, spec.cols);
    switch (spec.init) {
      case ParameterInit::Zeros:
        m.setZero();
        break;
      case ParameterInit::Ones:
        m.setOnes();
        break;
      case ParameterInit::Normal:
      case ParameterInit::ResidualNormal: {
        const double stddev = spec.init == ParameterInit::Normal ? base : residual;
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(stddev * normal(rng));
        break;
      }
    }
    state.params.push_back(std::move(m));
  }
  return state;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const ModelState<Scalar>& state, std::span<const TokenId> tokens) {
  const Slots slots = make_slots(state.config, nullptr);
  return run_forward<Scalar>(state, slots, tokens, nullptr);
}

bool is_scored_target(const FieldLayout& layout, std::span<const TokenId> tokens, std::size_t position) {
  if (position == 0 || position >= tokens.size()) return false;
  return layout.block(*field_of(position)).contains(tokens[position]);
}

template <typename Scalar>
VectorX<double> masked_log_softmax(const Eigen::Ref<const RowVectorX<Scalar>>& logits, const TokenBlock& block) {
  VectorX<double> z = logits.segment(block.begin, block.size).transpose().template cast<double>();
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return (z.array() - lse).matrix();
}

template <typename Scalar>
LossReport loss_and_grads(const ModelState<Scalar>& state, std::span<const std::vector<TokenId>> batch,
                          ParameterList<Scalar>* grads, const LossOptions& options) {
  const auto& layout = state.config.fields;
  const Slots slots = make_slots(state.config, nullptr);

  LossReport report;
  for (const auto& seq : batch)
    for (std::size_t q = 1; q < seq.size(); ++q)
      if (is_scored_target(layout, seq, q)) ++report.count;

  if (grads) {
    if (!options.accumulate || grads->size() != state.params.size()) *grads = zeros_like(state.params);
  }
  if (report.count == 0) return report;
  const double weight = options.grad_scale / static_cast<double>(report.count);

  for (const auto& seq_full : batch) {
    std::size_t len = seq_full.size();
    while (len > 0 && seq_full[len - 1] == kPad) --len;
    if (len < 2) continue;
    std::span<const TokenId> seq(seq_full.data(), len);

    Trace<Scalar> trace;
    auto fwd = run_forward<Scalar>(state, slots, seq, grads ? &trace : nullptr);
    const Eigen::Index T = static_cast<Eigen::Index>(len);
    Mat<Scalar> dlogits;
    if (grads) dlogits.setZero(T, state.config.vocab_size());

    for (std::size_t q = 1; q < len; ++q) {
      if (!is_scored_target(layout, seq, q)) continue;
      const Field f = *field_of(q);
      const auto& block = layout.block(f);
      const Eigen::Index p = static_cast<Eigen::Index>(q - 1);
      const VectorX<double> logp = masked_log_softmax<Scalar>(fwd.logits.row(p), block);
      Eigen::Index target = seq[q] - block.begin;
      if (options.sample_targets) {
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        double u = uni(*options.sample_targets);
        Eigen::Index pick = block.size - 1;
        for (Eigen::Index i = 0; i < block.size; ++i) {
          u -= std::exp(logp[i]);
          if (u <= 0.0) {
            pick = i;
            break;
          }
        }
        target = pick;
      }
      const double nll = -logp[target];
      const int fi = static_cast<int>(f);
      report.field_nll_sum[fi] += nll;
      ++report.field_count[fi];
      if (grads) {
        auto drow = dlogits.row(p).segment(block.begin, block.size);
        for (Eigen::Index i = 0; i < block.size; ++i)
          drow[i] = static_cast<Scalar>(weight * (std::exp(logp[i]) - (i == target ? 1.0 : 0.0)));
      }
    }
    if (grads) run_backward(state, slots, seq, trace, fwd.hidden, dlogits, *grads);
  }

  double total = 0.0;
  for (int f = 0; f < kNumFields; ++f) {
    total += report.field_nll_sum[f];
    report.field_loss[f] =
        report.field_count[f] ? report.field_nll_sum[f] / static_cast<double>(report.field_count[f]) : 0.0;
  }
  report.loss = total / static_cast<double>(report.count);
  return report;
}

template <typename Scalar>
std::vector<double> token_nll(const ModelState<Scalar>& state, std::span<const TokenId> tokens) {
  std::vector<double> out(tokens.size(), std::numeric_limits<double>::quiet_NaN());
  if (tokens.size() < 2) return out;
  const auto fwd = forward(state, tokens);
  const auto& layout = state.config.fields;
  for (std::size_t q = 1; q < tokens.size(); ++q) {
    if (!is_scored_target(layout, tokens, q)) continue;
    const auto& block = layout.block(*field_of(q));
    const auto logp = masked_log_softmax<Scalar>(fwd.logits.row(static_cast<Eigen::Index>(q - 1)), block);
    out[q] = -logp[tokens[q] - block.begin];
  }
  return out;
}

#define AUDITLM_INSTANTIATE(S)                                                                                   \
  template ModelState<S> init_model<S>(const ModelConfig&, std::uint64_t, std::uint64_t);                       \
  template ForwardResult<S> forward<S>(const ModelState<S>&, std::span<const TokenId>);                         \
  template LossReport loss_and_grads<S>(const ModelState<S>&, std::span<const std::vector<TokenId>>,            \
                                        ParameterList<S>*, const LossOptions&);                                 \
  template std::vector<double> token_nll<S>(const ModelState<S>&, std::span<const TokenId>);                    \
  template VectorX<double> masked_log_softmax<S>(const Eigen::Ref<const RowVectorX<S>>&, const TokenBlock&);

AUDITLM_INSTANTIATE(float)
AUDITLM_INSTANTIATE(double)

#undef AUDITLM_INSTANTIATE

}  // namespace auditlm
