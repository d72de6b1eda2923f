#pragma once

// Bidirectional pre-norm transformer stack with per-sequence adaptive layer
// normalization. Every block normalizes without learned affine parameters and
// then applies (1 + gamma, beta) projected from a conditioning vector. With a
// zero-width conditioning vector the projection reduces to its bias, which is
// an ordinary affine LayerNorm.
//
// Sequences of different lengths are packed row-wise into one matrix; linear
// layers run over all rows at once and attention runs per sequence.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cod/core.hpp"

namespace cod {

template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
using TensorList = std::vector<std::pair<std::string, Mat<T>*>>;

template <class T>
struct BlockParams {
  Mat<T> mod_w, mod_b;  // cond -> [gamma1 beta1 gamma2 beta2]
  Mat<T> qkv_w, qkv_b;
  Mat<T> out_w, out_b;
  Mat<T> fc1_w, fc1_b;
  Mat<T> fc2_w, fc2_b;

  void collect(const std::string& p, TensorList<T>& out) {
    out.emplace_back(p + "mod_w", &mod_w);
    out.emplace_back(p + "mod_b", &mod_b);
    out.emplace_back(p + "qkv_w", &qkv_w);
    out.emplace_back(p + "qkv_b", &qkv_b);
    out.emplace_back(p + "out_w", &out_w);
    out.emplace_back(p + "out_b", &out_b);
    out.emplace_back(p + "fc1_w", &fc1_w);
    out.emplace_back(p + "fc1_b", &fc1_b);
    out.emplace_back(p + "fc2_w", &fc2_w);
    out.emplace_back(p + "fc2_b", &fc2_b);
  }
};

template <class T>
struct StackParams {
  std::vector<BlockParams<T>> blocks;
  Mat<T> final_mod_w, final_mod_b;  // cond -> [gamma beta]

  void collect(const std::string& p, TensorList<T>& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(p + "blocks." + std::to_string(i) + ".", out);
    out.emplace_back(p + "final_mod_w", &final_mod_w);
    out.emplace_back(p + "final_mod_b", &final_mod_b);
  }
};

struct StackShape {
  int layers = 4;
  int dim = 128;
  int heads = 4;
  int mlp_dim = 512;
  int cond_dim = 16;
};

/// Learnable parameter count of one stack.
inline long long stack_param_count(const StackShape& s) {
  const long long d = s.dim, f = s.mlp_dim, c = s.cond_dim;
  const long long block = (c * 4 * d + 4 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
  return s.layers * block + c * 2 * d + 2 * d;
}

template <class T>
void init_normal(Mat<T>& m, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
}

template <class T>
void init_zero(Mat<T>& m, Eigen::Index rows, Eigen::Index cols) {
  m = Mat<T>::Zero(rows, cols);
}

template <class T>
StackParams<T> init_stack(const StackShape& s, Rng& rng) {
  if (s.dim % s.heads != 0) invalid("hidden_dim must be divisible by num_heads");
  StackParams<T> p;
  const double std = 0.02;
  const double proj_std = std / std::sqrt(2.0 * std::max(1, s.layers));
  p.blocks.resize(static_cast<std::size_t>(s.layers));
  for (auto& b : p.blocks) {
    init_zero(b.mod_w, s.cond_dim, 4 * s.dim);
    init_zero(b.mod_b, 1, 4 * s.dim);
    init_normal(b.qkv_w, s.dim, 3 * s.dim, std, rng);
    init_zero(b.qkv_b, 1, 3 * s.dim);
    init_normal(b.out_w, s.dim, s.dim, proj_std, rng);
    init_zero(b.out_b, 1, s.dim);
    init_normal(b.fc1_w, s.dim, s.mlp_dim, std, rng);
    init_zero(b.fc1_b, 1, s.mlp_dim);
    init_normal(b.fc2_w, s.mlp_dim, s.dim, proj_std, rng);
    init_zero(b.fc2_b, 1, s.dim);
  }
  init_zero(p.final_mod_w, s.cond_dim, 2 * s.dim);
  init_zero(p.final_mod_b, 1, 2 * s.dim);
  return p;
}

/// Row ranges of the packed sequences: sequence b owns rows [offsets[b], offsets[b+1]).
struct PackedLayout {
  std::vector<int> offsets{0};

  void add(int len) { offsets.push_back(offsets.back() + len); }
  int batch() const { return static_cast<int>(offsets.size()) - 1; }
  int rows() const { return offsets.back(); }
  int start(int b) const { return offsets[static_cast<std::size_t>(b)]; }
  int length(int b) const { return offsets[static_cast<std::size_t>(b) + 1] - offsets[static_cast<std::size_t>(b)]; }
};

template <class T>
void layer_norm(const Mat<T>& x, Mat<T>& n, ColVec<T>& rstd) {
  const auto d = static_cast<T>(x.cols());
  n.resize(x.rows(), x.cols());
  rstd.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mu = x.row(i).sum() / d;
    n.row(i) = x.row(i).array() - mu;
    const T var = n.row(i).squaredNorm() / d;
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    n.row(i) *= r;
    rstd(i) = r;
  }
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dn, const Mat<T>& n, const ColVec<T>& rstd) {
  const auto d = static_cast<T>(n.cols());
  Mat<T> dx(dn.rows(), dn.cols());
  for (Eigen::Index i = 0; i < dn.rows(); ++i) {
    const T mean_dn = dn.row(i).sum() / d;
    const T mean_dnn = dn.row(i).dot(n.row(i)) / d;
    dx.row(i) = rstd(i) * (dn.row(i).array() - mean_dn - n.row(i).array() * mean_dnn);
  }
  return dx;
}

/// a = n * (1 + gamma_b) + beta_b, gamma/beta taken from `mod` columns
/// [col, col+D) and [col+D, col+2D) of the row for each packed sequence.
template <class T>
Mat<T> modulate(const Mat<T>& n, const Mat<T>& mod, int col, const PackedLayout& layout) {
  const auto d = n.cols();
  Mat<T> a(n.rows(), d);
  for (int b = 0; b < layout.batch(); ++b) {
    const RowVec<T> gamma = (mod.row(b).segment(col, d).array() + T(1)).matrix();
    const RowVec<T> beta = mod.row(b).segment(col + d, d);
    for (int r = layout.start(b); r < layout.start(b) + layout.length(b); ++r)
      a.row(r) = n.row(r).cwiseProduct(gamma) + beta;
  }
  return a;
}

template <class T>
Mat<T> modulate_backward(const Mat<T>& da, const Mat<T>& n, const Mat<T>& mod, int col, const PackedLayout& layout,
                         Mat<T>& dmod) {
  const auto d = n.cols();
  Mat<T> dn(n.rows(), d);
  for (int b = 0; b < layout.batch(); ++b) {
    const RowVec<T> gamma = (mod.row(b).segment(col, d).array() + T(1)).matrix();
    for (int r = layout.start(b); r < layout.start(b) + layout.length(b); ++r) {
      dn.row(r) = da.row(r).cwiseProduct(gamma);
      dmod.row(b).segment(col, d) += da.row(r).cwiseProduct(n.row(r));
      dmod.row(b).segment(col + d, d) += da.row(r);
    }
  }
  return dn;
}

template <class T>
Mat<T> project_cond(const Mat<T>& cond, const Mat<T>& w, const Mat<T>& b) {
  Mat<T> m = cond * w;
  m.rowwise() += b.row(0);
  return m;
}

template <class T>
Mat<T> linear(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b) {
  Mat<T> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <class T>
void linear_backward(const Mat<T>& x, const Mat<T>& dy, const Mat<T>& w, Mat<T>& dw, Mat<T>& db, Mat<T>* dx) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
  if (dx) *dx = dy * w.transpose();
}

namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace detail

template <class T>
Mat<T> gelu(const Mat<T>& u) {
  const auto c = static_cast<T>(detail::kGeluC), a = static_cast<T>(detail::kGeluA);
  return (T(0.5) * u.array() * (T(1) + (c * (u.array() + a * u.array().cube())).tanh())).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& u, const Mat<T>& dg) {
  const auto c = static_cast<T>(detail::kGeluC), a = static_cast<T>(detail::kGeluA);
  const auto t = (c * (u.array() + a * u.array().cube())).tanh().eval();
  const auto deriv = T(0.5) * (T(1) + t) + T(0.5) * u.array() * (T(1) - t.square()) * c * (T(1) + T(3) * a * u.array().square());
  return (dg.array() * deriv).matrix();
}

template <class T>
struct BlockCache {
  Mat<T> x, n1, a1, qkv, attn, h2, n2, a2, u, g, mod;
  ColVec<T> rstd1, rstd2;
  std::vector<Mat<T>> probs;  // [seq * heads + head]
};

template <class T>
struct StackCache {
  std::vector<BlockCache<T>> blocks;
  Mat<T> hf, nf, fmod;
  ColVec<T> rstdf;
};

template <class T>
class TransformerStack {
 public:
  /// Non-owning view; `params` must outlive the stack object.
  TransformerStack(StackShape shape, const StackParams<T>& params) : shape_(shape), p_(params) {}

  const StackShape& shape() const { return shape_; }

  /// Runs all blocks and the final modulated norm. `cond` has one row per sequence.
  Mat<T> forward(const Mat<T>& x, const Mat<T>& cond, const PackedLayout& layout, StackCache<T>* cache) const {
    if (cond.rows() != layout.batch() || cond.cols() != shape_.cond_dim)
      invalid("conditioning matrix has wrong shape");
    Mat<T> h = x;
    if (cache) cache->blocks.resize(p_.blocks.size());
    for (std::size_t i = 0; i < p_.blocks.size(); ++i)
      h = block_forward(p_.blocks[i], h, cond, layout, cache ? &cache->blocks[i] : nullptr);
    const Mat<T> fmod = project_cond(cond, p_.final_mod_w, p_.final_mod_b);
    Mat<T> nf;
    ColVec<T> rstdf;
    layer_norm(h, nf, rstdf);
    Mat<T> out = modulate(nf, fmod, 0, layout);
    if (cache) {
      cache->hf = std::move(h);
      cache->nf = std::move(nf);
      cache->rstdf = std::move(rstdf);
      cache->fmod = fmod;
    }
    return out;
  }

  /// Accumulates parameter gradients into `g` and returns d(loss)/d(x).
  Mat<T> backward(const Mat<T>& dout, const Mat<T>& cond, const PackedLayout& layout, const StackCache<T>& cache,
                  StackParams<T>& g) const {
    Mat<T> dfmod = Mat<T>::Zero(layout.batch(), 2 * shape_.dim);
    Mat<T> dnf = modulate_backward(dout, cache.nf, cache.fmod, 0, layout, dfmod);
    Mat<T> dh = layer_norm_backward(dnf, cache.nf, cache.rstdf);
    g.final_mod_w.noalias() += cond.transpose() * dfmod;
    g.final_mod_b += dfmod.colwise().sum();
    for (std::size_t i = p_.blocks.size(); i-- > 0;)
      dh = block_backward(p_.blocks[i], dh, cond, layout, cache.blocks[i], g.blocks[i]);
    return dh;
  }

 private:
  Mat<T> block_forward(const BlockParams<T>& bp, const Mat<T>& x, const Mat<T>& cond, const PackedLayout& layout,
                       BlockCache<T>* c) const {
    const int d = shape_.dim;
    Mat<T> mod = project_cond(cond, bp.mod_w, bp.mod_b);
    Mat<T> n1;
    ColVec<T> rstd1;
    layer_norm(x, n1, rstd1);
    Mat<T> a1 = modulate(n1, mod, 0, layout);
    Mat<T> qkv = linear(a1, bp.qkv_w, bp.qkv_b);
    std::vector<Mat<T>> probs;
    Mat<T> attn = attention(qkv, layout, c ? &probs : nullptr);
    Mat<T> h2 = x + linear(attn, bp.out_w, bp.out_b);
    Mat<T> n2;
    ColVec<T> rstd2;
    layer_norm(h2, n2, rstd2);
    Mat<T> a2 = modulate(n2, mod, 2 * d, layout);
    Mat<T> u = linear(a2, bp.fc1_w, bp.fc1_b);
    Mat<T> g = gelu(u);
    Mat<T> out = h2 + linear(g, bp.fc2_w, bp.fc2_b);
    if (c) {
      c->x = x;
      c->mod = std::move(mod);
      c->n1 = std::move(n1);
      c->rstd1 = std::move(rstd1);
      c->a1 = std::move(a1);
      c->qkv = std::move(qkv);
      c->probs = std::move(probs);
      c->attn = std::move(attn);
      c->h2 = std::move(h2);
      c->n2 = std::move(n2);
      c->rstd2 = std::move(rstd2);
      c->a2 = std::move(a2);
      c->u = std::move(u);
      c->g = std::move(g);
    }
    return out;
  }

  Mat<T> attention(const Mat<T>& qkv, const PackedLayout& layout, std::vector<Mat<T>>* probs_out) const {
    const int d = shape_.dim, heads = shape_.heads, dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> out(qkv.rows(), d);
    if (probs_out) probs_out->resize(static_cast<std::size_t>(layout.batch() * heads));
    for (int b = 0; b < layout.batch(); ++b) {
      const int s = layout.start(b), n = layout.length(b);
      for (int h = 0; h < heads; ++h) {
        const auto q = qkv.block(s, h * dh, n, dh);
        const auto k = qkv.block(s, d + h * dh, n, dh);
        const auto v = qkv.block(s, 2 * d + h * dh, n, dh);
        Mat<T> p = (q * k.transpose()) * scale;
        for (int i = 0; i < n; ++i) {
          const T mx = p.row(i).maxCoeff();
          p.row(i) = (p.row(i).array() - mx).exp();
          p.row(i) /= p.row(i).sum();
        }
        out.block(s, h * dh, n, dh).noalias() = p * v;
        if (probs_out) (*probs_out)[static_cast<std::size_t>(b * heads + h)] = std::move(p);
      }
    }
    return out;
  }

  Mat<T> block_backward(const BlockParams<T>& bp, const Mat<T>& dout, const Mat<T>& cond, const PackedLayout& layout,
                        const BlockCache<T>& c, BlockParams<T>& g) const {
    const int d = shape_.dim;
    Mat<T> dmod = Mat<T>::Zero(layout.batch(), 4 * d);

    Mat<T> dg;
    linear_backward(c.g, dout, bp.fc2_w, g.fc2_w, g.fc2_b, &dg);
    Mat<T> du = gelu_backward(c.u, dg);
    Mat<T> da2;
    linear_backward(c.a2, du, bp.fc1_w, g.fc1_w, g.fc1_b, &da2);
    Mat<T> dn2 = modulate_backward(da2, c.n2, c.mod, 2 * d, layout, dmod);
    Mat<T> dh2 = dout + layer_norm_backward(dn2, c.n2, c.rstd2);

    Mat<T> dattn;
    linear_backward(c.attn, dh2, bp.out_w, g.out_w, g.out_b, &dattn);
    Mat<T> dqkv = attention_backward(dattn, c);
    Mat<T> da1;
    linear_backward(c.a1, dqkv, bp.qkv_w, g.qkv_w, g.qkv_b, &da1);
    Mat<T> dn1 = modulate_backward(da1, c.n1, c.mod, 0, layout, dmod);
    Mat<T> dx = dh2 + layer_norm_backward(dn1, c.n1, c.rstd1);

    g.mod_w.noalias() += cond.transpose() * dmod;
    g.mod_b += dmod.colwise().sum();
    return dx;
  }

  Mat<T> attention_backward(const Mat<T>& dattn, const BlockCache<T>& c) const {
    const int d = shape_.dim, heads = shape_.heads, dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> dqkv(c.qkv.rows(), 3 * d);
    const int batch = static_cast<int>(c.probs.size()) / heads;
    int s = 0;
    for (int b = 0; b < batch; ++b) {
      const int n = static_cast<int>(c.probs[static_cast<std::size_t>(b * heads)].rows());
      for (int h = 0; h < heads; ++h) {
        const auto& p = c.probs[static_cast<std::size_t>(b * heads + h)];
        const auto q = c.qkv.block(s, h * dh, n, dh);
        const auto k = c.qkv.block(s, d + h * dh, n, dh);
        const auto v = c.qkv.block(s, 2 * d + h * dh, n, dh);
        const auto dO = dattn.block(s, h * dh, n, dh);
        Mat<T> dp = dO * v.transpose();
        dqkv.block(s, 2 * d + h * dh, n, dh).noalias() = p.transpose() * dO;
        const ColVec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
        Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
        dqkv.block(s, h * dh, n, dh).noalias() = ds * k;
        dqkv.block(s, d + h * dh, n, dh).noalias() = ds.transpose() * q;
      }
      s += n;
    }
    return dqkv;
  }

  StackShape shape_;
  const StackParams<T>& p_;
};

template <class T>
void zero_like(TensorList<T>& dst, const TensorList<T>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = Mat<T>::Zero(src[i].second->rows(), src[i].second->cols());
}

/// Adaptive layer normalization of `hidden` rows by one conditioning vector:
/// layernorm(hidden) * (1 + gamma) + beta with [gamma beta] = speaker * proj_w + proj_b.
template <class T>
Mat<T> adaln_modulate(const Mat<T>& hidden, const RowVec<T>& speaker, const Mat<T>& proj_w, const Mat<T>& proj_b) {
  if (speaker.size() != proj_w.rows()) invalid("adaln_modulate: speaker dim does not match projection");
  if (proj_w.cols() != 2 * hidden.cols() || proj_b.cols() != proj_w.cols())
    invalid("adaln_modulate: projection width must be 2 x hidden dim");
  Mat<T> n;
  ColVec<T> rstd;
  layer_norm(hidden, n, rstd);
  Mat<T> cond = speaker;
  PackedLayout layout;
  layout.add(static_cast<int>(hidden.rows()));
  return modulate(n, project_cond(cond, proj_w, proj_b), 0, layout);
}

}  // namespace cod
