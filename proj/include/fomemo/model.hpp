#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fomemo/errors.hpp"
#include "fomemo/riemann.hpp"
#include "fomemo/rng.hpp"

namespace fomemo {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
  int embed_dim = 128;
  int ff_dim = 256;
  int n_heads = 4;
  int n_layers = 4;
  int n_bins = 256;
  int max_input_dim = 8;   // encoder capacity K_x
  int max_objectives = 3;  // encoder capacity K_y
  int max_tokens = 64;     // trajectory capacity is max_tokens - 1

  void validate() const {
    if (embed_dim < 1 || ff_dim < 1 || n_heads < 1 || n_layers < 1)
      throw ConfigError("model config: dimensions must be positive");
    if (embed_dim % n_heads != 0)
      throw ConfigError("model config: embed_dim must divide by n_heads");
    if (n_bins < 2) throw ConfigError("model config: need at least 2 bins");
    if (max_input_dim < 1 || max_objectives < 1 || max_tokens < 2)
      throw ConfigError("model config: capacities out of range");
  }

  int head_dim() const { return embed_dim / n_heads; }
};

template <typename S>
struct LinearParams {
  MatX<S> W;  // out x in
  VecX<S> b;  // out
};

template <typename S>
struct BlockParams {
  VecX<S> ln1_gamma, ln1_beta;
  LinearParams<S> attn_q, attn_k, attn_v, attn_o;
  VecX<S> ln2_gamma, ln2_beta;
  LinearParams<S> ff1, ff2;
};

// A named view into one parameter tensor; the order of the tensor list is
// the canonical manifest order for checkpoints and optimizer state.
template <typename S>
struct TensorRef {
  std::string name;
  S* data;
  Eigen::Index rows, cols;

  Eigen::Index size() const { return rows * cols; }
  Eigen::Map<MatX<S>> map() const {
    return Eigen::Map<MatX<S>>(data, rows, cols);
  }
};

template <typename S>
struct ModelParams {
  ModelConfig config;
  LinearParams<S> enc_x, enc_y, enc_pref;
  std::vector<BlockParams<S>> blocks;
  VecX<S> lnf_gamma, lnf_beta;
  LinearParams<S> head;

  std::vector<TensorRef<S>> tensors() {
    std::vector<TensorRef<S>> out;
    auto add = [&out](const std::string& name, MatX<S>& m) {
      out.push_back({name, m.data(), m.rows(), m.cols()});
    };
    auto addv = [&out](const std::string& name, VecX<S>& v) {
      out.push_back({name, v.data(), v.rows(), 1});
    };
    auto addlin = [&](const std::string& name, LinearParams<S>& lin) {
      add(name + ".W", lin.W);
      addv(name + ".b", lin.b);
    };
    addlin("enc_x", enc_x);
    addlin("enc_y", enc_y);
    addlin("enc_pref", enc_pref);
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      addv(p + "ln1.gamma", blocks[l].ln1_gamma);
      addv(p + "ln1.beta", blocks[l].ln1_beta);
      addlin(p + "attn_q", blocks[l].attn_q);
      addlin(p + "attn_k", blocks[l].attn_k);
      addlin(p + "attn_v", blocks[l].attn_v);
      addlin(p + "attn_o", blocks[l].attn_o);
      addv(p + "ln2.gamma", blocks[l].ln2_gamma);
      addv(p + "ln2.beta", blocks[l].ln2_beta);
      addlin(p + "ff1", blocks[l].ff1);
      addlin(p + "ff2", blocks[l].ff2);
    }
    addv("final_ln.gamma", lnf_gamma);
    addv("final_ln.beta", lnf_beta);
    addlin("head", head);
    return out;
  }

  Eigen::Index parameter_count() {
    Eigen::Index total = 0;
    for (const auto& t : tensors()) total += t.size();
    return total;
  }
};

// Allocates parameter storage with the right shapes, all zero. The same
// layout doubles as gradient accumulators and optimizer moment buffers, so
// nothing here may start nonzero; usable defaults live in init_params.
template <typename S>
inline ModelParams<S> make_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams<S> p;
  p.config = cfg;
  const int E = cfg.embed_dim, F = cfg.ff_dim;
  auto lin = [](int out, int in) {
    LinearParams<S> l;
    l.W = MatX<S>::Zero(out, in);
    l.b = VecX<S>::Zero(out);
    return l;
  };
  p.enc_x = lin(E, cfg.max_input_dim);
  p.enc_y = lin(E, cfg.max_objectives);
  p.enc_pref = lin(E, cfg.max_objectives);
  p.blocks.resize(cfg.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_gamma = VecX<S>::Zero(E);
    b.ln1_beta = VecX<S>::Zero(E);
    b.attn_q = lin(E, E);
    b.attn_k = lin(E, E);
    b.attn_v = lin(E, E);
    b.attn_o = lin(E, E);
    b.ln2_gamma = VecX<S>::Zero(E);
    b.ln2_beta = VecX<S>::Zero(E);
    b.ff1 = lin(F, E);
    b.ff2 = lin(E, F);
  }
  p.lnf_gamma = VecX<S>::Zero(E);
  p.lnf_beta = VecX<S>::Zero(E);
  p.head = lin(cfg.n_bins, E);
  return p;
}

template <typename S>
inline void zero_params(ModelParams<S>& p) {
  for (auto& t : p.tensors()) std::fill(t.data, t.data + t.size(), S(0));
}

// Xavier-uniform weights, zero biases, unit layer-norm gains. The output
// head starts at zero by default so an untrained model predicts the uniform
// bin distribution exactly.
template <typename S>
inline ModelParams<S> init_params(const ModelConfig& cfg, std::uint64_t seed,
                                  bool zero_head = true) {
  ModelParams<S> p = make_params<S>(cfg);
  Rng rng(seed);
  for (auto& t : p.tensors()) {
    if (t.name.ends_with(".gamma")) {
      std::fill(t.data, t.data + t.size(), S(1));
      continue;
    }
    const bool is_weight = t.cols > 1;
    if (!is_weight) continue;  // biases and layer-norm shifts stay 0
    if (zero_head && t.name == "head.W") continue;
    const double limit = std::sqrt(6.0 / (double(t.rows) + double(t.cols)));
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.data[i] = static_cast<S>(rng.uniform(-limit, limit));
  }
  return p;
}

// One task instance for the model: an observed trajectory plus query points.
// Every query row carries its own preference, which makes one pass usable
// both for training (one shared preference) and for acquisition scoring
// (many preferences against one trajectory).
struct ModelInput {
  Eigen::MatrixXd traj_x;      // n x d, unit cube
  Eigen::MatrixXd traj_y;      // n x m, trajectory-normalized
  Eigen::MatrixXd query_x;     // Q x d
  Eigen::MatrixXd query_pref;  // Q x m, simplex rows
};

// Boolean allowed-attention matrix over n_traj + n_query tokens: every row
// may attend to trajectory columns only, so queries never see each other
// (posteriors are independent across queries).
inline Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>
build_attention_mask(int n_traj, int n_query) {
  if (n_traj < 1) throw EmptyTrajectory("attention mask: empty trajectory");
  if (n_query < 0) throw ShapeError("attention mask: negative query count");
  const int T = n_traj + n_query;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> mask(T, T);
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < T; ++j) mask(i, j) = j < n_traj;
  return mask;
}

namespace detail {

constexpr double kLnEps = 1e-5;

template <typename S>
inline S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <typename S>
inline S gelu_grad(S x) {
  const S phi = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
  const S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
  return phi + x * pdf;
}

// Row-wise layer norm. Fills xhat (normalized rows) and inv_std.
template <typename S>
inline void layer_norm(const MatX<S>& x, const VecX<S>& gamma,
                       const VecX<S>& beta, MatX<S>& xhat, VecX<S>& inv_std,
                       MatX<S>& out) {
  const Eigen::Index R = x.rows(), E = x.cols();
  xhat.resize(R, E);
  inv_std.resize(R);
  out.resize(R, E);
  for (Eigen::Index i = 0; i < R; ++i) {
    const S mu = x.row(i).mean();
    const S var = (x.row(i).array() - mu).square().mean();
    const S is = S(1) / std::sqrt(var + S(kLnEps));
    inv_std(i) = is;
    xhat.row(i) = (x.row(i).array() - mu) * is;
    out.row(i) = xhat.row(i).array() * gamma.transpose().array() +
                 beta.transpose().array();
  }
}

// Backward of layer_norm; accumulates dgamma/dbeta, returns dx.
template <typename S>
inline MatX<S> layer_norm_backward(const MatX<S>& dy, const MatX<S>& xhat,
                                   const VecX<S>& inv_std,
                                   const VecX<S>& gamma, VecX<S>& dgamma,
                                   VecX<S>& dbeta) {
  const Eigen::Index R = dy.rows(), E = dy.cols();
  MatX<S> dx(R, E);
  Eigen::Array<S, 1, Eigen::Dynamic> dxhat(E);
  for (Eigen::Index i = 0; i < R; ++i) {
    dgamma.array() += (dy.row(i).array() * xhat.row(i).array()).transpose();
    dbeta.array() += dy.row(i).array().transpose();
    dxhat = dy.row(i).array() * gamma.transpose().array();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * xhat.row(i).array()).mean();
    dx.row(i) = ((dxhat - m1) - xhat.row(i).array() * m2) * inv_std(i);
  }
  return dx;
}

template <typename Derived, typename S>
inline void add_bias_rows(Eigen::MatrixBase<Derived>& m, const VecX<S>& b) {
  m.rowwise() += b.transpose();
}

template <typename Derived, typename S>
inline void add_bias_rows(Eigen::MatrixBase<Derived>&& m, const VecX<S>& b) {
  m.rowwise() += b.transpose();
}

template <typename S>
struct LayerCache {
  MatX<S> h1, xhat1, qm, km, vm, attn_concat, h2, xhat2, z1, a1;
  VecX<S> is1, is2;
  std::vector<MatX<S>> attn;  // per element: T_e x (H * n_e), softmax rows
};

}  // namespace detail

template <typename S>
struct ForwardCache {
  std::vector<Eigen::Index> offset;  // row offset per element
  std::vector<int> n_traj, n_query;
  Eigen::Index total_rows = 0;
  // Encoder inputs after padding-scale, cast to S (backward GEMM operands).
  std::vector<MatX<S>> enc_tx, enc_ty, enc_qx, enc_qp;
  std::vector<detail::LayerCache<S>> layers;
  MatX<S> xhatf;
  VecX<S> isf;
  MatX<S> hf;
};

// Forward pass over a ragged batch of task instances. Returns per-element
// query logits (Q_e x n_bins). Pass a cache to enable a later backward call.
template <typename S>
inline std::vector<MatX<S>> model_forward(const ModelParams<S>& params,
                                          const std::vector<ModelInput>& batch,
                                          ForwardCache<S>* cache = nullptr) {
  const ModelConfig& cfg = params.config;
  const int E = cfg.embed_dim;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const S attn_scale = S(1) / std::sqrt(S(dh));

  // Geometry and shape validation.
  std::vector<Eigen::Index> offset(batch.size());
  std::vector<int> n_traj(batch.size()), n_query(batch.size());
  Eigen::Index R = 0;
  for (size_t e = 0; e < batch.size(); ++e) {
    const auto& in = batch[e];
    const int n = static_cast<int>(in.traj_x.rows());
    const int q = static_cast<int>(in.query_x.rows());
    if (n < 1) throw EmptyTrajectory("model_forward: empty trajectory");
    if (n > cfg.max_tokens - 1)
      throw ShapeError("model_forward: trajectory exceeds token capacity");
    if (in.traj_y.rows() != n)
      throw ShapeError("model_forward: trajectory x/y row mismatch");
    if (in.query_pref.rows() != q)
      throw ShapeError("model_forward: query x/preference row mismatch");
    if (in.traj_x.cols() > cfg.max_input_dim ||
        in.query_x.cols() != in.traj_x.cols())
      throw ShapeError("model_forward: input dimension out of range");
    if (in.traj_x.cols() < 1)
      throw ShapeError("model_forward: input dimension must be >= 1");
    if (in.traj_y.cols() > cfg.max_objectives ||
        (q > 0 && in.query_pref.cols() != in.traj_y.cols()))
      throw ShapeError("model_forward: objective dimension out of range");
    offset[e] = R;
    n_traj[e] = n;
    n_query[e] = q;
    R += n + q;
  }

  // Padded-scaled encoder operands: v -> v * (K / k), zeros ignored.
  std::vector<MatX<S>> enc_tx(batch.size()), enc_ty(batch.size()),
      enc_qx(batch.size()), enc_qp(batch.size());
  MatX<S> X(R, E);
  for (size_t e = 0; e < batch.size(); ++e) {
    const auto& in = batch[e];
    const int d = static_cast<int>(in.traj_x.cols());
    const int m = static_cast<int>(in.traj_y.cols());
    const S sx = S(cfg.max_input_dim) / S(d);
    const S sy = S(cfg.max_objectives) / S(m);
    enc_tx[e] = in.traj_x.template cast<S>() * sx;
    enc_ty[e] = in.traj_y.template cast<S>() * sy;
    enc_qx[e] = in.query_x.template cast<S>() * sx;
    enc_qp[e] = in.query_pref.template cast<S>() * sy;

    auto traj = X.middleRows(offset[e], n_traj[e]);
    traj.noalias() = enc_tx[e] * params.enc_x.W.leftCols(d).transpose();
    traj.noalias() += enc_ty[e] * params.enc_y.W.leftCols(m).transpose();
    detail::add_bias_rows(traj, VecX<S>(params.enc_x.b + params.enc_y.b));
    if (n_query[e] > 0) {
      auto qr = X.middleRows(offset[e] + n_traj[e], n_query[e]);
      qr.noalias() = enc_qx[e] * params.enc_x.W.leftCols(d).transpose();
      qr.noalias() += enc_qp[e] * params.enc_pref.W.leftCols(m).transpose();
      detail::add_bias_rows(qr, VecX<S>(params.enc_x.b + params.enc_pref.b));
    }
  }

  if (cache) {
    cache->offset = offset;
    cache->n_traj = n_traj;
    cache->n_query = n_query;
    cache->total_rows = R;
    cache->enc_tx = std::move(enc_tx);
    cache->enc_ty = std::move(enc_ty);
    cache->enc_qx = std::move(enc_qx);
    cache->enc_qp = std::move(enc_qp);
    cache->layers.resize(cfg.n_layers);
  }

  detail::LayerCache<S> scratch;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& blk = params.blocks[l];
    detail::LayerCache<S>& lc = cache ? cache->layers[l] : scratch;

    detail::layer_norm(X, blk.ln1_gamma, blk.ln1_beta, lc.xhat1, lc.is1,
                       lc.h1);
    lc.qm.noalias() = lc.h1 * blk.attn_q.W.transpose();
    detail::add_bias_rows(lc.qm, blk.attn_q.b);
    lc.km.noalias() = lc.h1 * blk.attn_k.W.transpose();
    detail::add_bias_rows(lc.km, blk.attn_k.b);
    lc.vm.noalias() = lc.h1 * blk.attn_v.W.transpose();
    detail::add_bias_rows(lc.vm, blk.attn_v.b);

    lc.attn_concat.resize(R, E);
    lc.attn.assign(batch.size(), MatX<S>());
    for (size_t e = 0; e < batch.size(); ++e) {
      const Eigen::Index off = offset[e];
      const int n = n_traj[e];
      const Eigen::Index T = n + n_query[e];
      MatX<S>& A = lc.attn[e];
      A.resize(T, Eigen::Index(H) * n);
      for (int h = 0; h < H; ++h) {
        auto Qh = lc.qm.block(off, h * dh, T, dh);
        auto Kh = lc.km.block(off, h * dh, n, dh);
        auto Vh = lc.vm.block(off, h * dh, n, dh);
        auto Ah = A.middleCols(Eigen::Index(h) * n, n);
        Ah.noalias() = Qh * Kh.transpose() * attn_scale;
        for (Eigen::Index i = 0; i < T; ++i) {
          const S mx = Ah.row(i).maxCoeff();
          Ah.row(i) = (Ah.row(i).array() - mx).exp();
          Ah.row(i) /= Ah.row(i).sum();
        }
        lc.attn_concat.block(off, h * dh, T, dh).noalias() = Ah * Vh;
      }
    }
    X.noalias() += lc.attn_concat * params.blocks[l].attn_o.W.transpose();
    detail::add_bias_rows(X, params.blocks[l].attn_o.b);

    detail::layer_norm(X, blk.ln2_gamma, blk.ln2_beta, lc.xhat2, lc.is2,
                       lc.h2);
    lc.z1.noalias() = lc.h2 * blk.ff1.W.transpose();
    detail::add_bias_rows(lc.z1, blk.ff1.b);
    lc.a1 = lc.z1.unaryExpr([](S v) { return detail::gelu(v); });
    X.noalias() += lc.a1 * blk.ff2.W.transpose();
    detail::add_bias_rows(X, blk.ff2.b);
  }

  MatX<S> hf;
  {
    MatX<S> xhatf;
    VecX<S> isf;
    detail::layer_norm(X, params.lnf_gamma, params.lnf_beta, xhatf, isf, hf);
    if (cache) {
      cache->xhatf = std::move(xhatf);
      cache->isf = std::move(isf);
      cache->hf = hf;
    }
  }

  std::vector<MatX<S>> logits(batch.size());
  for (size_t e = 0; e < batch.size(); ++e) {
    const int q = n_query[e];
    logits[e].resize(q, cfg.n_bins);
    if (q == 0) continue;
    logits[e].noalias() =
        hf.middleRows(offset[e] + n_traj[e], q) * params.head.W.transpose();
    detail::add_bias_rows(logits[e], params.head.b);
  }
  return logits;
}

// Backward pass; accumulates parameter gradients into `grads` (same shapes
// as params, caller zeroes them between steps).
template <typename S>
inline void model_backward(const ModelParams<S>& params,
                           const ForwardCache<S>& cache,
                           const std::vector<MatX<S>>& dlogits,
                           ModelParams<S>& grads) {
  const ModelConfig& cfg = params.config;
  const int E = cfg.embed_dim;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const S attn_scale = S(1) / std::sqrt(S(dh));
  const Eigen::Index R = cache.total_rows;
  const size_t n_elems = cache.offset.size();
  if (dlogits.size() != n_elems)
    throw ShapeError("model_backward: gradient/batch size mismatch");

  // Head and final layer norm.
  MatX<S> dhf = MatX<S>::Zero(R, E);
  for (size_t e = 0; e < n_elems; ++e) {
    const int q = cache.n_query[e];
    if (q == 0) continue;
    const auto hq = cache.hf.middleRows(cache.offset[e] + cache.n_traj[e], q);
    grads.head.W.noalias() += dlogits[e].transpose() * hq;
    grads.head.b.noalias() += dlogits[e].colwise().sum().transpose();
    dhf.middleRows(cache.offset[e] + cache.n_traj[e], q).noalias() =
        dlogits[e] * params.head.W;
  }
  MatX<S> dX = detail::layer_norm_backward(dhf, cache.xhatf, cache.isf,
                                           params.lnf_gamma, grads.lnf_gamma,
                                           grads.lnf_beta);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& blk = params.blocks[l];
    auto& gblk = grads.blocks[l];
    const auto& lc = cache.layers[l];

    // Feed-forward sub-block (residual: dX flows through unchanged).
    {
      MatX<S> da1 = dX * blk.ff2.W;
      gblk.ff2.W.noalias() += dX.transpose() * lc.a1;
      gblk.ff2.b.noalias() += dX.colwise().sum().transpose();
      MatX<S> dz1 =
          da1.array() *
          lc.z1.unaryExpr([](S v) { return detail::gelu_grad(v); }).array();
      gblk.ff1.W.noalias() += dz1.transpose() * lc.h2;
      gblk.ff1.b.noalias() += dz1.colwise().sum().transpose();
      MatX<S> dh2 = dz1 * blk.ff1.W;
      dX.noalias() += detail::layer_norm_backward(
          dh2, lc.xhat2, lc.is2, blk.ln2_gamma, gblk.ln2_gamma,
          gblk.ln2_beta);
    }

    // Attention sub-block.
    {
      MatX<S> dconcat = dX * blk.attn_o.W;
      gblk.attn_o.W.noalias() += dX.transpose() * lc.attn_concat;
      gblk.attn_o.b.noalias() += dX.colwise().sum().transpose();

      MatX<S> dqm = MatX<S>::Zero(R, E);
      MatX<S> dkm = MatX<S>::Zero(R, E);
      MatX<S> dvm = MatX<S>::Zero(R, E);
      for (size_t e = 0; e < n_elems; ++e) {
        const Eigen::Index off = cache.offset[e];
        const int n = cache.n_traj[e];
        const Eigen::Index T = n + cache.n_query[e];
        const MatX<S>& A = lc.attn[e];
        for (int h = 0; h < H; ++h) {
          auto Ah = A.middleCols(Eigen::Index(h) * n, n);
          auto dOh = dconcat.block(off, h * dh, T, dh);
          auto Kh = lc.km.block(off, h * dh, n, dh);
          auto Qh = lc.qm.block(off, h * dh, T, dh);
          auto Vh = lc.vm.block(off, h * dh, n, dh);

          dvm.block(off, h * dh, n, dh).noalias() += Ah.transpose() * dOh;
          MatX<S> dA = dOh * Vh.transpose();  // T x n
          // Softmax backward row-wise.
          for (Eigen::Index i = 0; i < T; ++i) {
            const S dot = dA.row(i).cwiseProduct(Ah.row(i)).sum();
            dA.row(i) = (dA.row(i).array() - dot) * Ah.row(i).array();
          }
          dqm.block(off, h * dh, T, dh).noalias() +=
              dA * Kh * attn_scale;
          dkm.block(off, h * dh, n, dh).noalias() +=
              dA.transpose() * Qh * attn_scale;
        }
      }
      gblk.attn_q.W.noalias() += dqm.transpose() * lc.h1;
      gblk.attn_q.b.noalias() += dqm.colwise().sum().transpose();
      gblk.attn_k.W.noalias() += dkm.transpose() * lc.h1;
      gblk.attn_k.b.noalias() += dkm.colwise().sum().transpose();
      gblk.attn_v.W.noalias() += dvm.transpose() * lc.h1;
      gblk.attn_v.b.noalias() += dvm.colwise().sum().transpose();

      MatX<S> dh1 = dqm * blk.attn_q.W;
      dh1.noalias() += dkm * blk.attn_k.W;
      dh1.noalias() += dvm * blk.attn_v.W;
      dX.noalias() += detail::layer_norm_backward(
          dh1, lc.xhat1, lc.is1, blk.ln1_gamma, gblk.ln1_gamma,
          gblk.ln1_beta);
    }
  }

  // Encoders.
  for (size_t e = 0; e < n_elems; ++e) {
    const Eigen::Index off = cache.offset[e];
    const int n = cache.n_traj[e];
    const int q = cache.n_query[e];
    const int d = static_cast<int>(cache.enc_tx[e].cols());
    const int m = static_cast<int>(cache.enc_ty[e].cols());
    const auto dtraj = dX.middleRows(off, n);
    grads.enc_x.W.leftCols(d).noalias() += dtraj.transpose() * cache.enc_tx[e];
    grads.enc_y.W.leftCols(m).noalias() += dtraj.transpose() * cache.enc_ty[e];
    const VecX<S> traj_bias_grad = dtraj.colwise().sum().transpose();
    grads.enc_x.b += traj_bias_grad;
    grads.enc_y.b += traj_bias_grad;
    if (q > 0) {
      const auto dq = dX.middleRows(off + n, q);
      grads.enc_x.W.leftCols(d).noalias() += dq.transpose() * cache.enc_qx[e];
      grads.enc_pref.W.leftCols(m).noalias() +=
          dq.transpose() * cache.enc_qp[e];
      const VecX<S> q_bias_grad = dq.colwise().sum().transpose();
      grads.enc_x.b += q_bias_grad;
      grads.enc_pref.b += q_bias_grad;
    }
  }
}

// Numerically stable soft-max of logits rows, computed in double.
template <typename S>
inline Eigen::MatrixXd softmax_rows(const MatX<S>& logits) {
  Eigen::MatrixXd p = logits.template cast<double>();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Bar-distribution cross entropy: mean over every query position of
// -log(p_bin * base_density). Optionally emits dloss/dlogits (softmax minus
// one-hot, divided by the total query count).
template <typename S>
inline double bar_loss(const RiemannSupport& support,
                       const std::vector<MatX<S>>& logits,
                       const std::vector<Eigen::VectorXd>& targets,
                       std::vector<MatX<S>>* dlogits = nullptr) {
  if (logits.size() != targets.size())
    throw ShapeError("bar_loss: batch size mismatch");
  Eigen::Index total = 0;
  for (const auto& t : targets) total += t.size();
  if (total == 0) throw ShapeError("bar_loss: no query targets");
  if (dlogits) dlogits->resize(logits.size());

  double loss = 0.0;
  for (size_t e = 0; e < logits.size(); ++e) {
    if (logits[e].rows() != targets[e].size())
      throw ShapeError("bar_loss: logit/target row mismatch");
    if (logits[e].cols() != support.bins())
      throw ShapeError("bar_loss: logit/bin count mismatch");
    Eigen::MatrixXd p = softmax_rows(logits[e]);
    if (dlogits) (*dlogits)[e].resize(logits[e].rows(), logits[e].cols());
    for (Eigen::Index i = 0; i < logits[e].rows(); ++i) {
      const double g = targets[e](i);
      const int k = support.bin_index(g);
      loss -= std::log(std::max(p(i, k), 1e-300)) +
              riemann_bin_log_density(support, k, g);
      if (dlogits) {
        Eigen::VectorXd grow = p.row(i) / static_cast<double>(total);
        grow(k) -= 1.0 / static_cast<double>(total);
        (*dlogits)[e].row(i) = grow.transpose().template cast<S>();
      }
    }
  }
  return loss / static_cast<double>(total);
}

// Inference helper: posterior probability rows (double) for every query of
// one task, with a shared preference across queries.
template <typename S>
inline Eigen::MatrixXd predict_probs(const ModelParams<S>& params,
                                     const Eigen::MatrixXd& traj_x,
                                     const Eigen::MatrixXd& traj_y_norm,
                                     const Eigen::MatrixXd& query_x,
                                     const Eigen::MatrixXd& query_pref) {
  ModelInput in;
  in.traj_x = traj_x;
  in.traj_y = traj_y_norm;
  in.query_x = query_x;
  in.query_pref = query_pref;
  const auto logits = model_forward<S>(params, {in});
  return softmax_rows(logits[0]);
}

// Full posterior objects for one task and one preference shared across the
// query rows.
template <typename S>
inline std::vector<PosteriorHistogram> predict_posterior(
    const ModelParams<S>& params, const RiemannSupport& support,
    const Eigen::MatrixXd& traj_x, const Eigen::MatrixXd& traj_y_norm,
    const Eigen::MatrixXd& query_x, const Eigen::VectorXd& preference) {
  Eigen::MatrixXd pref_rows =
      preference.transpose().replicate(query_x.rows(), 1);
  const Eigen::MatrixXd probs =
      predict_probs(params, traj_x, traj_y_norm, query_x, pref_rows);
  std::vector<PosteriorHistogram> out;
  out.reserve(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    out.emplace_back(support, probs.row(i).transpose());
  return out;
}

}  // namespace fomemo
