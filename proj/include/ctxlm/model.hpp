#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ctxlm/config.hpp"
#include "ctxlm/corpus.hpp"
#include "ctxlm/tensor.hpp"
#include "ctxlm/vocab.hpp"

namespace ctxlm {

/// Row-major [batch x length] ids with the per-target loss mask
/// [batch x (length - 1)].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;

  static TokenBatch from_sequences(std::span<const TokenizedSequence> seqs);
  /// Unmasked batch (every next token is a target).
  static TokenBatch from_ids(std::span<const TokenId> ids, std::size_t batch, std::size_t length);
};

template <typename S>
struct LossResult {
  double loss = 0.0;                 ///< sum(per_position) / max(1, sum(mask))
  std::vector<double> per_position;  ///< zero where the mask is zero
  std::size_t unmasked = 0;
  bool all_masked = false;           ///< warning flag: loss reported as 0
  Mat<S> dlogits;                    ///< d loss / d logits, filled on request
};

/// Masked cross-entropy over rows of `logits` (one row per target).
template <typename S>
LossResult<S> masked_ce_loss(const Mat<S>& logits, std::span<const TokenId> targets,
                             std::span<const std::uint8_t> mask, bool want_grad = false) {
  const auto n = static_cast<std::size_t>(logits.rows());
  CTXLM_REQUIRE(targets.size() == n && mask.size() == n, "logits, targets and mask must agree in length");
  LossResult<S> r;
  r.per_position.assign(n, 0.0);
  for (auto m : mask) r.unmasked += m ? 1 : 0;
  r.all_masked = r.unmasked == 0;
  const double denom = static_cast<double>(std::max<std::size_t>(1, r.unmasked));
  if (want_grad) r.dlogits = Mat<S>::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    CTXLM_REQUIRE(targets[i] < static_cast<std::size_t>(logits.cols()), "target id out of range");
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    const double mx = static_cast<double>(row.maxCoeff());
    double sum = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
    const double lse = mx + std::log(sum);
    r.per_position[i] = lse - static_cast<double>(row[static_cast<Eigen::Index>(targets[i])]);
    total += r.per_position[i];
    if (want_grad) {
      auto g = r.dlogits.row(static_cast<Eigen::Index>(i));
      for (Eigen::Index v = 0; v < row.size(); ++v)
        g[v] = static_cast<S>(std::exp(static_cast<double>(row[v]) - lse) / denom);
      g[static_cast<Eigen::Index>(targets[i])] -= static_cast<S>(1.0 / denom);
    }
  }
  r.loss = total / denom;
  return r;
}

/// Linear warmup 0 -> max_lr over warmup_steps, then cosine max_lr -> min_lr
/// reaching min_lr at total_steps.
double lr_at(std::size_t step, const LMConfig& cfg);

/// cos/sin tables for rotary embeddings, [positions x head_dim/2],
/// computed in double so every scalar type rounds from the same values.
struct RopeTable {
  std::vector<double> cos, sin;
  std::size_t half = 0;

  RopeTable() = default;
  RopeTable(std::size_t positions, std::size_t head_dim, double theta) : half(head_dim / 2) {
    cos.resize(positions * half);
    sin.resize(positions * half);
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double a = static_cast<double>(p) * freq;
        cos[p * half + i] = std::cos(a);
        sin[p * half + i] = std::sin(a);
      }
  }
};

/// Decoder-only transformer: pre-RMSNorm blocks with rotary causal
/// self-attention and SwiGLU feed-forward, tied input/output embedding.
/// Stateless apart from references, so const calls may run concurrently.
template <typename S>
class Transformer {
 public:
  Transformer(const LMConfig& cfg, const Parameters<S>& params)
      : cfg_(cfg), p_(params), rope_(cfg.seq_len, cfg.head_dim(), cfg.rope_theta) {}

  /// Logits [(batch * length) x vocab], row b*length + i for position i.
  Mat<S> forward(std::span<const TokenId> tokens, std::size_t batch, std::size_t length) const {
    Cache cache;
    return run_forward(tokens, batch, length, cache, false);
  }

  /// Masked next-token loss and its gradient accumulated into `grad`
  /// (which must be shaped like the parameters; it is overwritten).
  LossResult<S> loss_and_grad(const TokenBatch& b, Parameters<S>& grad) const {
    Cache cache;
    const Mat<S> logits = run_forward(b.tokens, b.batch, b.length, cache, true);
    auto [targets, mask] = shifted_targets(b);
    auto loss = masked_ce_loss<S>(logits, targets, mask, true);
    backward(b, cache, loss.dlogits, grad);
    loss.dlogits.resize(0, 0);
    return loss;
  }

  LossResult<S> loss(const TokenBatch& b) const {
    const Mat<S> logits = forward(b.tokens, b.batch, b.length);
    auto [targets, mask] = shifted_targets(b);
    return masked_ce_loss<S>(logits, targets, mask, false);
  }

  /// Targets aligned with logits rows; the last position of each row has
  /// no target and is masked.
  static std::pair<std::vector<TokenId>, std::vector<std::uint8_t>> shifted_targets(const TokenBatch& b) {
    std::vector<TokenId> targets(b.batch * b.length, 0);
    std::vector<std::uint8_t> mask(b.batch * b.length, 0);
    for (std::size_t r = 0; r < b.batch; ++r)
      for (std::size_t i = 0; i + 1 < b.length; ++i) {
        targets[r * b.length + i] = b.tokens[r * b.length + i + 1];
        mask[r * b.length + i] = b.loss_mask[r * (b.length - 1) + i];
      }
    return {std::move(targets), std::move(mask)};
  }

 private:
  using Index = Eigen::Index;
  using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
  using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  struct LayerCache {
    Mat<S> x, n1, q, k, v, att, x_mid, n2, gate, up, h;
    ColVec r1, r2;
    std::vector<Mat<S>> probs;  // per (batch, head)
  };
  struct Cache {
    std::vector<LayerCache> layers;
    Mat<S> x_final, n_final;
    ColVec r_final;
  };

  static void rms_norm(const Mat<S>& x, const Mat<S>& gain, S eps, Mat<S>& y, ColVec& inv_rms) {
    const auto d = static_cast<S>(x.cols());
    inv_rms = ((x.array().square().rowwise().sum() / d) + eps).rsqrt().matrix();
    y = (x.array().colwise() * inv_rms.array()).rowwise() * gain.row(0).array();
  }

  /// Returns dx; accumulates into dgain.
  static Mat<S> rms_norm_backward(const Mat<S>& dy, const Mat<S>& x, const Mat<S>& gain, const ColVec& inv_rms,
                                  Mat<S>& dgain) {
    const Mat<S> xhat = x.array().colwise() * inv_rms.array();
    dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    const Mat<S> dxhat = dy.array().rowwise() * gain.row(0).array();
    const ColVec dot = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / static_cast<S>(x.cols());
    return ((dxhat.array() - xhat.array().colwise() * dot.array()).colwise() * inv_rms.array()).matrix();
  }

  /// Rotates (or inverse-rotates) each head's dimension pairs in place.
  void apply_rope(Mat<S>& m, std::size_t length, bool inverse) const {
    const std::size_t dh = cfg_.head_dim(), half = dh / 2;
    for (Index r = 0; r < m.rows(); ++r) {
      const std::size_t pos = static_cast<std::size_t>(r) % length;
      S* row = m.row(r).data();
      for (std::size_t h = 0; h < cfg_.n_heads; ++h)
        for (std::size_t i = 0; i < half; ++i) {
          const S c = static_cast<S>(rope_.cos[pos * half + i]);
          const S s = inverse ? static_cast<S>(-rope_.sin[pos * half + i]) : static_cast<S>(rope_.sin[pos * half + i]);
          S& a = row[h * dh + 2 * i];
          S& b = row[h * dh + 2 * i + 1];
          const S a0 = a, b0 = b;
          a = a0 * c - b0 * s;
          b = a0 * s + b0 * c;
        }
    }
  }

  static S silu(S x) { return x / (S(1) + std::exp(-x)); }

  Mat<S> run_forward(std::span<const TokenId> tokens, std::size_t batch, std::size_t length, Cache& cache,
                     bool keep) const {
    CTXLM_REQUIRE(tokens.size() == batch * length, "token array does not match batch x length");
    CTXLM_REQUIRE(length >= 1 && length <= cfg_.seq_len, "sequence length exceeds the model's seq_len");
    const auto rows = static_cast<Index>(batch * length);
    const auto d = static_cast<Index>(cfg_.hidden_size);
    const auto dh = static_cast<Index>(cfg_.head_dim());
    const auto L = static_cast<Index>(length);
    const S eps = static_cast<S>(cfg_.norm_eps);
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    Mat<S> x(rows, d);
    for (Index r = 0; r < rows; ++r) {
      const TokenId t = tokens[static_cast<std::size_t>(r)];
      CTXLM_REQUIRE(t < cfg_.vocab_size, "token id out of range: " + std::to_string(t));
      x.row(r) = p_.embedding().row(static_cast<Index>(t));
    }

    if (keep) cache.layers.resize(cfg_.n_layers);
    LayerCache scratch;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      LayerCache& c = keep ? cache.layers[l] : scratch;
      c.x = std::move(x);
      rms_norm(c.x, p_.layer(l, AttnNorm), eps, c.n1, c.r1);
      c.q.noalias() = c.n1 * p_.layer(l, Wq);
      c.k.noalias() = c.n1 * p_.layer(l, Wk);
      c.v.noalias() = c.n1 * p_.layer(l, Wv);
      apply_rope(c.q, length, false);
      apply_rope(c.k, length, false);

      c.att.resize(rows, d);
      c.probs.resize(keep ? batch * cfg_.n_heads : 0);
      Mat<S> scores(L, L);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
          const Index r0 = static_cast<Index>(b) * L, c0 = static_cast<Index>(h) * dh;
          scores.noalias() = c.q.block(r0, c0, L, dh) * c.k.block(r0, c0, L, dh).transpose();
          for (Index i = 0; i < L; ++i) {
            auto row = scores.row(i);
            row.head(i + 1) *= scale;
            const S mx = row.head(i + 1).maxCoeff();
            row.head(i + 1) = (row.head(i + 1).array() - mx).exp();
            row.head(i + 1) /= row.head(i + 1).sum();
            if (i + 1 < L) row.tail(L - i - 1).setZero();
          }
          c.att.block(r0, c0, L, dh).noalias() = scores * c.v.block(r0, c0, L, dh);
          if (keep) c.probs[b * cfg_.n_heads + h] = scores;
        }
      c.x_mid = c.x;
      c.x_mid.noalias() += c.att * p_.layer(l, Wo);

      rms_norm(c.x_mid, p_.layer(l, FfnNorm), eps, c.n2, c.r2);
      c.gate.noalias() = c.n2 * p_.layer(l, WGate);
      c.up.noalias() = c.n2 * p_.layer(l, WUp);
      c.h = c.gate.unaryExpr([](S g) { return silu(g); }).cwiseProduct(c.up);
      x = c.x_mid;
      x.noalias() += c.h * p_.layer(l, WDown);
    }

    Mat<S> n_final;
    ColVec r_final;
    rms_norm(x, p_.final_norm(), eps, n_final, r_final);
    Mat<S> logits;
    logits.noalias() = n_final * p_.embedding().transpose();
    if (keep) {
      cache.x_final = std::move(x);
      cache.n_final = std::move(n_final);
      cache.r_final = std::move(r_final);
    }
    return logits;
  }

  void backward(const TokenBatch& b, const Cache& cache, const Mat<S>& dlogits, Parameters<S>& g) const {
    if (!g.same_shapes(p_)) g = Parameters<S>(cfg_);
    g.set_zero();
    const auto L = static_cast<Index>(b.length);
    const auto dh = static_cast<Index>(cfg_.head_dim());
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    g.embedding().noalias() += dlogits.transpose() * cache.n_final;
    Mat<S> dn = dlogits * p_.embedding();
    Mat<S> dx = rms_norm_backward(dn, cache.x_final, p_.final_norm(), cache.r_final, g.final_norm());

    for (std::size_t li = cfg_.n_layers; li-- > 0;) {
      const LayerCache& c = cache.layers[li];
      // feed-forward
      g.layer(li, WDown).noalias() += c.h.transpose() * dx;
      const Mat<S> dh_ = dx * p_.layer(li, WDown).transpose();
      Mat<S> dgate(c.gate.rows(), c.gate.cols());
      Mat<S> dup(c.up.rows(), c.up.cols());
      for (Index i = 0; i < c.gate.size(); ++i) {
        const S z = c.gate.data()[i];
        const S sig = S(1) / (S(1) + std::exp(-z));
        const S sl = z * sig;
        dup.data()[i] = dh_.data()[i] * sl;
        dgate.data()[i] = dh_.data()[i] * c.up.data()[i] * sig * (S(1) + z * (S(1) - sig));
      }
      g.layer(li, WGate).noalias() += c.n2.transpose() * dgate;
      g.layer(li, WUp).noalias() += c.n2.transpose() * dup;
      Mat<S> dn2 = dgate * p_.layer(li, WGate).transpose();
      dn2.noalias() += dup * p_.layer(li, WUp).transpose();
      Mat<S> dx_mid = dx + rms_norm_backward(dn2, c.x_mid, p_.layer(li, FfnNorm), c.r2, g.layer(li, FfnNorm));

      // attention
      g.layer(li, Wo).noalias() += c.att.transpose() * dx_mid;
      const Mat<S> datt = dx_mid * p_.layer(li, Wo).transpose();
      Mat<S> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
      Mat<S> dp(L, L);
      for (std::size_t bi = 0; bi < b.batch; ++bi)
        for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
          const Index r0 = static_cast<Index>(bi) * L, c0 = static_cast<Index>(h) * dh;
          const Mat<S>& P = c.probs[bi * cfg_.n_heads + h];
          const auto dO = datt.block(r0, c0, L, dh);
          dv.block(r0, c0, L, dh).noalias() = P.transpose() * dO;
          dp.noalias() = dO * c.v.block(r0, c0, L, dh).transpose();
          // softmax backward; P is zero above the diagonal so those entries vanish
          const ColVec rowdot = (dp.array() * P.array()).rowwise().sum().matrix();
          dp = (P.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
          dq.block(r0, c0, L, dh).noalias() = dp * c.k.block(r0, c0, L, dh);
          dk.block(r0, c0, L, dh).noalias() = dp.transpose() * c.q.block(r0, c0, L, dh);
        }
      apply_rope(dq, b.length, true);
      apply_rope(dk, b.length, true);
      g.layer(li, Wq).noalias() += c.n1.transpose() * dq;
      g.layer(li, Wk).noalias() += c.n1.transpose() * dk;
      g.layer(li, Wv).noalias() += c.n1.transpose() * dv;
      Mat<S> dn1 = dq * p_.layer(li, Wq).transpose();
      dn1.noalias() += dk * p_.layer(li, Wk).transpose();
      dn1.noalias() += dv * p_.layer(li, Wv).transpose();
      dx = dx_mid + rms_norm_backward(dn1, c.x, p_.layer(li, AttnNorm), c.r1, g.layer(li, AttnNorm));
    }

    for (Index r = 0; r < dx.rows(); ++r)
      g.embedding().row(static_cast<Index>(b.tokens[static_cast<std::size_t>(r)])) += dx.row(r);
  }

  LMConfig cfg_;
  const Parameters<S>& p_;
  RopeTable rope_;
};

}  // namespace ctxlm
