#include "ctxlm/inference.hpp"

#include <cmath>

namespace ctxlm {

namespace {

/// y = x W for row-major W [in x out]; each y[o] accumulates in k order.
void vec_mat(const float* x, const Mat<float>& w, float* y) {
  const auto in = static_cast<std::size_t>(w.rows()), out = static_cast<std::size_t>(w.cols());
  for (std::size_t o = 0; o < out; ++o) y[o] = 0.0f;
  const float* wd = w.data();
  for (std::size_t k = 0; k < in; ++k) {
    const float xk = x[k];
    const float* row = wd + k * out;
    for (std::size_t o = 0; o < out; ++o) y[o] += xk * row[o];
  }
}

void rms_norm(const float* x, const float* gain, std::size_t d, float eps, float* y) {
  float ss = 0.0f;
  for (std::size_t i = 0; i < d; ++i) ss += x[i] * x[i];
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + eps);
  for (std::size_t i = 0; i < d; ++i) y[i] = x[i] * inv * gain[i];
}

}  // namespace

InferenceSession::InferenceSession(const Checkpoint& ckpt)
    : cfg_(ckpt.config), p_(ckpt.params), rope_(ckpt.config.seq_len, ckpt.config.head_dim(), ckpt.config.rope_theta) {
  const std::size_t d = cfg_.hidden_size;
  k_cache_.assign(cfg_.n_layers, std::vector<float>(cfg_.seq_len * d));
  v_cache_.assign(cfg_.n_layers, std::vector<float>(cfg_.seq_len * d));
  x_.resize(d);
  n_.resize(d);
  q_.resize(d);
  k_.resize(d);
  v_.resize(d);
  att_.resize(d);
  proj_.resize(std::max(d, cfg_.ffn_hidden));
  gate_.resize(cfg_.ffn_hidden);
  up_.resize(cfg_.ffn_hidden);
  scores_.resize(cfg_.seq_len);
  logits_.resize(cfg_.vocab_size);
}

const std::vector<float>& InferenceSession::step(TokenId token) {
  CTXLM_REQUIRE(token < cfg_.vocab_size, "token id out of range: " + std::to_string(token));
  CTXLM_REQUIRE(pos_ < cfg_.seq_len, "inference session is full (seq_len reached)");
  const std::size_t d = cfg_.hidden_size, dh = cfg_.head_dim(), half = dh / 2, f = cfg_.ffn_hidden;
  const float eps = static_cast<float>(cfg_.norm_eps);
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dh)));

  const float* emb = p_.embedding().data() + static_cast<std::size_t>(token) * d;
  for (std::size_t i = 0; i < d; ++i) x_[i] = emb[i];

  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    rms_norm(x_.data(), p_.layer(l, AttnNorm).data(), d, eps, n_.data());
    vec_mat(n_.data(), p_.layer(l, Wq), q_.data());
    vec_mat(n_.data(), p_.layer(l, Wk), k_.data());
    vec_mat(n_.data(), p_.layer(l, Wv), v_.data());
    for (std::size_t h = 0; h < cfg_.n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const float c = static_cast<float>(rope_.cos[pos_ * half + i]);
        const float s = static_cast<float>(rope_.sin[pos_ * half + i]);
        for (auto* vec : {&q_, &k_}) {
          float& a = (*vec)[h * dh + 2 * i];
          float& b = (*vec)[h * dh + 2 * i + 1];
          const float a0 = a, b0 = b;
          a = a0 * c - b0 * s;
          b = a0 * s + b0 * c;
        }
      }
    float* kc = k_cache_[l].data();
    float* vc = v_cache_[l].data();
    for (std::size_t i = 0; i < d; ++i) {
      kc[pos_ * d + i] = k_[i];
      vc[pos_ * d + i] = v_[i];
    }
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
      const float* qh = q_.data() + h * dh;
      float mx = -INFINITY;
      for (std::size_t j = 0; j <= pos_; ++j) {
        const float* kh = kc + j * d + h * dh;
        float dot = 0.0f;
        for (std::size_t i = 0; i < dh; ++i) dot += qh[i] * kh[i];
        scores_[j] = dot * scale;
        mx = std::max(mx, scores_[j]);
      }
      float sum = 0.0f;
      for (std::size_t j = 0; j <= pos_; ++j) {
        scores_[j] = std::exp(scores_[j] - mx);
        sum += scores_[j];
      }
      float* out = att_.data() + h * dh;
      for (std::size_t i = 0; i < dh; ++i) out[i] = 0.0f;
      for (std::size_t j = 0; j <= pos_; ++j) {
        const float pj = scores_[j] / sum;
        const float* vh = vc + j * d + h * dh;
        for (std::size_t i = 0; i < dh; ++i) out[i] += pj * vh[i];
      }
    }
    vec_mat(att_.data(), p_.layer(l, Wo), proj_.data());
    for (std::size_t i = 0; i < d; ++i) x_[i] += proj_[i];

    rms_norm(x_.data(), p_.layer(l, FfnNorm).data(), d, eps, n_.data());
    vec_mat(n_.data(), p_.layer(l, WGate), gate_.data());
    vec_mat(n_.data(), p_.layer(l, WUp), up_.data());
    for (std::size_t i = 0; i < f; ++i) gate_[i] = gate_[i] / (1.0f + std::exp(-gate_[i])) * up_[i];
    vec_mat(gate_.data(), p_.layer(l, WDown), proj_.data());
    for (std::size_t i = 0; i < d; ++i) x_[i] += proj_[i];
  }

  rms_norm(x_.data(), p_.final_norm().data(), d, eps, n_.data());
  const float* e = p_.embedding().data();
  for (std::size_t v = 0; v < cfg_.vocab_size; ++v) {
    float dot = 0.0f;
    for (std::size_t i = 0; i < d; ++i) dot += n_[i] * e[v * d + i];
    logits_[v] = dot;
  }
  ++pos_;
  return logits_;
}

const std::vector<float>& InferenceSession::feed(std::span<const TokenId> tokens) {
  CTXLM_REQUIRE(!tokens.empty(), "feed requires at least one token");
  for (TokenId t : tokens) step(t);
  return logits_;
}

}  // namespace ctxlm
