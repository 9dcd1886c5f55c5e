#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxlm/config.hpp"
#include "ctxlm/error.hpp"
#include "ctxlm/random.hpp"

namespace ctxlm {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Index of each per-layer tensor within a layer block.
enum LayerTensor : std::size_t { AttnNorm, Wq, Wk, Wv, Wo, FfnNorm, WGate, WUp, WDown, kLayerTensors };

/// Named parameter tensors in a fixed order:
///   tok_emb, layers.{l}.{attn_norm,wq,wk,wv,wo,ffn_norm,w_gate,w_up,w_down}, final_norm.
/// Linear weights are stored [in x out] so activations multiply on the left.
/// Norm gains are 1 x d row vectors.
template <typename S>
class Parameters {
 public:
  Parameters() = default;

  /// Tensors shaped for `cfg`, zero-filled.
  explicit Parameters(const LMConfig& cfg) : n_layers_(cfg.n_layers) {
    const auto d = static_cast<Eigen::Index>(cfg.hidden_size);
    const auto f = static_cast<Eigen::Index>(cfg.ffn_hidden);
    const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
    add("tok_emb", v, d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      add(p + "attn_norm", 1, d);
      add(p + "wq", d, d);
      add(p + "wk", d, d);
      add(p + "wv", d, d);
      add(p + "wo", d, d);
      add(p + "ffn_norm", 1, d);
      add(p + "w_gate", d, f);
      add(p + "w_up", d, f);
      add(p + "w_down", f, d);
    }
    add("final_norm", 1, d);
  }

  std::size_t size() const { return tensors_.size(); }
  std::size_t n_layers() const { return n_layers_; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Mat<S>& operator[](std::size_t i) { return tensors_[i]; }
  const Mat<S>& operator[](std::size_t i) const { return tensors_[i]; }

  Mat<S>& embedding() { return tensors_[0]; }
  const Mat<S>& embedding() const { return tensors_[0]; }
  Mat<S>& layer(std::size_t l, LayerTensor t) { return tensors_[index(l, t)]; }
  const Mat<S>& layer(std::size_t l, LayerTensor t) const { return tensors_[index(l, t)]; }
  Mat<S>& final_norm() { return tensors_.back(); }
  const Mat<S>& final_norm() const { return tensors_.back(); }

  static std::size_t index(std::size_t l, LayerTensor t) { return 1 + l * kLayerTensors + t; }
  /// Norm gains and other vectors are excluded from weight decay.
  bool is_matrix(std::size_t i) const { return tensors_[i].rows() > 1; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
    return n;
  }

  void set_zero() {
    for (auto& t : tensors_) t.setZero();
  }

  template <typename T>
  Parameters<T> cast() const {
    Parameters<T> out;
    out.n_layers_ = n_layers_;
    out.names_ = names_;
    for (const auto& t : tensors_) out.tensors_.push_back(t.template cast<T>());
    return out;
  }

  bool same_shapes(const Parameters& o) const {
    if (o.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (o.names_[i] != names_[i] || o[i].rows() != tensors_[i].rows() || o[i].cols() != tensors_[i].cols())
        return false;
    return true;
  }

  bool operator==(const Parameters& o) const {
    if (!same_shapes(o)) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (o[i] != tensors_[i]) return false;
    return true;
  }

 private:
  template <typename T>
  friend class Parameters;

  void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    names_.push_back(std::move(name));
    tensors_.push_back(Mat<S>::Zero(rows, cols));
  }

  std::size_t n_layers_ = 0;
  std::vector<std::string> names_;
  std::vector<Mat<S>> tensors_;
};

/// Normal(0, init_std) everywhere, output projections (wo, w_down) scaled
/// by 1/sqrt(2 n_layers), norm gains at 1. Draw order follows tensor order.
template <typename S>
Parameters<S> init_parameters(const LMConfig& cfg, Rng& rng) {
  Parameters<S> p(cfg);
  const double out_std = cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto& t = p[i];
    if (!p.is_matrix(i)) {
      t.setOnes();
      continue;
    }
    const auto& n = p.name(i);
    const bool is_out = n.ends_with(".wo") || n.ends_with(".w_down");
    const double std = is_out ? out_std : cfg.init_std;
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<S>(rng.normal(0.0, std));
  }
  return p;
}

}  // namespace ctxlm
