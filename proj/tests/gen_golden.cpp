// Regenerates tests/data/golden_logits.json. Run only when the model's
// numerics change on purpose: ./gen_golden > tests/data/golden_logits.json

#include <iostream>

#include <json.hpp>

#include "ctxlm/trainer.hpp"

int main() {
  ctxlm::LMConfig cfg;
  cfg.n_layers = 2;
  cfg.hidden_size = 16;
  cfg.n_heads = 4;
  cfg.ffn_hidden = 32;
  cfg.seq_len = 16;
  cfg.vocab_size = 24;
  cfg.seed = 20240601;
  cfg.init_std = 0.2;  // large enough that logits are far from uniform
  const std::vector<ctxlm::TokenId> tokens = {0, 1, 9, 17, 2, 5, 23, 11, 4, 4};
  const auto ck = ctxlm::init_model(cfg);
  const ctxlm::Mat<float> logits = ck.model().forward(tokens, 1, tokens.size());
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    std::vector<double> r;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) r.push_back(logits(i, v));
    rows.push_back(r);
  }
  nlohmann::json j = {{"config", ctxlm::to_json(cfg)}, {"tokens", tokens}, {"logits", rows}};
  std::cout << j.dump(1) << "\n";
}
