#include "ctxlm/trainer.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ctxlm/error.hpp"
#include "ctxlm/random.hpp"

namespace ctxlm {

Checkpoint init_model(const LMConfig& cfg) {
  cfg.validate();
  Checkpoint ck;
  ck.config = cfg;
  Rng rng(cfg.seed);
  ck.params = init_parameters<float>(cfg, rng);
  ck.adam_m = Parameters<float>(cfg);
  ck.adam_v = Parameters<float>(cfg);
  ck.rng_state = rng.state();
  return ck;
}

StepMetrics train_step(Checkpoint& ck, std::span<const TokenizedSequence> batch) {
  const LMConfig& cfg = ck.config;
  CTXLM_REQUIRE(!batch.empty(), "empty batch");
  for (const auto& s : batch)
    CTXLM_REQUIRE(s.tokens.size() == cfg.seq_len, "batch sequence length does not match cfg.seq_len");
  CTXLM_REQUIRE(ck.step < cfg.total_steps, "training already reached total_steps");

  const auto tb = TokenBatch::from_sequences(batch);
  Parameters<float> grad(cfg);
  const auto loss = ck.model().loss_and_grad(tb, grad);

  double sq = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) sq += grad[i].template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(loss.loss) || !std::isfinite(norm)) {
    std::ostringstream os;
    os << "non-finite training state at step " << ck.step + 1 << ": loss=" << loss.loss << " grad_norm=" << norm
       << " unmasked_targets=" << loss.unmasked;
    throw RuntimeFailure(os.str());
  }

  const std::uint64_t t = ck.step + 1;
  const double lr = lr_at(t, cfg);
  const double clip = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / (norm + 1e-6) : 1.0;
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float bc1 = static_cast<float>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const float bc2 = static_cast<float>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const float step_lr = static_cast<float>(lr);
  const float decay = static_cast<float>(1.0 - lr * cfg.weight_decay);
  const float eps = static_cast<float>(cfg.adam_eps);
  const float gscale = static_cast<float>(clip);

  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    float* p = ck.params[i].data();
    float* m = ck.adam_m[i].data();
    float* v = ck.adam_v[i].data();
    const float* g = grad[i].data();
    const bool decayed = ck.params.is_matrix(i);
    const auto n = ck.params[i].size();
    for (Eigen::Index k = 0; k < n; ++k) {
      const float gk = g[k] * gscale;
      m[k] = b1 * m[k] + (1.0f - b1) * gk;
      v[k] = b2 * v[k] + (1.0f - b2) * gk * gk;
      const float mhat = m[k] / bc1;
      const float vhat = v[k] / bc2;
      if (decayed) p[k] *= decay;
      p[k] -= step_lr * mhat / (std::sqrt(vhat) + eps);
    }
  }

  ck.step = t;
  ck.tokens_consumed += static_cast<std::uint64_t>(batch.size()) * cfg.seq_len;
  return {t, loss.loss, lr, norm, ck.tokens_consumed};
}

StepMetrics train_on_stream(Checkpoint& ck, std::span<const TokenizedSequence> data) {
  CTXLM_REQUIRE(!data.empty(), "empty training stream");
  const std::size_t bs = ck.config.batch_size_sequences;
  std::vector<TokenizedSequence> batch;
  batch.reserve(bs);
  std::uint64_t cursor = ck.data_cursor;
  for (std::size_t i = 0; i < bs; ++i) batch.push_back(data[(cursor + i) % data.size()]);
  auto m = train_step(ck, batch);
  ck.data_cursor = (cursor + bs) % data.size();
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr std::array<char, 4> kMagic = {'C', 'T', 'X', 'K'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_uint(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

struct Group {
  const char* prefix;
  Parameters<float> Checkpoint::*member;
};
constexpr Group kGroups[] = {
    {"param/", &Checkpoint::params}, {"adam_m/", &Checkpoint::adam_m}, {"adam_v/", &Checkpoint::adam_v}};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& g : kGroups) {
    const auto& ps = ck.*(g.member);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::uint64_t nbytes = static_cast<std::uint64_t>(ps[i].size()) * 4;
      tensors.push_back({{"name", std::string(g.prefix) + ps.name(i)},
                         {"dtype", "f32"},
                         {"shape", {ps[i].rows(), ps[i].cols()}},
                         {"offset", offset},
                         {"nbytes", nbytes}});
      offset += nbytes;
    }
  }
  const nlohmann::json header = {{"format", "ctxlm-checkpoint"},
                                 {"config", to_json(ck.config)},
                                 {"step", ck.step},
                                 {"tokens_consumed", ck.tokens_consumed},
                                 {"data_cursor", ck.data_cursor},
                                 {"rng_state", ck.rng_state},
                                 {"tensors", tensors}};
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write checkpoint: " + path);
    out.write(kMagic.data(), 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& g : kGroups) {
      const auto& ps = ck.*(g.member);
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const float* d = ps[i].data();
        for (Eigen::Index k = 0; k < ps[i].size(); ++k) {
          std::uint32_t bits;
          std::memcpy(&bits, d + k, 4);
          put_u32(out, bits);
        }
      }
    }
    if (!out) throw RuntimeFailure("failed writing checkpoint: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw RuntimeFailure("cannot move checkpoint into place: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open checkpoint: " + path);
  unsigned char pre[16];
  in.read(reinterpret_cast<char*>(pre), 16);
  if (in.gcount() != 16 || std::memcmp(pre, kMagic.data(), 4) != 0)
    throw CorruptHeaderError("not a checkpoint file: " + path);
  const auto version = static_cast<std::uint32_t>(get_uint(pre + 4, 4));
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                               std::to_string(kCheckpointVersion) + ")");
  const auto hlen = get_uint(pre + 8, 8);
  if (hlen > (std::uint64_t{1} << 30)) throw CorruptHeaderError("checkpoint header too large");
  std::string text(hlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::uint64_t>(in.gcount()) != hlen) throw TruncatedRecordError("checkpoint header truncated");

  Checkpoint ck;
  std::vector<unsigned char> blob;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    if (header.at("format") != "ctxlm-checkpoint") throw CorruptHeaderError("unexpected checkpoint format tag");
    ck.config = lm_config_from_json(header.at("config"));
    ck.step = header.at("step").get<std::uint64_t>();
    ck.tokens_consumed = header.at("tokens_consumed").get<std::uint64_t>();
    ck.data_cursor = header.at("data_cursor").get<std::uint64_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError(std::string("malformed checkpoint header: ") + e.what());
  }
  ck.config.validate();
  blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  std::map<std::string, nlohmann::json> directory;
  for (const auto& t : header.at("tensors")) directory[t.at("name").get<std::string>()] = t;
  for (const auto& g : kGroups) {
    auto& ps = ck.*(g.member);
    ps = Parameters<float>(ck.config);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string name = std::string(g.prefix) + ps.name(i);
      auto it = directory.find(name);
      if (it == directory.end()) throw CorruptHeaderError("checkpoint lacks tensor " + name);
      const auto& t = it->second;
      if (t.at("dtype") != "f32") throw CorruptHeaderError("unsupported dtype for " + name);
      const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
      if (shape.size() != 2 || shape[0] != ps[i].rows() || shape[1] != ps[i].cols())
        throw CorruptHeaderError("shape mismatch for " + name);
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto nbytes = static_cast<std::uint64_t>(ps[i].size()) * 4;
      if (offset + nbytes > blob.size()) throw TruncatedRecordError("tensor data truncated for " + name);
      float* d = ps[i].data();
      for (Eigen::Index k = 0; k < ps[i].size(); ++k) {
        const auto bits = static_cast<std::uint32_t>(get_uint(blob.data() + offset + 4 * k, 4));
        std::memcpy(d + k, &bits, 4);
      }
    }
  }
  return ck;
}

}  // namespace ctxlm
