#include "ctxlm/vocab.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "ctxlm/error.hpp"
#include "ctxlm/hash.hpp"

namespace ctxlm {

namespace {
constexpr const char* kSpecialMarkup[] = {"<s>", "<boc>", "<eoc>", "<pad>"};
}

Vocabulary::Vocabulary() = default;

Vocabulary::Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
  index_.reserve(pieces_.size());
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    const auto& p = pieces_[i];
    if (p.size() < 2) throw ValidationError("vocabulary piece must span at least two bytes: '" + p + "'");
    auto [it, inserted] = index_.emplace(p, static_cast<TokenId>(kFirstPiece + i));
    if (!inserted) throw ValidationError("duplicate vocabulary piece: '" + p + "'");
    max_piece_len_ = std::max(max_piece_len_, p.size());
  }
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open vocabulary file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed vocabulary file " + path + ": " + e.what());
  }
  if (j.value("format", "") != "ctxlm-vocab") throw ValidationError("not a vocabulary file: " + path);
  return Vocabulary(j.at("pieces").get<std::vector<std::string>>());
}

void Vocabulary::save(const std::string& path) const {
  nlohmann::json j = {{"format", "ctxlm-vocab"}, {"version", 1}, {"pieces", pieces_}};
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write vocabulary file: " + path);
  out << j.dump(1) << '\n';
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size() / 2 + 1);
  std::string key;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t len = std::min(max_piece_len_, text.size() - pos);
    TokenId id = kFirstByte + static_cast<unsigned char>(text[pos]);
    std::size_t used = 1;
    for (; len >= 2; --len) {
      key.assign(text.substr(pos, len));
      if (auto it = index_.find(key); it != index_.end()) {
        id = it->second;
        used = len;
        break;
      }
    }
    ids.push_back(id);
    pos += used;
  }
  return ids;
}

std::string Vocabulary::piece(TokenId id) const {
  if (id < kNumSpecial) return kSpecialMarkup[id];
  if (id < kFirstPiece) return std::string(1, static_cast<char>(id - kFirstByte));
  if (id - kFirstPiece < pieces_.size()) return pieces_[id - kFirstPiece];
  throw ValidationError("token id out of range: " + std::to_string(id));
}

std::string Vocabulary::decode(std::span<const TokenId> ids, bool render_special) const {
  std::string out;
  for (TokenId id : ids) {
    if (is_special(id) && !render_special) continue;
    out += piece(id);
  }
  return out;
}

std::uint64_t Vocabulary::fingerprint() const {
  Fnv1a h;
  for (const auto& p : pieces_) {
    h.update(p);
    h.update(std::string_view("\0", 1));
  }
  return h.value();
}

}  // namespace ctxlm
