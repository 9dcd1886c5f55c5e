#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ctxlm {

using TokenId = std::uint32_t;

/// Greedy longest-match tokenizer over a piece table with byte fallback.
///
/// Id layout: 0..3 are the reserved specials (`<s>`, `<boc>`, `<eoc>`,
/// `<pad>`), 4..259 are the 256 single bytes, then the table pieces in
/// file order. Specials are never produced by encode(): the literal text
/// "<boc>" encodes as ordinary pieces.
class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kBoc = 1;
  static constexpr TokenId kEoc = 2;
  static constexpr TokenId kPad = 3;
  static constexpr TokenId kNumSpecial = 4;
  static constexpr TokenId kFirstByte = kNumSpecial;
  static constexpr TokenId kFirstPiece = kFirstByte + 256;

  /// Byte-level vocabulary with no multi-byte pieces.
  Vocabulary();
  /// Duplicate, empty and single-byte pieces are rejected.
  explicit Vocabulary(std::vector<std::string> pieces);

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  std::vector<TokenId> encode(std::string_view text) const;
  /// Concatenates piece surfaces; specials render as their markup when
  /// `render_special` is set and are dropped otherwise.
  std::string decode(std::span<const TokenId> ids, bool render_special = true) const;

  std::size_t size() const { return kFirstPiece + pieces_.size(); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  std::string piece(TokenId id) const;
  bool is_special(TokenId id) const { return id < kNumSpecial; }
  /// Generation stops when a stream emits this id (a new document start).
  TokenId eos() const { return kBos; }
  /// FNV-1a over the piece table, recorded in manifests and reports.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_len_ = 1;
};

}  // namespace ctxlm
