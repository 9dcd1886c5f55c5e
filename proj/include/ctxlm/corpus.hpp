#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxlm/metadata.hpp"
#include "ctxlm/vocab.hpp"

namespace ctxlm {

enum class SegmentKind : std::uint8_t { Bos, ContextFrame, Context, Text, Pad };

struct SegmentSpan {
  SegmentKind kind;
  std::uint32_t begin;  ///< inclusive
  std::uint32_t end;    ///< exclusive

  bool operator==(const SegmentSpan&) const = default;
};

/// One fixed-length training sequence:
///   <s> <boc> context... <eoc> text... <pad>...
/// loss_mask[i] is set iff tokens[i + 1] is a text token.
struct TokenizedSequence {
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> loss_mask;  ///< length tokens.size() - 1, values 0/1
  std::vector<SegmentSpan> segments;

  /// Derives segments and mask from the token layout; throws
  /// InvariantViolationError when the layout is not a valid sequence.
  static TokenizedSequence from_tokens(std::vector<TokenId> tokens);

  std::size_t seq_len() const { return tokens.size(); }
  std::size_t context_length() const;
  std::size_t text_length() const;
  std::size_t unmasked_targets() const;
  /// Text tokens in order.
  std::vector<TokenId> text_tokens() const;
  /// Same text, empty context frame, repadded to the same length.
  TokenizedSequence without_context() const;

  bool operator==(const TokenizedSequence& o) const { return tokens == o.tokens && loss_mask == o.loss_mask; }
};

struct Document {
  std::string text;
  MetadataRecord meta;
};

/// Context ids after applying the token cap.
std::vector<TokenId> encode_context(const std::string& context, const Vocabulary& vocab,
                                    std::size_t max_context_tokens = 64);

/// Splits `text_ids` into chunks of seq_len - frame_len and frames each
/// with the same context. Throws ValidationError when no text token fits.
std::vector<TokenizedSequence> chunk_tokens(std::span<const TokenId> text_ids,
                                            std::span<const TokenId> context_ids, std::size_t seq_len);

std::vector<TokenizedSequence> tokenize_and_chunk(const std::string& doc_text, const std::string& context,
                                                  const Vocabulary& vocab, std::size_t seq_len,
                                                  std::size_t max_context_tokens = 64);

/// True when the document gets its (non-empty) context. Uniform: seeded
/// Bernoulli(mixture_probability) keyed on (doc_index, seed). Cooldown:
/// progress < 1 - cooldown_fraction.
bool assign_context_mode(std::uint64_t doc_index, const ContextSpec& spec, std::uint64_t seed, double progress);

struct PackStats {
  std::uint64_t n_docs = 0;
  std::uint64_t n_sequences = 0;
  std::uint64_t masked_targets = 0;
  std::uint64_t unmasked_targets = 0;
  std::uint64_t empty_context_docs = 0;
  std::uint64_t rejected_docs = 0;
  std::vector<std::string> diagnostics;

  /// Over packed (non-rejected) documents.
  double empty_context_fraction() const;
};

struct PackResult {
  std::vector<TokenizedSequence> sequences;
  PackStats stats;
};

/// In-memory packing. Progress for the cooldown schedule is the fraction
/// of text tokens preceding each document in stream order.
PackResult pack_sequences(std::span<const Document> docs, const ContextSpec& spec, const Vocabulary& vocab,
                          std::size_t seq_len, std::uint64_t seed);

/// pack_sequences + write to `out_path` in the packed dataset format.
PackStats pack_dataset(std::span<const Document> docs, const ContextSpec& spec, const Vocabulary& vocab,
                       std::size_t seq_len, std::uint64_t seed, const std::string& out_path);

/// Packed dataset file:
///   "CTXP" u32 version=1 u32 vocab_size u32 seq_len u64 n_sequences
///   then per sequence: seq_len LE u32 ids, ceil((seq_len-1)/8) mask bytes (LSB first).
class PackedWriter {
 public:
  PackedWriter(const std::string& path, std::uint32_t vocab_size, std::uint32_t seq_len);
  void write(const TokenizedSequence& seq);
  /// Patches the sequence count into the header and closes the file.
  void close();
  ~PackedWriter();

  PackedWriter(const PackedWriter&) = delete;
  PackedWriter& operator=(const PackedWriter&) = delete;

 private:
  std::ofstream out_;
  std::string path_;
  std::uint32_t seq_len_;
  std::uint64_t count_ = 0;
  bool closed_ = false;
};

/// Single-consumer reader. Each record is validated on read.
class PackedReader {
 public:
  static constexpr std::uint32_t kVersion = 1;

  explicit PackedReader(const std::string& path);

  std::uint32_t vocab_size() const { return vocab_size_; }
  std::uint32_t seq_len() const { return seq_len_; }
  std::uint64_t size() const { return n_sequences_; }

  /// Next sequence, or nullopt at the end.
  std::optional<TokenizedSequence> next();
  std::vector<TokenizedSequence> read_all();

 private:
  std::ifstream in_;
  std::string path_;
  std::uint32_t vocab_size_ = 0;
  std::uint32_t seq_len_ = 0;
  std::uint64_t n_sequences_ = 0;
  std::uint64_t read_ = 0;
};

inline PackedReader load_packed(const std::string& path) { return PackedReader(path); }

/// Topic-structured synthetic corpus. Each document draws a latent topic;
/// tokens come from that topic's block with probability `block_mass`,
/// else uniformly from the whole synthetic vocabulary. Metadata names the
/// latent topic with probability `informativeness`, else a uniformly
/// drawn label (which may coincide with the latent one). Text and
/// metadata use separate RNG streams, so corpora differing only in
/// informativeness share their text.
struct SynthSpec {
  std::size_t n_docs = 1000;
  std::size_t n_topics = 8;
  std::size_t doc_len = 48;
  std::size_t vocab_size = 256;
  double informativeness = 1.0;
  std::uint64_t seed = 0;
  double block_mass = 0.9;

  void validate() const;
};

struct SynthDocument {
  Document doc;
  std::size_t latent_topic;
  std::size_t metadata_topic;
};

std::vector<SynthDocument> synth_corpus_detailed(const SynthSpec& spec);
std::vector<Document> synth_corpus(const SynthSpec& spec);

/// Piece for synthetic word `i`, e.g. " w17".
std::string synth_word(std::size_t i);
/// Host used as the synthetic URL for topic `k`.
std::string synth_host(std::size_t k);
/// Vocabulary covering synthetic words, hosts and context labels, so that
/// synthetic text and contexts encode to short id sequences.
Vocabulary synth_vocabulary(std::size_t vocab_size, std::size_t n_topics);

/// Line-delimited JSON records with fields text, url, quality_score,
/// topic, format (all but text optional).
std::vector<Document> read_corpus(const std::string& path);
void write_corpus(const std::string& path, std::span<const Document> docs);

}  // namespace ctxlm
