#include "ctxlm/corpus.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>

#include <json.hpp>

#include "ctxlm/error.hpp"
#include "ctxlm/random.hpp"

namespace ctxlm {

namespace {

constexpr std::array<char, 4> kPackedMagic = {'C', 'T', 'X', 'P'};
constexpr std::uint64_t kModeStream = 0xC0;
constexpr std::uint64_t kSynthTextStream = 0x51;
constexpr std::uint64_t kSynthMetaStream = 0x52;

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}


}  // namespace

TokenizedSequence TokenizedSequence::from_tokens(std::vector<TokenId> tokens) {
  const std::size_t n = tokens.size();
  if (n < 3) throw InvariantViolationError("sequence shorter than its frame");
  if (tokens[0] != Vocabulary::kBos) throw InvariantViolationError("sequence does not start with <s>");
  if (tokens[1] != Vocabulary::kBoc) throw InvariantViolationError("<boc> missing at position 1");
  std::size_t eoc = 2;
  while (eoc < n && tokens[eoc] != Vocabulary::kEoc) {
    if (tokens[eoc] < Vocabulary::kNumSpecial)
      throw InvariantViolationError("special token inside context at position " + std::to_string(eoc));
    ++eoc;
  }
  if (eoc == n) throw InvariantViolationError("<eoc> missing");
  std::size_t text_end = eoc + 1;
  while (text_end < n && tokens[text_end] != Vocabulary::kPad) {
    if (tokens[text_end] < Vocabulary::kNumSpecial)
      throw InvariantViolationError("special token inside text at position " + std::to_string(text_end));
    ++text_end;
  }
  for (std::size_t i = text_end; i < n; ++i) {
    if (tokens[i] != Vocabulary::kPad) throw InvariantViolationError("non-pad token after padding began");
  }

  TokenizedSequence seq;
  const auto u = [](std::size_t v) { return static_cast<std::uint32_t>(v); };
  seq.segments.push_back({SegmentKind::Bos, 0, 1});
  seq.segments.push_back({SegmentKind::ContextFrame, 1, 2});
  if (eoc > 2) seq.segments.push_back({SegmentKind::Context, 2, u(eoc)});
  seq.segments.push_back({SegmentKind::ContextFrame, u(eoc), u(eoc + 1)});
  if (text_end > eoc + 1) seq.segments.push_back({SegmentKind::Text, u(eoc + 1), u(text_end)});
  if (n > text_end) seq.segments.push_back({SegmentKind::Pad, u(text_end), u(n)});

  seq.loss_mask.assign(n - 1, 0);
  for (std::size_t i = eoc; i + 1 < text_end; ++i) seq.loss_mask[i] = 1;
  seq.tokens = std::move(tokens);
  return seq;
}

std::size_t TokenizedSequence::context_length() const {
  for (const auto& s : segments)
    if (s.kind == SegmentKind::Context) return s.end - s.begin;
  return 0;
}

std::size_t TokenizedSequence::text_length() const {
  for (const auto& s : segments)
    if (s.kind == SegmentKind::Text) return s.end - s.begin;
  return 0;
}

std::size_t TokenizedSequence::unmasked_targets() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

std::vector<TokenId> TokenizedSequence::text_tokens() const {
  for (const auto& s : segments)
    if (s.kind == SegmentKind::Text) return {tokens.begin() + s.begin, tokens.begin() + s.end};
  return {};
}

TokenizedSequence TokenizedSequence::without_context() const {
  std::vector<TokenId> out{Vocabulary::kBos, Vocabulary::kBoc, Vocabulary::kEoc};
  auto text = text_tokens();
  out.insert(out.end(), text.begin(), text.end());
  out.resize(tokens.size(), Vocabulary::kPad);
  return from_tokens(std::move(out));
}

std::vector<TokenId> encode_context(const std::string& context, const Vocabulary& vocab,
                                    std::size_t max_context_tokens) {
  auto ids = vocab.encode(context);
  if (ids.size() > max_context_tokens) ids.resize(max_context_tokens);
  return ids;
}

std::vector<TokenizedSequence> chunk_tokens(std::span<const TokenId> text_ids, std::span<const TokenId> context_ids,
                                            std::size_t seq_len) {
  const std::size_t frame_len = 3 + context_ids.size();
  if (seq_len <= frame_len)
    throw ValidationError("context of " + std::to_string(context_ids.size()) +
                          " tokens leaves no room for text at seq_len " + std::to_string(seq_len));
  std::vector<TokenizedSequence> out;
  const std::size_t chunk = seq_len - frame_len;
  for (std::size_t begin = 0; begin < text_ids.size(); begin += chunk) {
    const std::size_t end = std::min(text_ids.size(), begin + chunk);
    std::vector<TokenId> tokens;
    tokens.reserve(seq_len);
    tokens.push_back(Vocabulary::kBos);
    tokens.push_back(Vocabulary::kBoc);
    tokens.insert(tokens.end(), context_ids.begin(), context_ids.end());
    tokens.push_back(Vocabulary::kEoc);
    tokens.insert(tokens.end(), text_ids.begin() + begin, text_ids.begin() + end);
    tokens.resize(seq_len, Vocabulary::kPad);
    out.push_back(TokenizedSequence::from_tokens(std::move(tokens)));
  }
  return out;
}

std::vector<TokenizedSequence> tokenize_and_chunk(const std::string& doc_text, const std::string& context,
                                                  const Vocabulary& vocab, std::size_t seq_len,
                                                  std::size_t max_context_tokens) {
  const auto text_ids = vocab.encode(doc_text);
  const auto context_ids = encode_context(context, vocab, max_context_tokens);
  if (text_ids.empty()) return {};
  return chunk_tokens(text_ids, context_ids, seq_len);
}

bool assign_context_mode(std::uint64_t doc_index, const ContextSpec& spec, std::uint64_t seed, double progress) {
  if (spec.schedule == MixtureSchedule::Cooldown) return progress < 1.0 - spec.cooldown_fraction;
  Rng rng(mix_seed(seed, kModeStream, doc_index));
  return rng.bernoulli(spec.mixture_probability);
}

double PackStats::empty_context_fraction() const {
  const auto packed = n_docs - rejected_docs;
  return packed == 0 ? 0.0 : static_cast<double>(empty_context_docs) / static_cast<double>(packed);
}

PackResult pack_sequences(std::span<const Document> docs, const ContextSpec& spec, const Vocabulary& vocab,
                          std::size_t seq_len, std::uint64_t seed) {
  spec.validate();
  std::vector<std::vector<TokenId>> encoded;
  encoded.reserve(docs.size());
  std::uint64_t total_tokens = 0;
  for (const auto& d : docs) {
    encoded.push_back(vocab.encode(d.text));
    total_tokens += encoded.back().size();
  }

  PackResult result;
  auto& stats = result.stats;
  std::uint64_t tokens_before = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const double progress =
        total_tokens == 0 ? 0.0 : static_cast<double>(tokens_before) / static_cast<double>(total_tokens);
    tokens_before += encoded[i].size();
    ++stats.n_docs;

    // Rendered unconditionally so malformed metadata surfaces regardless of mode.
    const std::string rendered = render_context(docs[i].meta, spec);
    const bool with_context = assign_context_mode(i, spec, seed, progress);
    const auto context_ids = encode_context(with_context ? rendered : std::string{}, vocab, spec.max_context_tokens);
    if (encoded[i].empty()) {
      ++stats.rejected_docs;
      stats.diagnostics.push_back("document " + std::to_string(i) + ": no text tokens");
      continue;
    }
    std::vector<TokenizedSequence> seqs;
    try {
      seqs = chunk_tokens(encoded[i], context_ids, seq_len);
    } catch (const ValidationError& e) {
      ++stats.rejected_docs;
      stats.diagnostics.push_back("document " + std::to_string(i) + ": " + e.what());
      continue;
    }
    if (context_ids.empty()) ++stats.empty_context_docs;
    for (auto& s : seqs) {
      const auto unmasked = s.unmasked_targets();
      stats.unmasked_targets += unmasked;
      stats.masked_targets += s.loss_mask.size() - unmasked;
      ++stats.n_sequences;
      result.sequences.push_back(std::move(s));
    }
  }
  return result;
}

PackStats pack_dataset(std::span<const Document> docs, const ContextSpec& spec, const Vocabulary& vocab,
                       std::size_t seq_len, std::uint64_t seed, const std::string& out_path) {
  auto result = pack_sequences(docs, spec, vocab, seq_len, seed);
  PackedWriter writer(out_path, static_cast<std::uint32_t>(vocab.size()), static_cast<std::uint32_t>(seq_len));
  for (const auto& s : result.sequences) writer.write(s);
  writer.close();
  return std::move(result.stats);
}

// ---------------------------------------------------------------------------
// Packed file I/O

PackedWriter::PackedWriter(const std::string& path, std::uint32_t vocab_size, std::uint32_t seq_len)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path), seq_len_(seq_len) {
  if (!out_) throw RuntimeFailure("cannot open packed dataset for writing: " + path);
  CTXLM_REQUIRE(seq_len >= 3, "seq_len must be at least 3");
  out_.write(kPackedMagic.data(), 4);
  put_le<std::uint32_t>(out_, PackedReader::kVersion);
  put_le<std::uint32_t>(out_, vocab_size);
  put_le<std::uint32_t>(out_, seq_len);
  put_le<std::uint64_t>(out_, 0);
}

void PackedWriter::write(const TokenizedSequence& seq) {
  CTXLM_REQUIRE(seq.tokens.size() == seq_len_, "sequence length does not match dataset seq_len");
  for (TokenId t : seq.tokens) put_le<std::uint32_t>(out_, t);
  std::vector<unsigned char> bits((seq_len_ - 1 + 7) / 8, 0);
  for (std::size_t i = 0; i < seq.loss_mask.size(); ++i)
    if (seq.loss_mask[i]) bits[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
  out_.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  ++count_;
}

void PackedWriter::close() {
  if (closed_) return;
  closed_ = true;
  out_.seekp(16);
  put_le<std::uint64_t>(out_, count_);
  out_.close();
  if (out_.fail()) throw RuntimeFailure("failed writing packed dataset: " + path_);
}

PackedWriter::~PackedWriter() {
  try {
    close();
  } catch (...) {
  }
}

PackedReader::PackedReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw RuntimeFailure("cannot open packed dataset: " + path);
  unsigned char header[24];
  in_.read(reinterpret_cast<char*>(header), sizeof header);
  if (in_.gcount() != static_cast<std::streamsize>(sizeof header))
    throw CorruptHeaderError("packed dataset header truncated: " + path);
  if (std::memcmp(header, kPackedMagic.data(), 4) != 0) throw CorruptHeaderError("bad magic in " + path);
  const auto version = get_le<std::uint32_t>(header + 4);
  if (version != kVersion) throw CorruptHeaderError("unsupported packed dataset version " + std::to_string(version));
  vocab_size_ = get_le<std::uint32_t>(header + 8);
  seq_len_ = get_le<std::uint32_t>(header + 12);
  n_sequences_ = get_le<std::uint64_t>(header + 16);
  if (seq_len_ < 3) throw CorruptHeaderError("seq_len in header too small");
  if (vocab_size_ <= Vocabulary::kNumSpecial) throw CorruptHeaderError("vocab_size in header too small");
}

std::optional<TokenizedSequence> PackedReader::next() {
  if (read_ == n_sequences_) return std::nullopt;
  const std::size_t nbits = (seq_len_ - 1 + 7) / 8;
  std::vector<unsigned char> buf(std::size_t{seq_len_} * 4 + nbits);
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in_.gcount() != static_cast<std::streamsize>(buf.size()))
    throw TruncatedRecordError("record " + std::to_string(read_) + " truncated in " + path_);

  std::vector<TokenId> tokens(seq_len_);
  for (std::size_t i = 0; i < seq_len_; ++i) {
    tokens[i] = get_le<std::uint32_t>(buf.data() + 4 * i);
    if (tokens[i] >= vocab_size_)
      throw InvariantViolationError("token id " + std::to_string(tokens[i]) + " >= vocab_size in record " +
                                    std::to_string(read_));
  }
  auto seq = TokenizedSequence::from_tokens(std::move(tokens));
  const unsigned char* bits = buf.data() + 4 * std::size_t{seq_len_};
  for (std::size_t i = 0; i + 1 < seq_len_; ++i) {
    const std::uint8_t stored = (bits[i / 8] >> (i % 8)) & 1u;
    if (stored != seq.loss_mask[i])
      throw InvariantViolationError("loss mask disagrees with layout at position " + std::to_string(i) +
                                    " of record " + std::to_string(read_));
  }
  ++read_;
  return seq;
}

std::vector<TokenizedSequence> PackedReader::read_all() {
  std::vector<TokenizedSequence> out;
  out.reserve(n_sequences_ - read_);
  while (auto s = next()) out.push_back(std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SynthSpec::validate() const {
  CTXLM_REQUIRE(n_topics >= 2, "n_topics must be at least 2");
  CTXLM_REQUIRE(n_topics <= LabelSet::kSize, "n_topics must not exceed the 24-label topic taxonomy");
  CTXLM_REQUIRE(vocab_size > 0 && vocab_size % n_topics == 0, "vocab_size must be divisible by n_topics");
  CTXLM_REQUIRE(informativeness >= 0.0 && informativeness <= 1.0, "informativeness must lie in [0, 1]");
  CTXLM_REQUIRE(block_mass >= 0.0 && block_mass <= 1.0, "block_mass must lie in [0, 1]");
}

std::string synth_word(std::size_t i) { return " w" + std::to_string(i); }

std::string synth_host(std::size_t k) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "https://topic-%02zu.synth/", k);
  return buf;
}

std::vector<SynthDocument> synth_corpus_detailed(const SynthSpec& spec) {
  spec.validate();
  const auto topics = LabelSet::default_topics();
  const std::size_t block = spec.vocab_size / spec.n_topics;
  std::vector<SynthDocument> out;
  out.reserve(spec.n_docs);
  for (std::size_t i = 0; i < spec.n_docs; ++i) {
    Rng text_rng(mix_seed(spec.seed, kSynthTextStream, i));
    Rng meta_rng(mix_seed(spec.seed, kSynthMetaStream, i));
    const std::size_t latent = text_rng.uniform_int(spec.n_topics);
    std::string text;
    for (std::size_t t = 0; t < spec.doc_len; ++t) {
      const std::size_t word = text_rng.bernoulli(spec.block_mass) ? latent * block + text_rng.uniform_int(block)
                                                                   : text_rng.uniform_int(spec.vocab_size);
      text += synth_word(word);
    }
    const bool reveal = meta_rng.bernoulli(spec.informativeness);
    const std::size_t drawn = meta_rng.uniform_int(spec.n_topics);
    const std::size_t label = reveal ? latent : drawn;
    MetadataRecord meta;
    meta.url = synth_host(label);
    meta.quality_score = static_cast<int>(meta_rng.uniform_int(6));
    meta.topic = topics.at(label);
    meta.format = "Knowledge Article";
    out.push_back({{std::move(text), std::move(meta)}, latent, label});
  }
  return out;
}

std::vector<Document> synth_corpus(const SynthSpec& spec) {
  auto detailed = synth_corpus_detailed(spec);
  std::vector<Document> out;
  out.reserve(detailed.size());
  for (auto& d : detailed) out.push_back(std::move(d.doc));
  return out;
}

Vocabulary synth_vocabulary(std::size_t vocab_size, std::size_t n_topics) {
  std::vector<std::string> pieces;
  for (std::size_t i = 0; i < vocab_size; ++i) pieces.push_back(synth_word(i));
  for (std::size_t k = 0; k < n_topics; ++k) pieces.push_back(synth_host(k));
  for (const char* p : {"URL: ", "Quality Score: ", "Topic: ", ", Format: ", "Format: "}) pieces.emplace_back(p);
  const auto topics = LabelSet::default_topics();
  const auto formats = LabelSet::default_formats();
  for (const auto& l : topics.labels()) pieces.push_back(l);
  for (const auto& l : formats.labels()) {
    if (std::find(pieces.begin(), pieces.end(), l) == pieces.end()) pieces.push_back(l);
  }
  return Vocabulary(std::move(pieces));
}

// ---------------------------------------------------------------------------
// JSONL corpus

std::vector<Document> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open corpus: " + path);
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Document d;
      d.text = j.at("text").get<std::string>();
      auto opt_str = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j[key].is_null()) return std::nullopt;
        return j[key].get<std::string>();
      };
      d.meta.url = opt_str("url");
      d.meta.topic = opt_str("topic");
      d.meta.format = opt_str("format");
      if (j.contains("quality_score") && !j["quality_score"].is_null())
        d.meta.quality_score = j["quality_score"].get<int>();
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    }
  }
  return docs;
}

void write_corpus(const std::string& path, std::span<const Document> docs) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write corpus: " + path);
  for (const auto& d : docs) {
    nlohmann::json j = {{"text", d.text}};
    if (d.meta.url) j["url"] = *d.meta.url;
    if (d.meta.quality_score) j["quality_score"] = *d.meta.quality_score;
    if (d.meta.topic) j["topic"] = *d.meta.topic;
    if (d.meta.format) j["format"] = *d.meta.format;
    out << j.dump() << '\n';
  }
}

}  // namespace ctxlm
