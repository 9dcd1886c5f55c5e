#pragma once

#include <optional>
#include <string>
#include <vector>

namespace ctxlm {

/// Per-document metadata, taken as given input.
struct MetadataRecord {
  std::optional<std::string> url;
  std::optional<int> quality_score;  ///< 0 (not educational) .. 5
  std::optional<std::string> topic;
  std::optional<std::string> format;

  bool operator==(const MetadataRecord&) const = default;
};

enum class ContextField { Url, QualityScore, DomainInfo };
enum class RenderingMode { Labeled, Raw };
enum class MixtureSchedule { Uniform, Cooldown };

struct ContextSpec {
  std::vector<ContextField> fields_included{ContextField::Url};
  RenderingMode rendering_mode = RenderingMode::Labeled;
  double mixture_probability = 0.9;
  MixtureSchedule schedule = MixtureSchedule::Uniform;
  double cooldown_fraction = 0.1;
  /// Context token cap applied before the no-text-fits check.
  std::size_t max_context_tokens = 64;

  /// Throws ValidationError on duplicate fields or out-of-range reals.
  void validate() const;
};

/// Closed category taxonomy (24 labels per taxonomy).
class LabelSet {
 public:
  static constexpr std::size_t kSize = 24;

  explicit LabelSet(std::vector<std::string> labels);
  /// One label per line; exactly 24 non-empty, distinct lines.
  static LabelSet load(const std::string& path);
  static LabelSet default_topics();
  static LabelSet default_formats();

  const std::vector<std::string>& labels() const { return labels_; }
  const std::string& at(std::size_t i) const { return labels_.at(i); }
  bool contains(const std::string& label) const;

 private:
  std::vector<std::string> labels_;
};

/// Quality score range and, when label sets are given, topic/format
/// membership. Throws ValidationError.
void validate_metadata(const MetadataRecord& meta, const LabelSet* topics = nullptr,
                       const LabelSet* formats = nullptr);

/// Deterministic context string: included fields present in `meta`,
/// newline-joined in spec order. Empty when none are present.
std::string render_context(const MetadataRecord& meta, const ContextSpec& spec);

std::string to_string(ContextField f);
std::string to_string(RenderingMode m);
std::string to_string(MixtureSchedule s);
ContextField parse_context_field(const std::string& s);
RenderingMode parse_rendering_mode(const std::string& s);
MixtureSchedule parse_mixture_schedule(const std::string& s);
/// Comma-separated field list, e.g. "url,qs,di". Empty string gives [].
std::vector<ContextField> parse_field_list(const std::string& s);

}  // namespace ctxlm
