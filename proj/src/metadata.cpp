#include "ctxlm/metadata.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "ctxlm/error.hpp"

namespace ctxlm {

void ContextSpec::validate() const {
  std::set<ContextField> seen;
  for (auto f : fields_included) {
    if (!seen.insert(f).second) throw ValidationError("duplicate context field: " + to_string(f));
  }
  CTXLM_REQUIRE(mixture_probability >= 0.0 && mixture_probability <= 1.0,
                "mixture_probability must lie in [0, 1]");
  CTXLM_REQUIRE(cooldown_fraction >= 0.0 && cooldown_fraction <= 1.0,
                "cooldown_fraction must lie in [0, 1]");
}

LabelSet::LabelSet(std::vector<std::string> labels) : labels_(std::move(labels)) {
  if (labels_.size() != kSize)
    throw ValidationError("label set must have exactly 24 entries, got " + std::to_string(labels_.size()));
  std::set<std::string> seen;
  for (const auto& l : labels_) {
    CTXLM_REQUIRE(!l.empty(), "empty category label");
    CTXLM_REQUIRE(seen.insert(l).second, "duplicate category label: " + l);
  }
}

LabelSet LabelSet::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open label file: " + path);
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    labels.push_back(line);
  }
  return LabelSet(std::move(labels));
}

LabelSet LabelSet::default_topics() {
  return LabelSet({"Adult", "Art & Design", "Software Dev.", "Crime & Law", "Education & Jobs",
                   "Hardware", "Entertainment", "Social Life", "Fashion & Beauty",
                   "Finance & Business", "Food & Dining", "Games", "Health", "History",
                   "Home & Hobbies", "Industrial", "Literature", "Politics", "Religion",
                   "Science & Tech.", "Software", "Sports & Fitness", "Transportation", "Travel"});
}

LabelSet LabelSet::default_formats() {
  return LabelSet({"Academic Writing", "Content Listing", "Creative Writing", "Customer Support",
                   "Comment Section", "FAQ", "Truncated", "Knowledge Article", "Legal Notices",
                   "Listicle", "News Article", "Nonfiction Writing", "About (Org.)", "News (Org.)",
                   "About (Pers.)", "Personal Blog", "Product Page", "Q&A Forum", "Spam/Ads",
                   "Structured Data", "Documentation", "Audio Transcript", "Tutorial", "User Review"});
}

bool LabelSet::contains(const std::string& label) const {
  return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

void validate_metadata(const MetadataRecord& meta, const LabelSet* topics, const LabelSet* formats) {
  if (meta.quality_score && (*meta.quality_score < 0 || *meta.quality_score > 5))
    throw ValidationError("quality_score out of range 0..5: " + std::to_string(*meta.quality_score));
  if (topics && meta.topic && !topics->contains(*meta.topic))
    throw ValidationError("unknown topic label: " + *meta.topic);
  if (formats && meta.format && !formats->contains(*meta.format))
    throw ValidationError("unknown format label: " + *meta.format);
}

std::string render_context(const MetadataRecord& meta, const ContextSpec& spec) {
  validate_metadata(meta);
  std::vector<std::string> parts;
  for (auto field : spec.fields_included) {
    switch (field) {
      case ContextField::Url:
        if (meta.url) parts.push_back(spec.rendering_mode == RenderingMode::Labeled ? "URL: " + *meta.url : *meta.url);
        break;
      case ContextField::QualityScore:
        if (meta.quality_score) parts.push_back("Quality Score: " + std::to_string(*meta.quality_score));
        break;
      case ContextField::DomainInfo:
        if (meta.topic && meta.format)
          parts.push_back("Topic: " + *meta.topic + ", Format: " + *meta.format);
        else if (meta.topic)
          parts.push_back("Topic: " + *meta.topic);
        else if (meta.format)
          parts.push_back("Format: " + *meta.format);
        break;
    }
  }
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += '\n';
    out += parts[i];
  }
  return out;
}

std::string to_string(ContextField f) {
  switch (f) {
    case ContextField::Url: return "url";
    case ContextField::QualityScore: return "qs";
    case ContextField::DomainInfo: return "di";
  }
  return "?";
}

std::string to_string(RenderingMode m) { return m == RenderingMode::Labeled ? "labeled" : "raw"; }
std::string to_string(MixtureSchedule s) { return s == MixtureSchedule::Uniform ? "uniform" : "cooldown"; }

ContextField parse_context_field(const std::string& s) {
  if (s == "url" || s == "URL") return ContextField::Url;
  if (s == "qs" || s == "QS") return ContextField::QualityScore;
  if (s == "di" || s == "DI") return ContextField::DomainInfo;
  throw ValidationError("unknown context field: " + s);
}

RenderingMode parse_rendering_mode(const std::string& s) {
  if (s == "labeled") return RenderingMode::Labeled;
  if (s == "raw") return RenderingMode::Raw;
  throw ValidationError("unknown rendering mode: " + s);
}

MixtureSchedule parse_mixture_schedule(const std::string& s) {
  if (s == "uniform") return MixtureSchedule::Uniform;
  if (s == "cooldown") return MixtureSchedule::Cooldown;
  throw ValidationError("unknown schedule: " + s);
}

std::vector<ContextField> parse_field_list(const std::string& s) {
  std::vector<ContextField> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_context_field(item));
  }
  return out;
}

}  // namespace ctxlm
