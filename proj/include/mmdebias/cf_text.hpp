#pragma once

#include <cctype>
#include <string>
#include <vector>

#include "mmdebias/errors.hpp"

namespace mmdebias {

// Per-sample phrase annotation: which phrases carry the meaning and which are
// replaceable context. Produced by an extractor model or by the synthetic
// generator's ground truth.
struct SemanticAnnotation {
  std::string sample_id;
  std::vector<std::string> semantic_phrases;
  std::vector<std::string> context_phrases;
};

struct PromptAsset {
  std::string name;
  std::string text;  // must contain exactly one %s slot
};

inline std::size_t count_slots(const std::string& text) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < text.size(); ++i)
    if (text[i] == '%' && text[i + 1] == 's') ++n;
  return n;
}

inline void validate_prompt(const PromptAsset& asset) {
  if (count_slots(asset.text) != 1)
    throw TemplateError("prompt '" + asset.name + "' must contain exactly one %s slot");
}

// Substitutes the sample text into the single slot, verbatim.
inline std::string render_prompt(const PromptAsset& asset, const std::string& sample_text) {
  validate_prompt(asset);
  std::size_t pos = asset.text.find("%s");
  std::string out = asset.text;
  out.replace(pos, 2, sample_text);
  return out;
}

// Instruction sent to the extractor for the text modality. The reply is
// expected to list the meaningful words under "Main Content Words:".
inline const std::string& text_analysis_template() {
  static const std::string t =
      "You are provided with an image from a tweet with the associated text: \"%s\". "
      "Identify and categorize the words in the text based on their semantic relevance:\n"
      "\n"
      "- Main Content Words: Extract words or phrases that provide meaningful semantic "
      "clues, such as emotional, thematic, or descriptive elements.\n"
      "- Context Words: Extract words or phrases that are generic, stylistic, or "
      "non-essential (e.g., stop words, filler adjectives) and do not contribute "
      "significant semantic value.\n"
      "\n"
      "Output Format:\n"
      "- Analysis Process: Provide a brief explanation of how the main content words were "
      "identified and their relation with the image. Highlight how the context words were "
      "separated based on their lack of semantic importance.\n"
      "- Main Content Words: [List of words/phrases]\n"
      "- Context Words: [List of words/phrases]\n";
  return t;
}

// Instruction for the image modality; the reply lists the regions that carry
// the meaning under "Main Content Elements:".
inline const std::string& image_analysis_template() {
  static const std::string t =
      "You are provided with an image from a tweet with the associated text: \"%s\". "
      "Analyze the image and categorize its visual elements based on their semantic "
      "relevance:\n"
      "\n"
      "- Main Content Elements: Identify objects, scenes, or regions that provide "
      "meaningful semantic clues, such as emotional, thematic, or descriptive content.\n"
      "- Context Elements: Identify visual elements that are generic, decorative, or "
      "non-essential (e.g., backgrounds, borders) and do not contribute significant "
      "semantic value.\n"
      "\n"
      "Output Format:\n"
      "- Analysis Process: Provide a brief explanation of how the main content elements "
      "were identified and their relation with the text. Highlight how the context "
      "elements were separated based on their lack of semantic importance.\n"
      "- Main Content Elements: [List of elements]\n"
      "- Context Elements: [List of elements]\n";
  return t;
}

inline PromptAsset text_analysis_prompt() { return {"text-analysis", text_analysis_template()}; }
inline PromptAsset image_analysis_prompt() { return {"image-analysis", image_analysis_template()}; }

namespace detail {

inline bool is_word_char(char c) {
  unsigned char u = static_cast<unsigned char>(c);
  return std::isalnum(u) != 0 || c == '_';
}

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline std::string ascii_lower_copy(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = ascii_lower(c);
  return out;
}

inline std::string trim_phrase(const std::string& s) {
  std::size_t b = 0, e = s.size();
  auto strippable = [](char c) {
    unsigned char u = static_cast<unsigned char>(c);
    return std::isspace(u) != 0 || c == '"' || c == '\'' || c == '`';
  };
  while (b < e && strippable(s[b])) ++b;
  while (e > b && strippable(s[e - 1])) --e;
  return s.substr(b, e - b);
}

}  // namespace detail

// Pulls the bracketed list that follows `heading` out of an extractor reply.
// Phrases are comma separated inside one [...] span; surrounding whitespace
// and quote characters are stripped, empties dropped, duplicates removed
// case-insensitively while preserving first-seen order.
inline std::vector<std::string> parse_phrase_list(const std::string& response,
                                                  const std::string& heading) {
  std::size_t h = response.find(heading);
  if (h == std::string::npos) throw ParseError("extractor reply lacks heading '" + heading + "'");
  std::size_t open = response.find('[', h + heading.size());
  if (open == std::string::npos) throw ParseError("no [ after heading '" + heading + "'");
  std::size_t close = response.find(']', open + 1);
  if (close == std::string::npos) throw ParseError("unterminated list after '" + heading + "'");
  std::string body = response.substr(open + 1, close - open - 1);

  std::vector<std::string> out;
  std::vector<std::string> seen_lower;
  std::size_t start = 0;
  while (start <= body.size()) {
    std::size_t comma = body.find(',', start);
    std::string piece =
        comma == std::string::npos ? body.substr(start) : body.substr(start, comma - start);
    std::string phrase = detail::trim_phrase(piece);
    if (!phrase.empty()) {
      std::string low = detail::ascii_lower_copy(phrase);
      bool dup = false;
      for (const auto& s : seen_lower)
        if (s == low) {
          dup = true;
          break;
        }
      if (!dup) {
        out.push_back(phrase);
        seen_lower.push_back(low);
      }
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline const char* kMainContentWordsHeading = "Main Content Words:";
inline const char* kMainContentElementsHeading = "Main Content Elements:";

// Parses a full extractor reply for the text modality into an annotation.
inline SemanticAnnotation parse_extractor_response(const std::string& sample_id,
                                                   const std::string& response) {
  SemanticAnnotation ann;
  ann.sample_id = sample_id;
  ann.semantic_phrases = parse_phrase_list(response, kMainContentWordsHeading);
  try {
    ann.context_phrases = parse_phrase_list(response, "Context Words:");
  } catch (const ParseError&) {
    // context list is optional; masking only needs the semantic phrases
  }
  return ann;
}

struct MaskResult {
  std::string text;
  std::vector<std::string> matched;  // phrases replaced at least once
  std::vector<std::string> missed;   // phrases never found in the text
  std::size_t replacements = 0;
};

// Replaces every case-insensitive, word-boundary occurrence of each semantic
// phrase with the mask token. At each position the longest matching phrase
// wins; spans already equal to the mask token are skipped, which makes the
// operation idempotent. Phrases absent from the text leave it unchanged and
// are reported in `missed`.
inline MaskResult apply_mask_detailed(const std::string& text, const SemanticAnnotation& ann,
                                      const std::string& mask_token = "[MASK]") {
  if (mask_token.empty()) throw ConfigError("apply_mask: empty mask token");
  std::string lower = detail::ascii_lower_copy(text);

  std::vector<std::string> phrases;   // lowercased, trimmed
  std::vector<std::string> originals;  // as annotated, for reporting
  for (const auto& p : ann.semantic_phrases) {
    std::string t = detail::trim_phrase(p);
    if (t.empty()) continue;
    phrases.push_back(detail::ascii_lower_copy(t));
    originals.push_back(p);
  }

  MaskResult res;
  std::vector<bool> hit(phrases.size(), false);
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, mask_token.size(), mask_token) == 0) {
      out += mask_token;
      i += mask_token.size();
      continue;
    }
    std::size_t best_len = 0;
    std::size_t best_idx = 0;
    bool prev_is_word = (i > 0) && detail::is_word_char(text[i - 1]);
    for (std::size_t p = 0; p < phrases.size(); ++p) {
      const std::string& ph = phrases[p];
      if (ph.size() <= best_len) continue;
      if (i + ph.size() > text.size()) continue;
      // word-boundary checks apply only where the phrase edge is a word char
      if (prev_is_word && detail::is_word_char(ph.front())) continue;
      if (lower.compare(i, ph.size(), ph) != 0) continue;
      std::size_t end = i + ph.size();
      if (end < text.size() && detail::is_word_char(text[end]) &&
          detail::is_word_char(ph.back()))
        continue;
      best_len = ph.size();
      best_idx = p;
    }
    if (best_len > 0) {
      out += mask_token;
      i += best_len;
      hit[best_idx] = true;
      ++res.replacements;
    } else {
      out += text[i];
      ++i;
    }
  }
  for (std::size_t p = 0; p < phrases.size(); ++p)
    (hit[p] ? res.matched : res.missed).push_back(originals[p]);
  res.text = std::move(out);
  return res;
}

inline std::string apply_mask(const std::string& text, const SemanticAnnotation& ann,
                              const std::string& mask_token = "[MASK]") {
  return apply_mask_detailed(text, ann, mask_token).text;
}

}  // namespace mmdebias
