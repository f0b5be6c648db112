#include "nullcal/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

namespace nullcal {
namespace {

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = haystack.find(needle); pos != std::string_view::npos;
       pos = haystack.find(needle, pos + needle.size()))
    ++n;
  return n;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

std::string with_case(std::string s, int mode) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto c = static_cast<unsigned char>(s[i]);
    if (mode == 0) s[i] = static_cast<char>(std::tolower(c));
    if (mode == 1) s[i] = static_cast<char>(std::toupper(c));
    if (mode == 2) s[i] = static_cast<char>(i == 0 ? std::toupper(c) : std::tolower(c));
  }
  return s;
}

// Substitutes the template slots. When answer_word is set, the mask is
// replaced first so that text inside the sentence is never touched.
std::string fill(const PromptTemplate& prompt, std::string_view sentence, std::optional<std::string_view> aspect,
                 std::optional<std::string_view> answer_word) {
  if (prompt.uses_aspect() && !aspect) throw RenderError("template needs an aspect but none was given");
  if (!prompt.uses_aspect() && aspect) throw RenderError("aspect given but the template has no {aspect} slot");
  std::string out = prompt.text;
  if (answer_word) replace_all(out, kMaskSlot, *answer_word);
  // Placeholders are substituted by position so sentence text containing
  // "{aspect}" is left alone.
  std::string result;
  std::size_t i = 0;
  while (i < out.size()) {
    if (out.compare(i, kSentenceSlot.size(), kSentenceSlot) == 0) {
      result += sentence;
      i += kSentenceSlot.size();
    } else if (aspect && out.compare(i, kAspectSlot.size(), kAspectSlot) == 0) {
      result += *aspect;
      i += kAspectSlot.size();
    } else {
      result.push_back(out[i++]);
    }
  }
  return result;
}

}  // namespace

std::optional<std::size_t> Verbalizer::index_of(std::string_view label) const {
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) return std::nullopt;
  return static_cast<std::size_t>(it - labels.begin());
}

TaskPrompt TaskPrompt::from_json(const nlohmann::json& j) {
  TaskPrompt t;
  try {
    t.prompt.text = j.at("template").get<std::string>();
    t.prompt.answer_format = j.value("answer_format", std::string{});
    t.verbalizer.labels = j.at("labels").get<std::vector<std::string>>();
    t.verbalizer.words = j.at("label_words").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("template file: ") + e.what());
  }
  return t;
}

nlohmann::json TaskPrompt::to_json() const {
  return {{"template", prompt.text},
          {"answer_format", prompt.answer_format},
          {"labels", verbalizer.labels},
          {"label_words", verbalizer.words}};
}

TaskPrompt load_task_prompt(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open template file " + path.string());
  try {
    return TaskPrompt::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> validate(const PromptTemplate& prompt, const Verbalizer& verbalizer,
                                  const Tokenizer& tokenizer) {
  std::vector<std::string> v;
  const auto masks = count_occurrences(prompt.text, kMaskSlot);
  if (masks != 1) v.push_back("template must contain exactly one <mask>, found " + std::to_string(masks));
  const auto sentences = count_occurrences(prompt.text, kSentenceSlot);
  if (sentences != 1) v.push_back("template must contain {sentence} exactly once, found " + std::to_string(sentences));
  if (!prompt.answer_format.empty()) {
    if (count_occurrences(prompt.answer_format, kMaskSlot) != 1) {
      v.push_back("answer format must contain exactly one <mask>");
    }
    if (prompt.text.find(prompt.answer_format) == std::string::npos) {
      v.push_back("answer format '" + prompt.answer_format + "' does not occur in the template");
    }
  }

  if (verbalizer.labels.size() < 2) v.push_back("verbalizer needs at least two labels");
  if (verbalizer.labels.size() != verbalizer.words.size()) {
    v.push_back("labels and label_words differ in length");
    return v;
  }
  std::set<std::string> seen_labels;
  std::set<TokenId> seen_tokens;
  for (std::size_t i = 0; i < verbalizer.words.size(); ++i) {
    const auto& word = verbalizer.words[i];
    if (!seen_labels.insert(verbalizer.labels[i]).second) v.push_back("duplicate label '" + verbalizer.labels[i] + "'");
    const auto pieces = tokenizer.split(word);
    if (pieces.size() != 1) {
      v.push_back("label word '" + word + "' tokenizes to " + std::to_string(pieces.size()) + " tokens");
      continue;
    }
    const auto id = tokenizer.vocab().find(pieces[0]);
    if (!id) {
      bool other_case = false;
      for (int mode = 0; mode < 3; ++mode) other_case = other_case || tokenizer.vocab().find(with_case(word, mode));
      v.push_back(other_case ? "casing mismatch: label word '" + word + "' is only in the vocabulary with other casing"
                             : "label word '" + word + "' is not in the vocabulary");
      continue;
    }
    if (tokenizer.is_special(*id)) {
      v.push_back("label word '" + word + "' is a special token");
      continue;
    }
    if (!seen_tokens.insert(*id).second) v.push_back("duplicate label token '" + word + "'");
  }
  return v;
}

std::vector<TokenId> resolve_label_tokens(const PromptTemplate& prompt, const Verbalizer& verbalizer,
                                          const Tokenizer& tokenizer) {
  const auto violations = validate(prompt, verbalizer, tokenizer);
  if (!violations.empty()) {
    std::string msg = "invalid template/verbalizer:";
    for (const auto& s : violations) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  std::vector<TokenId> ids;
  for (const auto& w : verbalizer.words) ids.push_back(*tokenizer.vocab().find(tokenizer.split(w)[0]));
  return ids;
}

std::vector<TokenId> render_prompt(const PromptTemplate& prompt, const Tokenizer& tokenizer,
                                   std::string_view sentence, std::optional<std::string_view> aspect,
                                   std::size_t max_len) {
  std::vector<TokenId> ids{tokenizer.specials().cls};
  const auto body = tokenizer.encode(fill(prompt, sentence, aspect, std::nullopt));
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(tokenizer.specials().sep);
  const auto masks = std::count(ids.begin(), ids.end(), tokenizer.specials().mask);
  if (masks != 1) throw RenderError("rendered prompt holds " + std::to_string(masks) + " mask tokens, expected 1");
  if (ids.size() > max_len) {
    throw OverlengthError("prompt of " + std::to_string(ids.size()) + " tokens exceeds limit " + std::to_string(max_len),
                          ids.size(), max_len);
  }
  return ids;
}

std::vector<TokenId> render_with_demos(const PromptTemplate& prompt, const Tokenizer& tokenizer,
                                       std::string_view sentence, std::optional<std::string_view> aspect,
                                       const DemonstrationSet& demos, const Verbalizer& verbalizer,
                                       std::size_t max_len) {
  std::vector<TokenId> ids{tokenizer.specials().cls};
  const auto query = tokenizer.encode(fill(prompt, sentence, aspect, std::nullopt));
  ids.insert(ids.end(), query.begin(), query.end());
  ids.push_back(tokenizer.specials().sep);
  const auto masks = std::count(ids.begin(), ids.end(), tokenizer.specials().mask);
  if (masks != 1) throw RenderError("rendered prompt holds " + std::to_string(masks) + " mask tokens, expected 1");

  const bool query_fits = ids.size() <= max_len;
  std::size_t fit = 0;
  for (const auto& demo : demos) {
    const auto label = verbalizer.index_of(demo.label);
    if (!label) throw ConfigError("demonstration label '" + demo.label + "' is not in the verbalizer");
    std::optional<std::string_view> demo_aspect;
    if (demo.aspect) demo_aspect = *demo.aspect;
    const auto segment = tokenizer.encode(fill(prompt, demo.text, demo_aspect, verbalizer.words[*label]));
    if (std::count(segment.begin(), segment.end(), tokenizer.specials().mask) != 0) {
      throw RenderError("demonstration text contains a mask token");
    }
    ids.insert(ids.end(), segment.begin(), segment.end());
    ids.push_back(tokenizer.specials().sep);
    if (query_fits && ids.size() <= max_len) ++fit;
  }
  if (ids.size() > max_len) {
    throw DemoOverflowError("prompt with " + std::to_string(demos.size()) + " demonstrations has " +
                                std::to_string(ids.size()) + " tokens, limit " + std::to_string(max_len) + "; " +
                                std::to_string(fit) + " demonstrations fit",
                            ids.size(), max_len, fit);
  }
  return ids;
}

}  // namespace nullcal
