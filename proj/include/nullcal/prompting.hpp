#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nullcal/errors.hpp"
#include "nullcal/tokenizer.hpp"

namespace nullcal {

inline constexpr std::string_view kSentenceSlot = "{sentence}";
inline constexpr std::string_view kAspectSlot = "{aspect}";
inline constexpr std::string_view kMaskSlot = "<mask>";

// Cloze template, e.g. "{sentence} It is about <mask>." with answer format
// "It is about <mask>.". Aspect-level tasks add an "{aspect}" slot.
struct PromptTemplate {
  std::string text;
  std::string answer_format;

  bool uses_aspect() const { return text.find(kAspectSlot) != std::string::npos; }
};

// Ordered labels and the single vocabulary word standing in for each.
struct Verbalizer {
  std::vector<std::string> labels;
  std::vector<std::string> words;

  std::size_t size() const { return labels.size(); }
  std::optional<std::size_t> index_of(std::string_view label) const;
};

// Contents of a template file:
// {"template": str, "answer_format": str, "labels": [str], "label_words": [str]}
struct TaskPrompt {
  PromptTemplate prompt;
  Verbalizer verbalizer;

  static TaskPrompt from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

TaskPrompt load_task_prompt(const std::filesystem::path& path);

struct Demonstration {
  std::string text;
  std::optional<std::string> aspect;
  std::string label;
};

using DemonstrationSet = std::vector<Demonstration>;

// Every violated invariant as a readable message; empty means valid.
std::vector<std::string> validate(const PromptTemplate& prompt, const Verbalizer& verbalizer,
                                  const Tokenizer& tokenizer);

// Token id of each label word, in label order. Throws ConfigError listing the
// violations when the pair does not validate.
std::vector<TokenId> resolve_label_tokens(const PromptTemplate& prompt, const Verbalizer& verbalizer,
                                          const Tokenizer& tokenizer);

// Thrown by render_with_demos when the concatenation is too long.
class DemoOverflowError : public OverlengthError {
 public:
  DemoOverflowError(const std::string& what, std::size_t length, std::size_t limit, std::size_t demos_that_fit)
      : OverlengthError(what, length, limit), demos_that_fit_(demos_that_fit) {}
  std::size_t demos_that_fit() const { return demos_that_fit_; }

 private:
  std::size_t demos_that_fit_;
};

// Produces "<s> {template with sentence/aspect} </s>" as token ids, holding
// exactly one mask id. Throws RenderError (OverlengthError past max_len).
std::vector<TokenId> render_prompt(const PromptTemplate& prompt, const Tokenizer& tokenizer,
                                   std::string_view sentence, std::optional<std::string_view> aspect,
                                   std::size_t max_len);

// Null-input prompts are ordinary prompts over null text.
inline std::vector<TokenId> render_null_prompt(const PromptTemplate& prompt, const Tokenizer& tokenizer,
                                               std::string_view null_text, std::optional<std::string_view> aspect,
                                               std::size_t max_len) {
  return render_prompt(prompt, tokenizer, null_text, aspect, max_len);
}

// Query prompt followed by one "</s>"-terminated segment per demonstration
// with the mask replaced by V(label).
std::vector<TokenId> render_with_demos(const PromptTemplate& prompt, const Tokenizer& tokenizer,
                                       std::string_view sentence, std::optional<std::string_view> aspect,
                                       const DemonstrationSet& demos, const Verbalizer& verbalizer,
                                       std::size_t max_len);

}  // namespace nullcal
