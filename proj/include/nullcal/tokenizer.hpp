#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nullcal {

using TokenId = std::int32_t;

// Bijective token <-> id table; line index in vocab.txt is the id.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct SpecialTokens {
  TokenId mask = 0;
  TokenId cls = 0;
  TokenId sep = 0;
  TokenId pad = 0;
  TokenId unk = 0;
};

// Whitespace + punctuation splitter over an explicit vocabulary. Special
// token strings (e.g. "<mask>") embedded in text are recognized verbatim.
class Tokenizer {
 public:
  Tokenizer(Vocab vocab, SpecialTokens specials, bool lowercase = false);

  std::vector<TokenId> encode(std::string_view text) const;
  // Word pieces before id lookup (lowercased when configured).
  std::vector<std::string> split(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  const Vocab& vocab() const { return vocab_; }
  const SpecialTokens& specials() const { return specials_; }
  bool lowercase() const { return lowercase_; }
  bool is_special(TokenId id) const;
  TokenId id_or_unk(std::string_view piece) const;

 private:
  Vocab vocab_;
  SpecialTokens specials_;
  bool lowercase_;
  std::vector<std::string> special_strings_;
};

}  // namespace nullcal
