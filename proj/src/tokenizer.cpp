#include "nullcal/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "nullcal/errors.hpp"

namespace nullcal {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw LoadError("vocab: empty token at id " + std::to_string(i));
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw LoadError("vocab: token '" + tokens_[i] + "' appears at ids " + std::to_string(it->second) + " and " +
                      std::to_string(i));
    }
  }
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open vocab file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocab file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocab of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

Tokenizer::Tokenizer(Vocab vocab, SpecialTokens specials, bool lowercase)
    : vocab_(std::move(vocab)), specials_(specials), lowercase_(lowercase) {
  for (TokenId id : {specials_.mask, specials_.cls, specials_.sep, specials_.pad, specials_.unk}) {
    special_strings_.push_back(vocab_.token(id));
  }
  // Longest first so "</s>" wins over a hypothetical "<s" prefix.
  std::sort(special_strings_.begin(), special_strings_.end(),
            [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
}

bool Tokenizer::is_special(TokenId id) const {
  return id == specials_.mask || id == specials_.cls || id == specials_.sep || id == specials_.pad ||
         id == specials_.unk;
}

std::vector<std::string> Tokenizer::split(std::string_view text) const {
  std::vector<std::string> pieces;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    if (lowercase_) {
      for (auto& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    pieces.push_back(std::move(word));
    word.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const auto ch = static_cast<unsigned char>(text[i]);
    if (ch == '<') {
      auto special = std::find_if(special_strings_.begin(), special_strings_.end(),
                                  [&](const std::string& s) { return text.substr(i, s.size()) == s; });
      if (special != special_strings_.end()) {
        flush();
        pieces.push_back(*special);
        i += special->size();
        continue;
      }
    }
    if (std::isspace(ch)) {
      flush();
    } else if (ch < 0x80 && std::ispunct(ch)) {
      flush();
      pieces.emplace_back(1, static_cast<char>(ch));
    } else {
      word.push_back(static_cast<char>(ch));
    }
    ++i;
  }
  flush();
  return pieces;
}

TokenId Tokenizer::id_or_unk(std::string_view piece) const {
  return vocab_.find(piece).value_or(specials_.unk);
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& piece : split(text)) ids.push_back(id_or_unk(piece));
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab_.token(ids[i]);
  }
  return out;
}

}  // namespace nullcal
