#include "nullcal/null_corpus.hpp"

namespace nullcal {

const std::vector<std::string>& builtin_null_catalog() {
  static const std::vector<std::string> catalog = {
      "This is an example sentence.",
      "A message without purpose.",
      "Words without message.",
      "123abc",
      "!@#$%^&*()-_=+[]{}",
      "////////////////////",
      "An empty sentence.",
      "N/A",
      "Null",
      "None.",
      "Nothing to see here.",
      "This sentence has no meaning.",
      "Just some text.",
      "Random words in a row.",
      "Text goes here.",
      "Placeholder text.",
      "Lorem ipsum dolor sit amet.",
      "Blah blah blah.",
      "Something something.",
      "An ordinary sentence.",
      "It is a sentence.",
      "Here is a statement.",
      "This is a line of text.",
      "Some words.",
      "Filler content.",
      "Meaningless phrase.",
      "A sentence with no point.",
      "Words and more words.",
      "This is just a test.",
      "Sample input.",
      "Example text for testing.",
      "Nothing in particular.",
      "No content.",
      "Empty.",
      "Void.",
      "Blank.",
      "Unspecified.",
      "Generic statement.",
      "A phrase.",
      "The text.",
      "Something.",
      "Whatever.",
      "And so on.",
      "Et cetera.",
      "Etc.",
      "Hmm.",
      "Um.",
      "And then.",
      "So it goes.",
      "It is what it is.",
      "There is a thing.",
      "A thing exists.",
      "The item is here.",
      "This exists.",
      "A word.",
      "Another sentence.",
      "Yet another line.",
      "The end.",
      "Begin.",
      "...",
      "---",
      "***",
      "???",
      "###",
      "abc",
      "xyz",
      "qwerty",
      "asdf",
      "aaa bbb ccc",
      "1 2 3",
      "000",
      "a b c d e",
      "foo bar",
      "baz",
  };
  return catalog;
}

}  // namespace nullcal
