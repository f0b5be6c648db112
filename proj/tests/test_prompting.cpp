#include <gtest/gtest.h>

#include <fstream>

#include "nullcal/prompting.hpp"
#include "test_support.hpp"

using namespace nullcal;
using namespace nullcal::testing;

TEST(Tokenizer, SplitsPunctuationAndKeepsSpecials) {
  const Tokenizer tok = tiny_tokenizer();
  EXPECT_EQ(tok.split("The movie was <mask>."), (std::vector<std::string>{"the", "movie", "was", "<mask>", "."}));
  EXPECT_EQ(tok.encode("zebra"), std::vector<TokenId>{4});
  EXPECT_TRUE(tok.is_special(0));
  EXPECT_FALSE(tok.is_special(8));
}

TEST(Vocab, RejectsDuplicatesAndEmptyTokens) {
  EXPECT_THROW(Vocab({"a", "b", "a"}), LoadError);
  EXPECT_THROW(Vocab({"a", ""}), LoadError);
}

TEST(Prompt, RenderWrapsTemplateWithSpecials) {
  const Tokenizer tok = tiny_tokenizer();
  const auto task = sentiment_task();
  const auto ids = render_prompt(task.prompt, tok, "a film", std::nullopt, 32);
  EXPECT_EQ(tok.decode(ids), "<s> a film the movie was <mask> . </s>");
  EXPECT_EQ(render_null_prompt(task.prompt, tok, "a film", std::nullopt, 32), ids);
}

TEST(Prompt, SentenceTextIsNotReinterpreted) {
  const Tokenizer tok = tiny_tokenizer();
  PromptTemplate p{"{sentence} {aspect} was <mask>.", "{aspect} was <mask>."};
  const auto ids = render_prompt(p, tok, "{aspect} film", std::string_view("movie"), 32);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), tok.specials().mask), 1);
  EXPECT_THROW(render_prompt(p, tok, "film", std::nullopt, 32), RenderError);
  EXPECT_THROW(render_prompt(sentiment_task().prompt, tok, "film", std::string_view("movie"), 32), RenderError);
}

TEST(Prompt, MaskInsideSentenceIsRejected) {
  const Tokenizer tok = tiny_tokenizer();
  EXPECT_THROW(render_prompt(sentiment_task().prompt, tok, "a <mask> film", std::nullopt, 32), RenderError);
}

TEST(Prompt, OverlengthCarriesLengthAndLimit) {
  const Tokenizer tok = tiny_tokenizer();
  try {
    render_prompt(sentiment_task().prompt, tok, "a film", std::nullopt, 5);
    FAIL();
  } catch (const OverlengthError& e) {
    EXPECT_EQ(e.length(), 9u);
    EXPECT_EQ(e.limit(), 5u);
  }
}

TEST(Prompt, DemonstrationsFillTheMaskWithLabelWords) {
  const Tokenizer tok = tiny_tokenizer();
  const auto task = sentiment_task();
  const DemonstrationSet demos{{"good", std::nullopt, "positive"}, {"bad", std::nullopt, "negative"}};
  const auto ids = render_with_demos(task.prompt, tok, "a film", std::nullopt, demos, task.verbalizer, 64);
  EXPECT_EQ(tok.decode(ids),
            "<s> a film the movie was <mask> . </s> good the movie was great . </s> bad the movie was terrible . </s>");
  EXPECT_EQ(render_with_demos(task.prompt, tok, "a film", std::nullopt, {}, task.verbalizer, 64),
            render_prompt(task.prompt, tok, "a film", std::nullopt, 64));
}

TEST(Prompt, DemoOverflowReportsHowManyFit) {
  const Tokenizer tok = tiny_tokenizer();
  const auto task = sentiment_task();
  const DemonstrationSet demos{{"good", std::nullopt, "positive"}, {"bad", std::nullopt, "negative"}};
  // Query is 9 tokens, each demo segment adds 7.
  try {
    render_with_demos(task.prompt, tok, "a film", std::nullopt, demos, task.verbalizer, 20);
    FAIL();
  } catch (const DemoOverflowError& e) {
    EXPECT_EQ(e.demos_that_fit(), 1u);
    EXPECT_EQ(e.length(), 23u);
  }
  const DemonstrationSet unknown{{"good", std::nullopt, "great"}};
  EXPECT_THROW(render_with_demos(task.prompt, tok, "a", std::nullopt, unknown, task.verbalizer, 64), ConfigError);
}

TEST(Prompt, ValidationListsEveryViolation) {
  const Tokenizer tok = tiny_tokenizer();
  PromptTemplate bad{"{sentence} <mask> <mask>", "It is <mask>."};
  Verbalizer v{{"a", "b", "c"}, {"great", "Zebra", "great"}};
  const auto problems = validate(bad, v, tok);
  EXPECT_GE(problems.size(), 4u);
  EXPECT_TRUE(validate(sentiment_task().prompt, sentiment_task().verbalizer, tok).empty());
  EXPECT_THROW(resolve_label_tokens(bad, v, tok), ConfigError);
  EXPECT_EQ(resolve_label_tokens(sentiment_task().prompt, sentiment_task().verbalizer, tok),
            (std::vector<TokenId>{9, 8}));
}

TEST(Prompt, CasingMismatchIsNamed) {
  const Vocab v({"<mask>", "<s>", "</s>", "<pad>", "<unk>", "Great", "bad", "."});
  const Tokenizer tok(v, tiny_config(v.size()).specials(), false);
  PromptTemplate p{"{sentence} <mask>.", ""};
  const auto problems = validate(p, Verbalizer{{"pos", "neg"}, {"great", "bad"}}, tok);
  ASSERT_EQ(problems.size(), 1u);
  EXPECT_NE(problems[0].find("casing"), std::string::npos);
}

TEST(Prompt, SpecialTokenLabelWordRejected) {
  const Tokenizer tok = tiny_tokenizer();
  EXPECT_FALSE(validate(sentiment_task().prompt, Verbalizer{{"a", "b"}, {"great", "<unk>"}}, tok).empty());
}

TEST(Prompt, TaskFileRoundTrip) {
  TempDir dir("prompt");
  const auto task = three_way_task();
  std::ofstream(dir / "t.json") << task.to_json().dump();
  const auto loaded = load_task_prompt(dir / "t.json");
  EXPECT_EQ(loaded.to_json(), task.to_json());
  std::ofstream(dir / "bad.json") << "{\"template\": 3}";
  EXPECT_THROW(load_task_prompt(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_task_prompt(dir / "none.json"), ConfigError);
}

TEST(Prompt, ShippedTemplatesValidate) {
  const std::filesystem::path data = NULLCAL_DATA_DIR;
  std::size_t seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(data / "templates")) {
    const auto task = load_task_prompt(entry.path());
    // Every label word must be a single piece; build a vocabulary that holds
    // the template words so resolution can be checked offline.
    std::vector<std::string> tokens{"<mask>", "<s>", "</s>", "<pad>", "<unk>"};
    for (const auto& w : task.verbalizer.words) tokens.push_back(w);
    const Vocab v(tokens);
    const Tokenizer tok(v, tiny_config(v.size()).specials(), false);
    EXPECT_TRUE(validate(task.prompt, task.verbalizer, tok).empty()) << entry.path();
    ++seen;
  }
  EXPECT_GE(seen, 6u);
}
