#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "peftcap/dataset.hpp"
#include "peftcap/errors.hpp"

using namespace peftcap;
using namespace peftcap::data;

namespace {

std::string alternatives(const std::vector<std::string>& words) {
  std::string out = "(";
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? "|" : "") + words[i];
  return out + ")";
}

struct Parsed {
  std::string cat, e1, e2;
};

// Matches a caption against the template grammar of its domain.
std::optional<Parsed> parse_caption(const std::string& caption, Domain domain) {
  std::vector<std::string> nouns;
  for (const auto& k : element_kinds()) nouns.push_back(element_words(k));
  const std::string cat = alternatives(categories());
  const std::string noun = alternatives(nouns);
  for (const auto& tpl : caption_templates(domain)) {
    std::vector<std::string> order;
    std::string pattern;
    for (std::size_t i = 0; i < tpl.size();) {
      if (tpl[i] == '{') {
        const auto close = tpl.find('}', i);
        const auto slot = tpl.substr(i + 1, close - i - 1);
        order.push_back(slot);
        pattern += slot == "cat" ? cat : noun;
        i = close + 1;
      } else {
        pattern += tpl[i++];
      }
    }
    std::smatch m;
    if (!std::regex_match(caption, m, std::regex(pattern))) continue;
    Parsed p;
    for (std::size_t g = 0; g < order.size(); ++g) {
      if (order[g] == "cat") p.cat = m[g + 1];
      if (order[g] == "e1") p.e1 = m[g + 1];
      if (order[g] == "e2") p.e2 = m[g + 1];
    }
    return p;
  }
  return std::nullopt;
}

bool same_sample(const Sample& a, const Sample& b) {
  return a.id == b.id && a.captions == b.captions && a.category == b.category &&
         a.elements.size() == b.elements.size() && testing::bitwise_equal(a.image, b.image);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("peftcap_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("corpora are deterministic") {
  for (auto domain : {Domain::general, Domain::screen}) {
    auto a = generate_corpus(5, 30, domain);
    auto b = generate_corpus(5, 30, domain);
    REQUIRE(a.size() == 30);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_sample(a[i], b[i]));
    CHECK(same_sample(generate_sample(5, 17, domain), a[17]));
    auto other = generate_corpus(6, 30, domain);
    CHECK_FALSE(testing::bitwise_equal(other[0].image, a[0].image));
  }
  CHECK_THROWS_AS(generate_corpus(1, 9, Domain::screen), DataError);
}

TEST_CASE("samples have five captions and images in range") {
  for (auto domain : {Domain::general, Domain::screen}) {
    for (const auto& s : generate_corpus(11, 40, domain)) {
      CHECK(s.captions.size() == 5);
      CHECK(s.image.shape() == Shape{3, 64, 64});
      for (const auto& c : s.captions) CHECK_FALSE(c.empty());
      const auto [lo, hi] = std::minmax_element(s.image.data().begin(), s.image.data().end());
      CHECK(*lo >= 0.0);
      CHECK(*hi <= 1.0);
    }
  }
}

TEST_CASE("captions name elements from the scene") {
  for (auto domain : {Domain::general, Domain::screen}) {
    auto corpus = generate_corpus(3, 100, domain);
    for (const auto& s : corpus) {
      std::set<std::string> present;
      for (const auto& e : s.elements) present.insert(element_words(e.kind));
      std::set<std::string> distinct(s.captions.begin(), s.captions.end());
      CHECK(distinct.size() == 5);
      for (const auto& c : s.captions) {
        CAPTURE(c);
        auto parsed = parse_caption(c, domain);
        REQUIRE(parsed.has_value());
        if (!parsed->cat.empty()) CHECK(parsed->cat == s.category);
        CHECK(present.contains(parsed->e1));
        if (!parsed->e2.empty()) CHECK(present.contains(parsed->e2));
      }
    }
  }
}

TEST_CASE("screen elements sit on the grid") {
  for (const auto& s : generate_corpus(4, 50, Domain::screen)) {
    CHECK(s.elements.size() == 3);
    for (const auto& e : s.elements) {
      CHECK(e.row >= 0);
      CHECK(e.col >= 0);
      CHECK(e.col + e.width <= int(kGridCells));
      CHECK(e.row < int(kGridCells));
    }
  }
}

TEST_CASE("general objects occupy separate halves, first one leading") {
  int stacked = 0;
  for (const auto& s : generate_corpus(4, 200, Domain::general)) {
    REQUIRE(s.elements.size() == 2);
    const auto& first = s.elements[0];
    const auto& second = s.elements[1];
    CHECK(first.kind != second.kind);
    const bool side_by_side = first.col + first.width <= 32 && second.col >= 32;
    const bool above = first.row + first.height <= 32 && second.row >= 32;
    CHECK((side_by_side || above));
    for (const auto& e : s.elements) {
      CHECK(e.col + e.width <= 64);
      CHECK(e.row + e.height <= 64);
    }
    stacked += above && !side_by_side;
  }
  CHECK(stacked > 50);
  CHECK(stacked < 150);
}

TEST_CASE("split examples") {
  auto corpus = generate_corpus(2, 100, Domain::screen);
  split(corpus, {0.8, 0.1, 0.1}, 9);
  CHECK(select(corpus, Split::train).size() == 80);
  CHECK(select(corpus, Split::val).size() == 10);
  CHECK(select(corpus, Split::test).size() == 10);
  CHECK(select(corpus, Split::none).empty());

  std::set<int> seen;
  for (auto part : {Split::train, Split::val, Split::test})
    for (const auto* s : select(corpus, part)) CHECK(seen.insert(s->id).second);
  CHECK(seen.size() == 100);

  auto again = generate_corpus(2, 100, Domain::screen);
  split(again, {0.8, 0.1, 0.1}, 9);
  for (std::size_t i = 0; i < 100; ++i) CHECK(again[i].split == corpus[i].split);
  auto reshuffled = generate_corpus(2, 100, Domain::screen);
  split(reshuffled, {0.8, 0.1, 0.1}, 10);
  bool differs = false;
  for (std::size_t i = 0; i < 100; ++i) differs |= reshuffled[i].split != corpus[i].split;
  CHECK(differs);

  CHECK_THROWS_AS(split(corpus, {0.8, 0.1, 0.2}, 1), DataError);
  auto tiny = generate_corpus(2, 10, Domain::screen);
  CHECK_THROWS_AS(split(tiny, {0.9, 0.1, 0.0}, 1), DataError);
}

TEST_CASE("duplication for training") {
  auto s = generate_sample(1, 0, Domain::screen);
  auto pairs = duplicate_for_training(s);
  REQUIRE(pairs.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(pairs[i].caption == s.captions[i]);
    CHECK(pairs[i].image.impl() == s.image.impl());
  }
  s.captions.pop_back();
  CHECK_THROWS_AS(duplicate_for_training(s), DataError);
}

TEST_CASE("vocabulary and tokenization") {
  auto corpus = generate_corpus(8, 60, Domain::screen);
  auto vocab = build_vocab(corpus);
  CHECK(vocab.token(0) == "<pad>");
  CHECK(vocab.id("<bos>") == 1);
  CHECK(vocab.id("<eos>") == 2);
  CHECK(vocab.id("<unk>") == 3);
  for (std::size_t i = 0; i < vocab.size(); ++i) CHECK(vocab.id(vocab.token(int(i))) == int(i));

  for (const auto& s : corpus)
    for (const auto& c : s.captions) CHECK(detokenize(tokenize(c, vocab), vocab) == lowercase(c));

  CHECK(tokenize("", vocab) == std::vector<int>{1, 2});
  CHECK(tokenize("Zebra", vocab) == std::vector<int>{1, 3, 2});
  CHECK(tokenize("The  APP", vocab).size() == 4);

  auto file = scratch_dir("vocab");
  std::filesystem::create_directories(file);
  vocab.save(file / "vocab.txt");
  auto loaded = Vocab::load(file / "vocab.txt");
  CHECK(loaded.tokens() == vocab.tokens());
  std::filesystem::remove_all(file);
}

TEST_CASE("corpus export round trip") {
  auto corpus = generate_corpus(4, 12, Domain::screen);
  split(corpus, {0.5, 0.25, 0.25}, 2);
  auto dir = scratch_dir("export");
  export_corpus(corpus, dir, 4);

  std::ifstream img(dir / "images" / "0.img", std::ios::binary);
  std::string header;
  std::getline(img, header);
  CHECK(header == "IMG 3 64 64");
  CHECK(std::filesystem::file_size(dir / "images" / "0.img") == header.size() + 1 + 3 * 64 * 64 * 4);

  std::ifstream captions(dir / "captions.tsv");
  std::string line;
  std::getline(captions, line);
  CHECK(std::count(line.begin(), line.end(), '\t') == 6);

  auto back = import_corpus(dir);
  REQUIRE(back.size() == corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(same_sample(back[i], corpus[i]));
    CHECK(back[i].split == corpus[i].split);
  }
  std::filesystem::remove_all(dir);
}
