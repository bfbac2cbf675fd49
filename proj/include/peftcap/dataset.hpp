#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "peftcap/tensor.hpp"

// Synthetic caption corpora: a "general" domain of loose objects on themed
// backgrounds and a "screen" domain of app screenshots laid out on a grid.
namespace peftcap::data {

inline constexpr std::size_t kCanvas = 64;
inline constexpr std::size_t kCaptionsPerImage = 5;
inline constexpr std::size_t kGridCells = 4;  // 16-px cells per side

enum class Domain { general, screen };
enum class Split { train, val, test, none };

std::string to_string(Domain domain);
Domain domain_from_string(const std::string& name);
std::string to_string(Split split);
Split split_from_string(const std::string& name);

// Element kinds, shared by both domains: UI widgets on screens, loose
// objects in the general domain.
const std::vector<std::string>& element_kinds();
// App categories; the general domain uses them as colour themes.
const std::vector<std::string>& categories();
// Words used in captions, e.g. "search_bar" -> "search bar".
std::string element_words(const std::string& kind);

struct SceneElement {
  std::string kind;
  int row = 0;  // grid cell or pixel position, see the domain
  int col = 0;
  int width = 1;
  int height = 1;
};

struct Sample {
  int id = 0;
  Domain domain = Domain::screen;
  Tensor image;  // [3×64×64], values in [0,1]
  std::vector<std::string> captions;
  std::string category;
  std::vector<SceneElement> elements;
  Split split = Split::none;
};

// Image and captions of one sample as a pure function of (seed, id, domain).
Sample generate_sample(std::uint64_t seed, int id, Domain domain);

// Samples with ids 0..n-1. n must be at least 10.
std::vector<Sample> generate_corpus(std::uint64_t seed, std::size_t n, Domain domain);

// Caption templates for the domain; placeholders {cat}, {e1}, {e2}.
const std::vector<std::string>& caption_templates(Domain domain);

/// Tags every sample by a seeded shuffle of ids: the first round(r0·n) go to
/// train, the next round(r1·n) to val, the rest to test. Throws DataError if
/// the ratios do not sum to 1 or any part would be empty.
void split(std::vector<Sample>& corpus, std::array<double, 3> ratios, std::uint64_t seed);

std::vector<const Sample*> select(const std::vector<Sample>& corpus, Split part);

struct TrainingPair {
  Tensor image;
  std::string caption;
};

// Five pairs, one per caption, sharing the image. Throws DataError unless the
// sample carries exactly five captions.
std::vector<TrainingPair> duplicate_for_training(const Sample& sample);

class Vocab {
 public:
  Vocab();  // specials only

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;  // UNK for unknown
  bool contains(const std::string& token) const { return ids_.contains(token); }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  int add(const std::string& token);

  void save(const std::filesystem::path& file) const;
  static Vocab load(const std::filesystem::path& file);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

std::string lowercase(std::string text);
std::vector<std::string> split_words(const std::string& text);

// Specials first, then every caption word in sorted order.
Vocab build_vocab(std::span<const std::string> texts);
Vocab build_vocab(const std::vector<Sample>& corpus);

// [BOS, words..., EOS]; unknown words map to UNK.
std::vector<int> tokenize(const std::string& text, const Vocab& vocab);
// Drops PAD/BOS/EOS/UNK and joins the rest with single spaces.
std::string detokenize(std::span<const int> ids, const Vocab& vocab);

// Directory layout: manifest.txt, captions.tsv, scenes.tsv, images/<id>.img.
void export_corpus(const std::vector<Sample>& corpus, const std::filesystem::path& dir,
                   std::uint64_t seed);
std::vector<Sample> import_corpus(const std::filesystem::path& dir);

void write_image(const Tensor& image, const std::filesystem::path& file);
Tensor read_image(const std::filesystem::path& file);

}  // namespace peftcap::data
