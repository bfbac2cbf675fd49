#include "peftcap/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "peftcap/errors.hpp"
#include "peftcap/model_config.hpp"
#include "peftcap/rng.hpp"

namespace peftcap::data {

namespace {

// Colours are integers in [0, 256]; a pixel value is units / 256, which is
// exact in float32 so exported images round-trip bit for bit.
using Rgb = std::array<int, 3>;

struct Palette {
  Rgb background;
  Rgb accent;
};

const std::vector<std::string> kKinds{"button", "checkbox", "search_bar", "image_tile",
                                      "text_line", "keypad", "slider", "toggle",
                                      "list_row", "icon"};
const std::vector<std::string> kCategories{"login", "music", "weather", "settings", "shopping",
                                           "map", "chat", "calendar", "camera", "news"};

const Palette kPalettes[10] = {
    {{232, 236, 248}, {40, 70, 200}},   {{40, 24, 56}, {220, 60, 160}},
    {{190, 225, 250}, {250, 170, 30}},  {{206, 206, 206}, {70, 70, 84}},
    {{250, 232, 210}, {228, 96, 20}},   {{212, 236, 196}, {36, 136, 64}},
    {{244, 244, 250}, {28, 160, 220}},  {{250, 248, 232}, {200, 36, 40}},
    {{24, 24, 24}, {236, 236, 236}},    {{236, 236, 228}, {100, 60, 20}},
};

const Rgb kObjectColours[6] = {{220, 40, 40}, {40, 170, 60}, {40, 80, 220},
                               {230, 200, 30}, {160, 50, 200}, {30, 190, 200}};

// Kinds a category favours on its screens.
const std::vector<std::vector<int>> kPreferred{
    {0, 4, 1, 5}, {6, 3, 0, 8}, {9, 4, 3, 6}, {7, 8, 6, 1}, {3, 0, 2, 8},
    {2, 9, 0, 3}, {4, 8, 2, 9}, {8, 0, 5, 4}, {9, 3, 0, 7}, {4, 3, 8, 2},
};

const std::set<std::string> kWideKinds{"search_bar", "text_line", "slider", "list_row", "keypad"};

const std::vector<std::string> kScreenTemplates{
    "{cat} screen with a {e1} and a {e2}",
    "a {cat} app page showing a {e1} above a {e2}",
    "{cat} app with a {e1} and a {e2}",
    "screenshot of a {cat} app with a {e1}",
    "the {cat} page has a {e1} above a {e2}",
};

const std::vector<std::string> kGeneralTemplates{
    "a picture of a {e1} and a {e2} with a {cat} theme",
    "a {e1} next to a {e2}",
    "a {e1} and a {e2} on a {cat} background",
    "{cat} app with a {e1} and a {e2}",
    "screenshot of a {cat} app with a {e1}",
};

class Canvas {
 public:
  Canvas() : px_(3 * kCanvas * kCanvas, 0) {}

  void set(int x, int y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= int(kCanvas) || y >= int(kCanvas)) return;
    for (int ch = 0; ch < 3; ++ch) px_[(ch * kCanvas + y) * kCanvas + x] = c[ch];
  }
  // Half-open box [x0, x1) × [y0, y1).
  void fill(int x0, int y0, int x1, int y1, const Rgb& c) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, c);
  }
  void outline(int x0, int y0, int x1, int y1, int t, const Rgb& c) {
    fill(x0, y0, x1, y0 + t, c);
    fill(x0, y1 - t, x1, y1, c);
    fill(x0, y0, x0 + t, y1, c);
    fill(x1 - t, y0, x1, y1, c);
  }
  void disc(int cx, int cy, int r, const Rgb& c) {
    for (int y = cy - r; y <= cy + r; ++y)
      for (int x = cx - r; x <= cx + r; ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) set(x, y, c);
  }
  void noise(Rng& rng, int amplitude) {
    for (auto& v : px_) v = std::clamp(v + rng.range(-amplitude, amplitude), 0, 256);
  }
  Tensor to_tensor() const {
    std::vector<double> data(px_.size());
    for (std::size_t i = 0; i < px_.size(); ++i) data[i] = px_[i] / 256.0;
    return Tensor::from_data({3, kCanvas, kCanvas}, std::move(data));
  }

 private:
  std::vector<int> px_;
};

Rgb shade(const Rgb& c, int delta) {
  return {std::clamp(c[0] + delta, 0, 256), std::clamp(c[1] + delta, 0, 256),
          std::clamp(c[2] + delta, 0, 256)};
}

Rgb contrast_of(const Rgb& c) {
  const int lum = (299 * c[0] + 587 * c[1] + 114 * c[2]) / 1000;
  return lum > 128 ? Rgb{16, 16, 16} : Rgb{240, 240, 240};
}

// Draws one element inside the box [x0, x0+w) × [y0, y0+h).
void draw_element(Canvas& cv, const std::string& kind, int x0, int y0, int w, int h,
                  const Rgb& fg, const Rgb& bg, Rng& rng) {
  const int x1 = x0 + w, y1 = y0 + h;
  const int my = y0 + h / 2;
  const Rgb dark = shade(fg, -70);
  const Rgb light = contrast_of(fg);
  if (kind == "button") {
    cv.fill(x0 + 2, y0 + 3, x1 - 2, y1 - 3, fg);
    cv.fill(x0 + w / 2 - 3, my - 1, x0 + w / 2 + 3, my + 1, light);
  } else if (kind == "checkbox") {
    const int s = std::min(8, h - 4);
    cv.outline(x0 + 3, my - s / 2, x0 + 3 + s, my - s / 2 + s, 2, fg);
    cv.fill(x0 + 5, my - 1, x0 + 1 + s, my + 1, fg);
    if (w > 16) cv.fill(x0 + s + 7, my - 1, x1 - 3, my + 1, dark);
  } else if (kind == "search_bar") {
    cv.outline(x0 + 2, y0 + 3, x1 - 2, y1 - 3, 2, fg);
    cv.disc(x0 + 8, my, 2, fg);
  } else if (kind == "image_tile") {
    for (int y = y0 + 1; y < y1 - 1; ++y)
      for (int x = x0 + 1; x < x1 - 1; ++x)
        cv.set(x, y, (((x - x0) / 4 + (y - y0) / 4) % 2) ? fg : dark);
  } else if (kind == "text_line") {
    cv.fill(x0 + 2, y0 + 4, x1 - 2, y0 + 6, fg);
    cv.fill(x0 + 2, y0 + 9, x0 + 2 + (w - 4) * 2 / 3, y0 + 11, fg);
  } else if (kind == "keypad") {
    for (int y = y0 + 2; y + 3 <= y1 - 1; y += 5)
      for (int x = x0 + 2; x + 3 <= x1 - 1; x += 5) cv.fill(x, y, x + 3, y + 3, fg);
  } else if (kind == "slider") {
    cv.fill(x0 + 2, my - 1, x1 - 2, my + 1, dark);
    const int knob = x0 + 2 + rng.range(0, std::max(0, w - 10));
    cv.fill(knob, my - 3, knob + 6, my + 3, fg);
  } else if (kind == "toggle") {
    const int len = std::min(14, w - 2);
    cv.fill(x0 + 2, my - 4, x0 + 2 + len, my + 4, fg);
    cv.fill(x0 + len - 5, my - 3, x0 + len + 1, my + 3, light);
  } else if (kind == "list_row") {
    for (int i = 0, y = y0 + 2; y + 2 <= y1; ++i, y += 5)
      cv.fill(x0 + 1, y, x1 - 1, y + 2, i % 2 ? dark : fg);
  } else if (kind == "icon") {
    const int r = std::max(2, std::min(w, h) / 2 - 3);
    cv.disc(x0 + std::min(w, h) / 2, y0 + h / 2, r, fg);
  } else {
    throw DataError("no renderer for element kind '" + kind + "'");
  }
  (void)bg;
}

std::string fill_template(const std::string& tmpl, const std::string& cat, const std::string& e1,
                          const std::string& e2) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 5, "{cat}") == 0) {
      out += cat;
      i += 5;
    } else if (tmpl.compare(i, 4, "{e1}") == 0) {
      out += e1;
      i += 4;
    } else if (tmpl.compare(i, 4, "{e2}") == 0) {
      out += e2;
      i += 4;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::vector<std::string> captions_for(Domain domain, const std::string& cat,
                                      const std::string& e1, const std::string& e2) {
  std::vector<std::string> out;
  for (const auto& t : caption_templates(domain))
    out.push_back(fill_template(t, cat, element_words(e1), element_words(e2)));
  return out;
}

Sample render_screen(Rng& rng, int id) {
  Sample s;
  s.id = id;
  s.domain = Domain::screen;
  const int cat = static_cast<int>(rng.below(kCategories.size()));
  s.category = kCategories[cat];
  const Palette& pal = kPalettes[cat];

  std::vector<int> kinds;
  while (kinds.size() < 3) {
    const int k = rng.uniform() < 0.75
                      ? kPreferred[cat][rng.below(kPreferred[cat].size())]
                      : static_cast<int>(rng.below(kKinds.size()));
    if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
  }

  Canvas cv;
  cv.fill(0, 0, kCanvas, kCanvas, pal.background);
  // Top bar with a title stub.
  cv.fill(0, 0, kCanvas, 14, pal.accent);
  cv.fill(4, 5, 4 + 8 * rng.range(2, 5), 9, contrast_of(pal.accent));

  const int cell = static_cast<int>(kCanvas / kGridCells);
  for (int r = 0; r < 3; ++r) {
    const auto& kind = kKinds[kinds[r]];
    SceneElement el{kind, r + 1, 0, 4, 1};
    if (!kWideKinds.contains(kind)) {
      el.width = rng.range(1, 2);
      el.col = rng.range(0, 4 - el.width);
    }
    const Rgb fg = shade(pal.accent, rng.range(-20, 20));
    draw_element(cv, kind, el.col * cell, el.row * cell, el.width * cell, cell, fg,
                 pal.background, rng);
    s.elements.push_back(el);
  }
  cv.noise(rng, 3);
  s.image = cv.to_tensor();
  s.captions = captions_for(Domain::screen, s.category, kKinds[kinds[0]], kKinds[kinds[1]]);
  return s;
}

Sample render_general(Rng& rng, int id) {
  Sample s;
  s.id = id;
  s.domain = Domain::general;
  const int theme = static_cast<int>(rng.below(kCategories.size()));
  s.category = kCategories[theme];
  const Palette& pal = kPalettes[theme];
  // Half the scenes stack wide objects in upper and lower bands, as app
  // screens do; the rest place two objects side by side.
  const bool stacked = rng.uniform() < 0.5;

  Canvas cv;
  for (int y = 0; y < int(kCanvas); ++y)
    cv.fill(0, y, kCanvas, y + 1, shade(pal.background, (y - 32) / 3));

  const int a = static_cast<int>(rng.below(kKinds.size()));
  int b = a;
  while (b == a) b = static_cast<int>(rng.below(kKinds.size()));

  // Two objects in separate halves; the left or upper one is named first.
  const bool swap = rng.uniform() < 0.5;
  for (int slot = 0; slot < 2; ++slot) {
    const int kind = (slot == 0) == !swap ? a : b;
    const Rgb fg = rng.uniform() < 0.5 ? shade(pal.accent, rng.range(-20, 20))
                                       : kObjectColours[rng.below(6)];
    int x, y, w, h;
    if (stacked) {
      w = kWideKinds.contains(kKinds[kind]) ? rng.range(32, 64) : rng.range(16, 28);
      h = rng.range(14, 18);
      x = rng.range(0, 64 - w);
      y = slot == 0 ? rng.range(0, 32 - h) : rng.range(32, 64 - h);
    } else {
      w = rng.range(16, 28);
      h = rng.range(14, 24);
      x = slot == 0 ? rng.range(0, 32 - std::min(w, 30)) : rng.range(32, 64 - w);
      y = rng.range(0, 64 - h);
    }
    draw_element(cv, kKinds[kind], x, y, w, h, fg, pal.background, rng);
    s.elements.push_back({kKinds[kind], y, x, w, h});
  }
  cv.noise(rng, 3);
  s.image = cv.to_tensor();
  s.captions = captions_for(Domain::general, s.category, s.elements[0].kind, s.elements[1].kind);
  return s;
}

std::uint64_t sample_seed(std::uint64_t seed, int id, Domain domain) {
  return mix_seed(mix_seed(seed, domain == Domain::screen ? 0x5c : 0x9e),
                  static_cast<std::uint64_t>(id));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DataError(what);
}

}  // namespace

std::string to_string(Domain domain) { return domain == Domain::screen ? "screen" : "general"; }

Domain domain_from_string(const std::string& name) {
  if (name == "screen") return Domain::screen;
  if (name == "general") return Domain::general;
  throw ConfigError("unknown domain '" + name + "' (general|screen)");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::none: return "none";
  }
  return "none";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "none") return Split::none;
  throw FormatError("unknown split '" + name + "'");
}

const std::vector<std::string>& element_kinds() { return kKinds; }
const std::vector<std::string>& categories() { return kCategories; }

std::string element_words(const std::string& kind) {
  std::string out = kind;
  std::replace(out.begin(), out.end(), '_', ' ');
  return out;
}

const std::vector<std::string>& caption_templates(Domain domain) {
  return domain == Domain::screen ? kScreenTemplates : kGeneralTemplates;
}

Sample generate_sample(std::uint64_t seed, int id, Domain domain) {
  Rng rng(sample_seed(seed, id, domain));
  return domain == Domain::screen ? render_screen(rng, id) : render_general(rng, id);
}

std::vector<Sample> generate_corpus(std::uint64_t seed, std::size_t n, Domain domain) {
  require(n >= 10, "corpus needs at least 10 samples, asked for " + std::to_string(n));
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(seed, static_cast<int>(i), domain));
  return out;
}

void split(std::vector<Sample>& corpus, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  require(std::abs(total - 1.0) < 1e-9 && ratios[0] >= 0 && ratios[1] >= 0 && ratios[2] >= 0,
          "split ratios must be non-negative and sum to 1");
  const std::size_t n = corpus.size();
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * double(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * double(n)));
  require(n_train > 0 && n_val > 0 && n_train + n_val < n,
          "degenerate split of " + std::to_string(n) + " samples");

  std::vector<int> ids;
  ids.reserve(n);
  for (const auto& s : corpus) ids.push_back(s.id);
  std::sort(ids.begin(), ids.end());
  require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "duplicate sample ids");
  Rng rng(mix_seed(seed, 0x5b117));
  rng.shuffle(ids);
  std::unordered_map<int, Split> tag;
  for (std::size_t i = 0; i < n; ++i)
    tag[ids[i]] = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
  for (auto& s : corpus) s.split = tag.at(s.id);
}

std::vector<const Sample*> select(const std::vector<Sample>& corpus, Split part) {
  std::vector<const Sample*> out;
  for (const auto& s : corpus)
    if (s.split == part) out.push_back(&s);
  return out;
}

std::vector<TrainingPair> duplicate_for_training(const Sample& sample) {
  require(sample.captions.size() == kCaptionsPerImage,
          "sample " + std::to_string(sample.id) + " has " +
              std::to_string(sample.captions.size()) + " captions, expected 5");
  std::vector<TrainingPair> out;
  for (const auto& c : sample.captions) out.push_back({sample.image, c});
  return out;
}

Vocab::Vocab() {
  for (const char* special : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(special);
}

int Vocab::add(const std::string& token) {
  auto [it, inserted] = ids_.emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? tokens::kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  Vocab v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n < 4) {
      if (line != v.tokens_[n]) throw FormatError(file.string() + ": specials out of place");
    } else if (v.add(line) != static_cast<int>(n)) {
      throw FormatError(file.string() + ": duplicate token '" + line + "'");
    }
    ++n;
  }
  return v;
}

std::string lowercase(std::string text) {
  for (auto& ch : text) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return text;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

Vocab build_vocab(std::span<const std::string> texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& w : split_words(lowercase(t))) words.insert(std::move(w));
  Vocab v;
  for (const auto& w : words) v.add(w);
  return v;
}

Vocab build_vocab(const std::vector<Sample>& corpus) {
  require(!corpus.empty(), "cannot build a vocabulary from an empty corpus");
  std::vector<std::string> texts;
  for (const auto& s : corpus) texts.insert(texts.end(), s.captions.begin(), s.captions.end());
  return build_vocab(texts);
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids{tokens::kBos};
  for (const auto& w : split_words(lowercase(text))) ids.push_back(vocab.id(w));
  ids.push_back(tokens::kEos);
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == tokens::kPad || id == tokens::kBos || id == tokens::kEos || id == tokens::kUnk)
      continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

void write_image(const Tensor& image, const std::filesystem::path& file) {
  if (image.rank() != 3) throw DimensionError("image must be [c×H×W]");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out << "IMG " << image.dim(0) << ' ' << image.dim(1) << ' ' << image.dim(2) << '\n';
  static_assert(std::endian::native == std::endian::little, "little-endian host expected");
  std::vector<float> buf(image.data().begin(), image.data().end());
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw DataError("short write to " + file.string());
}

Tensor read_image(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot read " + file.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string tag;
  std::size_t c = 0, h = 0, w = 0;
  if (!(hs >> tag >> c >> h >> w) || tag != "IMG" || c == 0 || h == 0 || w == 0)
    throw FormatError(file.string() + ": bad image header '" + header + "'");
  std::vector<float> buf(c * h * w);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
    throw FormatError(file.string() + ": truncated payload");
  return Tensor::from_data({c, h, w}, std::vector<double>(buf.begin(), buf.end()));
}

void export_corpus(const std::vector<Sample>& corpus, const std::filesystem::path& dir,
                   std::uint64_t seed) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create " + (dir / "images").string() + ": " + ec.message());

  const Domain domain = corpus.empty() ? Domain::screen : corpus.front().domain;
  {
    std::ofstream m(dir / "manifest.txt", std::ios::binary);
    if (!m) throw DataError("cannot write " + (dir / "manifest.txt").string());
    m << "seed\t" << seed << "\nn\t" << corpus.size() << "\ndomain\t" << to_string(domain)
      << "\nimage\t3 " << kCanvas << ' ' << kCanvas << '\n';
  }
  std::ofstream caps(dir / "captions.tsv", std::ios::binary);
  std::ofstream scenes(dir / "scenes.tsv", std::ios::binary);
  if (!caps || !scenes) throw DataError("cannot write corpus files in " + dir.string());
  for (const auto& s : corpus) {
    caps << s.id << '\t' << to_string(s.split);
    for (const auto& c : s.captions) caps << '\t' << c;
    caps << '\n';
    scenes << s.id << '\t' << s.category << '\t';
    for (std::size_t i = 0; i < s.elements.size(); ++i) {
      const auto& e = s.elements[i];
      scenes << (i ? "," : "") << e.kind << ':' << e.row << ':' << e.col << ':' << e.width << ':'
             << e.height;
    }
    scenes << '\n';
    write_image(s.image, dir / "images" / (std::to_string(s.id) + ".img"));
  }
  if (!caps || !scenes) throw DataError("short write in " + dir.string());
}

std::vector<Sample> import_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw DataError("no manifest.txt in " + dir.string());
  std::map<std::string, std::string> meta;
  for (std::string line; std::getline(manifest, line);) {
    auto tab = line.find('\t');
    if (tab != std::string::npos) meta[line.substr(0, tab)] = line.substr(tab + 1);
  }
  const Domain domain = domain_from_string(meta.count("domain") ? meta["domain"] : "screen");

  std::unordered_map<int, std::pair<std::string, std::vector<SceneElement>>> scenes;
  if (std::ifstream sf(dir / "scenes.tsv"); sf) {
    for (std::string line; std::getline(sf, line);) {
      std::istringstream ls(line);
      std::string id, cat, els;
      std::getline(ls, id, '\t');
      std::getline(ls, cat, '\t');
      std::getline(ls, els);
      std::vector<SceneElement> parsed;
      std::istringstream es(els);
      for (std::string item; std::getline(es, item, ',');) {
        std::istringstream is(item);
        SceneElement e;
        std::getline(is, e.kind, ':');
        char sep;
        if (!(is >> e.row >> sep >> e.col >> sep >> e.width >> sep >> e.height))
          throw FormatError("scenes.tsv: bad element '" + item + "'");
        parsed.push_back(e);
      }
      scenes[std::stoi(id)] = {cat, std::move(parsed)};
    }
  }

  std::ifstream caps(dir / "captions.tsv");
  if (!caps) throw DataError("no captions.tsv in " + dir.string());
  std::vector<Sample> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(caps, line);) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    if (fields.size() != 2 + kCaptionsPerImage) {
      throw FormatError("captions.tsv line " + std::to_string(line_no) + ": expected id, split "
                        "and 5 captions, got " + std::to_string(fields.size()) + " fields");
    }
    Sample s;
    try {
      s.id = std::stoi(fields[0]);
    } catch (const std::exception&) {
      throw FormatError("captions.tsv line " + std::to_string(line_no) + ": bad id");
    }
    s.domain = domain;
    s.split = split_from_string(fields[1]);
    s.captions.assign(fields.begin() + 2, fields.end());
    if (auto it = scenes.find(s.id); it != scenes.end()) {
      s.category = it->second.first;
      s.elements = it->second.second;
    }
    s.image = read_image(dir / "images" / (fields[0] + ".img"));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace peftcap::data
