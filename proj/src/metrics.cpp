#include "peftcap/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "peftcap/errors.hpp"

namespace peftcap::metrics {

namespace {

constexpr std::size_t kMaxN = 4;

using NgramCounts = std::map<std::string, double>;

// Counts of every n-gram of length 1..4, keyed by the joined words. Words
// are separated with a unit separator so "a b" and "a_b" never collide.
std::array<NgramCounts, kMaxN> count_ngrams(const Tokens& words) {
  std::array<NgramCounts, kMaxN> out;
  for (std::size_t n = 1; n <= kMaxN; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string key = words[i];
      for (std::size_t j = 1; j < n; ++j) key += '\x1f' + words[i + j];
      out[n - 1][key] += 1.0;
    }
  }
  return out;
}

void require_batch(std::span<const EvalItem> batch) {
  if (batch.empty()) throw DataError("metric batch is empty");
  for (const auto& item : batch)
    if (item.references.empty()) throw DataError("metric batch item has no references");
}

}  // namespace

double bleu4(std::span<const EvalItem> batch) {
  require_batch(batch);
  std::array<double, kMaxN> matches{}, totals{};
  double cand_len = 0.0, ref_len = 0.0;
  for (const auto& item : batch) {
    const std::size_t c = item.candidate.size();
    cand_len += static_cast<double>(c);
    std::size_t best = item.references.front().size();
    for (const auto& ref : item.references) {
      const auto diff = [c](std::size_t r) { return r > c ? r - c : c - r; };
      if (diff(ref.size()) < diff(best) || (diff(ref.size()) == diff(best) && ref.size() < best))
        best = ref.size();
    }
    ref_len += static_cast<double>(best);

    const auto cand = count_ngrams(item.candidate);
    std::array<NgramCounts, kMaxN> max_ref;
    for (const auto& ref : item.references) {
      const auto rc = count_ngrams(ref);
      for (std::size_t n = 0; n < kMaxN; ++n)
        for (const auto& [g, k] : rc[n]) max_ref[n][g] = std::max(max_ref[n][g], k);
    }
    for (std::size_t n = 0; n < kMaxN; ++n) {
      for (const auto& [g, k] : cand[n]) {
        auto it = max_ref[n].find(g);
        if (it != max_ref[n].end()) matches[n] += std::min(k, it->second);
        totals[n] += k;
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxN; ++n) {
    if (totals[n] == 0.0 || matches[n] == 0.0) return 0.0;
    log_sum += std::log(matches[n] / totals[n]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(kMaxN));
}

double cider(std::span<const EvalItem> batch, double sigma) {
  require_batch(batch);
  if (batch.size() < 2) {
    throw NumericError("CIDEr needs at least two images: with one image every document "
                       "frequency equals N and all IDF weights vanish");
  }
  std::vector<std::vector<std::array<NgramCounts, kMaxN>>> ref_counts(batch.size());
  std::unordered_map<std::string, double> df;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::unordered_set<std::string> seen;
    for (const auto& ref : batch[i].references) {
      ref_counts[i].push_back(count_ngrams(ref));
      for (const auto& level : ref_counts[i].back())
        for (const auto& [g, k] : level) seen.insert(g);
    }
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_n = std::log(static_cast<double>(batch.size()));

  struct Vec {
    std::array<NgramCounts, kMaxN> w;
    std::array<double, kMaxN> norm{};
  };
  auto weigh = [&](const std::array<NgramCounts, kMaxN>& counts) {
    Vec v;
    for (std::size_t n = 0; n < kMaxN; ++n) {
      for (const auto& [g, k] : counts[n]) {
        auto it = df.find(g);
        const double d = it == df.end() ? 1.0 : std::max(1.0, it->second);
        const double x = k * (log_n - std::log(d));
        v.w[n][g] = x;
        v.norm[n] += x * x;
      }
      v.norm[n] = std::sqrt(v.norm[n]);
    }
    return v;
  };

  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Vec cand = weigh(count_ngrams(batch[i].candidate));
    const double cand_len = static_cast<double>(batch[i].candidate.size());
    std::array<double, kMaxN> per_n{};
    for (std::size_t r = 0; r < ref_counts[i].size(); ++r) {
      const Vec ref = weigh(ref_counts[i][r]);
      const double delta = cand_len - static_cast<double>(batch[i].references[r].size());
      const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (std::size_t n = 0; n < kMaxN; ++n) {
        double dot = 0.0;
        for (const auto& [g, x] : cand.w[n]) {
          auto it = ref.w[n].find(g);
          if (it != ref.w[n].end()) dot += std::min(x, it->second) * it->second;
        }
        if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) dot /= cand.norm[n] * ref.norm[n];
        per_n[n] += dot * penalty;
      }
    }
    double mean_n = 0.0;
    for (double v : per_n) mean_n += v;
    mean_n /= static_cast<double>(kMaxN);
    total += 10.0 * mean_n / static_cast<double>(ref_counts[i].size());
  }
  return total / static_cast<double>(batch.size());
}

Tokens tokens_of(const std::string& text) {
  std::istringstream in(text);
  Tokens out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::vector<CaptionLine> read_caption_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  std::vector<CaptionLine> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    CaptionLine row;
    std::getline(ls, row.id, '\t');
    for (std::string f; std::getline(ls, f, '\t');) row.texts.push_back(f);
    if (row.id.empty())
      throw DataError(file.string() + ":" + std::to_string(line_no) + ": missing id");
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<EvalItem> align(const std::vector<CaptionLine>& candidates,
                            const std::vector<CaptionLine>& references) {
  std::unordered_map<std::string, const CaptionLine*> refs;
  for (const auto& r : references) {
    if (r.texts.empty()) throw DataError("reference id " + r.id + " has no captions");
    if (!refs.emplace(r.id, &r).second) throw DataError("reference id " + r.id + " repeats");
  }
  std::unordered_set<std::string> used;
  std::vector<EvalItem> out;
  for (const auto& c : candidates) {
    auto it = refs.find(c.id);
    if (it == refs.end()) throw DataError("candidate id " + c.id + " has no references");
    if (c.texts.size() > 1) throw DataError("candidate id " + c.id + " has more than one caption");
    if (!used.insert(c.id).second) throw DataError("candidate id " + c.id + " repeats");
    EvalItem item;
    item.candidate = c.texts.empty() ? Tokens{} : tokens_of(c.texts.front());
    for (const auto& t : it->second->texts) item.references.push_back(tokens_of(t));
    out.push_back(std::move(item));
  }
  for (const auto& r : references)
    if (!used.contains(r.id)) throw DataError("reference id " + r.id + " has no candidate");
  return out;
}

}  // namespace peftcap::metrics
