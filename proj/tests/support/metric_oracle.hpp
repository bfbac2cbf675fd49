#pragma once

// Slow, literal versions of corpus BLEU-4 and CIDEr-D used as test oracles.
// N-grams are kept as word vectors in flat lists and looked up linearly.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <utility>
#include <vector>

#include "peftcap/metrics.hpp"
#include "peftcap/rng.hpp"

namespace oracle {

using Words = std::vector<std::string>;
using Bag = std::vector<std::pair<Words, double>>;  // n-gram, count

inline Bag ngrams(const Words& s, std::size_t n) {
  Bag bag;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    Words g(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n));
    auto it = std::find_if(bag.begin(), bag.end(), [&](const auto& e) { return e.first == g; });
    if (it == bag.end()) bag.emplace_back(g, 1.0);
    else it->second += 1.0;
  }
  return bag;
}

inline double count_in(const Bag& bag, const Words& g) {
  for (const auto& [w, c] : bag)
    if (w == g) return c;
  return 0.0;
}

inline double bleu4(const std::vector<peftcap::metrics::EvalItem>& items) {
  double c_total = 0, r_total = 0;
  double p_log = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    double hit = 0, all = 0;
    for (const auto& it : items) {
      for (const auto& [g, c] : ngrams(it.candidate, n)) {
        double best = 0;
        for (const auto& ref : it.references) best = std::max(best, count_in(ngrams(ref, n), g));
        hit += std::min(c, best);
        all += c;
      }
    }
    if (hit == 0) return 0.0;
    p_log += 0.25 * std::log(hit / all);
  }
  for (const auto& it : items) {
    const double c = static_cast<double>(it.candidate.size());
    double r = 1e300;
    for (const auto& ref : it.references) {
      const double len = static_cast<double>(ref.size());
      if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r))
        r = len;
    }
    c_total += c;
    r_total += r;
  }
  const double bp = c_total > r_total ? 1.0 : std::exp(1.0 - r_total / c_total);
  return 100.0 * bp * std::exp(p_log);
}

inline double cider_d(const std::vector<peftcap::metrics::EvalItem>& items, double sigma = 6.0) {
  const double n_images = static_cast<double>(items.size());
  auto doc_freq = [&](const Words& g) {
    double df = 0;
    for (const auto& it : items) {
      bool found = false;
      for (const auto& ref : it.references) found = found || count_in(ngrams(ref, g.size()), g) > 0;
      df += found ? 1.0 : 0.0;
    }
    return std::max(df, 1.0);
  };
  auto tfidf = [&](const Words& s, std::size_t n) {
    Bag v = ngrams(s, n);
    for (auto& [g, c] : v) c *= std::log(n_images / doc_freq(g));
    return v;
  };
  auto norm = [](const Bag& v) {
    double s = 0;
    for (const auto& e : v) s += e.second * e.second;
    return std::sqrt(s);
  };

  double sum = 0;
  for (const auto& it : items) {
    double image_score = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const Bag cand = tfidf(it.candidate, n);
      double over_refs = 0;
      for (const auto& ref : it.references) {
        const Bag rv = tfidf(ref, n);
        double num = 0;
        for (const auto& [g, w] : cand) {
          const double wr = count_in(rv, g);
          num += std::min(w, wr) * wr;
        }
        const double den = norm(cand) * norm(rv);
        const double cos = den > 0 ? num / den : num;
        const double gap = static_cast<double>(it.candidate.size()) - static_cast<double>(ref.size());
        over_refs += cos * std::exp(-gap * gap / (2 * sigma * sigma));
      }
      image_score += over_refs / static_cast<double>(it.references.size()) / 4.0;
    }
    sum += 10.0 * image_score;
  }
  return sum / n_images;
}

// Random corpora for oracle comparisons. Candidates are sometimes copies or
// edits of a reference so that matches at every order are common.
inline Words random_sentence(peftcap::Rng& rng, std::size_t vocab, std::size_t min_len,
                             std::size_t max_len) {
  Words out(min_len + rng.below(max_len - min_len + 1));
  for (auto& w : out) w = "w" + std::to_string(rng.below(vocab));
  return out;
}

inline std::vector<peftcap::metrics::EvalItem> random_corpus(peftcap::Rng& rng, std::size_t images) {
  std::vector<peftcap::metrics::EvalItem> out(images);
  for (auto& item : out) {
    const std::size_t refs = 1 + rng.below(5);
    for (std::size_t r = 0; r < refs; ++r) item.references.push_back(random_sentence(rng, 8, 3, 9));
    const double roll = rng.uniform();
    if (roll < 0.1) {
      item.candidate = {};
    } else if (roll < 0.4) {
      item.candidate = item.references[rng.below(refs)];
      if (!item.candidate.empty() && rng.uniform() < 0.5)
        item.candidate[rng.below(item.candidate.size())] = "w0";
    } else {
      item.candidate = random_sentence(rng, 8, 1, 10);
    }
  }
  return out;
}

}  // namespace oracle
