#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

// Corpus-level caption metrics over whitespace tokens.
namespace peftcap::metrics {

using Tokens = std::vector<std::string>;

struct EvalItem {
  Tokens candidate;
  std::vector<Tokens> references;  // at least one; five in the standard setup
};

struct MetricReport {
  double bleu4 = 0.0;
  double cider = 0.0;
  std::size_t n_images = 0;
  double trainable_percent = 0.0;
};

/// Corpus BLEU-4 in [0, 100]: clipped n-gram matches pooled over the corpus,
/// uniform weights, brevity penalty against the closest reference length
/// (ties go to the shorter one). Any pooled precision of zero gives 0.
double bleu4(std::span<const EvalItem> batch);

/// CIDEr-D: TF-IDF n-gram vectors (n = 1..4) with document frequencies taken
/// from the references of this batch, clipped candidate weights, and a
/// gaussian length penalty (sigma 6). Needs at least two images; a single
/// image throws NumericError because every IDF would be zero.
double cider(std::span<const EvalItem> batch, double sigma = 6.0);

Tokens tokens_of(const std::string& text);

struct CaptionLine {
  std::string id;
  std::vector<std::string> texts;
};

// "id TAB text [TAB text ...]" per line; blank lines skipped.
std::vector<CaptionLine> read_caption_file(const std::filesystem::path& file);

/// Pairs candidates with references by id, in candidate order. Throws
/// DataError naming the first id that appears on only one side, and for
/// candidate lines carrying other than one text.
std::vector<EvalItem> align(const std::vector<CaptionLine>& candidates,
                            const std::vector<CaptionLine>& references);

}  // namespace peftcap::metrics
