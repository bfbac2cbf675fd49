#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "peftcap/dataset.hpp"
#include "peftcap/metrics.hpp"
#include "peftcap/strategy.hpp"
#include "peftcap/training.hpp"

// General-domain pretraining, screen-domain fine-tuning and the strategy grid.
namespace peftcap {

struct DataConfig {
  std::uint64_t seed = 7;
  std::size_t general_samples = 2000;
  std::size_t screen_samples = 500;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
};

/// Everything a run needs. Defaults are the desk-scale transfer setup; the
/// full-scale optimizer values stay the TrainConfig defaults.
struct RunConfig {
  ModelConfig model = default_model();  // vocab_size is taken from the corpora
  DataConfig data;
  TrainConfig pretrain = default_train();
  TrainConfig finetune = default_train();
  StrategyHyper hyper = StrategyHyper::toy();
  std::string strategy = "houlsby_t";

  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> cells = strategy_names();
  std::size_t workers = 1;

  std::filesystem::path out_dir = "runs";
  std::filesystem::path base_checkpoint;  // empty: <out_dir>/base.ckpt
  CheckpointDtype checkpoint_dtype = CheckpointDtype::f64;
  bool save_cell_checkpoints = false;

  static ModelConfig default_model();
  static TrainConfig default_train();

  /// INI file with sections model, data, pretrain, train, strategy, grid and
  /// output. Unknown sections or keys, and unparsable values, throw ConfigError.
  static RunConfig from_file(const std::filesystem::path& file);

  std::filesystem::path base_path() const;
  void validate() const;
};

struct Corpora {
  std::vector<data::Sample> general;
  std::vector<data::Sample> screen;
  data::Vocab vocab;  // union of both domains
};

Corpora make_corpora(const DataConfig& config);

// Fresh base model sized for the corpora vocabulary.
CaptionModel make_model(const RunConfig& config, const Corpora& corpora);

struct PretrainOutcome {
  TrainResult history;
  metrics::MetricReport general_test;
  metrics::MetricReport zero_shot;  // pretrained model on the screen test split
};

/// FullFT(all) on the general train split; writes every parameter to `checkpoint`.
PretrainOutcome pretrain(const RunConfig& config, const Corpora& corpora,
                         const std::filesystem::path& checkpoint,
                         const EpochCallback& on_epoch = {});

// Screen-test report of the checkpoint as-is.
metrics::MetricReport zero_shot(const RunConfig& config, const Corpora& corpora,
                                const std::filesystem::path& base);

struct CellResult {
  std::string name;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  metrics::MetricReport last;      // test split after the final epoch
  metrics::MetricReport best_val;  // test split at the epoch with the best val CIDEr
  std::size_t best_epoch = 0;
  TrainResult history;
  std::size_t optimizer_elements = 0;
};

/// Loads the base checkpoint, attaches the strategy seeded with `seed`,
/// fine-tunes on the screen train split and scores the screen test split.
/// With `cell_dir` set, writes log.tsv there and, if configured, the
/// trainable-only checkpoint. Errors propagate.
CellResult run_cell(const RunConfig& config, const Corpora& corpora,
                    const std::filesystem::path& base, const std::string& name,
                    std::uint64_t seed, const std::optional<std::filesystem::path>& cell_dir = {});

struct GridReport {
  std::vector<CellResult> cells;  // seed-major, cells in config order
  std::size_t failures = 0;
};

using CellCallback = std::function<void(const CellResult&)>;

/// Runs every (seed, cell) pair on `config.workers` threads. A failing cell
/// is recorded as FAILED and the rest continue. Writes, under `out`:
///   seed_<S>/results.tsv, seed_<S>/<cell>/log.tsv, results.tsv (medians),
///   table.txt.
GridReport run_grid(const RunConfig& config, const Corpora& corpora,
                    const std::filesystem::path& base, const std::filesystem::path& out,
                    const CellCallback& on_cell = {});

// "name TAB bleu TAB cider TAB percent TAB seed", one line per cell.
std::string results_line(const std::string& name, const metrics::MetricReport& report,
                         const std::string& seed);

struct MedianRow {
  std::string name;
  metrics::MetricReport report;  // medians over the successful seeds
  std::size_t seeds = 0;
};

std::vector<MedianRow> medians(const GridReport& report, const std::vector<std::string>& cells);

// Aligned text tables: baselines and encoder, decoder and joint strategies.
std::string format_tables(const std::vector<MedianRow>& rows,
                          const std::optional<metrics::MetricReport>& zero_shot = {});

}  // namespace peftcap
