#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "peftcap/dataset.hpp"
#include "peftcap/errors.hpp"
#include "peftcap/experiment.hpp"
#include "peftcap/freeze.hpp"
#include "peftcap/metrics.hpp"

namespace fs = std::filesystem;
using namespace peftcap;

namespace {

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kUsage = 2;

RunConfig load_config(const std::optional<fs::path>& file) {
  return file ? RunConfig::from_file(*file) : RunConfig{};
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_report(const std::string& label, const metrics::MetricReport& r) {
  std::cout << label << "\tBLEU-4 " << fmt(r.bleu4, 2) << "\tCIDEr " << fmt(r.cider, 3) << '\n';
}

int gen_data(std::uint64_t seed, std::size_t n, const std::string& domain, const fs::path& out) {
  auto corpus = data::generate_corpus(seed, n, data::domain_from_string(domain));
  data::split(corpus, {0.8, 0.1, 0.1}, seed);
  data::export_corpus(corpus, out, seed);
  std::cout << "wrote " << corpus.size() << ' ' << domain << " samples to " << out.string() << '\n';
  return kOk;
}

int run_pretrain(const RunConfig& config) {
  const auto corpora = make_corpora(config.data);
  const auto base = config.base_path();
  const auto outcome = pretrain(config, corpora, base, [](std::size_t epoch, double loss) {
    std::cerr << "pretrain epoch " << epoch << " loss " << fmt(loss, 4) << '\n';
  });
  fs::create_directories(config.out_dir);
  std::ofstream log(config.out_dir / "pretrain_log.tsv");
  for (std::size_t e = 0; e < outcome.history.epoch_loss.size(); ++e)
    log << e << '\t' << fmt(outcome.history.epoch_loss[e], 6) << '\n';
  print_report("general test", outcome.general_test);
  print_report("zero-shot screen", outcome.zero_shot);
  std::cout << "checkpoint " << base.string() << '\n';
  return kOk;
}

int run_finetune(RunConfig config, const std::optional<std::string>& strategy,
                 std::optional<std::uint64_t> seed) {
  if (strategy) config.strategy = *strategy;
  config.validate();
  const auto corpora = make_corpora(config.data);
  const auto base = config.base_path();
  if (!fs::exists(base)) throw CheckpointError("base checkpoint " + base.string() + " not found; run pretrain first");
  config.save_cell_checkpoints = true;
  const std::uint64_t s = seed.value_or(config.seeds.front());
  const auto dir = config.out_dir / "finetune" / config.strategy;
  const auto cell = run_cell(config, corpora, base, config.strategy, s, dir);
  std::cout << results_line(cell.name, cell.last, std::to_string(s)) << '\n';
  std::cout << "checkpoint " << (dir / "adapter.ckpt").string() << '\n';
  return kOk;
}

int run_grid_command(RunConfig config, const std::optional<fs::path>& out) {
  const auto corpora = make_corpora(config.data);
  const auto base = config.base_path();
  if (!fs::exists(base)) throw CheckpointError("base checkpoint " + base.string() + " not found; run pretrain first");
  const auto dir = out.value_or(config.out_dir / "grid");
  const auto report = run_grid(config, corpora, base, dir, [](const CellResult& c) {
    std::cerr << c.name << " seed " << c.seed << ": "
              << (c.failed ? "FAILED " + c.error : "CIDEr " + fmt(c.last.cider, 3)) << '\n';
  });
  const auto zs = zero_shot(config, corpora, base);
  const auto table = format_tables(medians(report, config.cells), zs);
  std::ofstream(dir / "table.txt") << table;
  std::cout << table;
  return report.failures ? kPartial : kOk;
}

int audit_params(const std::string& preset, const std::optional<fs::path>& config_file) {
  std::optional<ModelConfig> toy;
  StrategyHyper hyper = StrategyHyper::paper();
  if (preset == "toy") {
    const auto config = load_config(config_file);
    toy = make_model(config, make_corpora(config.data)).config();
    hyper = config.hyper;
  }
  std::size_t width = 0;
  for (const auto& name : strategy_names()) width = std::max(width, name.size());
  for (const auto& name : strategy_names()) {
    const auto strategy = make_strategy(name, hyper);
    const double percent = toy ? audit_strategy(*toy, strategy).percent : audit_paper_scale(strategy);
    std::string label = name;
    label.resize(width + 2, ' ');
    std::cout << label << fmt(percent, 2) << '\n';
  }
  return kOk;
}

int score(const fs::path& candidates, const fs::path& references) {
  const auto items = metrics::align(metrics::read_caption_file(candidates), metrics::read_caption_file(references));
  std::cout << "BLEU-4\t" << fmt(metrics::bleu4(items), 12) << '\n';
  std::cout << "CIDEr\t" << fmt(metrics::cider(items), 12) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient caption fine-tuning toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t n = 100;
  std::string domain = "screen";
  fs::path data_out;
  auto* gen = app.add_subcommand("gen-data", "Generate and export a synthetic corpus");
  gen->add_option("--seed", seed)->required();
  gen->add_option("--n", n)->required()->check(CLI::Range(10, 1000000));
  gen->add_option("--domain", domain)->check(CLI::IsMember({"general", "screen"}));
  gen->add_option("--out", data_out)->required();

  std::optional<fs::path> config_file;
  auto* pre = app.add_subcommand("pretrain", "Full fine-tuning on the general corpus; writes the base checkpoint");
  pre->add_option("--config", config_file);

  std::optional<std::string> strategy;
  std::optional<std::uint64_t> cell_seed;
  auto* fine = app.add_subcommand("finetune", "Fine-tune one strategy on the screen corpus");
  fine->add_option("--config", config_file);
  fine->add_option("--strategy", strategy, "Overrides [strategy] name");
  fine->add_option("--seed", cell_seed, "Defaults to the first grid seed");

  std::optional<fs::path> grid_out;
  auto* grid = app.add_subcommand("grid", "Run every strategy cell over the configured seeds");
  grid->add_option("--config", config_file);
  grid->add_option("--out", grid_out, "Defaults to <output dir>/grid");

  std::string preset = "paper";
  auto* audit = app.add_subcommand("audit-params", "Print the trainable percent of every strategy");
  audit->add_option("--preset", preset)->check(CLI::IsMember({"paper", "toy"}));
  audit->add_option("--config", config_file, "Model for the toy preset");

  fs::path candidates, references;
  auto* met = app.add_subcommand("metrics", "Score a candidate caption file against references");
  met->add_option("--candidates", candidates)->required();
  met->add_option("--references", references)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return gen_data(seed, n, domain, data_out);
    if (*pre) return run_pretrain(load_config(config_file));
    if (*fine) return run_finetune(load_config(config_file), strategy, cell_seed);
    if (*grid) return run_grid_command(load_config(config_file), grid_out);
    if (*audit) return audit_params(preset, config_file);
    if (*met) return score(candidates, references);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
