#include "peftcap/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "peftcap/errors.hpp"

namespace peftcap {

namespace fs = std::filesystem;

namespace {

using Setter = std::function<void(const std::string&)>;
using Section = std::map<std::string, Setter>;

[[noreturn]] void bad_value(const std::string& key, const std::string& text, const char* want) {
  throw ConfigError("config key '" + key + "': expected " + want + ", got '" + text + "'");
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (!text.empty() && text.front() == '-') bad_value(key, text, "a non-negative integer");
    v = std::stoull(text, &used);
  } catch (const std::logic_error&) {
    bad_value(key, text, "a non-negative integer");
  }
  if (used != text.size()) bad_value(key, text, "a non-negative integer");
  return static_cast<std::size_t>(v);
}

double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::logic_error&) {
    bad_value(key, text, "a number");
  }
  if (used != text.size()) bad_value(key, text, "a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  bad_value(key, text, "true or false");
}

std::vector<std::string> parse_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = item.find_last_not_of(" \t");
    out.push_back(item.substr(first, last - first + 1));
  }
  return out;
}

Section train_section(TrainConfig& t) {
  return {
      {"lr", [&t](const std::string& v) { t.lr = parse_double("lr", v); }},
      {"weight_decay", [&t](const std::string& v) { t.weight_decay = parse_double("weight_decay", v); }},
      {"batch_size", [&t](const std::string& v) { t.batch_size = parse_size("batch_size", v); }},
      {"epochs", [&t](const std::string& v) { t.epochs = parse_size("epochs", v); }},
      {"beta1", [&t](const std::string& v) { t.beta1 = parse_double("beta1", v); }},
      {"beta2", [&t](const std::string& v) { t.beta2 = parse_double("beta2", v); }},
      {"eps", [&t](const std::string& v) { t.eps = parse_double("eps", v); }},
      {"seed", [&t](const std::string& v) { t.seed = parse_size("seed", v); }},
      {"shuffle", [&t](const std::string& v) { t.shuffle = parse_bool("shuffle", v); }},
      {"group_captions",
       [&t](const std::string& v) { t.group_captions = parse_bool("group_captions", v); }},
      {"max_steps", [&t](const std::string& v) { t.max_steps = parse_size("max_steps", v); }},
  };
}

std::map<std::string, Section> sections_for(RunConfig& c) {
  auto& m = c.model;
  auto& d = c.data;
  auto& h = c.hyper;
  std::map<std::string, Section> s;
  s["model"] = {
      {"image_size", [&m](const std::string& v) { m.image_size = parse_size("image_size", v); }},
      {"patch_size", [&m](const std::string& v) { m.patch_size = parse_size("patch_size", v); }},
      {"d_model", [&m](const std::string& v) { m.d_model = parse_size("d_model", v); }},
      {"n_heads", [&m](const std::string& v) { m.n_heads = parse_size("n_heads", v); }},
      {"d_ff", [&m](const std::string& v) { m.d_ff = parse_size("d_ff", v); }},
      {"enc_layers", [&m](const std::string& v) { m.n_enc_layers = parse_size("enc_layers", v); }},
      {"dec_layers", [&m](const std::string& v) { m.n_dec_layers = parse_size("dec_layers", v); }},
      {"max_caption_len",
       [&m](const std::string& v) { m.max_caption_len = parse_size("max_caption_len", v); }},
      {"ln_eps", [&m](const std::string& v) { m.ln_eps = parse_double("ln_eps", v); }},
      {"seed", [&m](const std::string& v) { m.seed = parse_size("seed", v); }},
  };
  s["data"] = {
      {"seed", [&d](const std::string& v) { d.seed = parse_size("seed", v); }},
      {"general_samples",
       [&d](const std::string& v) { d.general_samples = parse_size("general_samples", v); }},
      {"screen_samples",
       [&d](const std::string& v) { d.screen_samples = parse_size("screen_samples", v); }},
      {"train_ratio", [&d](const std::string& v) { d.ratios[0] = parse_double("train_ratio", v); }},
      {"val_ratio", [&d](const std::string& v) { d.ratios[1] = parse_double("val_ratio", v); }},
      {"test_ratio", [&d](const std::string& v) { d.ratios[2] = parse_double("test_ratio", v); }},
  };
  s["pretrain"] = train_section(c.pretrain);
  s["train"] = train_section(c.finetune);
  s["strategy"] = {
      {"name", [&c](const std::string& v) { c.strategy = v; }},
      {"houlsby_bottleneck",
       [&h](const std::string& v) { h.houlsby_bottleneck = parse_size("houlsby_bottleneck", v); }},
      {"lora_rank", [&h](const std::string& v) { h.lora_rank = parse_size("lora_rank", v); }},
      {"lora_alpha", [&h](const std::string& v) { h.lora_alpha = parse_double("lora_alpha", v); }},
      {"lora_targets",
       [&h](const std::string& v) { h.lora_targets = lora_targets_from_string(v); }},
      {"evp_bottleneck",
       [&h](const std::string& v) { h.evp_bottleneck = parse_size("evp_bottleneck", v); }},
      {"fft_mask_ratio",
       [&h](const std::string& v) { h.fft_mask_ratio = parse_double("fft_mask_ratio", v); }},
      {"fft_keep_high",
       [&h](const std::string& v) { h.fft_keep_high = parse_bool("fft_keep_high", v); }},
  };
  s["grid"] = {
      {"seeds",
       [&c](const std::string& v) {
         c.seeds.clear();
         for (const auto& item : parse_list(v)) c.seeds.push_back(parse_size("seeds", item));
       }},
      {"cells",
       [&c](const std::string& v) {
         c.cells = v == "all" ? strategy_names() : parse_list(v);
       }},
      {"workers", [&c](const std::string& v) { c.workers = parse_size("workers", v); }},
  };
  s["output"] = {
      {"dir", [&c](const std::string& v) { c.out_dir = v; }},
      {"base_checkpoint", [&c](const std::string& v) { c.base_checkpoint = v; }},
      {"checkpoint_dtype",
       [&c](const std::string& v) {
         if (v == "f64") c.checkpoint_dtype = CheckpointDtype::f64;
         else if (v == "f32") c.checkpoint_dtype = CheckpointDtype::f32;
         else bad_value("checkpoint_dtype", v, "f32 or f64");
       }},
      {"save_checkpoints",
       [&c](const std::string& v) { c.save_cell_checkpoints = parse_bool("save_checkpoints", v); }},
  };
  return s;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

std::vector<const data::Sample*> part(const std::vector<data::Sample>& corpus, data::Split s) {
  auto out = data::select(corpus, s);
  if (out.empty()) throw DataError("split '" + data::to_string(s) + "' is empty");
  return out;
}

// Copies of every trainable tensor, restorable in place.
class TrainableState {
 public:
  TrainableState(CaptionModel& model, const FreezePlan& plan) {
    for (const auto& path : plan.trainable_paths()) {
      auto t = model.parameter(path);
      saved_.emplace_back(t, std::vector<double>(t.data().begin(), t.data().end()));
    }
  }
  void capture() {
    for (auto& [t, data] : saved_) std::copy(t.data().begin(), t.data().end(), data.begin());
  }
  void restore() {
    for (auto& [t, data] : saved_) std::copy(data.begin(), data.end(), t.mutable_data().begin());
  }

 private:
  std::vector<std::pair<Tensor, std::vector<double>>> saved_;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

ModelConfig RunConfig::default_model() {
  ModelConfig m;
  m.image_size = 32;
  m.patch_size = 8;
  m.d_model = 48;
  m.n_heads = 4;
  m.d_ff = 192;
  m.n_enc_layers = 2;
  m.n_dec_layers = 2;
  m.max_caption_len = 16;
  m.seed = 1;
  return m;
}

TrainConfig RunConfig::default_train() {
  TrainConfig t;
  t.lr = 1e-3;
  t.batch_size = 16;
  t.epochs = 20;
  t.group_captions = true;
  return t;
}

RunConfig RunConfig::from_file(const fs::path& file) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(file.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  RunConfig config;
  auto sections = sections_for(config);
  for (const auto& [name, body] : tree) {
    auto sec = sections.find(name);
    if (sec == sections.end()) throw ConfigError("unknown config section [" + name + "]");
    if (body.empty() && !body.data().empty())
      throw ConfigError("key '" + name + "' outside any section");
    for (const auto& [key, value] : body) {
      auto setter = sec->second.find(key);
      if (setter == sec->second.end())
        throw ConfigError("unknown config key '" + key + "' in [" + name + "]");
      try {
        setter->second(value.data());
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("[" + name + "] " + key + ": " + e.what());
      }
    }
  }
  config.validate();
  return config;
}

fs::path RunConfig::base_path() const {
  return base_checkpoint.empty() ? out_dir / "base.ckpt" : base_checkpoint;
}

void RunConfig::validate() const {
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 8;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  pretrain.validate();
  finetune.validate();
  if (!is_strategy_name(strategy)) make_strategy(strategy, hyper);  // throws the name list
  if (cells.empty()) throw ConfigError("grid needs at least one cell");
  std::set<std::string> seen;
  for (const auto& c : cells) {
    if (!is_strategy_name(c)) make_strategy(c, hyper);
    if (!seen.insert(c).second) throw ConfigError("grid cell '" + c + "' listed twice");
  }
  if (seeds.empty()) throw ConfigError("grid needs at least one seed");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (data.general_samples < 10 || data.screen_samples < 10)
    throw ConfigError("corpora need at least 10 samples each");
}

Corpora make_corpora(const DataConfig& config) {
  Corpora c;
  c.general = data::generate_corpus(config.seed, config.general_samples, data::Domain::general);
  c.screen = data::generate_corpus(config.seed, config.screen_samples, data::Domain::screen);
  data::split(c.general, config.ratios, config.seed);
  data::split(c.screen, config.ratios, config.seed);
  std::vector<std::string> texts;
  for (const auto* corpus : {&c.general, &c.screen})
    for (const auto& s : *corpus)
      for (const auto& t : s.captions) texts.push_back(t);
  c.vocab = data::build_vocab(texts);
  return c;
}

CaptionModel make_model(const RunConfig& config, const Corpora& corpora) {
  ModelConfig m = config.model;
  m.vocab_size = corpora.vocab.size();
  return CaptionModel(m);
}

PretrainOutcome pretrain(const RunConfig& config, const Corpora& corpora,
                         const fs::path& checkpoint, const EpochCallback& on_epoch) {
  CaptionModel model = make_model(config, corpora);
  const auto plan = attach(model, make_strategy("ft_a", config.hyper), config.model.seed);
  const auto train_set = make_training_set(part(corpora.general, data::Split::train),
                                           corpora.vocab, config.model.image_size,
                                           config.model.max_caption_len);
  PretrainOutcome out;
  out.history = train(model, plan, train_set, config.pretrain, on_epoch);
  if (checkpoint.has_parent_path()) ensure_dir(checkpoint.parent_path());
  save_full(model, checkpoint, config.checkpoint_dtype);
  out.general_test = evaluate(model, part(corpora.general, data::Split::test), corpora.vocab);
  out.zero_shot = evaluate(model, part(corpora.screen, data::Split::test), corpora.vocab);
  return out;
}

metrics::MetricReport zero_shot(const RunConfig& config, const Corpora& corpora,
                                const fs::path& base) {
  CaptionModel model = make_model(config, corpora);
  load_full(model, base);
  return evaluate(model, part(corpora.screen, data::Split::test), corpora.vocab);
}

CellResult run_cell(const RunConfig& config, const Corpora& corpora, const fs::path& base,
                    const std::string& name, std::uint64_t seed,
                    const std::optional<fs::path>& cell_dir) {
  CellResult result;
  result.name = name;
  result.seed = seed;

  CaptionModel model = make_model(config, corpora);
  load_full(model, base);
  const auto plan = attach(model, make_strategy(name, config.hyper), seed);
  const double percent = count_trainable(model, plan).percent;

  TrainConfig tc = config.finetune;
  tc.seed = seed;
  const auto train_set = make_training_set(part(corpora.screen, data::Split::train),
                                           corpora.vocab, config.model.image_size,
                                           config.model.max_caption_len);
  const auto val = part(corpora.screen, data::Split::val);
  const auto test = part(corpora.screen, data::Split::test);

  TrainableState best(model, plan);
  double best_cider = -1.0;
  std::vector<double> val_cider;
  result.history = train(model, plan, train_set, tc, [&](std::size_t epoch, double) {
    const double c = evaluate(model, val, corpora.vocab).cider;
    val_cider.push_back(c);
    if (c > best_cider) {
      best_cider = c;
      result.best_epoch = epoch;
      best.capture();
    }
  });
  if (!result.history.frozen_violations.empty()) {
    throw AuditError("frozen parameters changed during training: " +
                     result.history.frozen_violations.front());
  }
  result.optimizer_elements = AdamW(model, plan, tc).state_elements();
  result.last = evaluate(model, test, corpora.vocab, percent);

  if (cell_dir) {
    ensure_dir(*cell_dir);
    std::ofstream log(*cell_dir / "log.tsv");
    for (std::size_t e = 0; e < result.history.epoch_loss.size(); ++e)
      log << e << '\t' << fixed(result.history.epoch_loss[e], 6) << '\n';
    std::ofstream vlog(*cell_dir / "val.tsv");
    for (std::size_t e = 0; e < val_cider.size(); ++e)
      vlog << e << '\t' << fixed(val_cider[e], 6) << '\n';
    if (config.save_cell_checkpoints)
      save_checkpoint(model, plan, *cell_dir / "adapter.ckpt", config.checkpoint_dtype);
  }

  if (result.best_epoch + 1 == result.history.epoch_loss.size()) {
    result.best_val = result.last;
  } else {
    best.restore();
    result.best_val = evaluate(model, test, corpora.vocab, percent);
  }
  return result;
}

std::string results_line(const std::string& name, const metrics::MetricReport& report,
                         const std::string& seed) {
  return name + '\t' + fixed(report.bleu4, 4) + '\t' + fixed(report.cider, 6) + '\t' +
         fixed(report.trainable_percent, 4) + '\t' + seed;
}

GridReport run_grid(const RunConfig& config, const Corpora& corpora, const fs::path& base,
                    const fs::path& out, const CellCallback& on_cell) {
  config.validate();
  if (!fs::exists(base)) throw CheckpointError("base checkpoint " + base.string() + " not found");
  ensure_dir(out);

  struct Task {
    std::uint64_t seed;
    std::string name;
  };
  std::vector<Task> tasks;
  for (auto seed : config.seeds)
    for (const auto& name : config.cells) tasks.push_back({seed, name});

  GridReport report;
  report.cells.resize(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const auto& task = tasks[i];
      const auto dir = out / ("seed_" + std::to_string(task.seed)) / task.name;
      CellResult r;
      try {
        r = run_cell(config, corpora, base, task.name, task.seed, dir);
      } catch (const std::exception& e) {
        r = CellResult{};
        r.name = task.name;
        r.seed = task.seed;
        r.failed = true;
        r.error = e.what();
      }
      report.cells[i] = std::move(r);
      if (on_cell) {
        std::lock_guard lock(callback_mutex);
        on_cell(report.cells[i]);
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t n = std::min(config.workers, tasks.size());
    for (std::size_t w = 1; w < n; ++w) pool.emplace_back(worker);
    worker();
  }

  for (auto seed : config.seeds) {
    const auto dir = out / ("seed_" + std::to_string(seed));
    ensure_dir(dir);
    std::ofstream file(dir / "results.tsv");
    for (const auto& c : report.cells) {
      if (c.seed != seed) continue;
      if (c.failed) {
        file << c.name << "\tFAILED\tFAILED\tFAILED\t" << seed << '\n';
        std::ofstream(dir / c.name / "error.txt") << c.error << '\n';
      } else {
        file << results_line(c.name, c.last, std::to_string(seed)) << '\n';
      }
    }
  }
  for (const auto& c : report.cells) report.failures += c.failed ? 1 : 0;

  const auto rows = medians(report, config.cells);
  std::ofstream summary(out / "results.tsv");
  for (const auto& row : rows) {
    if (row.seeds == 0) summary << row.name << "\tFAILED\tFAILED\tFAILED\tmedian\n";
    else summary << results_line(row.name, row.report, "median") << '\n';
  }
  std::ofstream(out / "table.txt") << format_tables(rows);
  return report;
}

std::vector<MedianRow> medians(const GridReport& report, const std::vector<std::string>& cells) {
  std::vector<MedianRow> rows;
  for (const auto& name : cells) {
    MedianRow row;
    row.name = name;
    std::vector<double> bleu, cider;
    for (const auto& c : report.cells) {
      if (c.name != name || c.failed) continue;
      bleu.push_back(c.last.bleu4);
      cider.push_back(c.last.cider);
      row.report.trainable_percent = c.last.trainable_percent;
      row.report.n_images = c.last.n_images;
    }
    row.seeds = bleu.size();
    if (row.seeds) {
      row.report.bleu4 = median(bleu);
      row.report.cider = median(cider);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_tables(const std::vector<MedianRow>& rows,
                          const std::optional<metrics::MetricReport>& zero_shot) {
  std::size_t width = std::string("Zero-shot").size();
  for (const auto& r : rows) width = std::max(width, display_name(r.name).size());

  auto line = [width](const std::string& label, const std::string& b, const std::string& c,
                      const std::string& p) {
    std::string s = label;
    s.resize(width + 2, ' ');
    auto col = [](const std::string& v) { return std::string(v.size() < 8 ? 8 - v.size() : 0, ' ') + v; };
    return s + col(b) + "  " + col(c) + "  " + col(p) + '\n';
  };

  std::ostringstream out;
  for (int table = 1; table <= 3; ++table) {
    std::vector<const MedianRow*> members;
    for (const auto& r : rows)
      if (table_of(r.name) == table || r.name == "ft_a") members.push_back(&r);
    if (members.empty()) continue;
    if (table > 1) out << '\n';
    out << "Table " << table << '\n';
    out << line("Method", "BLEU-4", "CIDEr", "Params(%)");
    if (zero_shot && table == 1) out << line("Zero-shot", fixed(zero_shot->bleu4, 2), fixed(zero_shot->cider, 3), "0.00");
    for (const auto* r : members) {
      if (r->seeds == 0) {
        out << line(display_name(r->name), "FAILED", "FAILED", "FAILED");
      } else {
        out << line(display_name(r->name), fixed(r->report.bleu4, 2), fixed(r->report.cider, 3),
                    fixed(r->report.trainable_percent, 2));
      }
    }
  }
  return out.str();
}

}  // namespace peftcap
