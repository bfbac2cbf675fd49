#include "peftcap/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "peftcap/errors.hpp"
#include "peftcap/features.hpp"
#include "peftcap/ops.hpp"
#include "peftcap/rng.hpp"

namespace peftcap {

namespace {

bool touches_encoder(const FreezePlan& plan) {
  for (const auto& [path, flag] : plan.entries())
    if (flag && (path.starts_with("encoder.") || path.starts_with("evp."))) return true;
  return false;
}

std::size_t target_tokens(const std::vector<int>& caption) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < caption.size(); ++i)
    if (caption[i] != tokens::kPad) ++n;
  return n;
}

const char* dtype_tag(CheckpointDtype d) { return d == CheckpointDtype::f32 ? "F32" : "F64"; }

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, const TrainConfig& config)
    : config_(config) {
  config_.validate();
  for (auto& [path, t] : params) {
    if (!t.is_leaf()) throw OptimizerError("'" + path + "' is not a leaf tensor");
    slots_.push_back({path, t, std::vector<double>(t.numel(), 0.0),
                      std::vector<double>(t.numel(), 0.0)});
  }
}

AdamW::AdamW(const CaptionModel& model, const FreezePlan& plan, const TrainConfig& config)
    : AdamW(
          [&] {
            std::vector<std::pair<std::string, Tensor>> out;
            for (const auto& p : model.parameters())
              if (plan.trainable(p.path)) out.emplace_back(p.path, p.tensor);
            return out;
          }(),
          config) {}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

void AdamW::step() {
  for (const auto& s : slots_)
    if (!s.param.has_grad()) throw OptimizerError("no gradient for trainable '" + s.path + "'");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - config_.lr * config_.weight_decay;
  for (auto& s : slots_) {
    auto theta = s.param.mutable_data();
    auto g = s.param.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] *= decay;
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      theta[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

std::vector<std::string> AdamW::state_paths() const {
  std::vector<std::string> out;
  for (const auto& s : slots_) out.push_back(s.path);
  return out;
}

std::size_t AdamW::state_elements() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.m.size() + s.v.size();
  return n;
}

Tensor fit_image(const Tensor& image, std::size_t size) {
  if (image.rank() == 3 && image.dim(1) == size && image.dim(2) == size) return image;
  return features::resize_box(image, size);
}

std::vector<CaptionedImage> make_training_set(const std::vector<const data::Sample*>& samples,
                                              const data::Vocab& vocab, std::size_t image_size,
                                              std::size_t max_caption_len) {
  std::vector<CaptionedImage> out;
  out.reserve(samples.size());
  for (const auto* s : samples) {
    CaptionedImage item;
    for (const auto& pair : data::duplicate_for_training(*s)) {
      auto ids = data::tokenize(pair.caption, vocab);
      if (ids.size() > max_caption_len) {
        throw DataError("caption of sample " + std::to_string(s->id) + " has " +
                        std::to_string(ids.size()) + " tokens, model allows " +
                        std::to_string(max_caption_len));
      }
      item.captions.push_back(std::move(ids));
    }
    item.image = fit_image(s->image, image_size);
    out.push_back(std::move(item));
  }
  return out;
}

TrainResult train(CaptionModel& model, const FreezePlan& plan,
                  const std::vector<CaptionedImage>& data, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (data.empty()) throw DataError("training set is empty");
  AdamW opt(model, plan, config);
  const ParamSnapshot before = snapshot(model);

  std::vector<VisualInput> inputs;
  inputs.reserve(data.size());
  for (const auto& d : data) inputs.push_back(model.prepare(d.image));

  // With the encoder and its prompts frozen, its output is a constant per image.
  const bool cache = !touches_encoder(plan);
  std::vector<Tensor> backbone;
  if (cache) {
    NoGradGuard no_grad;
    for (const auto& in : inputs) backbone.push_back(model.encode_backbone(in));
  }

  std::vector<std::pair<std::uint32_t, std::uint32_t>> instances;
  for (std::uint32_t i = 0; i < data.size(); ++i)
    for (std::uint32_t c = 0; c < data[i].captions.size(); ++c) instances.emplace_back(i, c);

  TrainResult result;
  bool stop = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    auto order = instances;
    if (config.shuffle) {
      Rng rng(mix_seed(config.seed, epoch));
      if (config.group_captions) {
        std::vector<std::uint32_t> ids(data.size());
        std::iota(ids.begin(), ids.end(), 0u);
        rng.shuffle(ids);
        order.clear();
        for (auto i : ids)
          for (std::uint32_t c = 0; c < data[i].captions.size(); ++c) order.emplace_back(i, c);
      } else {
        rng.shuffle(order);
      }
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      // Group the batch by image, keeping first-appearance order.
      std::vector<std::uint32_t> images;
      std::vector<std::vector<std::vector<int>>> groups;
      std::size_t total_tokens = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto [img, cap] = order[k];
        auto it = std::find(images.begin(), images.end(), img);
        if (it == images.end()) {
          images.push_back(img);
          groups.emplace_back();
          it = images.end() - 1;
        }
        const auto& caption = data[img].captions[cap];
        groups[static_cast<std::size_t>(it - images.begin())].push_back(caption);
        total_tokens += target_tokens(caption);
      }

      opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t g = 0; g < images.size(); ++g) {
        std::size_t tokens = 0;
        for (const auto& c : groups[g]) tokens += target_tokens(c);
        const double weight = static_cast<double>(tokens) / static_cast<double>(total_tokens);
        const Tensor visual = cache ? model.project_visual(backbone[images[g]])
                                    : model.encode(inputs[images[g]]);
        Tensor loss = caption_group_loss(model, visual, groups[g]);
        batch_loss += weight * loss.item();
        if (!loss.is_leaf()) backward(ops::scale(loss, weight));
      }
      if (!std::isfinite(batch_loss)) {
        std::ostringstream os;
        os << "non-finite loss " << batch_loss << " at epoch " << epoch << ", batch " << batches
           << " (lr " << config.lr << ")";
        throw TrainingError(os.str());
      }
      opt.step();
      loss_sum += batch_loss;
      ++batches;
      ++result.steps;
      if (config.max_steps && result.steps >= config.max_steps) {
        stop = true;
        break;
      }
    }
    const double mean = loss_sum / static_cast<double>(batches);
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.frozen_violations = assert_frozen(before, model, plan);
  return result;
}

std::vector<Generated> generate_captions(const CaptionModel& model,
                                         const std::vector<const data::Sample*>& samples,
                                         const data::Vocab& vocab) {
  NoGradGuard no_grad;
  std::vector<Generated> out;
  out.reserve(samples.size());
  const auto& cfg = model.config();
  for (const auto* s : samples) {
    auto ids = generate(model, fit_image(s->image, cfg.image_size), cfg.max_caption_len);
    out.push_back({s->id, data::detokenize(ids, vocab)});
  }
  return out;
}

metrics::MetricReport evaluate(const CaptionModel& model,
                               const std::vector<const data::Sample*>& samples,
                               const data::Vocab& vocab, double trainable_percent) {
  if (samples.empty()) throw DataError("evaluation split is empty");
  const auto generated = generate_captions(model, samples, vocab);
  std::vector<metrics::EvalItem> batch;
  batch.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    metrics::EvalItem item;
    item.candidate = metrics::tokens_of(generated[i].text);
    for (const auto& ref : samples[i]->captions)
      item.references.push_back(metrics::tokens_of(data::lowercase(ref)));
    batch.push_back(std::move(item));
  }
  metrics::MetricReport report;
  report.bleu4 = metrics::bleu4(batch);
  report.cider = metrics::cider(batch);
  report.n_images = samples.size();
  report.trainable_percent = trainable_percent;
  return report;
}

void write_checkpoint(const std::filesystem::path& file, const std::vector<NamedParam>& params,
                      CheckpointDtype dtype) {
  static_assert(std::endian::native == std::endian::little, "little-endian host expected");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + file.string());
  out << "PEFTCKPT 1\n";
  for (const auto& p : params) {
    out << p.path << ' ' << dtype_tag(dtype);
    for (auto d : p.tensor.shape()) out << ' ' << d;
    out << '\n';
  }
  out << '\n';
  for (const auto& p : params) {
    auto data = p.tensor.data();
    if (dtype == CheckpointDtype::f64) {
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size_bytes()));
    } else {
      std::vector<float> buf(data.begin(), data.end());
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  }
  if (!out) throw CheckpointError("short write to " + file.string());
}

std::vector<StoredTensor> read_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != "PEFTCKPT 1")
    throw CheckpointError(file.string() + ": not a PEFTCKPT 1 file");
  struct Entry {
    StoredTensor t;
    bool f32;
  };
  std::vector<Entry> entries;
  while (std::getline(in, line) && !line.empty()) {
    std::istringstream ls(line);
    Entry e;
    std::string tag;
    if (!(ls >> e.t.path >> tag) || (tag != "F32" && tag != "F64"))
      throw CheckpointError(file.string() + ": bad manifest line '" + line + "'");
    e.f32 = tag == "F32";
    for (std::size_t d; ls >> d;) e.t.shape.push_back(d);
    entries.push_back(std::move(e));
  }
  std::vector<StoredTensor> out;
  for (auto& e : entries) {
    const std::size_t n = shape_numel(e.t.shape);
    e.t.data.resize(n);
    if (e.f32) {
      std::vector<float> buf(n);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
      std::copy(buf.begin(), buf.end(), e.t.data.begin());
    } else {
      in.read(reinterpret_cast<char*>(e.t.data.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
    }
    if (!in) throw CheckpointError(file.string() + ": payload truncated at '" + e.t.path + "'");
    out.push_back(std::move(e.t));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw CheckpointError(file.string() + ": trailing bytes after payload");
  return out;
}

void save_checkpoint(const CaptionModel& model, const FreezePlan& plan,
                     const std::filesystem::path& file, CheckpointDtype dtype) {
  std::vector<NamedParam> chosen;
  for (const auto& p : model.parameters())
    if (plan.trainable(p.path)) chosen.push_back(p);
  write_checkpoint(file, chosen, dtype);
}

void save_full(const CaptionModel& model, const std::filesystem::path& file,
               CheckpointDtype dtype) {
  write_checkpoint(file, model.parameters(), dtype);
}

void load_into(CaptionModel& model, const std::vector<StoredTensor>& stored,
               const std::vector<std::string>& expected, const std::string& origin) {
  std::set<std::string> want(expected.begin(), expected.end());
  std::set<std::string> have;
  for (const auto& t : stored) have.insert(t.path);
  std::vector<std::string> missing, extra;
  std::set_difference(want.begin(), want.end(), have.begin(), have.end(),
                      std::back_inserter(missing));
  std::set_difference(have.begin(), have.end(), want.begin(), want.end(),
                      std::back_inserter(extra));
  if (!missing.empty() || !extra.empty() || have.size() != stored.size()) {
    std::ostringstream os;
    os << origin << ": checkpoint does not match the model";
    auto list = [&os](const char* what, const std::vector<std::string>& paths) {
      if (paths.empty()) return;
      os << "; " << what << " (" << paths.size() << "):";
      for (std::size_t i = 0; i < paths.size() && i < 8; ++i) os << ' ' << paths[i];
      if (paths.size() > 8) os << " ...";
    };
    list("missing", missing);
    list("extra", extra);
    if (have.size() != stored.size()) os << "; duplicate paths";
    throw CheckpointError(os.str());
  }
  for (const auto& t : stored) {
    Tensor param = model.parameter(t.path);
    if (param.shape() != t.shape) {
      throw CheckpointError(origin + ": '" + t.path + "' stored as " + shape_str(t.shape) +
                            ", model expects " + shape_str(param.shape()));
    }
    auto dst = param.mutable_data();
    std::copy(t.data.begin(), t.data.end(), dst.begin());
  }
}

void load_checkpoint(CaptionModel& model, const std::filesystem::path& file,
                     const FreezePlan& plan) {
  load_into(model, read_checkpoint(file), plan.trainable_paths(), file.string());
}

void load_full(CaptionModel& model, const std::filesystem::path& file) {
  std::vector<std::string> all;
  for (const auto& p : model.parameters()) all.push_back(p.path);
  load_into(model, read_checkpoint(file), all, file.string());
}

}  // namespace peftcap
