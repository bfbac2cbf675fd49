#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "peftcap/dataset.hpp"
#include "peftcap/freeze.hpp"
#include "peftcap/metrics.hpp"
#include "peftcap/model.hpp"

namespace peftcap {

struct TrainConfig {
  double lr = 5e-5;
  double weight_decay = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // Shuffle images instead of instances; an image's captions stay adjacent.
  bool group_captions = false;
  std::size_t max_steps = 0;  // 0 = run every epoch to the end

  // Throws ConfigError naming the offending field.
  void validate() const;
};

/// AdamW with decoupled weight decay: θ ← θ(1 − lr·wd), then the
/// bias-corrected Adam update. State exists only for the parameters handed in.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, const TrainConfig& config);
  // The trainable paths of `plan`.
  AdamW(const CaptionModel& model, const FreezePlan& plan, const TrainConfig& config);

  // Throws OptimizerError when a parameter has no gradient.
  void step();
  void zero_grad();

  std::size_t steps() const { return t_; }
  std::vector<std::string> state_paths() const;
  // Elements held across both moment buffers.
  std::size_t state_elements() const;

 private:
  struct Slot {
    std::string path;
    Tensor param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  TrainConfig config_;
  std::size_t t_ = 0;
};

// Box-downsamples an image to the model's input size when they differ.
Tensor fit_image(const Tensor& image, std::size_t size);

/// One image with all of its tokenized captions. Training treats each
/// caption as its own instance; captions of the same image inside a batch
/// share a single encoder pass.
struct CaptionedImage {
  Tensor image;  // already at model resolution
  std::vector<std::vector<int>> captions;
};

std::vector<CaptionedImage> make_training_set(const std::vector<const data::Sample*>& samples,
                                              const data::Vocab& vocab, std::size_t image_size,
                                              std::size_t max_caption_len);

struct TrainResult {
  std::vector<double> epoch_loss;  // mean of batch losses per epoch
  std::size_t steps = 0;
  std::vector<std::string> frozen_violations;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/// Runs AdamW over every (image, caption) instance. The model must already
/// carry the plan's flags. Frozen paths are checked against a snapshot at the
/// end. NaN or infinite loss throws TrainingError naming the batch and lr.
TrainResult train(CaptionModel& model, const FreezePlan& plan,
                  const std::vector<CaptionedImage>& data, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct Generated {
  int id = 0;
  std::string text;
};

// Greedy captions for each sample, generated at model resolution.
std::vector<Generated> generate_captions(const CaptionModel& model,
                                         const std::vector<const data::Sample*>& samples,
                                         const data::Vocab& vocab);

/// Greedy generation plus BLEU-4 / CIDEr against each sample's references.
metrics::MetricReport evaluate(const CaptionModel& model,
                               const std::vector<const data::Sample*>& samples,
                               const data::Vocab& vocab, double trainable_percent = 0.0);

enum class CheckpointDtype { f32, f64 };

struct StoredTensor {
  std::string path;
  Shape shape;
  std::vector<double> data;
};

void write_checkpoint(const std::filesystem::path& file, const std::vector<NamedParam>& params,
                      CheckpointDtype dtype = CheckpointDtype::f64);
std::vector<StoredTensor> read_checkpoint(const std::filesystem::path& file);

// Trainable paths only.
void save_checkpoint(const CaptionModel& model, const FreezePlan& plan,
                     const std::filesystem::path& file,
                     CheckpointDtype dtype = CheckpointDtype::f64);
// Every registry path.
void save_full(const CaptionModel& model, const std::filesystem::path& file,
               CheckpointDtype dtype = CheckpointDtype::f64);

/// Copies stored tensors into the model. The stored path set must equal
/// `expected` exactly; otherwise CheckpointError lists missing and extra paths.
void load_into(CaptionModel& model, const std::vector<StoredTensor>& stored,
               const std::vector<std::string>& expected, const std::string& origin);
void load_checkpoint(CaptionModel& model, const std::filesystem::path& file,
                     const FreezePlan& plan);
void load_full(CaptionModel& model, const std::filesystem::path& file);

}  // namespace peftcap
