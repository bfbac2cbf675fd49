#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "peftcap/features.hpp"
#include "peftcap/model_config.hpp"

namespace peftcap {

enum class Scope { all, encoder, decoder };

std::string to_string(Scope scope);
// Throws StrategyError for anything but all|encoder|decoder.
Scope scope_from_string(const std::string& name);

namespace strategy {

// Unfreezes every base weight inside the scope.
struct FullFT {
  Scope scope = Scope::all;
};

// Base parameters whose path ends in ".bias" (LayerNorm shifts included).
struct BitFit {
  Scope scope = Scope::all;
};

struct Houlsby {
  Scope scope = Scope::decoder;  // only decoder is supported
  std::size_t bottleneck = 8;
};

struct Lora {
  Scope scope = Scope::decoder;  // only decoder attention q and v
  std::size_t rank = 4;
  double alpha = 4.0;
  LoraTargets targets = LoraTargets::self_and_cross;
};

struct Evp {
  Scope scope = Scope::encoder;  // only encoder
  features::FeatureSpec feature;
  std::size_t bottleneck = 4;
};

struct Projection {
  ProjectionKind kind = ProjectionKind::linear;
  bool trainable = true;
  bool zero_init = false;
};

}  // namespace strategy

using StrategyElement = std::variant<strategy::FullFT, strategy::BitFit, strategy::Houlsby,
                                     strategy::Lora, strategy::Evp, strategy::Projection>;

struct TuningStrategy {
  std::string name;
  std::vector<StrategyElement> elements;
};

std::string describe(const StrategyElement& element);
std::string describe(const TuningStrategy& strategy);

// Adapter sizes used when building the named strategies.
struct StrategyHyper {
  std::size_t houlsby_bottleneck = 8;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  LoraTargets lora_targets = LoraTargets::self_and_cross;
  std::size_t evp_bottleneck = 4;
  double fft_mask_ratio = 0.25;
  bool fft_keep_high = true;

  static StrategyHyper toy();
  static StrategyHyper paper();
};

// The experiment matrix in table order. ft_a is shared by all three tables.
const std::vector<std::string>& strategy_names();
bool is_strategy_name(const std::string& name);
// Row label as printed in result tables, e.g. "EVP & Houlsby".
std::string display_name(const std::string& name);
// 1, 2 or 3: which results table the row belongs to (ft_a reports 1).
int table_of(const std::string& name);

// Throws ConfigError listing the valid names when `name` is unknown.
TuningStrategy make_strategy(const std::string& name, const StrategyHyper& hyper);

// Adapters the strategy will add to a base model.
Attachments attachments_for(const TuningStrategy& strategy);

}  // namespace peftcap
