#include "peftcap/strategy.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "peftcap/errors.hpp"

namespace peftcap {

namespace {

struct NamedRow {
  const char* name;
  const char* label;
  int table;
};

constexpr std::array<NamedRow, 23> kRows{{
    {"ft_a", "FT (A)", 1},
    {"ft_v", "FT (V)", 1},
    {"ft_t", "FT (T)", 1},
    {"evp", "EVP (V)", 1},
    {"evp_gs", "EVP-gs (V)", 1},
    {"evp_fft", "EVP-fft (V)", 1},
    {"bitfit_v", "BitFit (V)", 1},
    {"bitfit_t", "BitFit (T)", 1},
    {"bitfit_a", "BitFit (A)", 3},
    {"houlsby_t", "Houlsby (T)", 1},
    {"lora_t", "LoRA (T)", 1},
    {"linear_ft_t", "linear & FT (T)", 2},
    {"linear_houlsby", "linear & Houlsby", 2},
    {"linear_lora", "linear & LoRA", 2},
    {"vitblock_ft_t", "ViT block & FT (T)", 2},
    {"vitblock_houlsby", "ViT block & Houlsby", 2},
    {"vitblock_lora", "ViT block & LoRA", 2},
    {"evp_houlsby", "EVP & Houlsby", 3},
    {"evpgs_houlsby", "EVP-gs & Houlsby", 3},
    {"evpfft_houlsby", "EVP-fft & Houlsby", 3},
    {"evp_lora", "EVP & LoRA", 3},
    {"evpgs_lora", "EVP-gs & LoRA", 3},
    {"evpfft_lora", "EVP-fft & LoRA", 3},
}};

const NamedRow* find_row(const std::string& name) {
  for (const auto& row : kRows)
    if (name == row.name) return &row;
  return nullptr;
}

std::string valid_names() {
  std::string out;
  for (const auto& row : kRows) {
    if (!out.empty()) out += ", ";
    out += row.name;
  }
  return out;
}

}  // namespace

std::string to_string(Scope scope) {
  switch (scope) {
    case Scope::all: return "all";
    case Scope::encoder: return "encoder";
    case Scope::decoder: return "decoder";
  }
  return "?";
}

Scope scope_from_string(const std::string& name) {
  if (name == "all" || name == "a") return Scope::all;
  if (name == "encoder" || name == "v") return Scope::encoder;
  if (name == "decoder" || name == "t") return Scope::decoder;
  throw StrategyError("unknown scope '" + name + "' (all|encoder|decoder)");
}

std::string describe(const StrategyElement& element) {
  std::ostringstream os;
  std::visit(
      [&os](const auto& e) {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, strategy::FullFT>) {
          os << "FullFT(" << to_string(e.scope) << ")";
        } else if constexpr (std::is_same_v<T, strategy::BitFit>) {
          os << "BitFit(" << to_string(e.scope) << ")";
        } else if constexpr (std::is_same_v<T, strategy::Houlsby>) {
          os << "Houlsby(" << to_string(e.scope) << ", m=" << e.bottleneck << ")";
        } else if constexpr (std::is_same_v<T, strategy::Lora>) {
          os << "LoRA(" << to_string(e.scope) << ", r=" << e.rank << ", alpha=" << e.alpha << ", "
             << to_string(e.targets) << ")";
        } else if constexpr (std::is_same_v<T, strategy::Evp>) {
          os << "EVP(" << features::to_string(e.feature.kind) << ", r=" << e.bottleneck << ")";
        } else {
          os << "Projection(" << to_string(e.kind) << (e.trainable ? ", trainable" : ", frozen")
             << ")";
        }
      },
      element);
  return os.str();
}

std::string describe(const TuningStrategy& strategy) {
  std::string out = strategy.name.empty() ? std::string("custom") : strategy.name;
  out += ":";
  for (const auto& e : strategy.elements) out += " " + describe(e);
  return out;
}

StrategyHyper StrategyHyper::toy() { return StrategyHyper{}; }

StrategyHyper StrategyHyper::paper() {
  StrategyHyper h;
  h.houlsby_bottleneck = 48;
  h.lora_rank = 8;
  h.lora_alpha = 8.0;
  h.evp_bottleneck = 16;
  return h;
}

const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& row : kRows) out.emplace_back(row.name);
    return out;
  }();
  return names;
}

bool is_strategy_name(const std::string& name) { return find_row(name) != nullptr; }

std::string display_name(const std::string& name) {
  const auto* row = find_row(name);
  return row ? row->label : name;
}

int table_of(const std::string& name) {
  const auto* row = find_row(name);
  return row ? row->table : 0;
}

TuningStrategy make_strategy(const std::string& name, const StrategyHyper& h) {
  if (!is_strategy_name(name))
    throw ConfigError("unknown strategy '" + name + "'; valid names: " + valid_names());
  using namespace strategy;
  auto evp = [&h](features::FeatureKind kind) {
    return Evp{Scope::encoder, {kind, h.fft_mask_ratio, h.fft_keep_high}, h.evp_bottleneck};
  };
  const Houlsby houlsby{Scope::decoder, h.houlsby_bottleneck};
  const Lora lora{Scope::decoder, h.lora_rank, h.lora_alpha, h.lora_targets};
  const Projection linear{ProjectionKind::linear, true, false};
  const Projection vit{ProjectionKind::vit_block, true, false};
  using features::FeatureKind;

  TuningStrategy s{name, {}};
  auto& el = s.elements;
  if (name == "ft_a") el = {FullFT{Scope::all}};
  else if (name == "ft_v") el = {FullFT{Scope::encoder}};
  else if (name == "ft_t") el = {FullFT{Scope::decoder}};
  else if (name == "evp") el = {evp(FeatureKind::image)};
  else if (name == "evp_gs") el = {evp(FeatureKind::grayscale)};
  else if (name == "evp_fft") el = {evp(FeatureKind::fft_highfreq)};
  else if (name == "bitfit_v") el = {BitFit{Scope::encoder}};
  else if (name == "bitfit_t") el = {BitFit{Scope::decoder}};
  else if (name == "bitfit_a") el = {BitFit{Scope::all}};
  else if (name == "houlsby_t") el = {houlsby};
  else if (name == "lora_t") el = {lora};
  else if (name == "linear_ft_t") el = {linear, FullFT{Scope::decoder}};
  else if (name == "linear_houlsby") el = {linear, houlsby};
  else if (name == "linear_lora") el = {linear, lora};
  else if (name == "vitblock_ft_t") el = {vit, FullFT{Scope::decoder}};
  else if (name == "vitblock_houlsby") el = {vit, houlsby};
  else if (name == "vitblock_lora") el = {vit, lora};
  else if (name == "evp_houlsby") el = {evp(FeatureKind::image), houlsby};
  else if (name == "evpgs_houlsby") el = {evp(FeatureKind::grayscale), houlsby};
  else if (name == "evpfft_houlsby") el = {evp(FeatureKind::fft_highfreq), houlsby};
  else if (name == "evp_lora") el = {evp(FeatureKind::image), lora};
  else if (name == "evpgs_lora") el = {evp(FeatureKind::grayscale), lora};
  else if (name == "evpfft_lora") el = {evp(FeatureKind::fft_highfreq), lora};
  return s;
}

Attachments attachments_for(const TuningStrategy& s) {
  Attachments a;
  bool has_projection = false;
  for (const auto& element : s.elements) {
    std::visit(
        [&](const auto& e) {
          using T = std::decay_t<decltype(e)>;
          if constexpr (std::is_same_v<T, strategy::Houlsby>) {
            if (e.scope != Scope::decoder)
              throw StrategyError("Houlsby adapters support only the decoder scope, got " +
                                  to_string(e.scope));
            if (a.houlsby_bottleneck) throw StrategyError("duplicate Houlsby element");
            if (e.bottleneck == 0) throw RankError("Houlsby bottleneck must be positive");
            a.houlsby_bottleneck = e.bottleneck;
          } else if constexpr (std::is_same_v<T, strategy::Lora>) {
            if (e.scope != Scope::decoder)
              throw StrategyError("LoRA supports only the decoder scope, got " + to_string(e.scope));
            if (a.lora_rank) throw StrategyError("duplicate LoRA element");
            if (e.rank == 0) throw RankError("LoRA rank must be positive");
            a.lora_rank = e.rank;
            a.lora_alpha = e.alpha;
            a.lora_targets = e.targets;
          } else if constexpr (std::is_same_v<T, strategy::Evp>) {
            if (e.scope != Scope::encoder)
              throw StrategyError("EVP supports only the encoder scope, got " + to_string(e.scope));
            if (a.evp_bottleneck) throw StrategyError("duplicate EVP element");
            if (e.bottleneck == 0) throw RankError("EVP bottleneck must be positive");
            a.evp_bottleneck = e.bottleneck;
            a.evp_channels = features::channels(e.feature.kind);
          } else if constexpr (std::is_same_v<T, strategy::Projection>) {
            if (has_projection) throw StrategyError("duplicate Projection element");
            if (e.kind == ProjectionKind::none)
              throw StrategyError("Projection element needs kind linear or vit_block");
            has_projection = true;
            a.projection = e.kind;
            a.projection_zero_init = e.zero_init;
          }
        },
        element);
  }
  return a;
}

}  // namespace peftcap
