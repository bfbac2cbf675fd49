#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "peftcap/model.hpp"
#include "peftcap/strategy.hpp"

namespace peftcap {

/// Path -> trainable flag, in registry order. Immutable once built.
class FreezePlan {
 public:
  FreezePlan() = default;
  explicit FreezePlan(std::vector<std::pair<std::string, bool>> entries);

  const std::vector<std::pair<std::string, bool>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  // Throws std::out_of_range for unknown paths.
  bool trainable(const std::string& path) const;
  bool contains(const std::string& path) const { return index_.contains(path); }
  std::vector<std::string> trainable_paths() const;

 private:
  std::vector<std::pair<std::string, bool>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Flags for an already-instrumented registry. Each element claims its own
/// parameters; two elements claiming one path, or a strategy that leaves
/// nothing trainable, is a StrategyError.
FreezePlan plan_for(const std::vector<ParamSpec>& registry, const TuningStrategy& strategy);

// Trainable element count the element contributes on this registry.
std::uint64_t element_count(const std::vector<ParamSpec>& registry, const StrategyElement& element);

/// Inserts the strategy's adapters (seeded per path), derives the plan, and
/// sets every parameter's requires_grad flag from it.
FreezePlan attach(CaptionModel& model, const TuningStrategy& strategy, std::uint64_t seed);

// Sets requires_grad from the plan; the plan must cover the registry exactly.
void apply_plan(CaptionModel& model, const FreezePlan& plan);

struct TrainableCount {
  std::uint64_t trainable = 0;
  std::uint64_t total = 0;
  double percent = 0.0;
};

// Throws AuditError when the plan and the registry disagree on paths.
TrainableCount count_trainable(const std::vector<ParamSpec>& registry, const FreezePlan& plan);
TrainableCount count_trainable(const CaptionModel& model, const FreezePlan& plan);

// Counts from shapes only, nothing allocated.
TrainableCount audit_strategy(const ModelConfig& config, const TuningStrategy& strategy);
double audit_paper_scale(const TuningStrategy& strategy);

using ParamSnapshot = std::unordered_map<std::string, std::vector<double>>;

ParamSnapshot snapshot(const CaptionModel& model);
/// Frozen paths whose bytes differ from the snapshot, in registry order.
std::vector<std::string> assert_frozen(const ParamSnapshot& before, const CaptionModel& after,
                                       const FreezePlan& plan);

}  // namespace peftcap
