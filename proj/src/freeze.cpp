#include "peftcap/freeze.hpp"

#include <cstring>
#include <stdexcept>

#include "peftcap/errors.hpp"

namespace peftcap {

namespace {

bool in_scope(const std::string& path, Scope scope) {
  switch (scope) {
    case Scope::all: return true;
    case Scope::encoder: return path.starts_with("encoder.");
    case Scope::decoder: return path.starts_with("decoder.");
  }
  return false;
}

bool claims(const StrategyElement& element, const ParamSpec& spec) {
  return std::visit(
      [&spec](const auto& e) -> bool {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, strategy::FullFT>) {
          return spec.origin == ParamOrigin::base && in_scope(spec.path, e.scope);
        } else if constexpr (std::is_same_v<T, strategy::BitFit>) {
          return spec.origin == ParamOrigin::base && spec.path.ends_with(".bias") &&
                 in_scope(spec.path, e.scope);
        } else if constexpr (std::is_same_v<T, strategy::Houlsby>) {
          return spec.origin == ParamOrigin::houlsby;
        } else if constexpr (std::is_same_v<T, strategy::Lora>) {
          return spec.origin == ParamOrigin::lora;
        } else if constexpr (std::is_same_v<T, strategy::Evp>) {
          return spec.origin == ParamOrigin::evp;
        } else {
          return e.trainable && spec.origin == ParamOrigin::projection;
        }
      },
      element);
}

}  // namespace

FreezePlan::FreezePlan(std::vector<std::pair<std::string, bool>> entries)
    : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!index_.emplace(entries_[i].first, i).second)
      throw AuditError("freeze plan lists '" + entries_[i].first + "' twice");
  }
}

bool FreezePlan::trainable(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw std::out_of_range("freeze plan has no path '" + path + "'");
  return entries_[it->second].second;
}

std::vector<std::string> FreezePlan::trainable_paths() const {
  std::vector<std::string> out;
  for (const auto& [path, flag] : entries_)
    if (flag) out.push_back(path);
  return out;
}

FreezePlan plan_for(const std::vector<ParamSpec>& registry, const TuningStrategy& strategy) {
  attachments_for(strategy);  // validates scopes and duplicates
  std::vector<std::pair<std::string, bool>> entries;
  entries.reserve(registry.size());
  bool any = false;
  for (const auto& spec : registry) {
    const StrategyElement* owner = nullptr;
    for (const auto& element : strategy.elements) {
      if (!claims(element, spec)) continue;
      if (owner) {
        throw StrategyError("'" + spec.path + "' claimed by both " + describe(*owner) + " and " +
                            describe(element));
      }
      owner = &element;
    }
    entries.emplace_back(spec.path, owner != nullptr);
    any = any || owner != nullptr;
  }
  if (!any) throw StrategyError("strategy " + describe(strategy) + " leaves nothing trainable");
  return FreezePlan(std::move(entries));
}

std::uint64_t element_count(const std::vector<ParamSpec>& registry,
                            const StrategyElement& element) {
  std::uint64_t n = 0;
  for (const auto& spec : registry)
    if (claims(element, spec)) n += spec.numel();
  return n;
}

FreezePlan attach(CaptionModel& model, const TuningStrategy& strategy, std::uint64_t seed) {
  const Attachments want = attachments_for(strategy);
  features::FeatureSpec feature;
  for (const auto& element : strategy.elements)
    if (const auto* e = std::get_if<strategy::Evp>(&element)) feature = e->feature;

  if (want.projection != ProjectionKind::none)
    model.attach_projection(want.projection, want.projection_zero_init, seed);
  if (want.evp_bottleneck) model.attach_evp(feature, want.evp_bottleneck, seed);
  if (want.houlsby_bottleneck) model.attach_houlsby(want.houlsby_bottleneck, seed);
  if (want.lora_rank) model.attach_lora(want.lora_rank, want.lora_alpha, want.lora_targets, seed);

  auto plan = plan_for(model.parameter_specs(), strategy);
  apply_plan(model, plan);
  return plan;
}

void apply_plan(CaptionModel& model, const FreezePlan& plan) {
  const auto& params = model.parameters();
  if (plan.size() != params.size())
    throw AuditError("freeze plan covers " + std::to_string(plan.size()) + " paths, model has " +
                     std::to_string(params.size()));
  for (const auto& p : params) {
    if (!plan.contains(p.path)) throw AuditError("freeze plan misses '" + p.path + "'");
    Tensor t = p.tensor;
    t.set_requires_grad(plan.trainable(p.path));
  }
}

TrainableCount count_trainable(const std::vector<ParamSpec>& registry, const FreezePlan& plan) {
  if (plan.size() != registry.size()) {
    throw AuditError("freeze plan covers " + std::to_string(plan.size()) +
                     " paths, registry has " + std::to_string(registry.size()));
  }
  TrainableCount c;
  for (const auto& spec : registry) {
    if (!plan.contains(spec.path)) throw AuditError("freeze plan misses '" + spec.path + "'");
    c.total += spec.numel();
    if (plan.trainable(spec.path)) c.trainable += spec.numel();
  }
  c.percent = c.total ? 100.0 * static_cast<double>(c.trainable) / static_cast<double>(c.total)
                      : 0.0;
  return c;
}

TrainableCount count_trainable(const CaptionModel& model, const FreezePlan& plan) {
  return count_trainable(model.parameter_specs(), plan);
}

TrainableCount audit_strategy(const ModelConfig& config, const TuningStrategy& strategy) {
  const auto registry = describe_parameters(config, attachments_for(strategy));
  return count_trainable(registry, plan_for(registry, strategy));
}

double audit_paper_scale(const TuningStrategy& strategy) {
  return audit_strategy(ModelConfig::paper_scale(), strategy).percent;
}

ParamSnapshot snapshot(const CaptionModel& model) {
  ParamSnapshot out;
  for (const auto& p : model.parameters())
    out.emplace(p.path, std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
  return out;
}

std::vector<std::string> assert_frozen(const ParamSnapshot& before, const CaptionModel& after,
                                       const FreezePlan& plan) {
  std::vector<std::string> changed;
  for (const auto& p : after.parameters()) {
    if (plan.contains(p.path) && plan.trainable(p.path)) continue;
    auto it = before.find(p.path);
    auto now = p.tensor.data();
    if (it == before.end() || it->second.size() != now.size() ||
        std::memcmp(it->second.data(), now.data(), now.size_bytes()) != 0)
      changed.push_back(p.path);
  }
  return changed;
}

}  // namespace peftcap
