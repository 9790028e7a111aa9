#include "ilss/taxonomy.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ilss/errors.hpp"

namespace ilss {

namespace {

std::string join_ids(const std::vector<ClassId>& ids) {
  std::ostringstream out;
  for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? ", " : "") << ids[i];
  return out.str();
}

}  // namespace

std::vector<PlanViolation> validate_plan(const PlanDraft& draft) {
  std::vector<PlanViolation> out;
  auto add = [&out](std::string rule, std::vector<ClassId> ids, std::string message) {
    out.push_back({std::move(rule), std::move(ids), std::move(message)});
  };

  std::map<ClassId, int> id_count;
  std::vector<ClassId> backgrounds;
  for (const auto& c : draft.classes) {
    ++id_count[c.id];
    if (c.is_background) backgrounds.push_back(c.id);
    if (c.id < 0 || c.id >= 255) {
      add("id-range", {c.id}, "id-range: class " + std::to_string(c.id) + " outside [0, 254]");
    }
  }
  for (const auto& [id, n] : id_count) {
    if (n > 1) add("unique-ids", {id}, "unique-ids: class " + std::to_string(id) + " declared " + std::to_string(n) + " times");
  }
  if (backgrounds.size() != 1) {
    add("background", backgrounds,
        "background: expected exactly one background class, found " + std::to_string(backgrounds.size()));
  } else if (backgrounds.front() != kBackgroundClass) {
    add("background", backgrounds, "background: background class must have id 0, has id " + std::to_string(backgrounds.front()));
  }
  if (!id_count.empty()) {
    const auto max_id = id_count.rbegin()->first;
    if (max_id + 1 != static_cast<ClassId>(id_count.size()) || id_count.begin()->first != 0) {
      std::vector<ClassId> ids;
      for (const auto& [id, n] : id_count) ids.push_back(id);
      add("dense-ids", ids, "dense-ids: class ids must be 0.." + std::to_string(id_count.size() - 1) + ", got {" + join_ids(ids) + "}");
    }
  }

  if (draft.step_sets.empty()) {
    add("no-steps", {}, "no-steps: plan has no step sets");
    return out;
  }

  std::map<ClassId, std::vector<std::size_t>> where;
  for (std::size_t k = 0; k < draft.step_sets.size(); ++k) {
    const auto& step = draft.step_sets[k];
    if (step.empty()) add("empty-step", {}, "empty-step: step " + std::to_string(k) + " is empty");
    for (const ClassId id : step) {
      if (!id_count.contains(id)) {
        add("unknown-class", {id}, "unknown-class: class " + std::to_string(id) + " in step " + std::to_string(k) + " is not declared");
      }
      where[id].push_back(k);
    }
  }
  for (const auto& [id, steps] : where) {
    if (steps.size() < 2) continue;
    std::ostringstream msg;
    msg << "disjointness: class " << id << " in steps ";
    for (std::size_t i = 0; i < steps.size(); ++i) msg << (i == 0 ? "" : i + 1 == steps.size() ? " and " : ", ") << steps[i];
    add("disjointness", {id}, msg.str());
  }
  const auto& first = draft.step_sets.front();
  if (std::find(first.begin(), first.end(), kBackgroundClass) == first.end()) {
    add("background-in-s0", {kBackgroundClass}, "background not in S0");
  }
  return out;
}

IncrementalPlan IncrementalPlan::create(PlanDraft draft) {
  const auto violations = validate_plan(draft);
  if (!violations.empty()) {
    std::string msg = "invalid plan:";
    for (const auto& v : violations) msg += "\n  " + v.message;
    throw ConfigError(msg);
  }
  IncrementalPlan plan;
  plan.classes_ = std::move(draft.classes);
  std::sort(plan.classes_.begin(), plan.classes_.end(),
            [](const ClassLabel& a, const ClassLabel& b) { return a.id < b.id; });
  for (const auto& step : draft.step_sets) plan.steps_.emplace_back(step.begin(), step.end());
  return plan;
}

const ClassSet& IncrementalPlan::step_set(std::size_t k) const {
  if (k >= steps_.size()) {
    throw StepIndexError("step index " + std::to_string(k) + " out of range (plan has " + std::to_string(steps_.size()) + " steps)");
  }
  return steps_[k];
}

bool IncrementalPlan::has_class(ClassId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < classes_.size();
}

const std::string& IncrementalPlan::class_name(ClassId id) const {
  if (!has_class(id)) throw LabelError("unknown class id " + std::to_string(id));
  return classes_[static_cast<std::size_t>(id)].name;
}

PlanDraft IncrementalPlan::to_draft() const {
  PlanDraft d;
  d.classes = classes_;
  for (const auto& s : steps_) d.step_sets.emplace_back(s.begin(), s.end());
  return d;
}

ClassSet seen_classes(const IncrementalPlan& plan, std::size_t k) {
  plan.step_set(k);  // range check
  ClassSet out;
  for (std::size_t j = 0; j <= k; ++j) out.insert(plan.step_set(j).begin(), plan.step_set(j).end());
  return out;
}

ClassSet unseen_classes(const IncrementalPlan& plan, std::size_t k) {
  if (k == 0) throw StepIndexError("step 0 has no unseen classes");
  return plan.step_set(k);
}

std::vector<ClassId> channel_order(const IncrementalPlan& plan, std::size_t k) {
  plan.step_set(k);
  std::vector<ClassId> out;
  for (std::size_t j = 0; j <= k; ++j) out.insert(out.end(), plan.step_set(j).begin(), plan.step_set(j).end());
  return out;
}

IncrementalPlan parse_plan(std::string_view json_text) {
  PlanDraft draft;
  try {
    const auto j = nlohmann::json::parse(json_text);
    for (const auto& c : j.at("classes")) {
      ClassLabel label;
      label.id = c.at("id").get<ClassId>();
      label.name = c.value("name", "class_" + std::to_string(label.id));
      label.is_background = c.value("is_background", label.id == kBackgroundClass);
      draft.classes.push_back(std::move(label));
    }
    for (const auto& s : j.at("steps")) draft.step_sets.push_back(s.get<std::vector<ClassId>>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed plan file: ") + e.what());
  }
  return IncrementalPlan::create(std::move(draft));
}

std::string plan_to_json(const IncrementalPlan& plan) {
  nlohmann::json j;
  j["classes"] = nlohmann::json::array();
  for (const auto& c : plan.classes()) {
    nlohmann::json entry{{"id", c.id}, {"name", c.name}};
    if (c.is_background) entry["is_background"] = true;
    j["classes"].push_back(entry);
  }
  j["steps"] = nlohmann::json::array();
  for (std::size_t k = 0; k < plan.num_steps(); ++k) {
    const auto& s = plan.step_set(k);
    j["steps"].push_back(std::vector<ClassId>(s.begin(), s.end()));
  }
  return j.dump(2);
}

IncrementalPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_plan(buf.str());
}

void save_plan(const IncrementalPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write plan file " + path.string());
  out << plan_to_json(plan) << '\n';
}

}  // namespace ilss
