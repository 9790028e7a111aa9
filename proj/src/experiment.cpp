#include "ilss/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "ilss/errors.hpp"

namespace ilss {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

[[noreturn]] void rethrow_with_context(const Error& e, const std::string& where) {
  const std::string what = where + e.what();
  if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(what);
  if (dynamic_cast<const DataError*>(&e)) throw DataError(what);
  if (dynamic_cast<const NumericalError*>(&e)) throw NumericalError(what);
  throw Error(what);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string_view mode_name(MethodMode mode) {
  switch (mode) {
    case MethodMode::Finetune: return "finetune";
    case MethodMode::OutDistill: return "out_distill";
    case MethodMode::Freeze: return "freeze";
    case MethodMode::FreezeOutDistill: return "freeze_out_distill";
    case MethodMode::FeatDistill: return "feat_distill";
    case MethodMode::BothDistill: return "both_distill";
  }
  return "unknown";
}

MethodMode parse_mode(std::string_view name) {
  for (const auto mode : kAllModes) {
    if (mode_name(mode) == name) return mode;
  }
  throw ConfigError("unknown mode '" + std::string(name) +
                    "' (expected finetune, out_distill, freeze, freeze_out_distill, feat_distill or both_distill)");
}

LossConfig mode_loss_config(MethodMode mode, double lambda_d) {
  switch (mode) {
    case MethodMode::Finetune: return {0.0, false, false, false};
    case MethodMode::OutDistill: return {lambda_d, true, false, false};
    case MethodMode::Freeze: return {0.0, false, false, true};
    case MethodMode::FreezeOutDistill: return {lambda_d, true, false, true};
    case MethodMode::FeatDistill: return {lambda_d, false, true, false};
    case MethodMode::BothDistill: return {lambda_d, true, true, false};
  }
  throw ConfigError("unknown mode");
}

MethodMode mode_from_loss_config(const LossConfig& loss) {
  loss.validate();
  const bool out = loss.use_output_distill && loss.lambda_d != 0.0;
  const bool feat = loss.use_feature_distill && loss.lambda_d != 0.0;
  if (loss.encoder_frozen) return out ? MethodMode::FreezeOutDistill : MethodMode::Freeze;
  if (out && feat) return MethodMode::BothDistill;
  if (out) return MethodMode::OutDistill;
  if (feat) return MethodMode::FeatDistill;
  return MethodMode::Finetune;
}

fs::path ExperimentConfig::resolved_plan_file() const {
  return plan_file.empty() ? data_dir / "plan.json" : plan_file;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (modes.empty()) throw ConfigError("at least one mode is required");
  if (out_dir.empty()) throw ConfigError("an output directory is required");
  if (!(lambda_d >= 0.0)) throw ConfigError("lambda must be non-negative");
  for (const auto& sub : {"train", "val"}) {
    if (!fs::is_directory(data_dir / sub)) throw ConfigError("missing dataset split " + (data_dir / sub).string());
  }
  if (!fs::is_regular_file(resolved_plan_file())) throw ConfigError("missing plan file " + resolved_plan_file().string());
  for (const auto mode : modes) mode_loss_config(mode, lambda_d).validate();
  train.validate();
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  r.runs = values.size();
  if (values.empty()) return r;
  double sum = 0.0;
  for (const double v : values) sum += v;
  r.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (const double v : values) sq += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return r;
}

ModeSummary summarize_seeds(std::string protocol, std::string mode, std::vector<std::uint64_t> seeds,
                            const IncrementalPlan& plan, const std::vector<std::vector<MetricBundle>>& per_seed) {
  if (per_seed.empty()) throw ConfigError("no runs to summarize");
  if (per_seed.size() != seeds.size()) throw ConfigError("one bundle list per seed is required");
  ModeSummary s{std::move(protocol), std::move(mode), std::move(seeds), {}, {}};
  for (const auto& c : plan.classes()) s.class_names[c.id] = c.name;

  const auto num_steps = per_seed.front().size();
  for (const auto& run : per_seed) {
    if (run.size() != num_steps) throw ConfigError("seeds cover different numbers of steps");
  }
  for (std::size_t k = 0; k < num_steps; ++k) {
    const auto& first = per_seed.front()[k];
    StepSummary step;
    step.step = first.step;
    step.old_classes = first.old_classes;
    step.new_classes = first.new_classes;
    std::vector<double> miou, mpa, mca, old_vals, new_vals;
    std::map<ClassId, std::vector<double>> per_class;
    for (const auto& run : per_seed) {
      const auto& b = run[k];
      if (b.step != first.step || b.old_classes != first.old_classes || b.new_classes != first.new_classes) {
        throw ConfigError("seeds disagree on the classes of step " + std::to_string(k));
      }
      miou.push_back(b.miou);
      mpa.push_back(b.mpa);
      mca.push_back(b.mca);
      if (b.miou_old) old_vals.push_back(*b.miou_old);
      if (b.miou_new) new_vals.push_back(*b.miou_new);
      for (const auto& [id, v] : b.per_class_iou) per_class[id].push_back(v);
    }
    step.miou = mean_std(miou);
    step.mpa = mean_std(mpa);
    step.mca = mean_std(mca);
    if (!old_vals.empty()) step.miou_old = mean_std(old_vals);
    if (!new_vals.empty()) step.miou_new = mean_std(new_vals);
    for (const auto& [id, vals] : per_class) step.per_class_iou[id] = mean_std(vals);
    s.steps.push_back(std::move(step));
  }
  return s;
}

namespace {

nlohmann::json stat_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"runs", m.runs}}; }

MeanStd stat_from(const nlohmann::json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("runs").get<std::size_t>()};
}

}  // namespace

std::string summary_to_json(const ModeSummary& s) {
  nlohmann::json j;
  j["protocol"] = s.protocol;
  j["mode"] = s.mode;
  j["seeds"] = s.seeds;
  j["classes"] = nlohmann::json::array();
  for (const auto& [id, name] : s.class_names) j["classes"].push_back({{"id", id}, {"name", name}});
  j["steps"] = nlohmann::json::array();
  for (const auto& st : s.steps) {
    nlohmann::json js;
    js["step"] = st.step;
    js["old_classes"] = st.old_classes;
    js["new_classes"] = st.new_classes;
    js["miou"] = stat_json(st.miou);
    js["miou_old"] = st.miou_old ? stat_json(*st.miou_old) : nlohmann::json(nullptr);
    js["miou_new"] = st.miou_new ? stat_json(*st.miou_new) : nlohmann::json(nullptr);
    js["mpa"] = stat_json(st.mpa);
    js["mca"] = stat_json(st.mca);
    js["per_class_iou"] = nlohmann::json::object();
    for (const auto& [id, m] : st.per_class_iou) js["per_class_iou"][std::to_string(id)] = stat_json(m);
    j["steps"].push_back(std::move(js));
  }
  return j.dump(2);
}

ModeSummary summary_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModeSummary s;
    s.protocol = j.at("protocol").get<std::string>();
    s.mode = j.at("mode").get<std::string>();
    s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& c : j.at("classes")) s.class_names[c.at("id").get<ClassId>()] = c.at("name").get<std::string>();
    for (const auto& js : j.at("steps")) {
      StepSummary st;
      st.step = js.at("step").get<std::size_t>();
      st.old_classes = js.at("old_classes").get<std::vector<ClassId>>();
      st.new_classes = js.at("new_classes").get<std::vector<ClassId>>();
      st.miou = stat_from(js.at("miou"));
      if (!js.at("miou_old").is_null()) st.miou_old = stat_from(js.at("miou_old"));
      if (!js.at("miou_new").is_null()) st.miou_new = stat_from(js.at("miou_new"));
      st.mpa = stat_from(js.at("mpa"));
      st.mca = stat_from(js.at("mca"));
      for (const auto& [key, v] : js.at("per_class_iou").items()) st.per_class_iou[std::stoi(key)] = stat_from(v);
      s.steps.push_back(std::move(st));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed summary JSON: ") + e.what());
  }
}

fs::path mode_directory(const fs::path& out, Protocol protocol, MethodMode mode) {
  return out / std::string(protocol_name(protocol)) / std::string(mode_name(mode));
}

fs::path step_directory(const fs::path& out, Protocol protocol, MethodMode mode, std::uint64_t seed, std::size_t k) {
  return mode_directory(out, protocol, mode) / std::to_string(seed) / ("step_" + std::to_string(k));
}

void save_used_ids(const std::set<std::string>& ids, const fs::path& checkpoint_dir) {
  write_text(checkpoint_dir / "used_ids.json", nlohmann::json(ids).dump(2));
}

std::set<std::string> load_used_ids(const fs::path& checkpoint_dir) {
  const auto path = checkpoint_dir / "used_ids.json";
  try {
    return nlohmann::json::parse(read_text(path)).get<std::set<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed " + path.string() + ": " + e.what());
  }
}

void write_step_artifacts(const fs::path& directory, const SegmentationModel& model, StepReport report,
                          const MetricBundle& metrics, const std::set<std::string>& used_ids,
                          const IncrementalPlan& plan) {
  fs::create_directories(directory);
  const auto checkpoint = directory / "checkpoint";
  save_checkpoint(model, checkpoint);
  save_used_ids(used_ids, checkpoint);
  report.checkpoint_path = "checkpoint";
  write_text(directory / "metrics.json", bundle_to_json(metrics));
  write_text(directory / "per_class.csv", per_class_csv(metrics, plan));
  write_text(directory / "loss_curve.csv", loss_curve_csv(report));
  write_text(directory / "report.json", report_to_json(report));
}

std::vector<ModeSummary> run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto plan = load_plan(config.resolved_plan_file());
  validate_protocol(plan, config.protocol);
  const auto train = load_pool(config.data_dir / "train");
  const auto val = load_pool(config.data_dir / "val");
  validate_pool(train, &plan);
  validate_pool(val, &plan);

  std::map<MethodMode, std::vector<std::vector<MetricBundle>>> bundles;
  for (const auto seed : config.seeds) {
    auto train_config = config.train;
    train_config.seed = seed;
    const auto context = [&](std::string_view what) { return "seed " + std::to_string(seed) + ", " + std::string(what); };
    std::optional<StageResult> initial;
    try {
      initial = train_initial(train, plan, train_config);
    } catch (const Error& e) {
      rethrow_with_context(e, context("step 0: "));
    }
    for (const auto mode : config.modes) {
      const auto loss = mode_loss_config(mode, config.lambda_d);
      std::vector<ProtocolStep> steps;
      try {
        steps = continue_protocol(*initial, train, val, plan, config.protocol, loss, train_config);
      } catch (const Error& e) {
        rethrow_with_context(e, context("mode " + std::string(mode_name(mode)) + ": "));
      }
      std::vector<MetricBundle> run;
      for (std::size_t k = 0; k < steps.size(); ++k) {
        write_step_artifacts(step_directory(config.out_dir, config.protocol, mode, seed, k), steps[k].model,
                             steps[k].report, steps[k].metrics, steps[k].used_ids, plan);
        run.push_back(steps[k].metrics);
      }
      bundles[mode].push_back(std::move(run));
    }
  }

  std::vector<ModeSummary> summaries;
  for (const auto mode : config.modes) {
    auto s = summarize_seeds(std::string(protocol_name(config.protocol)), std::string(mode_name(mode)), config.seeds,
                             plan, bundles.at(mode));
    const auto dir = mode_directory(config.out_dir, config.protocol, mode);
    fs::create_directories(dir);
    write_text(dir / "summary.json", summary_to_json(s));
    summaries.push_back(std::move(s));
  }
  return summaries;
}

namespace {

std::string percent(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << 100.0 * v;
  return out.str();
}

std::string percent(const std::optional<MeanStd>& m) { return m ? percent(m->mean) : "-"; }

std::string id_range(std::vector<ClassId> ids) {
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) return "";
  if (ids.size() > 1 && ids.back() - ids.front() == static_cast<ClassId>(ids.size() - 1)) {
    return std::to_string(ids.front()) + "-" + std::to_string(ids.back());
  }
  std::string out;
  for (const auto id : ids) out += (out.empty() ? "" : ",") + std::to_string(id);
  return out;
}

std::string model_label(const ModeSummary& s, std::size_t k) {
  const auto& st = s.steps[k];
  if (k == 0) return "M0 (" + id_range(st.old_classes) + ")";
  std::vector<ClassId> added;
  for (std::size_t j = 1; j <= k; ++j) {
    added.insert(added.end(), s.steps[j].new_classes.begin(), s.steps[j].new_classes.end());
  }
  return "M" + std::to_string(k) + " (" + id_range(added) + ")";
}

std::vector<ClassId> seen_of(const StepSummary& st) {
  std::vector<ClassId> seen = st.old_classes;
  seen.insert(seen.end(), st.new_classes.begin(), st.new_classes.end());
  std::sort(seen.begin(), seen.end());
  return seen;
}

void check_consistent(std::span<const ModeSummary> summaries) {
  if (summaries.empty()) throw ReportError("no summaries to report");
  const auto& ref = summaries.front();
  if (ref.steps.empty()) throw ReportError("summary of " + ref.mode + " has no steps");
  for (const auto& s : summaries) {
    if (s.class_names != ref.class_names) throw ReportError("class sets differ between " + ref.mode + " and " + s.mode);
    if (s.steps.size() != ref.steps.size()) {
      throw ReportError("step counts differ between " + ref.mode + " and " + s.mode);
    }
    for (std::size_t k = 0; k < s.steps.size(); ++k) {
      if (s.steps[k].old_classes != ref.steps[k].old_classes || s.steps[k].new_classes != ref.steps[k].new_classes) {
        throw ReportError("class split of step " + std::to_string(k) + " differs between " + ref.mode + " and " + s.mode);
      }
    }
  }
}

}  // namespace

ReportTable class_table(std::span<const ModeSummary> summaries) {
  check_consistent(summaries);
  const auto& ref = summaries.front();
  const auto columns = seen_of(ref.steps.back());

  ReportTable t;
  t.header = {"model", "method"};
  for (const auto id : columns) t.header.push_back(ref.class_names.at(id));
  for (const char* h : {"mIoU old", "mIoU new", "mIoU", "mPA", "mCA"}) t.header.emplace_back(h);

  auto row = [&](const std::string& model, const std::string& method, const StepSummary& st) {
    std::vector<std::string> r{model, method};
    for (const auto id : columns) {
      const auto it = st.per_class_iou.find(id);
      r.push_back(it == st.per_class_iou.end() ? "-" : percent(it->second.mean));
    }
    r.push_back(percent(st.miou_old));
    r.push_back(percent(st.miou_new));
    r.push_back(percent(st.miou.mean));
    r.push_back(percent(st.mpa.mean));
    r.push_back(percent(st.mca.mean));
    return r;
  };

  t.rows.push_back(row(model_label(ref, 0), "-", ref.steps.front()));
  const auto last = ref.steps.size() - 1;
  if (last > 0) {
    for (const auto& s : summaries) t.rows.push_back(row(model_label(s, last), s.mode, s.steps.back()));
  }
  return t;
}

ReportTable step_table(std::span<const ModeSummary> summaries) {
  check_consistent(summaries);
  ReportTable t;
  t.header = {"model"};
  for (const auto& s : summaries) {
    for (const char* m : {"mIoU", "mPA", "mCA"}) t.header.push_back(s.mode + " " + m);
  }
  for (std::size_t k = 0; k < summaries.front().steps.size(); ++k) {
    std::vector<std::string> r{model_label(summaries.front(), k)};
    for (const auto& s : summaries) {
      const auto& st = s.steps[k];
      r.push_back(percent(st.miou.mean));
      r.push_back(percent(st.mpa.mean));
      r.push_back(percent(st.mca.mean));
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

std::string table_to_csv(const ReportTable& t) {
  auto field = [](const std::string& v) {
    if (v.find_first_of(",\"\n") == std::string::npos) return v;
    std::string q = "\"";
    for (const char c : v) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
  };
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << field(cells[i]);
    out << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out.str();
}

std::string table_to_markdown(const ReportTable& t) {
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    out << '|';
    for (const auto& c : cells) out << ' ' << c << " |";
    out << '\n';
  };
  line(t.header);
  out << '|';
  for (const auto& h : t.header) out << (h == "model" || h == "method" ? " --- |" : " ---: |");
  out << '\n';
  for (const auto& r : t.rows) line(r);
  return out.str();
}

std::vector<ModeSummary> load_summaries(std::span<const fs::path> directories) {
  std::vector<ModeSummary> out;
  for (const auto& dir : directories) {
    const auto path = fs::is_regular_file(dir) ? dir : dir / "summary.json";
    if (!fs::is_regular_file(path)) throw DataError("no summary.json in " + dir.string());
    out.push_back(summary_from_json(read_text(path)));
  }
  return out;
}

}  // namespace ilss
