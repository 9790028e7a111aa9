#include "ilss/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ilss/dataset.hpp"
#include "ilss/errors.hpp"
#include "ilss/experiment.hpp"
#include "ilss/gradcheck.hpp"
#include "ilss/metrics.hpp"
#include "ilss/network.hpp"
#include "ilss/taxonomy.hpp"
#include "ilss/trainer.hpp"

namespace ilss {

namespace fs = std::filesystem;

namespace {

/// Reads a JSON object of flag values. Top-level keys apply to the active
/// subcommand; an object stored under the subcommand's name applies too and
/// wins over top-level keys.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(std::string section) : section_(std::move(section)) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    nlohmann::json j = nlohmann::json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const auto& name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& results = opt->results();
        j[name] = results.size() == 1 ? nlohmann::json(results.front()) : nlohmann::json(results);
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    return j.dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      input >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::map<std::string, CLI::ConfigItem> items;
    auto add = [&](const nlohmann::json& obj) {
      for (const auto& [key, value] : obj.items()) {
        if (value.is_object()) continue;
        CLI::ConfigItem item;
        item.parents = {section_};
        item.name = key;
        if (value.is_array()) {
          for (const auto& v : value) item.inputs.push_back(scalar(v));
        } else {
          item.inputs.push_back(scalar(value));
        }
        items[key] = std::move(item);
      }
    };
    add(j);
    if (j.contains(section_) && j[section_].is_object()) add(j[section_]);
    std::vector<CLI::ConfigItem> out;
    for (auto& [key, item] : items) out.push_back(std::move(item));
    return out;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  std::string section_;
};

struct TrainFlags {
  std::size_t steps_per_class = 200;
  std::size_t batch = 4;
  double base_lr = 5e-3;
  double inc_lr = 2.5e-3;
  double end_lr = 1e-6;
  double power = 0.9;
  double weight_decay = 1e-4;
  double momentum = 0.9;

  void add_to(CLI::App* sub) {
    sub->add_option("--steps-per-class", steps_per_class, "Iterations per class in a step")->capture_default_str();
    sub->add_option("--batch", batch, "Mini-batch size")->capture_default_str();
    sub->add_option("--base-lr", base_lr, "Initial learning rate of the base stage")->capture_default_str();
    sub->add_option("--inc-lr", inc_lr, "Initial learning rate of incremental steps")->capture_default_str();
    sub->add_option("--end-lr", end_lr, "Final learning rate of every schedule")->capture_default_str();
    sub->add_option("--power", power, "Polynomial decay power")->capture_default_str();
    sub->add_option("--weight-decay", weight_decay, "L2 weight decay")->capture_default_str();
    sub->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.steps_per_class = steps_per_class;
    c.batch_size = batch;
    c.base_lr = base_lr;
    c.incremental_base_lr = inc_lr;
    c.end_lr = end_lr;
    c.power = power;
    c.weight_decay = weight_decay;
    c.momentum = momentum;
    c.seed = seed;
    c.validate();
    return c;
  }
};

struct LossFlags {
  std::vector<std::string> modes{"finetune"};
  double lambda = 1.0;
  bool out_distill = false;
  bool feat_distill = false;

  void add_to(CLI::App* sub, bool many) {
    auto* opt = sub->add_option("--mode", modes,
                                many ? "Methods to run, sharing M0 per seed (finetune, out_distill, freeze, "
                                       "freeze_out_distill, feat_distill, both_distill)"
                                     : "Method (finetune, out_distill, freeze, freeze_out_distill, feat_distill, "
                                       "both_distill)");
    opt->capture_default_str();
    if (many) {
      opt->delimiter(',');
    } else {
      opt->expected(1);
    }
    sub->add_option("--lambda", lambda, "Weight of the distillation terms")->capture_default_str();
    sub->add_flag("--out-distill", out_distill, "Add output distillation to the mode");
    sub->add_flag("--feat-distill", feat_distill, "Add feature distillation to the mode");
  }

  std::vector<MethodMode> resolve() const {
    std::vector<MethodMode> out;
    for (const auto& name : modes) {
      auto loss = mode_loss_config(parse_mode(name), lambda);
      if (out_distill || feat_distill) {
        loss.lambda_d = lambda;
        loss.use_output_distill = loss.use_output_distill || out_distill;
        loss.use_feature_distill = loss.use_feature_distill || feat_distill;
      }
      loss.validate();
      const auto mode = mode_from_loss_config(loss);
      if (std::find(out.begin(), out.end(), mode) == out.end()) out.push_back(mode);
    }
    return out;
  }
};

fs::path plan_path(const fs::path& data, const fs::path& plan) { return plan.empty() ? data / "plan.json" : plan; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

/// Accepts either a checkpoint directory or a step directory holding one.
fs::path checkpoint_dir(const fs::path& dir) {
  if (fs::is_regular_file(dir / "model.json")) return dir;
  if (fs::is_regular_file(dir / "checkpoint" / "model.json")) return dir / "checkpoint";
  throw DataError("no checkpoint found in " + dir.string());
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const StepIndexError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  return kExitFailure;
}

const char* error_kind(int code) {
  switch (code) {
    case kExitConfig: return "config error";
    case kExitData: return "data error";
    case kExitNumerical: return "numerical error";
    default: return "error";
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const std::vector<std::string> commands{"gen-data", "train-base", "step", "run", "eval", "report", "gradcheck"};
  std::string active;
  for (int i = 1; i < argc && active.empty(); ++i) {
    if (std::find(commands.begin(), commands.end(), argv[i]) != commands.end()) active = argv[i];
  }

  CLI::App app{"Incremental class learning for semantic segmentation on synthetic shapes", "ilss"};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::ignore);
  app.config_formatter(std::make_shared<JsonConfig>(active));
  app.set_config("--config", "", "JSON file with flag values (command-line flags take precedence)");
  app.option_defaults()->always_capture_default();

  // gen-data
  ShapesConfig shapes;
  fs::path gen_out;
  bool force = false;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset and its default plan");
  gen->add_option("--classes", shapes.num_classes, "Number of classes, background included");
  gen->add_option("--size", shapes.image_size, "Image side length in pixels");
  gen->add_option("--train", shapes.num_train, "Number of training images");
  gen->add_option("--val", shapes.num_val, "Number of validation images");
  gen->add_option("--min-shapes", shapes.min_shapes, "Fewest shapes per image");
  gen->add_option("--max-shapes", shapes.max_shapes, "Most shapes per image");
  gen->add_option("--companion-prob", shapes.companion_probability, "Chance of drawing a class's companion shape");
  gen->add_option("--seed", shapes.seed, "Random seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--force", force, "Overwrite an existing dataset");

  // shared inputs
  fs::path data_dir, plan_file, out_dir;
  std::uint64_t seed = 0;
  TrainFlags train_flags;
  LossFlags loss_flags;

  auto* base = app.add_subcommand("train-base", "Train M0 on the classes of the first step");
  base->add_option("--data", data_dir, "Dataset directory")->required();
  base->add_option("--plan", plan_file, "Plan file (default <data>/plan.json)");
  base->add_option("--out", out_dir, "Output step directory")->required();
  base->add_option("--seed", seed, "Random seed");
  train_flags.add_to(base);

  fs::path from_dir;
  std::size_t step_k = 0;
  auto* step = app.add_subcommand("step", "Run one incremental step from a previous checkpoint");
  step->add_option("--data", data_dir, "Dataset directory")->required();
  step->add_option("--plan", plan_file, "Plan file (default <data>/plan.json)");
  step->add_option("--from", from_dir, "Previous step or checkpoint directory")->required();
  step->add_option("--step", step_k, "Step index (default: previous model's step + 1)");
  step->add_option("--out", out_dir, "Output step directory")->required();
  step->add_option("--seed", seed, "Random seed");
  loss_flags.add_to(step, false);
  train_flags.add_to(step);

  std::string protocol_text = "add-one";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  auto* run = app.add_subcommand("run", "Run a protocol for one or more methods over several seeds");
  run->add_option("--data", data_dir, "Dataset directory")->required();
  run->add_option("--plan", plan_file, "Plan file (default <data>/plan.json)");
  run->add_option("--protocol", protocol_text, "add-one, add-batch or sequential");
  run->add_option("--seeds,--seed", seeds, "Seeds, one protocol run each")->delimiter(',');
  run->add_option("--out", out_dir, "Experiment root directory")->required();
  loss_flags.add_to(run, true);
  train_flags.add_to(run);

  fs::path eval_checkpoint;
  std::optional<std::size_t> eval_step;
  std::string split_text = "val";
  fs::path eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--plan", plan_file, "Plan file (default <data>/plan.json)");
  eval->add_option("--checkpoint", eval_checkpoint, "Step or checkpoint directory")->required();
  eval->add_option("--step", eval_step, "Step whose classes are scored (default: the model's step)");
  eval->add_option("--split", split_text, "train or val");
  eval->add_option("--out", eval_out, "Directory for metrics.json and per_class.csv");

  std::vector<fs::path> report_inputs;
  std::string format = "md";
  std::string table_kind = "classes";
  fs::path report_out;
  auto* report = app.add_subcommand("report", "Tabulate the summaries of finished runs");
  report->add_option("inputs", report_inputs, "Method directories holding summary.json")->required();
  report->add_option("--format", format, "csv or md")->check(CLI::IsMember({"csv", "md"}));
  report->add_option("--table", table_kind, "classes or steps")->check(CLI::IsMember({"classes", "steps"}));
  report->add_option("--out", report_out, "Output file (default: standard output)");

  GradCheckOptions gc;
  std::vector<std::string> gc_losses{"ce", "out", "feat", "total"};
  int precision = 64;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  grad->add_option("--eps", gc.eps, "Finite-difference step");
  grad->add_option("--tolerance", gc.tolerance, "Largest accepted relative error");
  grad->add_option("--loss", gc_losses, "Losses to check: ce, out, feat, total")->delimiter(',');
  grad->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  grad->add_option("--seed", gc.seed, "Fixture seed");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*gen) {
      if (fs::exists(gen_out) && !fs::is_empty(gen_out)) {
        if (!force) throw ConfigError("output directory " + gen_out.string() + " is not empty (use --force)");
        fs::remove_all(gen_out / "train");
        fs::remove_all(gen_out / "val");
        fs::remove(gen_out / "plan.json");
      }
      auto [train, val] = generate_shapes_dataset(shapes);
      fs::create_directories(gen_out);
      save_pool(train, gen_out / "train");
      save_pool(val, gen_out / "val");
      save_plan(default_shapes_plan(shapes.num_classes), gen_out / "plan.json");
      out << "wrote " << train.samples.size() << " train and " << val.samples.size() << " val images to " << gen_out.string()
          << "\n";
      return kExitOk;
    }

    if (*base) {
      const auto plan = load_plan(plan_path(data_dir, plan_file));
      const auto train = load_pool(data_dir / "train");
      const auto val = load_pool(data_dir / "val");
      validate_pool(train, &plan);
      validate_pool(val, &plan);
      const auto config = train_flags.config(seed);
      auto stage = train_initial(train, plan, config);
      const auto metrics = evaluate_model(stage.model, val, plan, 0).second;
      write_step_artifacts(out_dir, stage.model, stage.report, metrics, stage.used_ids, plan);
      out << "M0: " << stage.report.total_steps << " iterations, val mIoU " << metrics.miou << "\n";
      return kExitOk;
    }

    if (*step) {
      const auto modes = loss_flags.resolve();
      if (modes.size() != 1) throw ConfigError("step takes exactly one mode");
      const auto loss = mode_loss_config(modes.front(), loss_flags.lambda);
      const auto plan = load_plan(plan_path(data_dir, plan_file));
      const auto train = load_pool(data_dir / "train");
      const auto val = load_pool(data_dir / "val");
      validate_pool(train, &plan);
      validate_pool(val, &plan);
      const auto ckpt = checkpoint_dir(from_dir);
      const auto previous = load_checkpoint(ckpt);
      const auto used = load_used_ids(ckpt);
      const std::size_t k = step->count("--step") > 0 ? step_k : previous.step() + 1;
      const auto config = train_flags.config(seed);
      auto stage = incremental_step(previous, train, plan, k, loss, config, used);
      const auto metrics = evaluate_model(stage.model, val, plan, k).second;
      write_step_artifacts(out_dir, stage.model, stage.report, metrics, stage.used_ids, plan);
      out << "M" << k << " (" << mode_name(modes.front()) << "): val mIoU " << metrics.miou;
      if (metrics.miou_old) out << ", old " << *metrics.miou_old;
      if (metrics.miou_new) out << ", new " << *metrics.miou_new;
      out << "\n";
      return kExitOk;
    }

    if (*run) {
      ExperimentConfig config;
      config.data_dir = data_dir;
      config.plan_file = plan_file;
      config.protocol = parse_protocol(protocol_text);
      config.modes = loss_flags.resolve();
      config.lambda_d = loss_flags.lambda;
      config.train = train_flags.config(0);
      config.seeds = seeds;
      config.out_dir = out_dir;
      for (const auto& s : run_experiment(config)) {
        const auto& last = s.steps.back();
        out << s.protocol << "/" << s.mode << ": final mIoU " << last.miou.mean << " +- " << last.miou.std;
        if (last.miou_old) out << ", old " << last.miou_old->mean << " +- " << last.miou_old->std;
        out << "\n";
      }
      return kExitOk;
    }

    if (*eval) {
      const auto plan = load_plan(plan_path(data_dir, plan_file));
      const auto pool = load_pool(data_dir / std::string(split_name(parse_split(split_text))));
      validate_pool(pool, &plan);
      const auto model = load_checkpoint(checkpoint_dir(eval_checkpoint));
      const auto k = eval_step.value_or(model.step());
      const auto metrics = evaluate_model(model, pool, plan, k).second;
      if (!eval_out.empty()) {
        write_text(eval_out / "metrics.json", bundle_to_json(metrics));
        write_text(eval_out / "per_class.csv", per_class_csv(metrics, plan));
      }
      out << bundle_to_json(metrics) << "\n";
      return kExitOk;
    }

    if (*report) {
      const auto summaries = load_summaries(report_inputs);
      const auto table = table_kind == "steps" ? step_table(summaries) : class_table(summaries);
      const auto text = format == "csv" ? table_to_csv(table) : table_to_markdown(table);
      if (report_out.empty()) {
        out << text;
      } else {
        write_text(report_out, text);
      }
      return kExitOk;
    }

    if (*grad) {
      gc.double_precision = precision == 64;
      gc.losses = {gc_losses.begin(), gc_losses.end()};
      if (!gc.double_precision && gc.eps < 1e-4) {
        err << "warning: eps " << gc.eps
            << " in 32-bit mode: the difference of two nearly equal float losses loses most significant digits, "
               "expect large relative errors\n";
      }
      bool ok = true;
      for (const auto& r : run_gradcheck(gc)) {
        out << r.loss << ": max_rel_err " << r.max_rel_error << " over " << r.checked << " entries (" << r.skipped
            << " skipped at ReLU kinks), worst " << r.worst << " -> " << (r.passed ? "PASS" : "FAIL") << "\n";
        ok = ok && r.passed;
      }
      return ok ? kExitOk : kExitNumerical;
    }
  } catch (const Error& e) {
    const int code = exit_code_for(e);
    err << error_kind(code) << ": " << e.what() << "\n";
    return code;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace ilss
