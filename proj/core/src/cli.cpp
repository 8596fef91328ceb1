#include "dmrl/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "dmrl/checkpoint.hpp"
#include "dmrl/config.hpp"
#include "dmrl/data.hpp"
#include "dmrl/error.hpp"
#include "dmrl/evaluation.hpp"
#include "dmrl/gradcheck.hpp"
#include "dmrl/model.hpp"
#include "dmrl/synthgen.hpp"
#include "dmrl/training.hpp"

namespace dmrl::cli {

namespace fs = std::filesystem;

namespace {

struct PrepareArgs {
  std::string interactions;
  std::size_t min_interactions = 5;
  std::uint64_t seed = 42;
  std::string out;
};

struct TrainArgs {
  std::string data;
  std::string text_features;
  std::string visual_features;
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string resume;
};

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::size_t k = 20;
  std::string report;
  std::string target = "test";
  std::size_t workers = 1;
};

struct RecommendArgs {
  std::string checkpoint;
  std::string user;
  std::size_t k = 10;
  std::string data;
};

struct InspectArgs {
  std::string checkpoint;
  std::string user;
  std::string item;
  std::string out;
};

struct SynthArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

struct GradcheckArgs {
  std::uint64_t seed = 1;
  bool verbose = false;
};

constexpr double kGradcheckTolerance = 1e-4;

void load_training_config(const TrainArgs& args, ModelConfig& model, TrainConfig& train) {
  if (!args.config.empty()) {
    for (const auto& [key, value] : read_key_values(args.config)) {
      apply_training_setting(model, train, key, value);
    }
  }
  for (const auto& text : args.overrides) {
    const auto [key, value] = parse_override(text);
    apply_training_setting(model, train, key, value);
  }
}

std::optional<FeatureTable> load_features(const std::string& path,
                                          FeatureModality modality,
                                          bool wanted,
                                          const char* flag,
                                          const IdMap& items,
                                          std::size_t& dim,
                                          std::ostream& err) {
  if (!wanted) {
    return std::nullopt;
  }
  if (path.empty()) {
    throw ConfigError(std::string(flag) + " is required unless the modality is disabled");
  }
  auto table = load_feature_table(path, modality, items);
  if (dim != 0 && dim != table.dim) {
    throw ConfigError(std::string(flag) + ": feature dimension " + std::to_string(table.dim) +
                      " differs from the configured " + std::to_string(dim));
  }
  dim = table.dim;
  if (table.missing_count > 0) {
    err << "warning: " << table.missing_count << " items have no entry in " << path << '\n';
  }
  if (table.unknown_count > 0) {
    err << "warning: " << table.unknown_count << " rows of " << path << " name unknown items\n";
  }
  return table;
}

int do_prepare(const PrepareArgs& args, std::ostream& out) {
  const auto log = parse_interactions(args.interactions, args.min_interactions);
  const auto dataset = split_dataset(log, SplitRatios{}, args.seed);
  write_dataset(dataset, args.out);
  std::size_t val = 0;
  std::size_t test = 0;
  for (std::size_t u = 0; u < dataset.num_users(); ++u) {
    val += dataset.validation[u].size();
    test += dataset.test[u].size();
  }
  out << "users\t" << dataset.num_users() << "\nitems\t" << dataset.num_items() << "\ninteractions\t"
      << log.pairs.size() << "\nduplicates\t" << log.duplicate_count << "\ntrain\t" << dataset.num_train()
      << "\nvalidation\t" << val << "\ntest\t" << test << '\n';
  return kExitOk;
}

int do_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  ModelConfig model;
  TrainConfig train;
  load_training_config(args, model, train);
  {
    // Input dims come from the feature files; stand in for them until then.
    auto probe = model;
    probe.text_input_dim = std::max<std::size_t>(probe.text_input_dim, 1);
    probe.visual_input_dim = std::max<std::size_t>(probe.visual_input_dim, 1);
    probe.validate();
  }
  train.validate();

  const auto dataset = read_dataset(args.data);
  const auto text = load_features(args.text_features, FeatureModality::text, model.use_text, "--text-features",
                                  dataset.items, model.text_input_dim, err);
  const auto visual = load_features(args.visual_features, FeatureModality::visual, model.use_visual,
                                    "--visual-features", dataset.items, model.visual_input_dim, err);
  model.validate();
  const ItemFeatures features{text ? &text->vectors : nullptr, visual ? &visual->vectors : nullptr};

  ModelParams params;
  TrainState state;
  if (!args.resume.empty()) {
    auto ck = load_checkpoint(args.resume, model);
    if (ck.user_keys != dataset.users.keys() || ck.item_keys != dataset.items.keys()) {
      throw InvalidInput("--resume: checkpoint was trained on a different dataset");
    }
    params = std::move(ck.params);
    state = std::move(ck.state);
  } else {
    params = ModelParams::initialize(model, dataset.num_users(), dataset.num_items(), train.seed);
    state = TrainState::fresh(params, train.learning_rate);
  }

  fs::create_directories(args.out);
  {
    std::ofstream cfg(fs::path(args.out) / "config.txt");
    cfg << format_training_config(model, train);
    if (!cfg) {
      throw IoError("cannot write " + (fs::path(args.out) / "config.txt").string());
    }
  }
  TrainOptions options;
  options.out_dir = args.out;
  options.log = &out;
  const auto result = dmrl::train(dataset, features, model, train, params, state, options);
  out << "best_epoch\t" << result.best_epoch << "\nbest_val_recall@" << train.eval_k << '\t'
      << result.best_val_recall << "\nearly_stopped\t" << (result.early_stopped ? "true" : "false") << '\n';
  return kExitOk;
}

ItemScorer scorer_from(const Checkpoint& ck) {
  return ItemScorer(ck.params, ck.refined_text, ck.refined_visual, ck.config);
}

IdMap key_map(const std::vector<std::string>& keys) {
  IdMap map;
  for (const auto& k : keys) {
    map.insert(k);
  }
  return map;
}

int do_evaluate(const EvaluateArgs& args, std::ostream& out) {
  EvalTarget target;
  if (args.target == "test") {
    target = EvalTarget::test;
  } else if (args.target == "validation" || args.target == "val") {
    target = EvalTarget::validation;
  } else {
    throw ConfigError("--target must be test or validation");
  }
  const auto ck = load_checkpoint(args.checkpoint);
  const auto dataset = read_dataset(args.data);
  if (ck.user_keys != dataset.users.keys() || ck.item_keys != dataset.items.keys()) {
    throw InvalidInput("checkpoint and --data disagree on users or items");
  }
  const auto scorer = scorer_from(ck);
  const auto report = evaluate(dataset, scorer, target, args.k, args.workers);
  write_report(report, dataset.users, args.report);
  out << "recall@" << report.k << '\t' << report.mean_recall << "\nndcg@" << report.k << '\t' << report.mean_ndcg
      << "\nusers\t" << report.num_evaluated_users << '\n';
  return kExitOk;
}

int do_recommend(const RecommendArgs& args, std::ostream& out) {
  const auto ck = load_checkpoint(args.checkpoint);
  const auto users = key_map(ck.user_keys);
  const Index user = users.at(args.user);
  std::vector<Index> exclude;
  if (!args.data.empty()) {
    const auto dataset = read_dataset(args.data);
    if (ck.item_keys != dataset.items.keys()) {
      throw InvalidInput("checkpoint and --data disagree on items");
    }
    exclude = dataset.known[dataset.users.at(args.user)];
  }
  const auto scorer = scorer_from(ck);
  std::vector<double> scores(scorer.num_items());
  scorer.score_all(user, scores);
  const auto ranked = rank_scores(scores, exclude, args.k);
  const auto precision = out.precision(10);
  for (Index item : ranked) {
    out << ck.item_keys[item] << '\t' << scores[item] << '\n';
  }
  out.precision(precision);
  return kExitOk;
}

int do_inspect(const InspectArgs& args, std::ostream& out) {
  const auto ck = load_checkpoint(args.checkpoint);
  const Index user = key_map(ck.user_keys).at(args.user);
  const Index item = key_map(ck.item_keys).at(args.item);
  const auto scorer = scorer_from(ck);
  const auto b = export_breakdown(user, item, scorer, args.out);
  out << "score\t" << std::setprecision(10) << b.total << '\n';
  return kExitOk;
}

int do_synth(const SynthArgs& args, std::ostream& out) {
  SynthConfig config;
  if (!args.config.empty()) {
    for (const auto& [key, value] : read_key_values(args.config)) {
      apply_synth_setting(config, key, value);
    }
  }
  for (const auto& text : args.overrides) {
    const auto [key, value] = parse_override(text);
    apply_synth_setting(config, key, value);
  }
  const auto data = generate_synthetic(config);
  const auto files = write_synthetic(data, args.out);
  out << "interactions\t" << files.interactions.string() << "\ntext_features\t" << files.text_features.string()
      << "\nvisual_features\t" << files.visual_features.string() << "\nground_truth\t"
      << files.ground_truth.string() << '\n';
  return kExitOk;
}

int do_gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err) {
  const auto report = run_gradcheck(args.seed);
  if (args.verbose) {
    for (const auto& e : report.entries) {
      out << e.name << '\t' << e.coordinates << '\t' << std::scientific << std::setprecision(3) << e.max_error
          << std::defaultfloat << '\n';
    }
  }
  out << "max_relative_error\t" << std::scientific << std::setprecision(3) << report.max_error << std::defaultfloat
      << '\n';
  if (!(report.max_error < kGradcheckTolerance)) {
    err << "error: gradient check exceeded tolerance " << kGradcheckTolerance << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"DMRL multimodal recommender", "dmrl"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  PrepareArgs prepare;
  auto* prepare_cmd = app.add_subcommand("prepare", "Filter and split an interaction file");
  prepare_cmd->add_option("--interactions", prepare.interactions, "user<TAB>item TSV")->required();
  prepare_cmd->add_option("--min-interactions", prepare.min_interactions, "k-core threshold")->capture_default_str();
  prepare_cmd->add_option("--seed", prepare.seed, "Split seed")->capture_default_str();
  prepare_cmd->add_option("--out", prepare.out, "Output dataset directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", train.data, "Dataset directory from prepare")->required();
  train_cmd->add_option("--text-features", train.text_features, "Text feature file");
  train_cmd->add_option("--visual-features", train.visual_features, "Visual feature file");
  train_cmd->add_option("--config", train.config, "key = value config file");
  train_cmd->add_option("--set", train.overrides, "Override key=value (repeatable)");
  train_cmd->add_option("--resume", train.resume, "Continue from a checkpoint");
  train_cmd->add_option("--out", train.out, "Output directory")->required();

  EvaluateArgs evaluate_args;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  evaluate_cmd->add_option("--checkpoint", evaluate_args.checkpoint, "Checkpoint file")->required();
  evaluate_cmd->add_option("--data", evaluate_args.data, "Dataset directory")->required();
  evaluate_cmd->add_option("--k", evaluate_args.k, "Cutoff")->capture_default_str();
  evaluate_cmd->add_option("--report", evaluate_args.report, "Report output file")->required();
  evaluate_cmd->add_option("--target", evaluate_args.target, "test or validation")->capture_default_str();
  evaluate_cmd->add_option("--workers", evaluate_args.workers, "Parallel users")->capture_default_str();

  RecommendArgs recommend;
  auto* recommend_cmd = app.add_subcommand("recommend", "Top-n items for a user");
  recommend_cmd->add_option("--checkpoint", recommend.checkpoint, "Checkpoint file")->required();
  recommend_cmd->add_option("--user", recommend.user, "User key")->required();
  recommend_cmd->add_option("--k", recommend.k, "Number of items")->capture_default_str();
  recommend_cmd->add_option("--data", recommend.data, "Dataset directory; excludes known items");

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect-attention", "Per-factor attention and rating breakdown");
  inspect_cmd->add_option("--checkpoint", inspect.checkpoint, "Checkpoint file")->required();
  inspect_cmd->add_option("--user", inspect.user, "User key")->required();
  inspect_cmd->add_option("--item", inspect.item, "Item key")->required();
  inspect_cmd->add_option("--out", inspect.out, "Breakdown TSV")->required();

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("gen-synthetic", "Generate a synthetic dataset");
  synth_cmd->add_option("--config", synth.config, "key = value config file");
  synth_cmd->add_option("--set", synth.overrides, "Override key=value (repeatable)");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  GradcheckArgs gradcheck;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite on a toy model");
  gradcheck_cmd->add_option("--seed", gradcheck.seed, "Toy instance seed")->capture_default_str();
  gradcheck_cmd->add_flag("--verbose", gradcheck.verbose, "Print every checked tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (prepare_cmd->parsed()) {
      return do_prepare(prepare, out);
    }
    if (train_cmd->parsed()) {
      return do_train(train, out, err);
    }
    if (evaluate_cmd->parsed()) {
      return do_evaluate(evaluate_args, out);
    }
    if (recommend_cmd->parsed()) {
      return do_recommend(recommend, out);
    }
    if (inspect_cmd->parsed()) {
      return do_inspect(inspect, out);
    }
    if (synth_cmd->parsed()) {
      return do_synth(synth, out);
    }
    return do_gradcheck(gradcheck, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NonFiniteError& e) {
    err << "error: non-finite " << e.term() << ": " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

} // namespace dmrl::cli
