#pragma once

// Argument parsing for the dasent tool. run() returns the process exit code
// and never throws.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dasent/commands.hpp"

namespace dasent::cli {

namespace detail {

struct CommonFlags {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string out;

  void attach(CLI::App& cmd, bool with_seed) {
    cmd.add_option("--config", config, "key=value configuration file")->check(CLI::ExistingFile);
    cmd.add_option("--set", set, "override one configuration key (key=value), repeatable");
    cmd.add_option("--out", out, "output directory");
    if (with_seed) {
      cmd.add_option("--seed", seed, "master seed");
      cmd.add_option("--jobs", jobs, "worker threads for the run grid");
    }
  }

  KeyValues overrides() const {
    KeyValues kv = parse_assignments(set);
    if (seed) kv["seed"] = std::to_string(*seed);
    if (jobs) kv["jobs"] = std::to_string(*jobs);
    if (!out.empty()) kv["out"] = out;
    return kv;
  }

  std::optional<fs::path> config_path() const {
    return config.empty() ? std::nullopt : std::optional<fs::path>(config);
  }
};

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr,
               const EnvLookup& env = process_env) {
  CLI::App app{"dialog act and sentiment tagging of discussion threads", "dasent"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "parse a tree corpus, write dialogs and statistics");
  std::string ingest_input, ingest_out = "ingest";
  ingest->add_option("input", ingest_input, "tree TSV corpus")->required();
  ingest->add_option("--out", ingest_out, "output directory");

  // train
  auto* train = app.add_subcommand("train", "train the joint model with model selection on dev");
  detail::CommonFlags train_flags;
  std::string train_path, dev_path, test_path;
  train_flags.attach(*train, true);
  train->add_option("--train", train_path, "training corpus (tree TSV)");
  train->add_option("--dev", dev_path, "dev corpus; default holds out a fold of --train");
  train->add_option("--test", test_path, "optional test corpus scored with the selected model");

  // eval
  auto* eval = app.add_subcommand("eval", "score a trained model or a predictions file");
  std::string model_dir, eval_test, predictions, eval_out = "eval";
  auto* model_opt = eval->add_option("--model", model_dir, "run directory written by train");
  auto* pred_opt = eval->add_option("--predictions", predictions, "dialogs TSV with two predicted label columns");
  eval->add_option("--test", eval_test, "test corpus (with --model)");
  eval->add_option("--out", eval_out, "output directory");
  model_opt->excludes(pred_opt);

  // transfer
  auto* transfer = app.add_subcommand("transfer", "learning curves under label budgets");
  detail::CommonFlags transfer_flags;
  std::string tr_train, tr_test, tr_regime, tr_budgets, tr_seeds;
  transfer_flags.attach(*transfer, true);
  transfer->add_option("--train", tr_train, "labeled pool (tree TSV)");
  transfer->add_option("--test", tr_test, "test corpus");
  transfer->add_option("--regime", tr_regime, "comma list of both-rich, sentiment-poor, dialog-act-poor, both-poor");
  transfer->add_option("--budgets", tr_budgets, "comma list of dialog budgets");
  transfer->add_option("--seeds", tr_seeds, "comma list of repeat seeds");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "sentiment transition statistics of a labeled corpus");
  std::string an_input, an_out = "analyze";
  double alpha = 0.0;
  analyze->add_option("input", an_input, "labeled tree TSV corpus")->required();
  analyze->add_option("--alpha", alpha, "additive smoothing")->check(CLI::NonNegativeNumber);
  analyze->add_option("--out", an_out, "output directory");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and the model");
  GradcheckOptions gc;
  bool quick = false;
  gradcheck->add_option("--eps", gc.eps, "central difference step");
  gradcheck->add_option("--tolerance", gc.tolerance, "maximum relative error");
  gradcheck->add_option("--seed", gc.seed, "seed for inputs and sampled coordinates");
  gradcheck->add_flag("--inject-fault", gc.inject_fault, "use a wrong tanh backward (must fail)");
  gradcheck->add_flag("--quick", quick, "skip the default-size model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "dasent: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*ingest) {
      cmd_ingest(ingest_input, ingest_out, out);
    } else if (*train) {
      KeyValues kv = train_flags.overrides();
      if (!train_path.empty()) kv["train"] = train_path;
      if (!dev_path.empty()) kv["dev"] = dev_path;
      if (!test_path.empty()) kv["test"] = test_path;
      cmd_train(resolve_config(train_flags.config_path(), kv, env), out);
    } else if (*eval) {
      if (!model_dir.empty()) {
        if (eval_test.empty()) throw UsageError("eval --model needs --test");
        cmd_eval_model(model_dir, eval_test, eval_out, out);
      } else if (!predictions.empty()) {
        cmd_eval_predictions(predictions, eval_out, out);
      } else {
        throw UsageError("eval needs --model or --predictions");
      }
    } else if (*transfer) {
      KeyValues kv = transfer_flags.overrides();
      if (!tr_train.empty()) kv["train"] = tr_train;
      if (!tr_test.empty()) kv["test"] = tr_test;
      if (!tr_regime.empty()) kv["regime"] = tr_regime;
      if (!tr_budgets.empty()) kv["budgets"] = tr_budgets;
      if (!tr_seeds.empty()) kv["seeds"] = tr_seeds;
      cmd_transfer(resolve_config(transfer_flags.config_path(), kv, env), out);
    } else if (*analyze) {
      cmd_analyze(an_input, alpha, an_out, out);
    } else if (*gradcheck) {
      gc.default_size_model = !quick;
      const auto report = run_gradcheck(gc);
      out << gradcheck_table(report);
      if (!report.passed()) return kExitNumeric;
    }
  } catch (const std::exception& e) {
    err << "dasent: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitOk;
}

}  // namespace dasent::cli
