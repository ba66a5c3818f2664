// noisin: train, evaluate and diagnose noise-regularized recurrent language
// models.
//
//   noisin train --preset desk --train a.txt --valid b.txt --out_dir run
//   noisin eval --checkpoint run/epoch-007.ckpt --data test.txt
//   noisin diagnose --config run/config.txt --gammas 0.1,0.5 --expect-biased
//
// Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure,
// 3 invariant violation.

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "noisin/trainer.hpp"

using namespace noisin;

namespace {

struct ConfigFlags {
  std::string preset;
  std::string config_file;
  std::map<std::string, std::string> values;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--preset", preset, "desk | medium | large, applied before everything else");
    cmd.add_option("--config", config_file, "key = value file, applied after the preset");
    for (const auto& k : config_keys()) {
      std::string dashed = k.name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      std::string names = "--" + k.name;
      if (dashed != k.name) names += ",--" + dashed;
      cmd.add_option_function<std::string>(names, [this, name = k.name](const std::string& v) { values[name] = v; },
                                           k.help);
    }
  }

  TrainConfig resolve() const {
    TrainConfig c = preset.empty() ? TrainConfig{} : noisin::preset(preset);
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw IoError("cannot read '" + config_file + "'");
      apply_config_text(c, in);
    }
    for (const auto& [k, v] : values) set_config_value(c, k, v);
    c.validate();
    return c;
  }
};

template <class T>
int run_train(const TrainConfig& cfg, const std::string& metrics_out, bool quiet) {
  const auto out = cmd_train<T>(cfg, quiet ? nullptr : &std::cerr, metrics_out);
  if (out.exit_code != kExitOk) {
    std::cerr << "training stopped: " << out.error << "\n";
    if (!out.best_checkpoint.empty()) std::cerr << "last good checkpoint: " << out.best_checkpoint << "\n";
    return out.exit_code;
  }
  std::cout << "best epoch " << out.best_epoch << "  val ppl " << std::exp(out.best_val_loss) << "\n"
            << "checkpoint " << out.best_checkpoint << "\n";
  return kExitOk;
}

template <class T>
int run_diagnose(const std::string& checkpoint, const TrainConfig& flags_cfg, const DiagnoseOptions& opt,
                 const std::string& report_out, const std::string& zscores_out) {
  TrainConfig cfg = flags_cfg;
  NoisinModel<T> model;
  std::vector<std::size_t> ids;
  if (!checkpoint.empty()) {
    LoadedModel info;
    model = load_model<T>(checkpoint, info);
    cfg = info.config;
    const std::string& split = cfg.valid_path.empty() ? cfg.train_path : cfg.valid_path;
    ids = encode_split(read_text_file(split), info, false);
  } else {
    const Corpus corpus = load_corpus(cfg.train_path, cfg.valid_path, "", cfg.token_level,
                                      cfg.max_vocab == 0 ? Vocab::kUnlimited : cfg.max_vocab);
    RunStreams rs(cfg.seed);
    model = build_model<T>(cfg, corpus.vocab.size(), rs.init);
    ids = corpus.valid.empty() ? corpus.train : corpus.valid;
  }
  std::ofstream report_file, z_file;
  std::ostream* report = &std::cout;
  std::ostream* zs = &std::cout;
  if (!report_out.empty()) {
    report_file.open(report_out);
    if (!report_file) throw IoError("cannot write '" + report_out + "'");
    report = &report_file;
  }
  if (!zscores_out.empty()) {
    z_file.open(zscores_out);
    if (!z_file) throw IoError("cannot write '" + zscores_out + "'");
    zs = &z_file;
  }
  const auto r = diagnose(model, ids, cfg, opt, *report, *zs);
  std::cerr << "unbiasedness max |z| " << r.unbiasedness.max_abs_z
            << (r.unbiasedness.violated ? " (violated)" : " (holds)") << "\n"
            << "jensen gap " << r.jensen_gap << "\n";
  if (r.unbiasedness_failed) {
    std::cerr << (opt.expect_biased ? "expected a biased transition, none detected\n"
                                    : "unbiasedness violated\n");
  }
  if (r.jensen_violated) std::cerr << "Jensen gap below -1e-12\n";
  return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-injected recurrent language models"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model and write checkpoints and metrics");
  ConfigFlags train_flags;
  train_flags.add_to(*train);
  std::string metrics_out;
  bool quiet = false;
  train->add_option("--metrics-out", metrics_out, "metrics CSV path (default: <out_dir>/metrics.csv)");
  train->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a text file");
  std::string eval_ckpt, eval_data, eval_mode;
  bool strict_vocab = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "text file to score")->required();
  eval->add_option("--eval-mode,--eval_mode", eval_mode, "noise-off | k-sample (default: as trained)");
  eval->add_flag("--strict-vocab", strict_vocab, "fail on tokens outside the vocabulary");

  auto* diag = app.add_subcommand("diagnose", "unbiasedness, Jensen gap and risk decomposition");
  ConfigFlags diag_flags;
  diag_flags.add_to(*diag);
  DiagnoseOptions dopt;
  std::string diag_ckpt, report_out, zscores_out;
  diag->add_option("--checkpoint", diag_ckpt, "diagnose a trained model instead of a fresh one");
  diag->add_option("--gammas", dopt.gammas, "spreads for the risk decomposition")->delimiter(',');
  diag->add_option("--unbiasedness-samples", dopt.unbiasedness_samples)->capture_default_str();
  diag->add_option("--jensen-samples", dopt.jensen_samples)->capture_default_str();
  diag->add_option("--risk-samples", dopt.risk_samples)->capture_default_str();
  diag->add_option("--outer-samples", dopt.outer_samples)->capture_default_str();
  diag->add_option("--inner-samples", dopt.inner_samples)->capture_default_str();
  diag->add_option("--diag-batch", dopt.batch)->capture_default_str();
  diag->add_option("--diag-steps", dopt.steps)->capture_default_str();
  diag->add_option("--report-out", report_out, "risk CSV path (default: stdout)");
  diag->add_option("--zscores-out", zscores_out, "z-score table path (default: stdout)");
  diag->add_flag("--expect-biased", dopt.expect_biased, "the transition is expected to be biased (dropout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) {
      const TrainConfig cfg = train_flags.resolve();
      return cfg.dtype == Dtype::F64 ? run_train<double>(cfg, metrics_out, quiet)
                                     : run_train<float>(cfg, metrics_out, quiet);
    }
    if (*eval) {
      std::optional<EvalMode> mode;
      if (!eval_mode.empty()) mode = parse_eval_mode(eval_mode);
      const auto r = cmd_eval(eval_ckpt, eval_data, mode, strict_vocab);
      std::cout << "loss " << detail::format_double(r.loss) << "\nppl " << detail::format_double(r.perplexity())
                << "\ntokens " << r.tokens << "\nunknown " << r.unknown_tokens << "\n";
      return kExitOk;
    }
    if (*diag) {
      const TrainConfig cfg = diag_flags.resolve();
      std::optional<Dtype> dtype;
      if (!diag_ckpt.empty()) dtype = read_checkpoint_header(diag_ckpt).dtype_bytes == 8 ? Dtype::F64 : Dtype::F32;
      return dtype.value_or(cfg.dtype) == Dtype::F64
                 ? run_diagnose<double>(diag_ckpt, cfg, dopt, report_out, zscores_out)
                 : run_diagnose<float>(diag_ckpt, cfg, dopt, report_out, zscores_out);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
