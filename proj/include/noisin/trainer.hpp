#pragma once

// Training harness: model construction from a TrainConfig, full-split
// evaluation with carried state, the epoch loop with validation-triggered
// learning-rate decay, and the diagnostics run.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "noisin/checkpoint.hpp"
#include "noisin/config.hpp"
#include "noisin/data.hpp"
#include "noisin/noisin.hpp"
#include "noisin/regularizer.hpp"

namespace noisin {

class VocabMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitNumerical = 2, kExitInvariant = 3 };

/// Independent streams derived from the master seed, in a fixed order.
struct RunStreams {
  Rng init, train, eval, diagnose;

  explicit RunStreams(std::uint64_t seed) : RunStreams(Rng(seed)) {}

 private:
  explicit RunStreams(Rng master)
      : init(master.split()), train(master.split()), eval(master.split()), diagnose(master.split()) {}
};

/// Embedding U[-0.1, 0.1]; recurrent and output weights U[-1/sqrt(H), 1/sqrt(H)];
/// biases zero.
template <class T>
NoisinModel<T> build_model(const TrainConfig& cfg, std::size_t vocab, Rng& rng) {
  cfg.validate();
  NoisinModel<T> m;
  m.embedding = Tensor<T>(Shape{vocab, cfg.embedding_dim});
  for (auto& v : m.embedding.values()) v = static_cast<T>(0.1 * (2 * rng.uniform() - 1));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? cfg.embedding_dim : cfg.hidden;
    m.layers.push_back(CellParams<T>::uniform(cfg.cell, in, cfg.hidden, rng));
  }
  Tensor<T> V(Shape{cfg.hidden, vocab});
  const double a = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  for (auto& v : V.values()) v = static_cast<T>(a * (2 * rng.uniform() - 1));
  m.head = LikelihoodHead<T>::make(cfg.family, std::move(V));
  m.noise = cfg.noise();
  m.site = cfg.site;
  m.mc_samples = cfg.mc_samples;
  m.dropout = cfg.dropout();
  m.validate();
  return m;
}

struct EvalResult {
  double loss = 0;  // per-token mean NLL
  std::size_t tokens = 0;
  std::size_t unknown_tokens = 0;

  double perplexity() const { return std::exp(loss); }
};

/// Per-token mean NLL over a whole split. The split is cut into at most
/// `eval_batch` contiguous streams whose state carries across windows;
/// with one stream every token after the first is scored. Dropout is
/// never applied; noise only in k-sample mode.
template <class T>
EvalResult evaluate(const NoisinModel<T>& model, const std::vector<std::size_t>& ids,
                    const TrainConfig& cfg, EvalMode mode, Rng& rng) {
  if (ids.size() < 2) throw std::invalid_argument("evaluation split needs at least two tokens");
  const std::size_t batch = std::min(cfg.eval_batch, ids.size() / 2);
  const std::size_t window = std::min(cfg.unroll, ids.size() / batch - 1);
  const BatchStream stream = batchify(ids, batch, window);
  auto state = model.zero_states(batch);
  long double total = 0;
  EvalResult r;
  for (std::size_t i = 0; i < stream.num_windows(); ++i) {
    const auto b = stream.window_batch<T>(i);
    auto out = mode == EvalMode::NoiseOff ? deterministic_forward(model, b, state)
                                          : noisy_forward(model, b, state, rng, DrawOptions{true, false});
    total += out.objective.total;
    r.tokens += out.objective.tokens;
    state = std::move(out.final_states);
  }
  r.loss = static_cast<double>(total / static_cast<long double>(r.tokens));
  if (!std::isfinite(r.loss)) throw NumericalError("non-finite evaluation loss");
  return r;
}

template <class T>
NoisinModel<T> with_parameters(NoisinModel<T> model, const std::vector<Tensor<T>>& values) {
  auto params = model.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].second = values[i];
  return model;
}

struct TrainOutcome {
  MetricsLog metrics;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  std::string best_checkpoint;
  int exit_code = kExitOk;
  std::string error;
};

inline std::string checkpoint_name(std::size_t epoch) {
  std::ostringstream s;
  s << "epoch-" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return s.str();
}

/// Runs the configured epochs on `corpus`. Writes into cfg.out_dir: the
/// config echo, the vocabulary, a checkpoint each time validation improves,
/// best.txt naming the best checkpoint, and metrics.csv (or `metrics_path`).
/// A non-finite loss stops the run with kExitNumerical; the last good
/// checkpoint stays in place.
template <class T>
TrainOutcome train_run(const TrainConfig& cfg, const Corpus& corpus, std::ostream* log = nullptr,
                       std::string metrics_path = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  if (metrics_path.empty()) metrics_path = (dir / "metrics.csv").string();
  {
    std::ofstream(dir / "config.txt") << echo_config(cfg);
    std::ofstream vocab_out(dir / "vocab.txt");
    corpus.vocab.dump(vocab_out);
  }
  RunStreams rs(cfg.seed);
  NoisinModel<T> model = build_model<T>(cfg, corpus.vocab.size(), rs.init);
  const BatchStream train = batchify(corpus.train, cfg.batch_size, cfg.unroll);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  TrainOutcome out;
  Sgd<T> opt;
  double lr = cfg.lr;
  auto write_metrics = [&] {
    std::ofstream m(metrics_path);
    out.metrics.write_csv(m);
  };
  auto save_best = [&](const NoisinModel<T>& m, std::size_t epoch, double val_loss) {
    const std::string name = checkpoint_name(epoch);
    save_checkpoint((dir / name).string(), m, cfg, corpus.vocab,
                    "epoch = " + std::to_string(epoch) + "\nval_loss = " + detail::format_double(val_loss) + "\n");
    std::ofstream(dir / "best.txt") << name << '\n';
    out.best_checkpoint = (dir / name).string();
    out.best_epoch = epoch;
    out.best_val_loss = val_loss;
  };

  try {
    const double v0 = evaluate(model, corpus.valid, cfg, cfg.eval_mode, rs.eval).loss;
    out.metrics.append({0, std::nullopt, v0, lr, elapsed()});
    save_best(model, 0, v0);
    if (log) *log << "epoch 0  val ppl " << std::exp(v0) << '\n';
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      if (cfg.asgd && epoch >= cfg.asgd_start_epoch) opt.start_averaging();
      auto carry = model.zero_states(cfg.batch_size);
      long double loss_sum = 0;
      std::size_t tokens = 0;
      for (std::size_t i = 0; i < train.num_windows(); ++i) {
        const auto b = train.window_batch<T>(i);
        const auto step = train_step(model, b, carry, opt, static_cast<T>(cfg.clip_norm), static_cast<T>(lr), rs.train);
        loss_sum += static_cast<long double>(step.loss) * b.tokens();
        tokens += b.tokens();
      }
      const double train_loss = static_cast<double>(loss_sum / static_cast<long double>(tokens));
      const NoisinModel<T> scored = opt.averaging() ? with_parameters(model, opt.averaged()) : model;
      const double val = evaluate(scored, corpus.valid, cfg, cfg.eval_mode, rs.eval).loss;
      out.metrics.append({epoch, train_loss, val, lr, elapsed()});
      if (log) {
        *log << "epoch " << epoch << "  train ppl " << std::exp(train_loss) << "  val ppl " << std::exp(val)
             << "  lr " << lr << '\n';
      }
      if (val > out.best_val_loss) {
        lr /= cfg.lr_decay;
      } else if (val < out.best_val_loss) {
        save_best(scored, epoch, val);
      }
      write_metrics();
    }
  } catch (const NumericalError& e) {
    out.exit_code = kExitNumerical;
    out.error = e.what();
    if (log) *log << "aborted: " << e.what() << '\n';
  }
  write_metrics();
  return out;
}

template <class T>
TrainOutcome cmd_train(const TrainConfig& cfg, std::ostream* log = nullptr, const std::string& metrics_path = {}) {
  const Corpus corpus = load_corpus(cfg.train_path, cfg.valid_path, cfg.test_path, cfg.token_level,
                                    cfg.max_vocab == 0 ? Vocab::kUnlimited : cfg.max_vocab);
  return train_run<T>(cfg, corpus, log, metrics_path);
}

struct LoadedModel {
  TrainConfig config;
  Vocab vocab;
  std::map<std::string, std::string> meta;
};

template <class T>
NoisinModel<T> load_model(const std::string& checkpoint, LoadedModel& info) {
  const CheckpointHeader h = read_checkpoint_header(checkpoint);
  info.config = h.config();
  info.vocab = h.vocab();
  info.meta = parse_meta(h.meta_text);
  Rng unused(0);
  NoisinModel<T> model = build_model<T>(info.config, info.vocab.size(), unused);
  load_checkpoint(checkpoint, model);
  return model;
}

/// Tokenizes `text` with the checkpoint's level and vocabulary. With
/// `strict_vocab`, any token outside the vocabulary is an error.
inline std::vector<std::size_t> encode_split(const std::string& text, const LoadedModel& info,
                                             bool strict_vocab, std::size_t* unknown = nullptr) {
  const auto toks = tokenize(text, info.config.token_level);
  std::size_t n_unknown = 0;
  for (const auto& t : toks) {
    if (!info.vocab.contains(t)) {
      if (strict_vocab) throw VocabMismatch("token '" + t + "' is not in the checkpoint vocabulary");
      ++n_unknown;
    }
  }
  if (unknown) *unknown = n_unknown;
  return info.vocab.encode(toks);
}

template <class T>
EvalResult eval_checkpoint(const std::string& checkpoint, const std::string& corpus_path,
                           std::optional<EvalMode> mode = std::nullopt, bool strict_vocab = false) {
  LoadedModel info;
  const auto model = load_model<T>(checkpoint, info);
  std::size_t unknown = 0;
  const auto ids = encode_split(read_text_file(corpus_path), info, strict_vocab, &unknown);
  RunStreams rs(info.config.seed);
  auto r = evaluate(model, ids, info.config, mode.value_or(info.config.eval_mode), rs.eval);
  r.unknown_tokens = unknown;
  return r;
}

inline EvalResult cmd_eval(const std::string& checkpoint, const std::string& corpus_path,
                           std::optional<EvalMode> mode = std::nullopt, bool strict_vocab = false) {
  const auto h = read_checkpoint_header(checkpoint);
  return h.dtype_bytes == 8 ? eval_checkpoint<double>(checkpoint, corpus_path, mode, strict_vocab)
                            : eval_checkpoint<float>(checkpoint, corpus_path, mode, strict_vocab);
}

// ---- diagnostics ------------------------------------------------------------------

struct DiagnoseOptions {
  std::vector<double> gammas;  // empty: the configured gamma
  std::size_t unbiasedness_samples = 100000;
  std::size_t jensen_samples = 16;
  std::size_t risk_samples = 2000;
  std::size_t outer_samples = 20;
  std::size_t inner_samples = kMinInnerSamples;
  std::size_t batch = 2;
  std::size_t steps = 5;
  bool expect_biased = false;
};

struct DiagnoseResult {
  UnbiasednessReport unbiasedness;
  double jensen_gap = 0;
  std::vector<RiskReport> risk;
  bool jensen_violated = false;
  bool unbiasedness_failed = false;
  int exit_code = kExitOk;
};

inline void write_zscore_table(std::ostream& os, const UnbiasednessReport& r) {
  os << "unit,reference,mc_mean,z\n";
  for (std::size_t j = 0; j < r.z_scores.size(); ++j) {
    os << j << ',' << detail::format_double(r.reference[j]) << ',' << detail::format_double(r.mc_mean[j]) << ','
       << detail::format_double(r.z_scores[j]) << '\n';
  }
}

template <class T>
RnnState<T> first_row(const RnnState<T>& s) {
  auto row = [](const Tensor<T>& m) {
    if (m.size() == 0) return Tensor<T>();
    Tensor<T> r(Shape{1, m.cols()});
    std::copy_n(m.data(), m.cols(), r.data());
    return r;
  };
  return {row(s.h), row(s.c)};
}

/// Runs the unbiasedness check on the first layer, the Jensen gap of the
/// K-rollout objective and the risk decomposition on the first window of
/// `ids`. Writes the risk CSV to `risk_csv` and the z-score table to
/// `zscores`. The exit code is kExitInvariant when the Jensen gap is below
/// -1e-12, or when the unbiasedness verdict disagrees with `expect_biased`.
template <class T>
DiagnoseResult diagnose(const NoisinModel<T>& model, const std::vector<std::size_t>& ids,
                        const TrainConfig& cfg, const DiagnoseOptions& opt, std::ostream& risk_csv,
                        std::ostream& zscores) {
  RunStreams rs(cfg.seed);
  const BatchStream stream = batchify(ids, opt.batch, opt.steps);
  const auto batch = stream.window_batch<T>(0);
  const auto init = model.zero_states(opt.batch);
  DiagnoseResult out;

  const auto det = deterministic_forward(model, batch, init);
  const std::size_t last_id = batch.input_ids.back()[0];
  Tensor<T> x(Shape{1, model.embedding.cols()});
  std::copy_n(model.embedding.data() + last_id * x.cols(), x.cols(), x.data());
  out.unbiasedness =
      check_unbiasedness(model, x, first_row(det.final_states.front()), opt.unbiasedness_samples, rs.diagnose);
  write_zscore_table(zscores, out.unbiasedness);

  const auto jg = jensen_gap(model, batch, init, opt.jensen_samples, rs.diagnose);
  out.jensen_gap = static_cast<double>(jg.gap);
  out.jensen_violated = !(out.jensen_gap >= -1e-12);

  DecompositionOptions dopt;
  dopt.risk_samples = opt.risk_samples;
  dopt.outer_samples = opt.outer_samples;
  dopt.inner_samples = opt.inner_samples;
  dopt.seed = cfg.seed;
  const std::vector<double> gammas = opt.gammas.empty() ? std::vector<double>{cfg.gamma} : opt.gammas;
  out.risk = decomposition_check(model, batch, init, gammas, dopt);
  write_risk_csv(risk_csv, out.risk);

  out.unbiasedness_failed = out.unbiasedness.violated != opt.expect_biased;
  if (out.jensen_violated || out.unbiasedness_failed) out.exit_code = kExitInvariant;
  return out;
}

}  // namespace noisin
