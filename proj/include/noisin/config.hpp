#pragma once

// Run configuration for the training harness: a flat key = value record
// with every default materialized, presets, and the per-epoch metrics log.

#include <charconv>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "noisin/data.hpp"
#include "noisin/noisin.hpp"

namespace noisin {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EvalMode { NoiseOff, KSample };

inline std::string to_string(EvalMode m) { return m == EvalMode::NoiseOff ? "noise-off" : "k-sample"; }

inline EvalMode parse_eval_mode(std::string_view s) {
  if (s == "noise-off") return EvalMode::NoiseOff;
  if (s == "k-sample") return EvalMode::KSample;
  throw std::invalid_argument("unknown eval mode '" + std::string(s) + "'");
}

enum class Dtype { F64, F32 };

inline std::string to_string(Dtype d) { return d == Dtype::F64 ? "f64" : "f32"; }

inline Dtype parse_dtype(std::string_view s) {
  if (s == "f64" || s == "double") return Dtype::F64;
  if (s == "f32" || s == "float") return Dtype::F32;
  throw std::invalid_argument("unknown dtype '" + std::string(s) + "'");
}

struct TrainConfig {
  // model
  CellKind cell = CellKind::Lstm;
  std::size_t layers = 2;
  std::size_t hidden = 650;
  std::size_t embedding_dim = 650;
  LikelihoodFamily family = LikelihoodFamily::Categorical;
  // noise
  NoiseFamily noise_family = NoiseFamily::Gaussian;
  InjectionMode noise_mode = InjectionMode::Off;
  double gamma = 0.5;
  std::optional<double> alpha;
  InjectionSite site = InjectionSite::EveryLayer;
  std::size_t mc_samples = 1;
  // dropout
  double dropout_input = 0.5;
  double dropout_recurrent = 0.4;
  double dropout_output = 0.5;
  bool dropout_per_sequence = false;
  bool dropout_shared_stream = false;
  // optimization
  double lr = 30;
  double lr_decay = 1.2;
  double clip_norm = 0.25;
  std::size_t batch_size = 80;
  std::size_t unroll = 35;
  std::size_t max_epochs = 200;
  bool asgd = false;
  std::size_t asgd_start_epoch = 0;
  std::uint64_t seed = 1111;
  Dtype dtype = Dtype::F64;
  // evaluation
  EvalMode eval_mode = EvalMode::NoiseOff;
  std::size_t eval_batch = 1;
  // data
  TokenLevel token_level = TokenLevel::Word;
  std::size_t max_vocab = 0;  // 0 = keep every training token
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::string out_dir = "run";

  NoiseSpec noise() const { return NoiseSpec{noise_family, gamma, alpha, noise_mode}; }

  DropoutRates dropout() const {
    return {dropout_input, dropout_recurrent, dropout_output, dropout_per_sequence,
            dropout_shared_stream};
  }

  void validate() const {
    if (layers == 0 || hidden == 0 || embedding_dim == 0) throw ConfigError("model sizes must be positive");
    if (family != LikelihoodFamily::Categorical) {
      throw ConfigError("token corpora need the categorical likelihood");
    }
    if (mc_samples == 0) throw ConfigError("mc_samples must be >= 1");
    for (double p : {dropout_input, dropout_recurrent, dropout_output}) {
      if (!(p >= 0 && p < 1)) throw ConfigError("dropout rates must lie in [0, 1)");
    }
    if (cell != CellKind::Lstm && (dropout_input > 0 || dropout_recurrent > 0)) {
      throw ConfigError("gate dropout needs the lstm cell");
    }
    if (!(lr > 0) || !(lr_decay >= 1) || !(clip_norm >= 0)) {
      throw ConfigError("need lr > 0, lr_decay >= 1, clip_norm >= 0");
    }
    if (max_vocab == 1) throw ConfigError("max_vocab must be 0 or at least 2");
    if (batch_size == 0 || unroll == 0 || eval_batch == 0) throw ConfigError("batch sizes and unroll must be positive");
    try {
      noisin::validate(noise());
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("format_double");
  return std::string(buf, end);
}

inline double parse_double(const std::string& s) {
  double v;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("not a non-negative integer: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// One configurable field: its key, how to print it and how to set it.
struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  using C = TrainConfig;
  using namespace detail;
  auto size_key = [](std::string n, std::string h, std::size_t C::*f) {
    return ConfigKey{std::move(n), std::move(h),
                     [f](const C& c) { return std::to_string(c.*f); },
                     [f](C& c, const std::string& v) { c.*f = parse_uint(v); }};
  };
  auto real_key = [](std::string n, std::string h, double C::*f) {
    return ConfigKey{std::move(n), std::move(h), [f](const C& c) { return format_double(c.*f); },
                     [f](C& c, const std::string& v) { c.*f = parse_double(v); }};
  };
  auto bool_key = [](std::string n, std::string h, bool C::*f) {
    return ConfigKey{std::move(n), std::move(h), [f](const C& c) { return std::string(c.*f ? "true" : "false"); },
                     [f](C& c, const std::string& v) { c.*f = parse_bool(v); }};
  };
  auto text_key = [](std::string n, std::string h, std::string C::*f) {
    return ConfigKey{std::move(n), std::move(h), [f](const C& c) { return c.*f; },
                     [f](C& c, const std::string& v) { c.*f = v; }};
  };
  auto enum_key = [](std::string n, std::string h, auto C::*f, auto parse) {
    return ConfigKey{std::move(n), std::move(h), [f](const C& c) { return to_string(c.*f); },
                     [f, parse](C& c, const std::string& v) {
                       try {
                         c.*f = parse(v);
                       } catch (const ConfigError&) {
                         throw;
                       } catch (const std::exception& e) {
                         throw ConfigError(e.what());
                       }
                     }};
  };
  static const std::vector<ConfigKey> keys = {
      enum_key("cell", "ernn-tanh | ernn-sigmoid | lstm", &C::cell, parse_cell_kind),
      size_key("layers", "stacked recurrent layers", &C::layers),
      size_key("hidden", "hidden units per layer", &C::hidden),
      size_key("embedding_dim", "token embedding width", &C::embedding_dim),
      enum_key("family", "likelihood family", &C::family, parse_likelihood_family),
      enum_key("noise_family", "gaussian | bernoulli | gamma | gumbel | laplace | logistic | beta | chisquare",
               &C::noise_family, parse_noise_family),
      enum_key("noise_mode", "off | additive | multiplicative", &C::noise_mode, parse_injection_mode),
      real_key("gamma", "noise spread", &C::gamma),
      ConfigKey{"alpha", "shape parameter for gamma/beta noise (default: family default)",
                [](const C& c) { return c.alpha ? format_double(*c.alpha) : std::string("default"); },
                [](C& c, const std::string& v) {
                  if (v == "default") c.alpha.reset();
                  else c.alpha = parse_double(v);
                }},
      enum_key("site", "every-layer | final-output", &C::site, parse_injection_site),
      size_key("mc_samples", "noise rollouts per step (K)", &C::mc_samples),
      real_key("dropout_input", "input-side gate drop rate", &C::dropout_input),
      real_key("dropout_recurrent", "recurrent-side gate drop rate", &C::dropout_recurrent),
      real_key("dropout_output", "drop rate before the output layer", &C::dropout_output),
      bool_key("dropout_per_sequence", "one mask per window instead of per step", &C::dropout_per_sequence),
      bool_key("dropout_shared_stream", "draw masks from the noise stream", &C::dropout_shared_stream),
      real_key("lr", "initial learning rate", &C::lr),
      real_key("lr_decay", "divide lr by this when validation worsens", &C::lr_decay),
      real_key("clip_norm", "global gradient norm cap (0 = off)", &C::clip_norm),
      size_key("batch_size", "parallel training streams", &C::batch_size),
      size_key("unroll", "truncated BPTT window", &C::unroll),
      size_key("max_epochs", "training epochs", &C::max_epochs),
      bool_key("asgd", "average iterates from asgd_start_epoch on", &C::asgd),
      size_key("asgd_start_epoch", "first averaged epoch", &C::asgd_start_epoch),
      ConfigKey{"seed", "master seed", [](const C& c) { return std::to_string(c.seed); },
                [](C& c, const std::string& v) { c.seed = parse_uint(v); }},
      enum_key("dtype", "f64 | f32", &C::dtype, parse_dtype),
      enum_key("eval_mode", "noise-off | k-sample", &C::eval_mode, parse_eval_mode),
      size_key("eval_batch", "parallel streams during evaluation", &C::eval_batch),
      enum_key("token_level", "word | char", &C::token_level, parse_token_level),
      size_key("max_vocab", "vocabulary cap including <unk>/<eos> (0 = none)", &C::max_vocab),
      text_key("train", "training split", &C::train_path),
      text_key("valid", "validation split", &C::valid_path),
      text_key("test", "test split", &C::test_path),
      text_key("out_dir", "directory for checkpoints, metrics and config echo", &C::out_dir),
  };
  return keys;
}

inline const ConfigKey& config_key(std::string_view name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + std::string(name) + "'");
}

inline void set_config_value(TrainConfig& c, std::string_view key, const std::string& value) {
  config_key(key).set(c, value);
}

/// Applies "key = value" lines. Blank lines and lines starting with '#'
/// are skipped.
inline void apply_config_text(TrainConfig& c, std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_config_value(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline TrainConfig parse_config_text(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  apply_config_text(base, in);
  return base;
}

/// Every key with its resolved value; parsing this text reproduces `c`.
inline std::string echo_config(const TrainConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

inline bool operator==(const TrainConfig& a, const TrainConfig& b) {
  return echo_config(a) == echo_config(b);
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"desk", "medium", "large"};
  return names;
}

/// desk: one small layer on characters, a budget a laptop finishes quickly.
/// medium / large: the 2x650 and 2x1500 word-level settings.
inline TrainConfig preset(std::string_view name) {
  TrainConfig c;
  if (name == "desk") {
    c.cell = CellKind::ErnnTanh;
    c.layers = 1;
    c.hidden = 256;
    c.embedding_dim = 64;
    c.token_level = TokenLevel::Char;
    c.dropout_input = c.dropout_recurrent = c.dropout_output = 0;
    c.max_epochs = 20;
    c.batch_size = 8;
    c.unroll = 50;
    c.lr = 1.0;
    c.clip_norm = 1.0;
  } else if (name == "medium") {
    c.hidden = c.embedding_dim = 650;
  } else if (name == "large") {
    c.hidden = c.embedding_dim = 1500;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  return c;
}

// ---- metrics ----------------------------------------------------------------------

struct MetricsRow {
  std::size_t epoch = 0;
  std::optional<double> train_loss;  // absent for the initial evaluation
  double val_loss = 0;
  double lr = 0;
  double wall_seconds = 0;

  std::optional<double> train_ppl() const {
    return train_loss ? std::optional<double>(std::exp(*train_loss)) : std::nullopt;
  }
  double val_ppl() const { return std::exp(val_loss); }
};

inline constexpr const char* kMetricsCsvHeader = "epoch,train_loss,train_ppl,val_loss,val_ppl,lr,wall_time";

class MetricsLog {
 public:
  void append(MetricsRow r) {
    if (!rows_.empty() && r.epoch <= rows_.back().epoch) {
      throw std::logic_error("metrics rows must have increasing epochs");
    }
    rows_.push_back(r);
  }

  const std::vector<MetricsRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  /// Fixed header; the initial row leaves the train columns empty.
  void write_csv(std::ostream& os) const {
    os << kMetricsCsvHeader << '\n';
    for (const auto& r : rows_) os << csv_row(r) << '\n';
  }

  static std::string csv_row(const MetricsRow& r) {
    using detail::format_double;
    std::string s = std::to_string(r.epoch) + ',';
    if (r.train_loss) s += format_double(*r.train_loss) + ',' + format_double(*r.train_ppl());
    else s += ',';
    s += ',' + format_double(r.val_loss) + ',' + format_double(r.val_ppl()) + ',' +
         format_double(r.lr) + ',' + format_double(r.wall_seconds);
    return s;
  }

 private:
  std::vector<MetricsRow> rows_;
};

}  // namespace noisin
