#pragma once

// Corpus ingestion: UTF-8 validated tokenization, a frequency-ranked
// vocabulary with reserved unknown and end-of-sentence ids, contiguous
// batching into parallel streams and truncated-BPTT windows over them.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "noisin/noisin.hpp"

namespace noisin {

class EncodingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TokenLevel { Word, Char };

inline std::string to_string(TokenLevel l) { return l == TokenLevel::Word ? "word" : "char"; }

inline TokenLevel parse_token_level(std::string_view s) {
  if (s == "word") return TokenLevel::Word;
  if (s == "char") return TokenLevel::Char;
  throw std::invalid_argument("unknown token level '" + std::string(s) + "'");
}

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::size_t kUnkId = 0;
inline constexpr std::size_t kEosId = 1;

/// Splits `text` into Unicode scalar values, each as its UTF-8 bytes.
/// Rejects overlong forms, surrogates, values past U+10FFFF and truncation.
inline std::vector<std::string> utf8_scalars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto fail = [&](const char* why) {
    throw EncodingError(std::string("invalid UTF-8 at byte ") + std::to_string(i) + ": " + why);
  };
  while (i < text.size()) {
    const auto b0 = static_cast<unsigned char>(text[i]);
    std::size_t len;
    std::uint32_t cp;
    if (b0 < 0x80) { len = 1; cp = b0; }
    else if ((b0 & 0xE0) == 0xC0) { len = 2; cp = b0 & 0x1F; }
    else if ((b0 & 0xF0) == 0xE0) { len = 3; cp = b0 & 0x0F; }
    else if ((b0 & 0xF8) == 0xF0) { len = 4; cp = b0 & 0x07; }
    else fail("bad lead byte");
    if (i + len > text.size()) fail("truncated sequence");
    for (std::size_t k = 1; k < len; ++k) {
      const auto b = static_cast<unsigned char>(text[i + k]);
      if ((b & 0xC0) != 0x80) fail("bad continuation byte");
      cp = (cp << 6) | (b & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len]) fail("overlong encoding");
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) fail("not a scalar value");
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

/// Word level: whitespace-separated words, with <eos> closing every line
/// (including a final line without a newline). Char level: every scalar
/// value, newlines included.
inline std::vector<std::string> tokenize(std::string_view text, TokenLevel level) {
  if (level == TokenLevel::Char) return utf8_scalars(text);
  utf8_scalars(text);  // validation only
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    const bool last = end == std::string_view::npos;
    if (last) end = text.size();
    std::istringstream line{std::string(text.substr(pos, end - pos))};
    for (std::string w; line >> w;) out.push_back(std::move(w));
    out.emplace_back(kEosToken);
    pos = last ? text.size() : end + 1;
  }
  return out;
}

/// Inverse of word tokenization up to whitespace normalization: words joined
/// by single spaces, <eos> becomes a newline. Char tokens are concatenated.
inline std::string detokenize(const std::vector<std::string>& tokens, TokenLevel level) {
  std::string out;
  if (level == TokenLevel::Char) {
    for (const auto& t : tokens) out += t;
    return out;
  }
  bool line_start = true;
  for (const auto& t : tokens) {
    if (t == kEosToken) {
      out += '\n';
      line_start = true;
      continue;
    }
    if (!line_start) out += ' ';
    out += t;
    line_start = false;
  }
  return out;
}

class Vocab {
 public:
  static constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

  Vocab() {
    add(std::string(kUnkToken));
    add(std::string(kEosToken));
  }

  /// Appends `token` if absent; returns its id.
  std::size_t add(const std::string& token) {
    auto [it, inserted] = ids_.emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  std::size_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id));
    return tokens_[id];
  }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (std::size_t i : ids) out.push_back(token(i));
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One "token<TAB>id" line per entry, in id order. Tokens containing a
  /// tab or newline are written with backslash escapes.
  void dump(std::ostream& os) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << escape(tokens_[i]) << '\t' << i << '\n';
  }

  static Vocab load(std::istream& is) {
    Vocab v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    while (std::getline(is, line)) {
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw std::invalid_argument("vocab line without a tab");
      const std::string tok = unescape(line.substr(0, tab));
      if (std::stoul(line.substr(tab + 1)) != v.tokens_.size()) {
        throw std::invalid_argument("vocab ids must be dense and ordered");
      }
      if (v.add(tok) != v.tokens_.size() - 1) throw std::invalid_argument("duplicate vocab token");
    }
    if (v.size() < 2 || v.tokens_[kUnkId] != kUnkToken || v.tokens_[kEosId] != kEosToken) {
      throw std::invalid_argument("vocab must start with the reserved tokens");
    }
    return v;
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '\t') out += "\\t";
      else if (c == '\n') out += "\\n";
      else if (c == '\\') out += "\\\\";
      else out += c;
    }
    return out;
  }

  static std::string unescape(const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '\\' && i + 1 < s.size()) {
        const char n = s[++i];
        out += n == 't' ? '\t' : n == 'n' ? '\n' : n;
      } else {
        out += s[i];
      }
    }
    return out;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

/// Keeps the `max_size - 2` most frequent tokens after the reserved pair,
/// ties broken lexicographically. Literal occurrences of the reserved
/// tokens map to their reserved ids.
inline Vocab build_vocab(const std::vector<std::string>& tokens,
                         std::size_t max_size = Vocab::kUnlimited) {
  if (max_size < 2) throw std::invalid_argument("vocabulary needs room for <unk> and <eos>");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens)
    if (t != kUnkToken && t != kEosToken) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, n] : ranked) {
    if (v.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

/// A corpus laid out as `batch` contiguous streams, cut into windows of at
/// most `window` steps. Row r of `data` is the r-th contiguous chunk.
class BatchStream {
 public:
  BatchStream(const std::vector<std::size_t>& ids, std::size_t batch, std::size_t window)
      : batch_(batch), window_(window) {
    if (batch == 0 || window == 0) throw std::invalid_argument("batch and window must be positive");
    if (ids.size() < batch * (window + 1)) {
      throw DimensionError("corpus of " + std::to_string(ids.size()) +
                           " tokens is too small for batch " + std::to_string(batch) +
                           " and window " + std::to_string(window));
    }
    length_ = ids.size() / batch;
    data_.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(batch * length_));
  }

  std::size_t batch() const { return batch_; }
  std::size_t window() const { return window_; }
  std::size_t stream_length() const { return length_; }
  std::size_t at(std::size_t row, std::size_t pos) const { return data_[row * length_ + pos]; }

  std::vector<std::size_t> row(std::size_t r) const {
    return {data_.begin() + static_cast<std::ptrdiff_t>(r * length_),
            data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * length_)};
  }

  /// Windows start at 0, window, 2*window, ...; the last one is shortened
  /// so every input has a next-step target.
  std::size_t num_windows() const { return (length_ - 1 + window_ - 1) / window_; }

  std::size_t window_start(std::size_t i) const { return i * window_; }

  std::size_t window_length(std::size_t i) const {
    return std::min(window_, length_ - 1 - window_start(i));
  }

  /// inputs[t][r] = row r at start + t, targets one step later.
  template <class T = double>
  SequenceBatch<T> window_batch(std::size_t i) const {
    if (i >= num_windows()) throw std::out_of_range("window index " + std::to_string(i));
    const std::size_t start = window_start(i), n = window_length(i);
    SequenceBatch<T> b;
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<std::size_t> in(batch_);
      Observations<T> o;
      o.ids.resize(batch_);
      for (std::size_t r = 0; r < batch_; ++r) {
        in[r] = at(r, start + t);
        o.ids[r] = at(r, start + t + 1);
      }
      b.input_ids.push_back(std::move(in));
      b.targets.push_back(std::move(o));
    }
    return b;
  }

 private:
  std::size_t batch_;
  std::size_t window_;
  std::size_t length_ = 0;
  std::vector<std::size_t> data_;
};

inline BatchStream batchify(const std::vector<std::size_t>& ids, std::size_t batch,
                            std::size_t window) {
  return BatchStream(ids, batch, window);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path + "'");
  return ss.str();
}

struct Corpus {
  Vocab vocab;
  std::vector<std::size_t> train, valid, test;
};

/// Vocabulary from the training split only; other splits map unseen tokens
/// to <unk>. Empty paths leave a split empty.
inline Corpus load_corpus(const std::string& train_path, const std::string& valid_path,
                          const std::string& test_path, TokenLevel level,
                          std::size_t max_vocab = Vocab::kUnlimited) {
  Corpus c;
  const auto train_tokens = tokenize(read_text_file(train_path), level);
  c.vocab = build_vocab(train_tokens, max_vocab);
  c.train = c.vocab.encode(train_tokens);
  if (!valid_path.empty()) c.valid = c.vocab.encode(tokenize(read_text_file(valid_path), level));
  if (!test_path.empty()) c.test = c.vocab.encode(tokenize(read_text_file(test_path), level));
  return c;
}

}  // namespace noisin
