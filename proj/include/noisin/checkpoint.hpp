#pragma once

// Binary checkpoint: "NOISNCKP", u32 version, u32 dtype width, then
// length-prefixed config echo, vocabulary dump and metadata text, then
// named tensors (name, rank, dims, raw values). Host byte order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "noisin/config.hpp"

namespace noisin {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'N', 'O', 'I', 'S', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::string config_text;
  std::string vocab_text;
  std::string meta_text;  // key = value lines, e.g. epoch and validation loss
  std::uint32_t dtype_bytes = 8;

  TrainConfig config() const { return parse_config_text(config_text); }

  Vocab vocab() const {
    std::istringstream in(vocab_text);
    return Vocab::load(in);
  }
};

namespace detail {

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_text(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class U>
U get(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint truncated");
  return v;
}

inline std::string get_text(std::istream& is, std::uint64_t limit = std::uint64_t(1) << 32) {
  const auto n = get<std::uint64_t>(is);
  if (n > limit) throw CheckpointError("checkpoint string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace detail

/// Writes to `path` via a temporary file so an interrupted write never
/// replaces a good checkpoint.
template <class T>
void save_checkpoint(const std::string& path, const NoisinModel<T>& model, const TrainConfig& config,
                     const Vocab& vocab, const std::string& meta_text = {}) {
  using namespace detail;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write '" + tmp + "'");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint32_t>(os, sizeof(T));
    put_text(os, echo_config(config));
    std::ostringstream vs;
    vocab.dump(vs);
    put_text(os, vs.str());
    put_text(os, meta_text);
    const auto params = model.named_parameters();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
      put_text(os, name);
      put<std::uint32_t>(os, static_cast<std::uint32_t>(p->rank()));
      for (std::size_t d : p->shape()) put<std::uint64_t>(os, d);
      os.write(reinterpret_cast<const char*>(p->data()), static_cast<std::streamsize>(p->size() * sizeof(T)));
    }
    if (!os) throw IoError("error while writing '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Reads the header and leaves `is` positioned at the tensor section.
inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError("not a checkpoint file");
  }
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointHeader h;
  h.dtype_bytes = detail::get<std::uint32_t>(is);
  if (h.dtype_bytes != 4 && h.dtype_bytes != 8) throw CheckpointError("bad checkpoint dtype");
  h.config_text = detail::get_text(is);
  h.vocab_text = detail::get_text(is);
  h.meta_text = detail::get_text(is);
  return h;
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read '" + path + "'");
  return read_checkpoint_header(is);
}

/// Fills the parameters of `model` (already shaped from the stored config)
/// from the checkpoint at `path`. Names, shapes and the dtype must match.
template <class T>
CheckpointHeader load_checkpoint(const std::string& path, NoisinModel<T>& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read '" + path + "'");
  CheckpointHeader h = read_checkpoint_header(is);
  if (h.dtype_bytes != sizeof(T)) throw CheckpointError("checkpoint dtype does not match");
  const auto n = detail::get<std::uint32_t>(is);
  auto params = model.named_parameters();
  if (n != params.size()) throw CheckpointError("checkpoint has a different parameter count");
  for (auto& [name, p] : params) {
    const std::string stored = detail::get_text(is, 4096);
    if (stored != name) throw CheckpointError("expected tensor '" + name + "', found '" + stored + "'");
    const auto rank = detail::get<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(detail::get<std::uint64_t>(is));
    if (shape != p->shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                            shape_str(p->shape()));
    }
    if (!is.read(reinterpret_cast<char*>(p->data()), static_cast<std::streamsize>(p->size() * sizeof(T)))) {
      throw CheckpointError("checkpoint truncated");
    }
  }
  return h;
}

/// Parses "key = value" metadata lines.
inline std::map<std::string, std::string> parse_meta(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return out;
}

}  // namespace noisin
