#pragma once

// Binary trial corpus, its JSON manifest, and network checkpoints.
// All multi-byte fields are little-endian regardless of host order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecl/error.hpp"
#include "ecl/model.hpp"
#include "ecl/signal.hpp"

namespace ecl {

namespace fs = std::filesystem;

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) { uint(v, 2); }
  void u32(std::uint32_t v) { uint(v, 4); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::string& bytes() const { return buf_; }

 private:
  void uint(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string what) : buf_(std::move(bytes)), what_(std::move(what)) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return raw(u32()); }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " more)");
    }
  }
  std::uint64_t uint(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

inline void write_json(const fs::path& path, const nlohmann::json& j) { detail::write_file(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

struct Corpus {
  std::vector<Trial> trials;
  std::size_t channels = 0;
  std::size_t samples = 0;
  double fs = 100.0;
  std::vector<std::string> class_names;
  nlohmann::json generator;  // spec that produced it, if any

  std::vector<std::uint32_t> subjects() const {
    std::set<std::uint32_t> s;
    for (const auto& t : trials) s.insert(t.subject);
    return {s.begin(), s.end()};
  }

  std::size_t n_classes() const {
    std::size_t n = class_names.size();
    for (const auto& t : trials) n = std::max<std::size_t>(n, t.label + 1u);
    return n;
  }

  void validate() const {
    for (const auto& t : trials) {
      if (t.channels != channels || t.samples != samples || t.data.size() != channels * samples) {
        throw DimensionError("corpus: trial shape " + std::to_string(t.channels) + "x" + std::to_string(t.samples) +
                             " differs from corpus " + std::to_string(channels) + "x" + std::to_string(samples));
      }
    }
  }

  nlohmann::json manifest() const {
    std::map<std::uint32_t, std::set<std::uint16_t>> sessions;
    for (const auto& t : trials) sessions[t.subject].insert(t.session);
    nlohmann::json subj = nlohmann::json::array();
    for (const auto& [s, ses] : sessions) subj.push_back({{"id", s}, {"sessions", ses}});
    return {{"n_trials", trials.size()}, {"channels", channels}, {"samples", samples}, {"fs", fs},
            {"class_names", class_names}, {"subjects", subj},   {"generator", generator}};
  }
};

inline constexpr char kCorpusMagic[8] = {'E', 'C', 'L', 'T', 'R', 'I', 'A', 'L'};
inline constexpr std::uint32_t kCorpusVersion = 1;

inline fs::path manifest_path(const fs::path& corpus_path) {
  fs::path p = corpus_path;
  p.replace_extension(".json");
  return p;
}

/// Writes the binary corpus and a JSON manifest next to it.
inline void write_corpus(const Corpus& corpus, const fs::path& path) {
  corpus.validate();
  detail::ByteWriter w;
  w.raw(kCorpusMagic, sizeof kCorpusMagic);
  w.u32(kCorpusVersion);
  w.u32(static_cast<std::uint32_t>(corpus.trials.size()));
  w.u32(static_cast<std::uint32_t>(corpus.channels));
  w.u32(static_cast<std::uint32_t>(corpus.samples));
  w.f64(corpus.fs);
  for (const auto& t : corpus.trials) {
    w.u32(t.subject);
    w.u16(t.session);
    w.u16(t.label);
    for (double v : t.data) w.f64(v);
  }
  detail::write_file(path, w.bytes());
  write_json(manifest_path(path), corpus.manifest());
}

inline Corpus read_corpus(const fs::path& path) {
  detail::ByteReader r(detail::read_file(path), path.string());
  if (r.raw(sizeof kCorpusMagic) != std::string(kCorpusMagic, sizeof kCorpusMagic)) {
    throw FormatError(path.string() + ": not a trial corpus (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCorpusVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  Corpus c;
  const auto n = r.u32();
  c.channels = r.u32();
  c.samples = r.u32();
  c.fs = r.f64();
  c.trials.resize(n);
  for (auto& t : c.trials) {
    t.subject = r.u32();
    t.session = r.u16();
    t.label = r.u16();
    t.channels = c.channels;
    t.samples = c.samples;
    t.data.resize(c.channels * c.samples);
    for (auto& v : t.data) v = r.f64();
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after last trial");
  const auto mpath = manifest_path(path);
  if (fs::exists(mpath)) {
    const auto m = read_json(mpath);
    c.class_names = m.value("class_names", std::vector<std::string>{});
    c.generator = m.value("generator", nlohmann::json());
  }
  return c;
}

inline constexpr char kCheckpointMagic[8] = {'E', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ExtractorConfig& c) {
  return {{"channels", c.channels},
          {"samples", c.samples},
          {"temporal_filters", c.temporal_filters},
          {"depth_multiplier", c.depth_multiplier},
          {"separable_filters", c.separable_filters},
          {"temporal_kernel", c.temporal_kernel},
          {"separable_kernel", c.separable_kernel},
          {"pool1", c.pool1},
          {"pool2", c.pool2},
          {"dropout", c.dropout}};
}

inline ExtractorConfig extractor_config_from_json(const nlohmann::json& j, ExtractorConfig c = {}) {
  c.channels = j.value("channels", c.channels);
  c.samples = j.value("samples", c.samples);
  c.temporal_filters = j.value("temporal_filters", c.temporal_filters);
  c.depth_multiplier = j.value("depth_multiplier", c.depth_multiplier);
  c.separable_filters = j.value("separable_filters", c.separable_filters);
  c.temporal_kernel = j.value("temporal_kernel", c.temporal_kernel);
  c.separable_kernel = j.value("separable_kernel", c.separable_kernel);
  c.pool1 = j.value("pool1", c.pool1);
  c.pool2 = j.value("pool2", c.pool2);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

/// Parameters and batch-norm running moments, bit-exact.
inline void save_checkpoint(EnsembleNetwork& net, const fs::path& path) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(to_json(net.config()).dump());
  w.u32(static_cast<std::uint32_t>(net.n_models()));
  w.u32(static_cast<std::uint32_t>(net.n_classes()));
  const auto params = net.parameters();
  const auto bufs = net.buffers();
  w.u32(static_cast<std::uint32_t>(params.size() + bufs.size()));
  auto put = [&w](const std::string& name, const Shape& shape, std::span<const double> data) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) w.u64(d);
    for (double v : data) w.f64(v);
  };
  for (const auto& p : params) put(p.name, p.tensor.shape(), p.tensor.data());
  for (const auto& [name, buf] : bufs) put(name, {buf->size()}, *buf);
  detail::write_file(path, w.bytes());
}

inline EnsembleNetwork load_checkpoint(const fs::path& path) {
  detail::ByteReader r(detail::read_file(path), path.string());
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg = extractor_config_from_json(nlohmann::json::parse(r.str()));
  const auto K = r.u32();
  const auto N = r.u32();
  Rng unused(0);
  EnsembleNetwork net(cfg, K, N, unused);

  std::map<std::string, std::span<double>> slots;
  for (auto& p : net.parameters()) slots.emplace(p.name, p.tensor.mutable_data());
  for (auto& [name, buf] : net.buffers()) slots.emplace(name, std::span<double>(*buf));
  const auto count = r.u32();
  if (count != slots.size()) {
    throw FormatError(path.string() + ": " + std::to_string(count) + " tensors, expected " +
                      std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.str();
    const auto rank = r.u32();
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) numel *= r.u64();
    const auto it = slots.find(name);
    if (it == slots.end()) throw FormatError(path.string() + ": unexpected tensor '" + name + "'");
    if (it->second.size() != numel) throw FormatError(path.string() + ": size mismatch for '" + name + "'");
    for (auto& v : it->second) v = r.f64();
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
  return net;
}

}  // namespace ecl
