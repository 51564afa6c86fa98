// Binary artifacts: feature tables ("GEEF"), gradient tables ("GEEG") and
// model files ("GEEM"). All integers and floats are little-endian; every
// file ends with a CRC-32 of the preceding bytes.
#pragma once

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "flowvae/error.hpp"
#include "flowvae/features.hpp"
#include "flowvae/models.hpp"

namespace flowvae::io {

static_assert(std::endian::native == std::endian::little, "flowvae file I/O assumes a little-endian host");

inline constexpr std::uint32_t kFormatVersion = 1;

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void bytes(std::string_view s) { buf_.append(s.data(), s.size()); }
  void str32(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) raise(ErrorCode::InvalidConfig, "string too long for 16-bit length prefix");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }
  template <class T>
  void array(const T* data, std::size_t n) {
    buf_.append(reinterpret_cast<const char*>(data), n * sizeof(T));
  }

  /// Appends the CRC-32 and writes the whole buffer to `path`.
  void finish(const std::string& path) {
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size())));
    put<std::uint32_t>(crc);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::Io, "cannot write '" + path + "'");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) raise(ErrorCode::Io, "write failed for '" + path + "'");
  }

  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  /// Loads `path`, verifies the magic and trailing checksum.
  ByteReader(const std::string& path, std::string_view magic) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) raise(ErrorCode::Io, "cannot open '" + path + "'");
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (buf_.size() < magic.size() + 4 || std::string_view(buf_).substr(0, magic.size()) != magic)
      raise(ErrorCode::CorruptFile, "'" + path + "' is not a " + std::string(magic) + " file");
    std::uint32_t stored;
    std::memcpy(&stored, buf_.data() + buf_.size() - 4, 4);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf_.data()), static_cast<uInt>(buf_.size() - 4)));
    if (crc != stored) raise(ErrorCode::CorruptFile, "checksum mismatch in '" + path + "'");
    end_ = buf_.size() - 4;
    pos_ = magic.size();
  }

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str32() { return bytes(get<std::uint32_t>()); }
  std::string str16() { return bytes(get<std::uint16_t>()); }
  template <class T>
  void array(T* out, std::size_t n) {
    need(n * sizeof(T));
    std::memcpy(out, buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
  }
  bool at_end() const { return pos_ == end_; }
  const std::string& path() const { return path_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) raise(ErrorCode::CorruptFile, "truncated file '" + path_ + "'");
  }

  std::string path_;
  std::string buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

inline void check_version(std::uint32_t version, const std::string& path) {
  if (version != kFormatVersion)
    raise(ErrorCode::VersionMismatch,
          "'" + path + "' has format version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
}

// ---------------------------------------------------------------------------
// Feature and gradient tables
// ---------------------------------------------------------------------------

inline constexpr std::string_view kFeatureMagic = "GEEF";
inline constexpr std::string_view kGradientMagic = "GEEG";

/// Per-row index entry. `aux` is free for the producing stage (the loss at
/// the point for gradient tables).
struct RowMeta {
  WindowKey key;
  std::uint64_t flow_count = 0;
  std::string label = "background";
  double attack_share = 0.0;
  double aux = 0.0;

  bool operator==(const RowMeta&) const = default;
};

struct FeatureTable {
  std::string magic = std::string(kFeatureMagic);
  std::uint64_t feature_hash = 0;
  bool normalized = false;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> feature_names;
  std::vector<std::vector<float>> rows;
  std::vector<RowMeta> index;

  std::size_t size() const { return rows.size(); }

  std::vector<std::vector<double>> rows_as_double() const {
    std::vector<std::vector<double>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.emplace_back(r.begin(), r.end());
    return out;
  }
};

inline void write_table(const FeatureTable& t, const std::string& path) {
  if (t.rows.size() != t.index.size()) raise(ErrorCode::LengthMismatch, "row and index counts differ");
  if (t.magic != kFeatureMagic && t.magic != kGradientMagic) raise(ErrorCode::InvalidConfig, "bad table magic");
  const std::size_t d = t.feature_names.size();
  ByteWriter w;
  w.bytes(t.magic);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint64_t>(t.feature_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put<std::uint64_t>(t.rows.size());
  w.put<std::uint8_t>(t.normalized ? 1 : 0);
  w.str32(t.config.dump());
  std::string names;
  for (std::size_t i = 0; i < d; ++i) {
    if (i) names += '\n';
    names += t.feature_names[i];
  }
  w.str32(names);
  for (const auto& r : t.rows) {
    if (r.size() != d) raise(ErrorCode::DimensionMismatch, "row width differs from feature list");
    w.array(r.data(), d);
  }
  for (const auto& m : t.index) {
    w.put<std::uint8_t>(m.key.src_ip.v6 ? 6 : 4);
    w.array(m.key.src_ip.bytes.data(), 16);
    w.put<std::int64_t>(m.key.window_start);
    w.put<std::uint64_t>(m.flow_count);
    w.put<double>(m.attack_share);
    w.put<double>(m.aux);
    w.str16(m.label);
  }
  w.finish(path);
}

inline FeatureTable read_table(const std::string& path, std::string_view magic) {
  ByteReader r(path, magic);
  FeatureTable t;
  t.magic = std::string(magic);
  check_version(r.get<std::uint32_t>(), path);
  t.feature_hash = r.get<std::uint64_t>();
  const auto d = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  t.normalized = r.get<std::uint8_t>() != 0;
  try {
    t.config = nlohmann::json::parse(r.str32());
  } catch (const nlohmann::json::exception&) {
    raise(ErrorCode::CorruptFile, "bad config snapshot in '" + path + "'");
  }
  std::string names = r.str32();
  std::stringstream ss(names);
  for (std::string line; std::getline(ss, line, '\n');) t.feature_names.push_back(line);
  if (t.feature_names.size() != d) raise(ErrorCode::CorruptFile, "feature name count mismatch in '" + path + "'");
  if (n > (std::uint64_t{1} << 40)) raise(ErrorCode::CorruptFile, "implausible row count in '" + path + "'");
  t.rows.resize(n, std::vector<float>(d));
  for (auto& row : t.rows) r.array(row.data(), d);
  t.index.resize(n);
  for (auto& m : t.index) {
    const auto family = r.get<std::uint8_t>();
    if (family != 4 && family != 6) raise(ErrorCode::CorruptFile, "bad address family in '" + path + "'");
    m.key.src_ip.v6 = family == 6;
    r.array(m.key.src_ip.bytes.data(), 16);
    m.key.window_start = r.get<std::int64_t>();
    m.flow_count = r.get<std::uint64_t>();
    m.attack_share = r.get<double>();
    m.aux = r.get<double>();
    m.label = r.str16();
  }
  if (!r.at_end()) raise(ErrorCode::CorruptFile, "trailing bytes in '" + path + "'");
  return t;
}

inline FeatureTable read_features(const std::string& path) { return read_table(path, kFeatureMagic); }
inline FeatureTable read_gradients(const std::string& path) { return read_table(path, kGradientMagic); }

/// Human-readable export: src_ip, window_start, flow_count, label, features...
inline void write_table_csv(const FeatureTable& t, std::ostream& out) {
  out << "# magic=" << t.magic << " feature_hash=" << t.feature_hash << " normalized=" << t.normalized << "\n";
  out << "# config=" << t.config.dump() << "\n";
  out << "src_ip,window_start,flow_count,label";
  for (const auto& n : t.feature_names) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& m = t.index[i];
    out << m.key.src_ip.to_string() << ',' << format_datetime(m.key.window_start) << ',' << m.flow_count << ','
        << m.label;
    for (float v : t.rows[i]) out << ',' << format_real(static_cast<double>(v));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

inline constexpr std::string_view kModelMagic = "GEEM";

using AnyModel = std::variant<VaeModel, AeModel, GbtModel>;

inline ModelKind kind_of(const AnyModel& m) {
  switch (m.index()) {
    case 0: return ModelKind::Vae;
    case 1: return ModelKind::Ae;
    default: return ModelKind::Gbt;
  }
}

namespace detail {

inline nlohmann::json nan_to_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
inline double null_to_nan(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json arch_json(const nn::VaeArchitecture& a) {
  return {{"input", a.input}, {"hidden", a.hidden}, {"latent", a.latent}};
}
inline nn::VaeArchitecture arch_from_json(const nlohmann::json& j) {
  nn::VaeArchitecture a;
  a.input = j.at("input").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.latent = j.at("latent").get<std::size_t>();
  return a;
}

inline void write_normalizer(ByteWriter& w, const Normalizer& n) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n.size()));
  for (std::size_t j = 0; j < n.size(); ++j) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(n.modes[j]));
    w.put<double>(n.a[j]);
    w.put<double>(n.b[j]);
  }
}

inline Normalizer read_normalizer(ByteReader& r) {
  Normalizer n;
  const auto d = r.get<std::uint32_t>();
  if (d > 1u << 20) raise(ErrorCode::CorruptFile, "implausible normalizer width");
  for (std::uint32_t j = 0; j < d; ++j) {
    const auto mode = r.get<std::uint8_t>();
    if (mode > 2) raise(ErrorCode::CorruptFile, "bad normalizer mode");
    n.modes.push_back(static_cast<NormMode>(mode));
    n.a.push_back(r.get<double>());
    n.b.push_back(r.get<double>());
  }
  return n;
}

inline void write_layers(ByteWriter& w, const std::vector<const nn::DenseLayer<float>*>& layers) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layers.size()));
  std::uint64_t count = 0;
  for (auto* l : layers) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l->in()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l->out()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l->activation));
    count += static_cast<std::uint64_t>(l->weights.size() + l->bias.size());
  }
  w.put<std::uint64_t>(count);
  for (auto* l : layers) {
    w.array(l->weights.data(), static_cast<std::size_t>(l->weights.size()));
    w.array(l->bias.data(), static_cast<std::size_t>(l->bias.size()));
  }
}

/// Reads parameters into `layers`, whose shapes must match the stored table.
inline void read_layers(ByteReader& r, const std::vector<nn::DenseLayer<float>*>& layers) {
  const auto n = r.get<std::uint32_t>();
  if (n != layers.size()) raise(ErrorCode::CorruptFile, "layer count does not match the architecture");
  std::uint64_t expected = 0;
  for (auto* l : layers) {
    const auto in = r.get<std::uint32_t>();
    const auto out = r.get<std::uint32_t>();
    const auto act = r.get<std::uint8_t>();
    if (in != l->in() || out != l->out() || act != static_cast<std::uint8_t>(l->activation))
      raise(ErrorCode::CorruptFile, "layer table does not match the architecture");
    expected += static_cast<std::uint64_t>(l->weights.size() + l->bias.size());
  }
  if (r.get<std::uint64_t>() != expected) raise(ErrorCode::CorruptFile, "parameter count mismatch");
  for (auto* l : layers) {
    r.array(l->weights.data(), static_cast<std::size_t>(l->weights.size()));
    r.array(l->bias.data(), static_cast<std::size_t>(l->bias.size()));
  }
}

}  // namespace detail

/// Writes any model. `extra` is merged into the embedded config snapshot.
inline void save_model(const AnyModel& model, const std::string& path,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  ByteWriter w;
  w.bytes(kModelMagic);
  w.put<std::uint32_t>(kFormatVersion);
  const ModelKind kind = kind_of(model);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(kind));
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        w.put<std::uint64_t>(m.feature_hash);
        nlohmann::json cfg = {{"kind", to_string(kind)}, {"threshold", detail::nan_to_null(m.threshold)}};
        if constexpr (!std::is_same_v<M, GbtModel>) {
          cfg["train"] = m.config.to_json();
          cfg["loss_history"] = m.loss_history;
          cfg["optimizer_steps"] = m.optimizer_steps;
        }
        if constexpr (std::is_same_v<M, VaeModel>) cfg["architecture"] = detail::arch_json(m.net.architecture());
        if constexpr (std::is_same_v<M, AeModel>) cfg["architecture"] = detail::arch_json(m.architecture);
        cfg["extra"] = extra;
        w.str32(cfg.dump());
        detail::write_normalizer(w, m.normalizer);
        if constexpr (std::is_same_v<M, VaeModel>) {
          detail::write_layers(w, m.net.all_layers());
        } else if constexpr (std::is_same_v<M, AeModel>) {
          std::vector<const nn::DenseLayer<float>*> layers;
          for (auto& l : m.net.layers()) layers.push_back(&l);
          detail::write_layers(w, layers);
        } else {
          w.put<std::uint32_t>(0);
          w.put<std::uint32_t>(static_cast<std::uint32_t>(m.mean.size()));
          w.array(m.mean.data(), m.mean.size());
          w.array(m.stddev.data(), m.stddev.size());
        }
      },
      model);
  w.finish(path);
}

struct LoadedModel {
  AnyModel model;
  nlohmann::json config;  // embedded snapshot
};

inline LoadedModel load_model(const std::string& path) {
  ByteReader r(path, kModelMagic);
  check_version(r.get<std::uint32_t>(), path);
  const auto kind_tag = r.get<std::uint8_t>();
  if (kind_tag < 1 || kind_tag > 3) raise(ErrorCode::CorruptFile, "unknown model kind tag in '" + path + "'");
  const auto kind = static_cast<ModelKind>(kind_tag);
  const auto hash = r.get<std::uint64_t>();
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(r.str32());
  } catch (const nlohmann::json::exception&) {
    raise(ErrorCode::CorruptFile, "bad config snapshot in '" + path + "'");
  }
  Normalizer norm = detail::read_normalizer(r);
  LoadedModel out{GbtModel{}, cfg};
  try {
    switch (kind) {
      case ModelKind::Vae: {
        VaeModel m;
        m.net = nn::VaeNet<float>(detail::arch_from_json(cfg.at("architecture")));
        std::vector<nn::DenseLayer<float>*> layers;
        for (auto& l : m.net.mutable_encoder().mutable_layers()) layers.push_back(&l);
        layers.push_back(&m.net.mutable_head().mu);
        layers.push_back(&m.net.mutable_head().logvar);
        for (auto& l : m.net.mutable_decoder().mutable_layers()) layers.push_back(&l);
        detail::read_layers(r, layers);
        m.config = TrainConfig::from_json(cfg.at("train"));
        m.loss_history = cfg.at("loss_history").get<std::vector<double>>();
        m.optimizer_steps = cfg.at("optimizer_steps").get<std::uint64_t>();
        m.threshold = detail::null_to_nan(cfg.at("threshold"));
        m.feature_hash = hash;
        m.normalizer = std::move(norm);
        out.model = std::move(m);
        break;
      }
      case ModelKind::Ae: {
        AeModel m;
        m.architecture = detail::arch_from_json(cfg.at("architecture"));
        m.net = nn::make_autoencoder<float>(m.architecture);
        std::vector<nn::DenseLayer<float>*> layers;
        for (auto& l : m.net.mutable_layers()) layers.push_back(&l);
        detail::read_layers(r, layers);
        m.config = TrainConfig::from_json(cfg.at("train"));
        m.loss_history = cfg.at("loss_history").get<std::vector<double>>();
        m.optimizer_steps = cfg.at("optimizer_steps").get<std::uint64_t>();
        m.threshold = detail::null_to_nan(cfg.at("threshold"));
        m.feature_hash = hash;
        m.normalizer = std::move(norm);
        out.model = std::move(m);
        break;
      }
      case ModelKind::Gbt: {
        GbtModel m;
        if (r.get<std::uint32_t>() != 0) raise(ErrorCode::CorruptFile, "GBT model with a layer table");
        const auto d = r.get<std::uint32_t>();
        if (d > 1u << 20) raise(ErrorCode::CorruptFile, "implausible GBT width");
        m.mean.resize(d);
        m.stddev.resize(d);
        r.array(m.mean.data(), d);
        r.array(m.stddev.data(), d);
        m.threshold = detail::null_to_nan(cfg.at("threshold"));
        m.feature_hash = hash;
        m.normalizer = std::move(norm);
        out.model = std::move(m);
        break;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::CorruptFile, std::string("model config snapshot: ") + e.what());
  }
  if (!r.at_end()) raise(ErrorCode::CorruptFile, "trailing bytes in '" + path + "'");
  return out;
}

}  // namespace flowvae::io
