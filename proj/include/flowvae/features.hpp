// Per-(source IP, time window) aggregation of flow records into the 53
// window statistics, the minimum-flow filter, and feature normalization.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "flowvae/error.hpp"
#include "flowvae/netflow.hpp"

namespace flowvae {

inline constexpr std::size_t kFeatureCount = 53;
inline constexpr std::size_t kMomentCount = 5;
inline constexpr std::size_t kEntropyCount = 5;
inline constexpr std::size_t kAppPortCount = 19;

inline constexpr double kDurationFloor = 1e-3;  // seconds, for rate terms
inline constexpr double kStdFloor = 1e-6;

struct AppPort {
  std::string_view name;
  std::uint16_t port;
};

inline constexpr std::array<AppPort, kAppPortCount> kAppPorts = {{
    {"ftp", 21},     {"ssh", 22},     {"telnet", 23}, {"smtp", 25},   {"dns", 53},   {"http", 80},   {"kerberos", 88},
    {"pop3", 110},   {"ntp", 123},    {"winrpc", 135}, {"netbios", 139}, {"imap", 143}, {"snmp", 161},  {"https", 443},
    {"smb", 445},    {"mysql", 3306}, {"rdp", 3389},  {"irc", 6667},  {"http_alt", 8080},
}};

inline constexpr int app_port_index(std::uint16_t port) {
  for (std::size_t i = 0; i < kAppPorts.size(); ++i)
    if (kAppPorts[i].port == port) return static_cast<int>(i);
  return -1;
}

enum class Moment : std::uint8_t { Duration, Packets, Bytes, PacketRate, ByteRate };
enum class EntropyOf : std::uint8_t { Protocol, DstIp, SrcPort, DstPort, TcpFlags };

/// Canonical feature layout:
///   [0,10)  mean/std pairs of duration, packets, bytes, packet rate, byte rate
///   [10,15) entropies of protocol, dst ip, src port, dst port, tcp flags
///   [15,53) per application port: (share of flows with that src port,
///           share with that dst port)
namespace feature_index {
constexpr std::size_t mean(Moment m) { return 2 * static_cast<std::size_t>(m); }
constexpr std::size_t stddev(Moment m) { return 2 * static_cast<std::size_t>(m) + 1; }
constexpr std::size_t entropy(EntropyOf e) { return 2 * kMomentCount + static_cast<std::size_t>(e); }
constexpr std::size_t src_port_share(std::size_t app) { return 2 * kMomentCount + kEntropyCount + 2 * app; }
constexpr std::size_t dst_port_share(std::size_t app) { return src_port_share(app) + 1; }
}  // namespace feature_index

enum class FeatureKind : std::uint8_t { Moment, Entropy, Proportion };

inline constexpr FeatureKind feature_kind(std::size_t i) {
  if (i < 2 * kMomentCount) return FeatureKind::Moment;
  if (i < 2 * kMomentCount + kEntropyCount) return FeatureKind::Entropy;
  return FeatureKind::Proportion;
}

inline const std::vector<std::string>& feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const char* m : {"duration", "packets", "bytes", "packet_rate", "byte_rate"}) {
      out.push_back(std::string("mean_") + m);
      out.push_back(std::string("std_") + m);
    }
    for (const char* e : {"protocol", "dst_ip", "src_port", "dst_port", "tcp_flags"})
      out.push_back(std::string("entropy_") + e);
    for (const auto& app : kAppPorts) {
      out.push_back("src_port_" + std::string(app.name) + "_" + std::to_string(app.port));
      out.push_back("dst_port_" + std::string(app.name) + "_" + std::to_string(app.port));
    }
    return out;
  }();
  return names;
}

inline constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  return h;
}

/// Hash of the versioned feature list; persisted with every feature, model
/// and gradient file and checked at each stage boundary.
inline std::uint64_t feature_list_hash() {
  static const std::uint64_t hash = [] {
    std::uint64_t h = fnv1a("flowvae-features-v1");
    for (const auto& n : feature_names()) h = fnv1a(n + ";", h);
    return h;
  }();
  return hash;
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

struct WindowKey {
  IpAddress src_ip;
  TimestampUs window_start = 0;

  auto operator<=>(const WindowKey& o) const {
    if (auto c = window_start <=> o.window_start; c != 0) return c;
    return src_ip <=> o.src_ip;
  }
  bool operator==(const WindowKey&) const = default;
};

struct WindowKeyHash {
  std::size_t operator()(const WindowKey& k) const noexcept {
    return IpAddressHash{}(k.src_ip) ^ (static_cast<std::size_t>(k.window_start) * 0x9E3779B97F4A7C15ULL);
  }
};

struct WindowConfig {
  double window_len = 180.0;  // seconds
  double stride = 180.0;      // seconds; equal to window_len means tumbling
  std::uint64_t min_flows = 10;

  TimestampUs window_us() const { return static_cast<TimestampUs>(std::llround(window_len * 1e6)); }
  TimestampUs stride_us() const { return static_cast<TimestampUs>(std::llround(stride * 1e6)); }

  void validate() const {
    if (!(window_len > 0) || !(stride > 0)) raise(ErrorCode::InvalidConfig, "window and stride must be positive");
    if (window_us() % stride_us() != 0) raise(ErrorCode::InvalidConfig, "stride must divide the window length");
  }
};

inline TimestampUs floor_to(TimestampUs t, TimestampUs step) {
  TimestampUs q = t / step;
  if (t % step != 0 && t < 0) --q;
  return q * step;
}

/// Every window [start, start + len) on the stride grid that contains the
/// record's timestamp, in ascending order.
inline std::vector<WindowKey> assign_window(const FlowRecord& record, double window_len, double stride) {
  const auto len = static_cast<TimestampUs>(std::llround(window_len * 1e6));
  const auto step = static_cast<TimestampUs>(std::llround(stride * 1e6));
  std::vector<WindowKey> keys;
  const TimestampUs last = floor_to(record.end_time, step);
  for (TimestampUs s = last - ((len - 1) / step) * step; s <= last; s += step) {
    if (s + len > record.end_time) keys.push_back({record.src_ip, s});
  }
  return keys;
}

// ---------------------------------------------------------------------------
// Accumulation
// ---------------------------------------------------------------------------

/// Exact, order-insensitive running sums of a non-negative quantity. Values
/// are held in 2^-32 fixed point so any permutation or merge of the same
/// inputs reproduces identical sums bit for bit.
class MomentSum {
 public:
  using Wide = boost::multiprecision::int256_t;
  static constexpr double kScale = 4294967296.0;  // 2^32
  static constexpr double kMaxValue = 4.611686018427387904e18;  // 2^62

  void add(double v) {
    const __int128 q = quantize(v);
    ++count_;
    sum_ += q;
    sum_sq_ += Wide(q) * Wide(q);
  }

  void merge(const MomentSum& o) {
    count_ += o.count_;
    sum_ += o.sum_;
    sum_sq_ += o.sum_sq_;
  }

  std::uint64_t count() const { return count_; }
  double sum() const { return static_cast<double>(sum_) / kScale; }
  double sum_squares() const { return sum_sq_.convert_to<double>() / (kScale * kScale); }

  double mean() const { return count_ == 0 ? 0.0 : static_cast<double>(sum_) / static_cast<double>(count_) / kScale; }

  /// Population standard deviation; exactly 0 when all values are equal.
  double stddev() const {
    if (count_ < 2) return 0.0;
    const Wide n = Wide(count_);
    const Wide s = Wide(sum_);
    const Wide num = n * sum_sq_ - s * s;
    if (num <= 0) return 0.0;
    const double nd = static_cast<double>(count_);
    return std::sqrt(num.convert_to<double>() / (nd * nd)) / kScale;
  }

  bool operator==(const MomentSum&) const = default;

 private:
  static __int128 quantize(double v) {
    if (!(v > 0)) return 0;
    if (v > kMaxValue) v = kMaxValue;
    return static_cast<__int128>(std::nearbyint(v * kScale));
  }

  std::uint64_t count_ = 0;
  __int128 sum_ = 0;
  Wide sum_sq_ = 0;
};

template <class Key, class Hash = std::hash<Key>>
using CountMap = std::unordered_map<Key, std::uint64_t, Hash>;

struct WindowAccumulator {
  std::uint64_t flow_count = 0;
  std::array<MomentSum, kMomentCount> moments{};
  CountMap<std::uint8_t> protocols;
  CountMap<IpAddress, IpAddressHash> dst_ips;
  CountMap<std::uint16_t> src_ports;
  CountMap<std::uint16_t> dst_ports;
  CountMap<std::uint8_t> tcp_flags;
  std::array<std::uint64_t, kAppPortCount> src_app{};
  std::array<std::uint64_t, kAppPortCount> dst_app{};
  std::map<std::string, std::uint64_t> label_counts;

  const MomentSum& moment(Moment m) const { return moments[static_cast<std::size_t>(m)]; }

  void merge(const WindowAccumulator& o) {
    flow_count += o.flow_count;
    for (std::size_t i = 0; i < kMomentCount; ++i) moments[i].merge(o.moments[i]);
    for (auto& [k, v] : o.protocols) protocols[k] += v;
    for (auto& [k, v] : o.dst_ips) dst_ips[k] += v;
    for (auto& [k, v] : o.src_ports) src_ports[k] += v;
    for (auto& [k, v] : o.dst_ports) dst_ports[k] += v;
    for (auto& [k, v] : o.tcp_flags) tcp_flags[k] += v;
    for (std::size_t i = 0; i < kAppPortCount; ++i) {
      src_app[i] += o.src_app[i];
      dst_app[i] += o.dst_app[i];
    }
    for (auto& [k, v] : o.label_counts) label_counts[k] += v;
  }
};

inline double packet_rate(const FlowRecord& r) {
  return static_cast<double>(r.packets) / std::max(r.duration, kDurationFloor);
}
inline double byte_rate(const FlowRecord& r) {
  return static_cast<double>(r.bytes) / std::max(r.duration, kDurationFloor);
}

inline void accumulate(WindowAccumulator& acc, const FlowRecord& r) {
  ++acc.flow_count;
  acc.moments[0].add(r.duration);
  acc.moments[1].add(static_cast<double>(r.packets));
  acc.moments[2].add(static_cast<double>(r.bytes));
  acc.moments[3].add(packet_rate(r));
  acc.moments[4].add(byte_rate(r));
  ++acc.protocols[r.protocol.code];
  ++acc.dst_ips[r.dst_ip];
  ++acc.src_ports[r.src_port];
  ++acc.dst_ports[r.dst_port];
  ++acc.tcp_flags[r.tcp_flags];
  if (int i = app_port_index(r.src_port); i >= 0) ++acc.src_app[static_cast<std::size_t>(i)];
  if (int i = app_port_index(r.dst_port); i >= 0) ++acc.dst_app[static_cast<std::size_t>(i)];
  if (!r.label.empty()) ++acc.label_counts[r.label];
}

/// Shannon entropy in bits. Counts are summed in sorted order so the result
/// does not depend on histogram iteration order.
template <class Range>
double entropy(const Range& counts) {
  std::vector<std::uint64_t> c;
  for (const auto& entry : counts) {
    if constexpr (requires { entry.second; }) {
      if (entry.second > 0) c.push_back(entry.second);
    } else {
      if (entry > 0) c.push_back(entry);
    }
  }
  std::uint64_t total = 0;
  for (auto v : c) total += v;
  if (total == 0) raise(ErrorCode::EmptyHistogram, "entropy of an empty histogram");
  std::sort(c.begin(), c.end());
  const double n = static_cast<double>(total);
  double h = 0.0;
  for (auto v : c) {
    const double p = static_cast<double>(v) / n;
    h -= p * std::log2(p);
  }
  return h > 0.0 ? h : 0.0;
}

struct RawFeatureVector {
  WindowKey key;
  std::array<double, kFeatureCount> values{};
  std::uint64_t flow_count = 0;
  std::map<std::string, std::uint64_t> label_counts;
};

/// nullopt means the window was filtered for having fewer than min_flows.
inline std::optional<RawFeatureVector> finalize(const WindowKey& key, const WindowAccumulator& acc,
                                                std::uint64_t min_flows = 10) {
  if (acc.flow_count < min_flows || acc.flow_count == 0) return std::nullopt;
  RawFeatureVector out;
  out.key = key;
  out.flow_count = acc.flow_count;
  out.label_counts = acc.label_counts;
  for (std::size_t m = 0; m < kMomentCount; ++m) {
    out.values[2 * m] = acc.moments[m].mean();
    out.values[2 * m + 1] = acc.moments[m].stddev();
  }
  using feature_index::entropy;
  out.values[entropy(EntropyOf::Protocol)] = flowvae::entropy(acc.protocols);
  out.values[entropy(EntropyOf::DstIp)] = flowvae::entropy(acc.dst_ips);
  out.values[entropy(EntropyOf::SrcPort)] = flowvae::entropy(acc.src_ports);
  out.values[entropy(EntropyOf::DstPort)] = flowvae::entropy(acc.dst_ports);
  out.values[entropy(EntropyOf::TcpFlags)] = flowvae::entropy(acc.tcp_flags);
  const double n = static_cast<double>(acc.flow_count);
  for (std::size_t a = 0; a < kAppPortCount; ++a) {
    out.values[feature_index::src_port_share(a)] = static_cast<double>(acc.src_app[a]) / n;
    out.values[feature_index::dst_port_share(a)] = static_cast<double>(acc.dst_app[a]) / n;
  }
  return out;
}

/// Keyed accumulators for a record stream. Windows can be drained once the
/// watermark (largest timestamp seen minus a lateness slack) passes their
/// end; records arriving for an already drained window are dropped and
/// counted in late_records().
class WindowAggregator {
 public:
  explicit WindowAggregator(WindowConfig config) : config_(config) { config_.validate(); }

  void add(const FlowRecord& r) {
    const TimestampUs len = config_.window_us();
    for (const auto& key : assign_window(r, config_.window_len, config_.stride)) {
      if (key.window_start + len <= drained_until_) {
        ++late_;
        continue;
      }
      accumulate(windows_[key], r);
    }
    max_seen_ = std::max(max_seen_, r.end_time);
  }

  void merge(WindowAggregator&& other) {
    for (auto& [key, acc] : other.windows_) {
      auto [it, inserted] = windows_.try_emplace(key, std::move(acc));
      if (!inserted) it->second.merge(acc);
    }
    max_seen_ = std::max(max_seen_, other.max_seen_);
    late_ += other.late_;
  }

  /// Finalizes windows that ended at or before max_seen - lateness, sorted by
  /// (window_start, src_ip). Filtered windows are counted, not returned.
  std::vector<RawFeatureVector> drain_closed(double lateness_seconds) {
    const TimestampUs horizon = max_seen_ - static_cast<TimestampUs>(std::llround(lateness_seconds * 1e6));
    return drain_if([&](const WindowKey& k) { return k.window_start + config_.window_us() <= horizon; },
                    horizon);
  }

  std::vector<RawFeatureVector> drain_all() {
    return drain_if([](const WindowKey&) { return true; }, std::numeric_limits<TimestampUs>::max());
  }

  std::size_t open_windows() const { return windows_.size(); }
  std::uint64_t filtered_windows() const { return filtered_; }
  std::uint64_t late_records() const { return late_; }
  const WindowConfig& config() const { return config_; }

 private:
  template <class Pred>
  std::vector<RawFeatureVector> drain_if(Pred pred, TimestampUs horizon) {
    std::vector<WindowKey> keys;
    for (auto& [key, acc] : windows_)
      if (pred(key)) keys.push_back(key);
    std::sort(keys.begin(), keys.end());
    std::vector<RawFeatureVector> out;
    for (const auto& key : keys) {
      auto it = windows_.find(key);
      if (auto v = finalize(key, it->second, config_.min_flows)) out.push_back(std::move(*v));
      else ++filtered_;
      windows_.erase(it);
    }
    if (horizon != std::numeric_limits<TimestampUs>::max()) drained_until_ = std::max(drained_until_, horizon);
    return out;
  }

  WindowConfig config_;
  std::unordered_map<WindowKey, WindowAccumulator, WindowKeyHash> windows_;
  TimestampUs max_seen_ = std::numeric_limits<TimestampUs>::min();
  TimestampUs drained_until_ = std::numeric_limits<TimestampUs>::min();
  std::uint64_t filtered_ = 0;
  std::uint64_t late_ = 0;
};

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

enum class NormMode : std::uint8_t { MinMax = 0, ZScore = 1, Identity = 2 };

/// Default mode per feature: proportions pass through, entropies are
/// min-max scaled, moments are z-scored.
inline NormMode default_mode(std::size_t feature) {
  switch (feature_kind(feature)) {
    case FeatureKind::Moment: return NormMode::ZScore;
    case FeatureKind::Entropy: return NormMode::MinMax;
    case FeatureKind::Proportion: return NormMode::Identity;
  }
  return NormMode::Identity;
}

struct Normalizer {
  // For MinMax: (min, max). For ZScore: (mean, std). Identity ignores both.
  std::vector<NormMode> modes;
  std::vector<double> a;
  std::vector<double> b;

  std::size_t size() const { return modes.size(); }

  double apply(std::size_t j, double v) const {
    switch (modes[j]) {
      case NormMode::MinMax: {
        const double range = std::max(b[j] - a[j], kStdFloor);
        return std::clamp((v - a[j]) / range, 0.0, 1.0);
      }
      case NormMode::ZScore: return (v - a[j]) / b[j];
      case NormMode::Identity: return v;
    }
    return v;
  }

  bool operator==(const Normalizer&) const = default;
};

/// Fits per-feature statistics over rows of equal width. `modes` defaults to
/// the canonical table when empty.
inline Normalizer fit_normalizer(std::span<const std::vector<double>> rows, std::vector<NormMode> modes = {}) {
  if (rows.empty()) raise(ErrorCode::EmptyDataset, "cannot fit a normalizer on an empty dataset");
  const std::size_t d = rows.front().size();
  if (modes.empty()) {
    modes.resize(d);
    for (std::size_t j = 0; j < d; ++j) modes[j] = default_mode(j);
  }
  if (modes.size() != d) raise(ErrorCode::DimensionMismatch, "mode table width differs from data width");
  Normalizer norm;
  norm.modes = std::move(modes);
  norm.a.assign(d, 0.0);
  norm.b.assign(d, 0.0);
  const double n = static_cast<double>(rows.size());
  for (std::size_t j = 0; j < d; ++j) {
    switch (norm.modes[j]) {
      case NormMode::MinMax: {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& r : rows) {
          lo = std::min(lo, r[j]);
          hi = std::max(hi, r[j]);
        }
        norm.a[j] = lo;
        norm.b[j] = hi;
        break;
      }
      case NormMode::ZScore: {
        double sum = 0;
        for (const auto& r : rows) sum += r[j];
        const double mean = sum / n;
        double ss = 0;
        for (const auto& r : rows) ss += (r[j] - mean) * (r[j] - mean);
        norm.a[j] = mean;
        norm.b[j] = std::max(std::sqrt(ss / n), kStdFloor);
        break;
      }
      case NormMode::Identity: break;
    }
    if (!std::isfinite(norm.a[j]) || !std::isfinite(norm.b[j]))
      raise(ErrorCode::InvalidConfig, "non-finite normalizer statistic for feature " + std::to_string(j));
  }
  for (const auto& r : rows)
    if (r.size() != d) raise(ErrorCode::DimensionMismatch, "ragged dataset");
  return norm;
}

inline Normalizer fit_normalizer(std::span<const RawFeatureVector> dataset) {
  std::vector<std::vector<double>> rows;
  rows.reserve(dataset.size());
  for (const auto& r : dataset) rows.emplace_back(r.values.begin(), r.values.end());
  return fit_normalizer(std::span<const std::vector<double>>(rows));
}

struct FeatureVector {
  WindowKey key;
  std::vector<double> values;
  std::string label;
};

inline std::vector<double> normalize(std::span<const double> raw, const Normalizer& norm) {
  if (raw.size() != norm.size()) raise(ErrorCode::DimensionMismatch, "feature width differs from normalizer");
  std::vector<double> out(raw.size());
  for (std::size_t j = 0; j < raw.size(); ++j) out[j] = norm.apply(j, raw[j]);
  return out;
}

inline FeatureVector normalize(const RawFeatureVector& raw, const Normalizer& norm) {
  return FeatureVector{raw.key, normalize(std::span<const double>(raw.values), norm), {}};
}

}  // namespace flowvae
