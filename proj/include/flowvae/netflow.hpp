// NetFlow CSV ingestion: flow records, record schemas, line parsing and
// streaming with rejection accounting.
#pragma once

#include <arpa/inet.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <streambuf>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "flowvae/error.hpp"

namespace flowvae {

// ---------------------------------------------------------------------------
// Addresses and protocol
// ---------------------------------------------------------------------------

/// IPv4 or IPv6 address. IPv4 is stored in the first four bytes.
struct IpAddress {
  std::array<std::uint8_t, 16> bytes{};
  bool v6 = false;

  static std::optional<IpAddress> parse(std::string_view text) {
    char buf[INET6_ADDRSTRLEN + 1];
    if (text.empty() || text.size() > INET6_ADDRSTRLEN) return std::nullopt;
    std::memcpy(buf, text.data(), text.size());
    buf[text.size()] = '\0';
    IpAddress ip;
    if (text.find(':') == std::string_view::npos) {
      if (inet_pton(AF_INET, buf, ip.bytes.data()) != 1) return std::nullopt;
    } else {
      if (inet_pton(AF_INET6, buf, ip.bytes.data()) != 1) return std::nullopt;
      ip.v6 = true;
    }
    return ip;
  }

  static IpAddress v4(std::uint32_t host_order) {
    IpAddress ip;
    ip.bytes[0] = static_cast<std::uint8_t>(host_order >> 24);
    ip.bytes[1] = static_cast<std::uint8_t>(host_order >> 16);
    ip.bytes[2] = static_cast<std::uint8_t>(host_order >> 8);
    ip.bytes[3] = static_cast<std::uint8_t>(host_order);
    return ip;
  }

  std::string to_string() const {
    char buf[INET6_ADDRSTRLEN];
    inet_ntop(v6 ? AF_INET6 : AF_INET, bytes.data(), buf, sizeof buf);
    return buf;
  }

  auto operator<=>(const IpAddress&) const = default;
  bool operator==(const IpAddress&) const = default;
};

struct IpAddressHash {
  std::size_t operator()(const IpAddress& ip) const noexcept {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto b : ip.bytes) h = (h ^ b) * 1099511628211ULL;
    return static_cast<std::size_t>(h ^ static_cast<std::uint64_t>(ip.v6));
  }
};

enum class ProtocolKind { TCP, UDP, ICMP, OTHER };

/// IANA protocol number with named accessors for the common cases.
struct Protocol {
  std::uint8_t code = 6;

  static constexpr Protocol tcp() { return {6}; }
  static constexpr Protocol udp() { return {17}; }
  static constexpr Protocol icmp() { return {1}; }

  constexpr ProtocolKind kind() const {
    switch (code) {
      case 6: return ProtocolKind::TCP;
      case 17: return ProtocolKind::UDP;
      case 1: return ProtocolKind::ICMP;
      default: return ProtocolKind::OTHER;
    }
  }
  constexpr bool has_ports() const { return code == 6 || code == 17; }

  std::string to_string() const {
    switch (kind()) {
      case ProtocolKind::TCP: return "TCP";
      case ProtocolKind::UDP: return "UDP";
      case ProtocolKind::ICMP: return "ICMP";
      default: return std::to_string(code);
    }
  }

  bool operator==(const Protocol&) const = default;
};

// ---------------------------------------------------------------------------
// TCP flags
// ---------------------------------------------------------------------------

namespace tcp_flag {
inline constexpr std::uint8_t FIN = 0x01;
inline constexpr std::uint8_t SYN = 0x02;
inline constexpr std::uint8_t RST = 0x04;
inline constexpr std::uint8_t PSH = 0x08;
inline constexpr std::uint8_t ACK = 0x10;
inline constexpr std::uint8_t URG = 0x20;
inline constexpr std::uint8_t ECE = 0x40;
inline constexpr std::uint8_t CWR = 0x80;
}  // namespace tcp_flag

/// Accepts the nfdump text forms ("UAPRSF" / "CEUAPRSF" with '.' for unset
/// bits), decimal numbers and 0x-prefixed hex.
inline std::optional<std::uint8_t> parse_tcp_flags(std::string_view text) {
  if (text.empty()) return std::uint8_t{0};
  static constexpr char kLetters[] = "CEUAPRSF";
  if (text.size() == 6 || text.size() == 8) {
    bool textual = std::any_of(text.begin(), text.end(), [](char c) { return c == '.' || std::isalpha(static_cast<unsigned char>(c)); });
    bool hex = text.size() > 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X');
    if (textual && !hex) {
      const std::size_t offset = 8 - text.size();
      std::uint8_t mask = 0;
      for (std::size_t i = 0; i < text.size(); ++i) {
        const char expected = kLetters[offset + i];
        const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
        if (c == expected) {
          mask |= static_cast<std::uint8_t>(1u << (7 - (offset + i)));
        } else if (c != '.') {
          return std::nullopt;
        }
      }
      return mask;
    }
  }
  unsigned value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  int base = 10;
  if (text.size() > 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X')) {
    first += 2;
    base = 16;
  }
  auto [ptr, ec] = std::from_chars(first, last, value, base);
  if (ec != std::errc{} || ptr != last || value > 255) return std::nullopt;
  return static_cast<std::uint8_t>(value);
}

inline std::string format_tcp_flags(std::uint8_t mask) {
  const bool wide = (mask & (tcp_flag::ECE | tcp_flag::CWR)) != 0;
  static constexpr char kLetters[] = "CEUAPRSF";
  std::string out;
  for (int bit = wide ? 7 : 5; bit >= 0; --bit) {
    out.push_back((mask >> bit) & 1u ? kLetters[7 - bit] : '.');
  }
  return out;
}

// ---------------------------------------------------------------------------
// Timestamps (microseconds since the Unix epoch, UTC)
// ---------------------------------------------------------------------------

using TimestampUs = std::int64_t;
inline constexpr TimestampUs kMicrosPerSecond = 1'000'000;

namespace detail {

inline bool parse_fixed_digits(std::string_view s, std::size_t pos, std::size_t n, int& out) {
  if (pos + n > s.size()) return false;
  int v = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const char c = s[pos + i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

}  // namespace detail

/// Parses "YYYY-MM-DD hh:mm:ss[.ffffff]" (a 'T' separator is also accepted).
/// Fractional digits beyond microseconds are truncated.
inline std::optional<TimestampUs> parse_datetime(std::string_view s) {
  int y, mo, d, h, mi, sec;
  if (s.size() < 19 || s[4] != '-' || s[7] != '-' || (s[10] != ' ' && s[10] != 'T') || s[13] != ':' ||
      s[16] != ':')
    return std::nullopt;
  if (!detail::parse_fixed_digits(s, 0, 4, y) || !detail::parse_fixed_digits(s, 5, 2, mo) ||
      !detail::parse_fixed_digits(s, 8, 2, d) || !detail::parse_fixed_digits(s, 11, 2, h) ||
      !detail::parse_fixed_digits(s, 14, 2, mi) || !detail::parse_fixed_digits(s, 17, 2, sec))
    return std::nullopt;
  if (h > 23 || mi > 59 || sec > 60) return std::nullopt;
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                        std::chrono::day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  std::int64_t micros = 0;
  if (s.size() > 19) {
    if (s[19] != '.' || s.size() == 20) return std::nullopt;
    std::int64_t scale = 100'000;
    for (std::size_t i = 20; i < s.size(); ++i) {
      const char c = s[i];
      if (c < '0' || c > '9') return std::nullopt;
      micros += (c - '0') * scale;
      scale /= 10;
    }
  }
  const auto days = std::chrono::sys_days{ymd}.time_since_epoch().count();
  return (static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + sec) * kMicrosPerSecond + micros;
}

/// Inverse of parse_datetime; the fraction is printed only when non-zero,
/// with trailing zeros removed.
inline std::string format_datetime(TimestampUs t) {
  std::int64_t secs = t / kMicrosPerSecond;
  std::int64_t micros = t % kMicrosPerSecond;
  if (micros < 0) {
    micros += kMicrosPerSecond;
    --secs;
  }
  std::int64_t days = secs / 86400;
  std::int64_t rem = secs % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days}}};
  char buf[40];
  int n = std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02d:%02d:%02d", static_cast<int>(ymd.year()),
                        static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                        static_cast<int>(rem / 3600), static_cast<int>((rem / 60) % 60), static_cast<int>(rem % 60));
  std::string out(buf, static_cast<std::size_t>(n));
  if (micros != 0) {
    char frac[8];
    std::snprintf(frac, sizeof frac, "%06lld", static_cast<long long>(micros));
    std::string f(frac);
    while (!f.empty() && f.back() == '0') f.pop_back();
    out += '.';
    out += f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flow record and schema
// ---------------------------------------------------------------------------

struct FlowRecord {
  TimestampUs end_time = 0;
  double duration = 0.0;  // seconds
  IpAddress src_ip;
  IpAddress dst_ip;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  Protocol protocol;
  std::uint8_t tcp_flags = 0;
  std::uint64_t packets = 1;
  std::uint64_t bytes = 1;
  std::string label;  // empty when the export carries no label

  bool operator==(const FlowRecord&) const = default;
};

enum class Field : std::uint8_t {
  EndTime,
  Duration,
  SrcIp,
  DstIp,
  SrcPort,
  DstPort,
  Protocol,
  TcpFlags,
  Packets,
  Bytes,
  Label,
};
inline constexpr std::size_t kFieldCount = 11;

inline constexpr std::array<std::string_view, kFieldCount> kFieldNames = {
    "end_time", "duration", "src_ip", "dst_ip", "src_port", "dst_port",
    "protocol", "tcp_flags", "packets", "bytes", "label"};

inline std::string_view field_name(Field f) { return kFieldNames[static_cast<std::size_t>(f)]; }

inline std::optional<Field> field_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kFieldCount; ++i)
    if (kFieldNames[i] == name) return static_cast<Field>(i);
  return std::nullopt;
}

enum class TimestampFormat { DateTime, EpochSeconds };
enum class TimeRole { End, Start };

/// Column layout of a CSV export. Fields without a column fall back to
/// defaults: duration 0, tcp_flags 0, no label. All other fields are required.
struct RecordSchema {
  std::vector<std::string> column_order;
  char delimiter = ',';
  TimestampFormat timestamp_format = TimestampFormat::DateTime;
  TimeRole time_role = TimeRole::End;
  std::array<int, kFieldCount> column_of{};  // -1 when absent

  static RecordSchema default_schema() {
    std::vector<std::string> cols;
    for (auto name : kFieldNames) cols.emplace_back(name);
    return from_columns(std::move(cols));
  }

  /// Columns named "-" or anything unrecognized are ignored.
  static RecordSchema from_columns(std::vector<std::string> columns, char delimiter = ',') {
    RecordSchema s;
    s.column_order = std::move(columns);
    s.delimiter = delimiter;
    s.column_of.fill(-1);
    for (std::size_t i = 0; i < s.column_order.size(); ++i) {
      if (auto f = field_from_name(s.column_order[i])) {
        auto& slot = s.column_of[static_cast<std::size_t>(*f)];
        if (slot != -1) raise(ErrorCode::InvalidConfig, "column '" + s.column_order[i] + "' mapped twice");
        slot = static_cast<int>(i);
      }
    }
    s.validate();
    return s;
  }

  void validate() const {
    for (Field f : {Field::EndTime, Field::SrcIp, Field::DstIp, Field::SrcPort, Field::DstPort, Field::Protocol,
                    Field::Packets, Field::Bytes}) {
      if (column(f) < 0) raise(ErrorCode::InvalidConfig, "schema has no column for required field '" +
                                                               std::string(field_name(f)) + "'");
    }
  }

  int column(Field f) const { return column_of[static_cast<std::size_t>(f)]; }
  std::size_t width() const { return column_order.size(); }

  /// Schema override document:
  ///   {"columns": {"src_ip": 3, ...}, "width": 12, "delimiter": ",",
  ///    "timestamp_format": "datetime" | "epoch", "time_role": "end" | "start"}
  static RecordSchema from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) raise(ErrorCode::InvalidConfig, "schema must be a JSON object");
    for (auto it = doc.begin(); it != doc.end(); ++it) {
      static const std::array<std::string_view, 5> kKeys = {"columns", "width", "delimiter", "timestamp_format",
                                                            "time_role"};
      if (std::find(kKeys.begin(), kKeys.end(), it.key()) == kKeys.end())
        raise(ErrorCode::InvalidConfig, "unknown schema key '" + it.key() + "'");
    }
    try {
      const auto& cols = doc.at("columns");
      int max_index = -1;
      std::vector<std::pair<std::string, int>> mapping;
      for (auto it = cols.begin(); it != cols.end(); ++it) {
        if (!field_from_name(it.key())) raise(ErrorCode::InvalidConfig, "unknown field '" + it.key() + "'");
        const int idx = it.value().get<int>();
        if (idx < 0) raise(ErrorCode::InvalidConfig, "negative column index for '" + it.key() + "'");
        mapping.emplace_back(it.key(), idx);
        max_index = std::max(max_index, idx);
      }
      const int width = doc.value("width", max_index + 1);
      if (width <= max_index) raise(ErrorCode::InvalidConfig, "width smaller than the largest column index");
      std::vector<std::string> order(static_cast<std::size_t>(width), "-");
      for (auto& [name, idx] : mapping) {
        if (order[static_cast<std::size_t>(idx)] != "-")
          raise(ErrorCode::InvalidConfig, "column index " + std::to_string(idx) + " mapped twice");
        order[static_cast<std::size_t>(idx)] = name;
      }
      const std::string delim = doc.value("delimiter", std::string(","));
      if (delim.size() != 1) raise(ErrorCode::InvalidConfig, "delimiter must be a single character");
      RecordSchema s = from_columns(std::move(order), delim[0]);
      const std::string tf = doc.value("timestamp_format", std::string("datetime"));
      if (tf == "datetime") s.timestamp_format = TimestampFormat::DateTime;
      else if (tf == "epoch") s.timestamp_format = TimestampFormat::EpochSeconds;
      else raise(ErrorCode::InvalidConfig, "timestamp_format must be 'datetime' or 'epoch'");
      const std::string role = doc.value("time_role", std::string("end"));
      if (role == "end") s.time_role = TimeRole::End;
      else if (role == "start") s.time_role = TimeRole::Start;
      else raise(ErrorCode::InvalidConfig, "time_role must be 'end' or 'start'");
      return s;
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::InvalidConfig, std::string("schema: ") + e.what());
    }
  }

  static RecordSchema load(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::InvalidConfig, "cannot open schema file '" + path + "'");
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::InvalidConfig, "schema file '" + path + "': " + e.what());
    }
    return from_json(doc);
  }
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

struct ParseError {
  ErrorCode code;
  std::string column;
  std::string detail;

  std::string reason() const { return std::string(to_string(code)) + "(" + column + ")"; }
};

using ParseResult = std::variant<FlowRecord, ParseError>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline void split(std::string_view line, char delim, std::vector<std::string_view>& out) {
  out.clear();
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      return;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
}

template <class Int>
bool parse_int(std::string_view s, Int& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
}

inline bool parse_real(std::string_view s, double& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty() && std::isfinite(out);
}

inline ParseError make_error(ErrorCode code, Field f, std::string detail = {}) {
  return ParseError{code, std::string(field_name(f)), std::move(detail)};
}

}  // namespace detail

/// Parses one delimited row. Total: never throws on malformed input.
inline ParseResult parse_record(std::string_view line, const RecordSchema& schema) {
  thread_local std::vector<std::string_view> cells;
  detail::split(line, schema.delimiter, cells);
  if (cells.size() < schema.width()) {
    return ParseError{ErrorCode::MissingColumn, "columns",
                      "expected " + std::to_string(schema.width()) + " got " + std::to_string(cells.size())};
  }
  auto cell = [&](Field f) -> std::string_view {
    const int c = schema.column(f);
    return c < 0 ? std::string_view{} : cells[static_cast<std::size_t>(c)];
  };

  FlowRecord r;
  using detail::make_error;

  if (schema.column(Field::Duration) >= 0) {
    if (!detail::parse_real(cell(Field::Duration), r.duration)) return make_error(ErrorCode::BadNumber, Field::Duration);
    if (r.duration < 0) return make_error(ErrorCode::InvariantViolation, Field::Duration, "negative duration");
  }

  {
    const auto t = cell(Field::EndTime);
    std::optional<TimestampUs> ts;
    if (schema.timestamp_format == TimestampFormat::DateTime) {
      ts = parse_datetime(t);
    } else {
      double secs = 0;
      if (detail::parse_real(t, secs) && std::abs(secs) < 9e12) ts = static_cast<TimestampUs>(std::llround(secs * 1e6));
    }
    if (!ts) return make_error(ErrorCode::BadTimestamp, Field::EndTime);
    r.end_time = *ts;
    if (schema.time_role == TimeRole::Start) r.end_time += static_cast<TimestampUs>(std::llround(r.duration * 1e6));
  }

  auto src = IpAddress::parse(cell(Field::SrcIp));
  if (!src) return make_error(ErrorCode::BadNumber, Field::SrcIp, "bad address");
  r.src_ip = *src;
  auto dst = IpAddress::parse(cell(Field::DstIp));
  if (!dst) return make_error(ErrorCode::BadNumber, Field::DstIp, "bad address");
  r.dst_ip = *dst;

  {
    const auto p = cell(Field::Protocol);
    if (p == "TCP" || p == "tcp") r.protocol = Protocol::tcp();
    else if (p == "UDP" || p == "udp") r.protocol = Protocol::udp();
    else if (p == "ICMP" || p == "icmp") r.protocol = Protocol::icmp();
    else {
      unsigned code = 0;
      if (!detail::parse_int(p, code) || code > 255) return make_error(ErrorCode::BadNumber, Field::Protocol);
      r.protocol = Protocol{static_cast<std::uint8_t>(code)};
    }
  }

  for (Field f : {Field::SrcPort, Field::DstPort}) {
    std::uint32_t port = 0;
    if (!detail::parse_int(cell(f), port)) return make_error(ErrorCode::BadNumber, f);
    if (port > 65535) return make_error(ErrorCode::InvariantViolation, f, "port out of range");
    if (!r.protocol.has_ports() && port != 0)
      return make_error(ErrorCode::InvariantViolation, f, "non-zero port for portless protocol");
    (f == Field::SrcPort ? r.src_port : r.dst_port) = static_cast<std::uint16_t>(port);
  }

  if (schema.column(Field::TcpFlags) >= 0) {
    auto flags = parse_tcp_flags(cell(Field::TcpFlags));
    if (!flags) return make_error(ErrorCode::BadNumber, Field::TcpFlags);
    r.tcp_flags = *flags;
  }

  if (!detail::parse_int(cell(Field::Packets), r.packets)) return make_error(ErrorCode::BadNumber, Field::Packets);
  if (r.packets < 1) return make_error(ErrorCode::InvariantViolation, Field::Packets, "packets < 1");
  if (!detail::parse_int(cell(Field::Bytes), r.bytes)) return make_error(ErrorCode::BadNumber, Field::Bytes);
  if (r.bytes < r.packets) return make_error(ErrorCode::InvariantViolation, Field::Bytes, "bytes < packets");

  if (schema.column(Field::Label) >= 0) r.label = std::string(cell(Field::Label));
  return r;
}

inline std::string format_real(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

/// Writes a record in the schema's column layout. Ignored columns are left
/// empty. parse_record(serialize_record(r)) == r for every valid record.
inline std::string serialize_record(const FlowRecord& r, const RecordSchema& schema) {
  std::vector<std::string> cols(schema.width());
  auto put = [&](Field f, std::string v) {
    if (const int c = schema.column(f); c >= 0) cols[static_cast<std::size_t>(c)] = std::move(v);
  };
  TimestampUs t = r.end_time;
  if (schema.time_role == TimeRole::Start) t -= static_cast<TimestampUs>(std::llround(r.duration * 1e6));
  if (schema.timestamp_format == TimestampFormat::DateTime) {
    put(Field::EndTime, format_datetime(t));
  } else {
    put(Field::EndTime, format_real(static_cast<double>(t) / 1e6));
  }
  put(Field::Duration, format_real(r.duration));
  put(Field::SrcIp, r.src_ip.to_string());
  put(Field::DstIp, r.dst_ip.to_string());
  put(Field::SrcPort, std::to_string(r.src_port));
  put(Field::DstPort, std::to_string(r.dst_port));
  put(Field::Protocol, r.protocol.to_string());
  put(Field::TcpFlags, format_tcp_flags(r.tcp_flags));
  put(Field::Packets, std::to_string(r.packets));
  put(Field::Bytes, std::to_string(r.bytes));
  put(Field::Label, r.label);
  std::string out;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) out += schema.delimiter;
    out += cols[i];
  }
  return out;
}

inline std::string schema_header(const RecordSchema& schema) {
  std::string out;
  for (std::size_t i = 0; i < schema.column_order.size(); ++i) {
    if (i) out += schema.delimiter;
    out += schema.column_order[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Streaming
// ---------------------------------------------------------------------------

struct IngestStats {
  std::uint64_t total_lines = 0;
  std::uint64_t parsed = 0;
  std::uint64_t rejected = 0;
  std::map<std::string, std::uint64_t> rejection_reasons;
  std::vector<std::string> rejection_log;  // "line N: reason", capped

  void record_rejection(std::uint64_t line_no, const ParseError& err, std::size_t log_cap) {
    ++rejected;
    ++rejection_reasons[err.reason()];
    if (rejection_log.size() < log_cap) {
      std::string entry = "line " + std::to_string(line_no) + ": " + err.reason();
      if (!err.detail.empty()) entry += " " + err.detail;
      rejection_log.push_back(std::move(entry));
    }
  }

  /// Associative and commutative except for the order of the capped log.
  void merge(const IngestStats& other) {
    total_lines += other.total_lines;
    parsed += other.parsed;
    rejected += other.rejected;
    for (auto& [reason, n] : other.rejection_reasons) rejection_reasons[reason] += n;
    rejection_log.insert(rejection_log.end(), other.rejection_log.begin(), other.rejection_log.end());
  }

  nlohmann::json to_json() const {
    return {{"total_lines", total_lines},
            {"parsed", parsed},
            {"rejected", rejected},
            {"rejection_reasons", rejection_reasons}};
  }
};

/// Raised when the underlying stream fails mid-read; carries the counts
/// accumulated up to the failure.
class StreamError : public Error {
 public:
  StreamError(const std::string& what, IngestStats stats) : Error(ErrorCode::Io, what), stats_(std::move(stats)) {}
  const IngestStats& stats() const noexcept { return stats_; }

 private:
  IngestStats stats_;
};

struct StreamOptions {
  std::size_t rejection_log_cap = 20;
};

namespace detail {

inline bool is_header(std::string_view line, const RecordSchema& schema) {
  thread_local std::vector<std::string_view> cells;
  split(line, schema.delimiter, cells);
  if (cells.size() < schema.width()) return false;
  for (std::size_t i = 0; i < kFieldCount; ++i) {
    const int c = schema.column_of[i];
    if (c >= 0 && cells[static_cast<std::size_t>(c)] != kFieldNames[i]) return false;
  }
  return true;
}

}  // namespace detail

/// Reads newline-delimited rows, calling `sink` for each parsed record in
/// input order. Blank lines and lines starting with '#' are not rows. A
/// header is skipped only as the first row.
template <class Sink>
IngestStats stream_records(std::istream& in, const RecordSchema& schema, Sink&& sink,
                           const StreamOptions& opts = {}) {
  IngestStats stats;
  std::string line;
  std::uint64_t line_no = 0;
  bool first_row = true;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = line;
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (view.empty() || view.front() == '#') continue;
    if (first_row) {
      first_row = false;
      if (detail::is_header(view, schema)) continue;
    }
    ++stats.total_lines;
    auto result = parse_record(view, schema);
    if (auto* rec = std::get_if<FlowRecord>(&result)) {
      ++stats.parsed;
      sink(std::move(*rec));
    } else {
      stats.record_rejection(line_no, std::get<ParseError>(result), opts.rejection_log_cap);
    }
  }
  if (in.bad()) throw StreamError("read failure after line " + std::to_string(line_no), stats);
  return stats;
}

/// std::streambuf over a gzip file handle.
class GzipStreambuf : public std::streambuf {
 public:
  explicit GzipStreambuf(const std::string& path) : file_(gzopen(path.c_str(), "rb")) {
    if (!file_) raise(ErrorCode::Io, "cannot open '" + path + "'");
    gzbuffer(file_, 1 << 17);
  }
  ~GzipStreambuf() override {
    if (file_) gzclose(file_);
  }
  GzipStreambuf(const GzipStreambuf&) = delete;
  GzipStreambuf& operator=(const GzipStreambuf&) = delete;

 protected:
  int_type underflow() override {
    if (gptr() < egptr()) return traits_type::to_int_type(*gptr());
    const int n = gzread(file_, buffer_.data(), static_cast<unsigned>(buffer_.size()));
    if (n < 0) {
      int errnum = 0;
      gzerror(file_, &errnum);
      throw Error(ErrorCode::Io, "gzip read failure");
    }
    if (n == 0) return traits_type::eof();
    setg(buffer_.data(), buffer_.data(), buffer_.data() + n);
    return traits_type::to_int_type(*gptr());
  }

 private:
  gzFile file_;
  std::array<char, 1 << 16> buffer_{};
};

/// Plain or gzip input behind one stream. zlib reads non-gzip data
/// unchanged, so the file is opened exactly once and pipes work too.
class InputFile {
 public:
  explicit InputFile(const std::string& path) {
    std::error_code ec;
    if (std::filesystem::is_directory(path, ec)) raise(ErrorCode::Io, "'" + path + "' is a directory");
    gzbuf_ = std::make_unique<GzipStreambuf>(path);
    stream_ = std::make_unique<std::istream>(gzbuf_.get());
  }

  std::istream& stream() { return *stream_; }

 private:
  std::unique_ptr<GzipStreambuf> gzbuf_;
  std::unique_ptr<std::istream> stream_;
};

}  // namespace flowvae
