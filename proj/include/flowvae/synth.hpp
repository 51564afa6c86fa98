// Synthetic labeled NetFlow generator: heavy-tailed background traffic plus
// injected attack blocks (SYN flood, port scan, SMTP spam).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowvae/error.hpp"
#include "flowvae/eval.hpp"
#include "flowvae/features.hpp"
#include "flowvae/netflow.hpp"

namespace flowvae::synth {

enum class AttackKind { SynFlood, PortScan, SmtpSpam };

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "syn_flood") return AttackKind::SynFlood;
  if (s == "port_scan") return AttackKind::PortScan;
  if (s == "smtp_spam") return AttackKind::SmtpSpam;
  raise(ErrorCode::InvalidConfig, "unknown attack kind '" + s + "' (syn_flood, port_scan, smtp_spam)");
}

struct AttackBlock {
  std::string label;          // class token written to the label column
  AttackKind kind = AttackKind::SynFlood;
  std::uint32_t sources = 1;  // attacker addresses, 192.168.<100+block>.<i+1>
  double start = 0.0;         // seconds from the simulation start
  double length = 180.0;      // seconds
  double rate = 100.0;        // flows per second per source
  std::uint16_t dst_port = 80;  // flood target port
};

struct BackgroundConfig {
  std::uint32_t hosts = 80;
  double flows_per_minute = 20.0;  // median per host
  double rate_sigma = 0.7;         // log-normal spread of host rates
  std::uint32_t servers = 3000;
  double zipf_exponent = 1.1;
};

struct SynthConfig {
  std::uint64_t seed = 1;
  TimestampUs start = 1458345600LL * kMicrosPerSecond;  // 2016-03-19 00:00:00
  double duration = 3600.0;                            // seconds
  BackgroundConfig background;
  std::vector<AttackBlock> attacks;

  void validate() const {
    if (!(duration > 0)) raise(ErrorCode::InvalidConfig, "duration must be positive");
    if (background.hosts == 0 && attacks.empty()) raise(ErrorCode::InvalidConfig, "nothing to generate");
    if (background.hosts > 60000) raise(ErrorCode::InvalidConfig, "at most 60000 background hosts");
    if (background.servers == 0) raise(ErrorCode::InvalidConfig, "need at least one server");
    if (!(background.flows_per_minute >= 0) || !(background.rate_sigma >= 0))
      raise(ErrorCode::InvalidConfig, "background rates must be non-negative");
    for (std::size_t i = 0; i < attacks.size(); ++i) {
      const auto& a = attacks[i];
      if (a.label.empty() || a.label == "background") raise(ErrorCode::InvalidConfig, "attack block needs a class label");
      if (a.sources == 0 || a.sources > 250) raise(ErrorCode::InvalidConfig, "attack sources must be in 1..250");
      if (!(a.rate > 0)) raise(ErrorCode::InvalidConfig, "attack rate must be positive");
      if (!(a.start >= 0) || !(a.length > 0) || a.start + a.length > duration)
        raise(ErrorCode::InvalidConfig, "attack block " + std::to_string(i) + " lies outside the simulated duration");
    }
    if (attacks.size() > 150) raise(ErrorCode::InvalidConfig, "at most 150 attack blocks");
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    auto reject_unknown = [](const nlohmann::json& obj, std::initializer_list<std::string_view> keys, const char* where) {
      if (!obj.is_object()) raise(ErrorCode::InvalidConfig, std::string(where) + " must be an object");
      for (auto it = obj.begin(); it != obj.end(); ++it)
        if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
          raise(ErrorCode::InvalidConfig, "unknown key '" + it.key() + "' in " + where);
    };
    SynthConfig c;
    try {
      reject_unknown(j, {"seed", "start", "duration", "background", "attacks"}, "synth config");
      c.seed = j.value("seed", c.seed);
      if (j.contains("start")) {
        auto t = parse_datetime(j.at("start").get<std::string>());
        if (!t) raise(ErrorCode::InvalidConfig, "bad start timestamp");
        c.start = *t;
      }
      c.duration = j.value("duration", c.duration);
      if (j.contains("background")) {
        const auto& b = j.at("background");
        reject_unknown(b, {"hosts", "flows_per_minute", "rate_sigma", "servers", "zipf_exponent"}, "background");
        c.background.hosts = b.value("hosts", c.background.hosts);
        c.background.flows_per_minute = b.value("flows_per_minute", c.background.flows_per_minute);
        c.background.rate_sigma = b.value("rate_sigma", c.background.rate_sigma);
        c.background.servers = b.value("servers", c.background.servers);
        c.background.zipf_exponent = b.value("zipf_exponent", c.background.zipf_exponent);
      }
      for (const auto& a : j.value("attacks", nlohmann::json::array())) {
        reject_unknown(a, {"class", "kind", "sources", "start", "length", "rate", "dst_port"}, "attack block");
        AttackBlock blk;
        blk.label = a.at("class").get<std::string>();
        blk.kind = attack_kind_from_string(a.at("kind").get<std::string>());
        blk.sources = a.value("sources", blk.sources);
        blk.start = a.value("start", blk.start);
        blk.length = a.value("length", blk.length);
        blk.rate = a.value("rate", blk.rate);
        blk.dst_port = a.value("dst_port", blk.dst_port);
        c.attacks.push_back(blk);
      }
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::InvalidConfig, std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

namespace detail {

struct Service {
  std::uint16_t port;
  std::uint8_t protocol;
  double packets_mu;      // log-normal location of the packet count
  double bytes_per_pkt;   // typical payload size
};

// Client-side services the background hosts talk to, most popular first.
inline const std::vector<Service>& services() {
  static const std::vector<Service> s = {
      {443, 6, 2.5, 700},  {80, 6, 2.3, 650},   {53, 17, 0.1, 90},  {0, 6, 1.5, 300},   {123, 17, 0.05, 76},
      {8080, 6, 2.0, 500}, {25, 6, 2.0, 400},   {993, 6, 1.8, 300}, {22, 6, 3.0, 120},  {0, 17, 1.0, 200},
      {445, 6, 1.8, 250},  {143, 6, 1.6, 300},  {110, 6, 1.5, 350}, {3389, 6, 3.5, 150}, {137, 17, 0.3, 80},
      {139, 6, 1.5, 200},  {135, 6, 1.2, 150},  {3306, 6, 2.0, 300}, {161, 17, 0.2, 100}, {21, 6, 1.5, 150},
      {88, 6, 1.0, 300},   {6667, 6, 1.5, 120}, {23, 6, 1.5, 80},
  };
  return s;
}

inline IpAddress background_host(std::uint32_t i) { return IpAddress::v4((10u << 24) | ((i / 250) << 8) | (i % 250 + 1)); }
inline IpAddress server(std::uint32_t i) { return IpAddress::v4((172u << 24) | (16u << 16) | ((i / 250) << 8) | (i % 250 + 1)); }
inline IpAddress attacker(std::uint32_t block, std::uint32_t i) {
  return IpAddress::v4((192u << 24) | (168u << 16) | ((block + 100) << 8) | (i + 1));
}

inline std::uint16_t ephemeral_port(std::mt19937_64& rng) {
  return static_cast<std::uint16_t>(std::uniform_int_distribution<int>(1024, 65535)(rng));
}

inline double round_ms(double seconds) { return std::round(seconds * 1000.0) / 1000.0; }

}  // namespace detail

/// Generates all flows, ordered by end time (ties keep generation order).
inline std::vector<FlowRecord> generate(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::vector<FlowRecord> flows;
  const auto& catalog = detail::services();
  const auto& bg = config.background;
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<double> server_weights(bg.servers);
  for (std::uint32_t r = 0; r < bg.servers; ++r) server_weights[r] = 1.0 / std::pow(r + 1.0, bg.zipf_exponent);

  auto emit = [&](TimestampUs end, double dur, IpAddress src, IpAddress dst, std::uint16_t sp, std::uint16_t dp,
                  std::uint8_t proto, std::uint8_t flags, std::uint64_t pkts, std::uint64_t bytes, const std::string& label) {
    FlowRecord r;
    r.end_time = end;
    r.duration = dur;
    r.src_ip = src;
    r.dst_ip = dst;
    r.protocol = Protocol{proto};
    if (r.protocol.has_ports()) {
      r.src_port = sp;
      r.dst_port = dp;
    }
    r.tcp_flags = proto == 6 ? flags : 0;
    r.packets = std::max<std::uint64_t>(1, pkts);
    r.bytes = std::max(bytes, r.packets);
    r.label = label;
    flows.push_back(std::move(r));
  };
  auto at = [&](double offset) { return config.start + static_cast<TimestampUs>(std::llround(offset * 1000.0)) * 1000; };

  // Background: each host has its own rate, service preferences and servers.
  for (std::uint32_t h = 0; h < bg.hosts; ++h) {
    const IpAddress src = detail::background_host(h);
    const double per_minute = bg.flows_per_minute * std::exp(bg.rate_sigma * std_normal(rng));
    std::vector<double> pref(catalog.size());
    for (std::size_t s = 0; s < catalog.size(); ++s)
      pref[s] = std::exp(1.2 * std_normal(rng)) / std::pow(s + 1.0, 1.0);
    std::discrete_distribution<std::size_t> pick_service(pref.begin(), pref.end());
    std::discrete_distribution<std::uint32_t> pick_server(server_weights.begin(), server_weights.end());
    const std::uint32_t server_offset = static_cast<std::uint32_t>(rng() % bg.servers);
    const double total = per_minute * config.duration / 60.0;
    const auto count = std::poisson_distribution<std::uint64_t>(total)(rng);
    for (std::uint64_t f = 0; f < count; ++f) {
      const double t = detail::round_ms(unit(rng) * config.duration);
      const auto& svc = catalog[pick_service(rng)];
      const std::uint16_t dport = svc.port != 0 ? svc.port : detail::ephemeral_port(rng);
      const std::uint32_t server_idx = (pick_server(rng) + server_offset) % bg.servers;
      const bool icmp = unit(rng) < 0.01;
      const auto pkts = static_cast<std::uint64_t>(std::max(1.0, std::round(std::exp(svc.packets_mu + 0.9 * std_normal(rng)))));
      const double per_pkt = std::clamp(svc.bytes_per_pkt * std::exp(0.5 * std_normal(rng)), 40.0, 1500.0);
      const auto bytes = static_cast<std::uint64_t>(std::round(static_cast<double>(pkts) * per_pkt));
      double dur = 0.0;
      if (pkts > 1) dur = detail::round_ms(std::exp(std::log(0.05 * static_cast<double>(pkts)) + 1.0 * std_normal(rng)));
      std::uint8_t flags = 0;
      const double u = unit(rng);
      using namespace tcp_flag;
      if (u < 0.7) flags = ACK | PSH | SYN | FIN;
      else if (u < 0.85) flags = ACK | PSH;
      else if (u < 0.93) flags = ACK | SYN | RST;
      else flags = ACK;
      if (icmp) {
        emit(at(t), dur, src, detail::server(server_idx), 0, 0, 1, 0, pkts, pkts * 64, kBackgroundLabel);
      } else {
        emit(at(t), dur, src, detail::server(server_idx), detail::ephemeral_port(rng), dport, svc.protocol, flags, pkts, bytes,
             kBackgroundLabel);
      }
    }
  }

  // Attack blocks.
  for (std::size_t b = 0; b < config.attacks.size(); ++b) {
    const auto& a = config.attacks[b];
    const IpAddress victim = detail::server(static_cast<std::uint32_t>(rng() % bg.servers));
    for (std::uint32_t s = 0; s < a.sources; ++s) {
      const IpAddress src = detail::attacker(static_cast<std::uint32_t>(b), s);
      const auto count = std::poisson_distribution<std::uint64_t>(a.rate * a.length)(rng);
      const std::uint32_t scan_net = static_cast<std::uint32_t>(rng() % 200);
      for (std::uint64_t f = 0; f < count; ++f) {
        const double t = detail::round_ms(a.start + unit(rng) * a.length);
        using namespace tcp_flag;
        switch (a.kind) {
          case AttackKind::SynFlood: {
            const auto pkts = 1 + rng() % 3;
            emit(at(t), 0.0, src, victim, detail::ephemeral_port(rng), a.dst_port, 6, SYN, pkts, pkts * (40 + rng() % 21),
                 a.label);
            break;
          }
          case AttackKind::PortScan: {
            const IpAddress dst = IpAddress::v4((172u << 24) | (20u << 16) | (scan_net << 8) | (1 + rng() % 254));
            const auto& svc = catalog[rng() % catalog.size()];
            const std::uint16_t dport =
                (svc.port != 0 && unit(rng) < 0.6) ? svc.port : static_cast<std::uint16_t>(1 + rng() % 10000);
            emit(at(t), 0.0, src, dst, detail::ephemeral_port(rng), dport, 6, SYN, 1, 40 + rng() % 5, a.label);
            break;
          }
          case AttackKind::SmtpSpam: {
            const IpAddress dst = detail::server(static_cast<std::uint32_t>(rng() % bg.servers));
            const auto pkts = 8 + rng() % 20;
            const double dur = detail::round_ms(0.5 + 3.0 * unit(rng));
            emit(at(t), dur, src, dst, detail::ephemeral_port(rng), 25, 6, ACK | PSH | SYN | FIN, pkts,
                 pkts * (300 + rng() % 300), a.label);
            break;
          }
        }
      }
    }
  }

  std::stable_sort(flows.begin(), flows.end(), [](const FlowRecord& x, const FlowRecord& y) { return x.end_time < y.end_time; });
  return flows;
}

/// Writes flows in the default schema with a header row.
inline void write_csv(const std::vector<FlowRecord>& flows, std::ostream& out) {
  const auto schema = RecordSchema::default_schema();
  out << schema_header(schema) << '\n';
  for (const auto& f : flows) out << serialize_record(f, schema) << '\n';
}

inline void write_csv(const std::vector<FlowRecord>& flows, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write '" + path + "'");
  write_csv(flows, out);
  if (!out) raise(ErrorCode::Io, "write failed for '" + path + "'");
}

/// Desk-scale evaluation scenario: background hosts plus DoS, scan and spam
/// blocks spread over the period, each from dedicated sources.
inline SynthConfig evaluation_scenario(std::uint64_t seed, double duration = 7200.0, std::uint32_t hosts = 120) {
  SynthConfig c;
  c.seed = seed;
  c.duration = duration;
  c.background.hosts = hosts;
  c.background.flows_per_minute = 16.0;
  const double slot = duration / 8.0;
  const double length = std::min(540.0, slot * 0.6);
  for (int i = 0; i < 4; ++i) {
    const double base = slot * (2 * i) + std::min(90.0, slot * 0.1);
    c.attacks.push_back({"dos", AttackKind::SynFlood, 3, base, length, 2.0, 80});
    c.attacks.push_back({"scan", AttackKind::PortScan, 3, base + slot * 0.5, length, 1.0, 0});
    c.attacks.push_back({"spam", AttackKind::SmtpSpam, 3, base + slot, length, 0.5, 25});
  }
  return c;
}

}  // namespace flowvae::synth
