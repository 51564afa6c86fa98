// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowvae/pipeline.hpp"
#include "support/oracles.hpp"

using namespace flowvae;
namespace fs = std::filesystem;
namespace pl = flowvae::pipeline;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Artifacts of one pipeline run: clean training day, attack test day.
struct Run {
  fs::path dir;
  io::FeatureTable test_features;
  io::FeatureTable gradients;
  std::vector<double> vae_scores, gbt_scores;
  std::size_t train_flows = 0, test_flows = 0;
  pl::ExtractResult test_extract;
  double test_extract_seconds = 0;

  fs::path file(const std::string& name) const { return dir / name; }
};

Run run_pipeline(const fs::path& dir, const fs::path& configs) {
  Run r;
  r.dir = dir;
  fs::create_directories(dir);
  pl::RunConfig cfg = pl::RunConfig::load((configs / "run.json").string());
  cfg.workers = 1;
  r.train_flows = pl::synthesize((configs / "synth_train.json").string(), r.file("train.csv").string());
  r.test_flows = pl::synthesize((configs / "synth_test.json").string(), r.file("test.csv").string());

  pl::extract(cfg, r.file("train.csv").string(), r.file("train.geef").string());
  const auto t0 = std::chrono::steady_clock::now();
  r.test_extract = pl::extract(cfg, r.file("test.csv").string(), r.file("test.geef").string());
  r.test_extract_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  cfg.model = "vae";
  pl::train(cfg, r.file("train.geef").string(), r.file("vae.geem").string());
  cfg.model = "gbt";
  pl::train(cfg, r.file("train.geef").string(), r.file("gbt.geem").string());
  r.vae_scores = pl::score(cfg, r.file("vae.geem").string(), r.file("test.geef").string(), r.file("vae_scores.csv").string());
  r.gbt_scores = pl::score(cfg, r.file("gbt.geem").string(), r.file("test.geef").string(), r.file("gbt_scores.csv").string());
  r.gradients = pl::explain(cfg, r.file("vae.geem").string(), r.file("test.geef").string(), r.file("test.geeg").string());
  r.test_features = io::read_features(r.file("test.geef").string());
  return r;
}

std::vector<std::string> labels_of(const io::FeatureTable& t) {
  std::vector<std::string> out;
  for (const auto& m : t.index) out.push_back(m.label);
  return out;
}

const std::vector<std::string> kClasses = {"dos", "scan", "spam"};

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0;
  std::size_t checked = 0;
  const int nets = 120;
  for (int i = 0; i < nets; ++i) {
    auto net = oracle::random_small_vae(rng);
    std::vector<double> x(net.architecture().input), noise(net.architecture().latent);
    for (auto& v : x) v = g(rng);
    for (auto& v : noise) v = g(rng);
    const auto r = oracle::check_vae_gradients(net, x, noise);
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
  }
  return {worst < 1e-4, std::to_string(nets) + " nets, " + std::to_string(checked) +
                            " parameter and input partials, max relative error " + sci(worst)};
}

Outcome kl_check() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> mu_d(-3.0, 3.0), lv_d(-4.0, 2.0);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const int k = 1 + static_cast<int>(rng() % 8);
    nn::Vector<double> mu(k), lv(k);
    double expected = 0;
    for (int j = 0; j < k; ++j) {
      mu(j) = mu_d(rng);
      lv(j) = lv_d(rng);
      // KL(N(mu, s^2) || N(0, 1)) = log(1/s) + (s^2 + mu^2 - 1) / 2
      const double s = std::exp(0.5 * lv(j));
      expected += -std::log(s) + (s * s + mu(j) * mu(j) - 1.0) / 2.0;
    }
    worst = std::max(worst, oracle::relative_error(nn::gaussian_kl<double>(mu, lv), expected));
  }

  // Monte Carlo: E_q[log q(z) - log p(z)] over a million draws per pair.
  bool mc_ok = true;
  double worst_z = 0;
  std::normal_distribution<double> eps(0.0, 1.0);
  for (int i = 0; i < 10; ++i) {
    const double mu = mu_d(rng), lv = lv_d(rng), s = std::exp(0.5 * lv);
    nn::Vector<double> m(1), l(1);
    m(0) = mu;
    l(0) = lv;
    const double kl = nn::gaussian_kl<double>(m, l);
    const int n = 1000000;
    double sum = 0, sum_sq = 0;
    for (int t = 0; t < n; ++t) {
      const double e = eps(rng);
      const double z = mu + s * e;
      const double v = (-std::log(s) - 0.5 * e * e) - (-0.5 * z * z);
      sum += v;
      sum_sq += v * v;
    }
    const double mean = sum / n;
    const double se = std::sqrt(std::max(0.0, sum_sq / n - mean * mean) / n);
    const double zscore = std::abs(mean - kl) / se;
    worst_z = std::max(worst_z, zscore);
    mc_ok = mc_ok && zscore <= 3.0;
  }
  return {worst <= 1e-10 && mc_ok, "closed form on 10^4 pairs max relative error " + sci(worst) +
                                       "; Monte Carlo on 10 pairs max |z| " + fmt(worst_z, 2)};
}

Outcome auc_check() {
  std::mt19937_64 rng(5150);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng() % 49;
    std::vector<double> s(n);
    std::vector<bool> y(n);
    const bool coarse = i % 2 == 0;  // many ties on even instances
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = coarse ? static_cast<double>(rng() % 5) : g(rng);
      y[j] = rng() % 2 == 0;
    }
    const auto positives = std::count(y.begin(), y.end(), true);
    if (positives == 0) y[0] = true;
    if (positives == static_cast<long>(n)) y[0] = false;
    worst = std::max(worst, std::abs(roc_curve(s, y).auc - oracle::pairwise_auc(s, y)));
  }
  return {worst <= 1e-12, "10^3 instances (n <= 50, half with heavy ties), max |AUC - pairwise| " + sci(worst)};
}

Outcome detection(const Run& r) {
  const auto labels = labels_of(r.test_features);
  std::map<std::string, double> vae, gbt;
  for (const auto& e : evaluate_per_class(r.vae_scores, std::span<const std::string>(labels))) vae[e.attack] = e.roc.auc;
  for (const auto& e : evaluate_per_class(r.gbt_scores, std::span<const std::string>(labels))) gbt[e.attack] = e.roc.auc;
  bool ok = r.test_flows >= 200000 && r.test_features.size() >= 2000;
  std::string d = std::to_string(r.test_flows) + " flows, " + std::to_string(r.test_features.size()) + " windows;";
  for (const auto& c : kClasses) {
    const double a = vae.count(c) ? vae[c] : 0.0;
    ok = ok && a >= 0.95;
    d += " vae " + c + " " + fmt(a);
  }
  const double scan = gbt.count("scan") ? gbt["scan"] : 0.0;
  ok = ok && scan >= 0.90;
  d += "; gbt scan " + fmt(scan);
  for (const char* c : {"dos", "spam"}) d += ", gbt " + std::string(c) + " " + fmt(gbt.count(c) ? gbt[c] : 0.0);
  return {ok, d};
}

Outcome fingerprinting(const Run& r) {
  const auto grads = r.gradients.rows_as_double();
  const auto labels = labels_of(r.gradients);
  std::mt19937_64 rng(99);
  std::vector<std::size_t> background;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == kBackgroundLabel && l2_norm(grads[i]) > 0) background.push_back(i);

  bool ok = true;
  std::string d;
  std::map<std::string, Fingerprint> fps;
  std::map<std::string, std::vector<std::size_t>> held_out;
  for (const auto& c : kClasses) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c && l2_norm(grads[i]) > 0) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t half = idx.size() / 2;
    std::vector<std::vector<double>> build;
    for (std::size_t i = 0; i < half; ++i) build.push_back(grads[idx[i]]);
    fps[c] = build_fingerprint(std::span<const std::vector<double>>(build), c);
    held_out[c].assign(idx.begin() + static_cast<long>(half), idx.end());

    std::vector<double> dist;
    std::vector<bool> y;
    for (auto i : held_out[c]) {
      dist.push_back(fingerprint_distance(fps[c], grads[i]));
      y.push_back(true);
    }
    for (auto i : background) {
      dist.push_back(fingerprint_distance(fps[c], grads[i]));
      y.push_back(false);
    }
    const double auc = roc_curve(dist, y, false).auc;
    ok = ok && auc >= 0.95;
    d += c + " " + fmt(auc) + " (" + std::to_string(half) + " build/" + std::to_string(held_out[c].size()) + " held out) ";
  }

  // Ranking under random positive per-row gradient scalings. Pairs whose
  // baseline distances differ by less than 1e-12 count as ties.
  std::vector<std::size_t> eval_rows = background;
  for (const auto& c : kClasses) eval_rows.insert(eval_rows.end(), held_out[c].begin(), held_out[c].end());
  std::map<std::string, std::vector<double>> base;
  for (const auto& c : kClasses)
    for (auto i : eval_rows) base[c].push_back(fingerprint_distance(fps[c], grads[i]));
  std::uniform_real_distribution<double> log_scale(-6.0, 6.0);
  std::size_t violations = 0;
  std::vector<double> scaled(fps.begin()->second.mean_normalized_grad.size());
  std::vector<std::size_t> order(eval_rows.size());
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> alpha(eval_rows.size());
    for (auto& a : alpha) a = std::exp(log_scale(rng));
    for (const auto& c : kClasses) {
      std::vector<double> dist(eval_rows.size());
      for (std::size_t k = 0; k < eval_rows.size(); ++k) {
        const auto& g = grads[eval_rows[k]];
        for (std::size_t j = 0; j < g.size(); ++j) scaled[j] = g[j] * alpha[k];
        dist[k] = fingerprint_distance(fps[c], scaled);
      }
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
      const auto& b = base[c];
      for (std::size_t k = 1; k < order.size(); ++k)
        if (b[order[k]] < b[order[k - 1]] - 1e-12) ++violations;
    }
  }
  ok = ok && violations == 0;
  d += "; 10^3 scalings, " + std::to_string(violations) + " rank inversions";
  return {ok, d};
}

Outcome clustering(const Run& r) {
  const auto grads = r.gradients.rows_as_double();
  std::vector<std::vector<double>> pts;
  for (const auto& g : grads) pts.push_back(unit_normalized(g));
  const auto cl = kmeans(std::span<const std::vector<double>>(pts), 20, 7, 300);
  const auto labels = labels_of(r.gradients);
  const auto report = cluster_report(cl, std::span<const std::string>(labels));
  bool ok = true;
  std::string d;
  for (const auto& c : kClasses) {
    double top2 = 0;
    if (report.count(c)) {
      const auto& rows = report.at(c);
      for (std::size_t i = 0; i < std::min<std::size_t>(2, rows.size()); ++i) top2 += rows[i].share;
    }
    ok = ok && top2 >= 0.9;
    d += c + " top-2 share " + fmt(top2, 3) + ", ";
  }
  bool monotone = true;
  for (std::size_t i = 1; i < cl.inertia_trace.size(); ++i) monotone = monotone && cl.inertia_trace[i] <= cl.inertia_trace[i - 1];
  ok = ok && monotone;
  d += "inertia " + fmt(cl.inertia_trace.front(), 2) + " -> " + fmt(cl.inertia, 2) + " over " +
       std::to_string(cl.iterations) + " iterations, " + (monotone ? "non-increasing" : "INCREASED");
  return {ok, d};
}

// Straightforward recomputation of the 53 window statistics, keyed by name.
std::map<std::string, long double> naive_features(const std::vector<FlowRecord>& flows) {
  std::map<std::string, long double> f;
  const long double n = static_cast<long double>(flows.size());
  auto moments = [&](const std::string& name, const std::function<long double(const FlowRecord&)>& get) {
    long double s = 0;
    for (const auto& r : flows) s += get(r);
    const long double mean = s / n;
    long double ss = 0;
    for (const auto& r : flows) ss += (get(r) - mean) * (get(r) - mean);
    f["mean_" + name] = mean;
    f["std_" + name] = std::sqrt(ss / n);
  };
  auto dur = [](const FlowRecord& r) { return static_cast<long double>(r.duration); };
  auto rate_den = [](const FlowRecord& r) { return r.duration > 0.001 ? static_cast<long double>(r.duration) : 0.001L; };
  moments("duration", dur);
  moments("packets", [](const FlowRecord& r) { return static_cast<long double>(r.packets); });
  moments("bytes", [](const FlowRecord& r) { return static_cast<long double>(r.bytes); });
  moments("packet_rate", [&](const FlowRecord& r) { return static_cast<long double>(r.packets) / rate_den(r); });
  moments("byte_rate", [&](const FlowRecord& r) { return static_cast<long double>(r.bytes) / rate_den(r); });
  auto ent = [&](const std::string& name, const std::function<std::string(const FlowRecord&)>& key) {
    std::map<std::string, long double> counts;
    for (const auto& r : flows) counts[key(r)] += 1;
    long double h = 0;
    for (const auto& [k, c] : counts) h -= (c / n) * std::log2(c / n);
    f["entropy_" + name] = h;
  };
  ent("protocol", [](const FlowRecord& r) { return std::to_string(r.protocol.code); });
  ent("dst_ip", [](const FlowRecord& r) { return r.dst_ip.to_string(); });
  ent("src_port", [](const FlowRecord& r) { return std::to_string(r.src_port); });
  ent("dst_port", [](const FlowRecord& r) { return std::to_string(r.dst_port); });
  ent("tcp_flags", [](const FlowRecord& r) { return std::to_string(r.tcp_flags); });
  const std::vector<std::pair<std::string, int>> ports = {
      {"ftp", 21},     {"ssh", 22},     {"telnet", 23},  {"smtp", 25},  {"dns", 53},     {"http", 80},
      {"kerberos", 88}, {"pop3", 110},  {"ntp", 123},    {"winrpc", 135}, {"netbios", 139}, {"imap", 143},
      {"snmp", 161},   {"https", 443},  {"smb", 445},    {"mysql", 3306}, {"rdp", 3389},   {"irc", 6667},
      {"http_alt", 8080}};
  for (const auto& [name, port] : ports) {
    long double src = 0, dst = 0;
    for (const auto& r : flows) {
      src += r.src_port == port;
      dst += r.dst_port == port;
    }
    f["src_port_" + name + "_" + std::to_string(port)] = src / n;
    f["dst_port_" + name + "_" + std::to_string(port)] = dst / n;
  }
  return f;
}

Outcome feature_recompute(const Run& r) {
  // Group the test day's flows by (source, 180 s tumbling window) directly.
  std::map<std::pair<std::string, TimestampUs>, std::vector<FlowRecord>> groups;
  std::ifstream in(r.file("test.csv"));
  stream_records(in, RecordSchema::default_schema(), [&](FlowRecord&& f) {
    const TimestampUs len = 180 * kMicrosPerSecond;
    groups[{f.src_ip.to_string(), f.end_time - f.end_time % len}].push_back(std::move(f));
  });
  std::vector<const std::vector<FlowRecord>*> eligible;
  for (const auto& [k, v] : groups)
    if (v.size() >= 10) eligible.push_back(&v);
  std::mt19937_64 rng(4242);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(std::min<std::size_t>(100, eligible.size()));

  std::map<WindowKey, std::size_t> row_of;
  for (std::size_t i = 0; i < r.test_features.size(); ++i) row_of[r.test_features.index[i].key] = i;

  const auto& names = feature_names();
  double worst = 0;
  bool permutation_ok = true, table_ok = true;
  for (const auto* flows : eligible) {
    WindowAggregator agg({180, 180, 10});
    for (const auto& f : *flows) agg.add(f);
    const auto got = agg.drain_all();
    if (got.size() != 1) return {false, "aggregator produced " + std::to_string(got.size()) + " windows for one group"};
    const auto expected = naive_features(*flows);
    for (std::size_t j = 0; j < kFeatureCount; ++j) {
      const double e = static_cast<double>(expected.at(names[j]));
      const double err = std::abs(got[0].values[j] - e) / std::max(1.0, std::abs(e));
      worst = std::max(worst, err);
    }
    auto shuffled = *flows;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    WindowAggregator again({180, 180, 10});
    for (const auto& f : shuffled) again.add(f);
    permutation_ok = permutation_ok && again.drain_all()[0].values == got[0].values;
    const auto it = row_of.find(got[0].key);
    if (it == row_of.end()) {
      table_ok = false;
      continue;
    }
    for (std::size_t j = 0; j < kFeatureCount; ++j)
      table_ok = table_ok && r.test_features.rows[it->second][j] == static_cast<float>(got[0].values[j]);
  }
  return {eligible.size() == 100 && worst <= 1e-9 && permutation_ok && table_ok,
          std::to_string(eligible.size()) + " windows x 53 features, max relative error " + sci(worst) +
              ", permutation invariant: " + (permutation_ok ? "yes" : "no") +
              ", extracted table agrees: " + (table_ok ? "yes" : "no")};
}

Outcome throughput(const Run& r) {
  const double rate = static_cast<double>(r.test_extract.stats.total_lines) / r.test_extract_seconds;
  return {rate >= 50000.0, std::to_string(r.test_extract.stats.total_lines) + " records in " + fmt(r.test_extract_seconds, 2) +
                               " s on one worker: " + fmt(rate / 1000.0, 0) + "k records/s"};
}

Outcome reproducibility(const Run& a, const Run& b) {
  std::size_t same = 0;
  std::string differing;
  for (const char* f : {"train.csv", "test.csv", "train.geef", "test.geef", "vae.geem", "gbt.geem", "vae_scores.csv",
                        "gbt_scores.csv", "test.geeg"}) {
    const auto x = slurp(a.file(f)), y = slurp(b.file(f));
    if (!x.empty() && x == y) ++same;
    else differing += std::string(" ") + f;
  }
  return {differing.empty(), std::to_string(same) + "/9 artifacts byte-identical across two runs" +
                                 (differing.empty() ? "" : "; differ:" + differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowvae acceptance run"};
  std::string workdir = "acceptance_work";
  std::string configs = FLOWVAE_CONFIG_DIR;
  app.add_option("--workdir", workdir, "Scratch directory for generated artifacts");
  app.add_option("--configs", configs, "Directory holding run.json, synth_train.json and synth_test.json");
  CLI11_PARSE(app, argc, argv);
  setenv("FLOWVAE_LOG_LEVEL", "warn", 0);

  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& body) {
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " | " << o.detail << std::endl;
  };

  report(1, "VAE gradients agree with finite differences", gradient_check);
  report(2, "Gaussian KL matches closed form and Monte Carlo", kl_check);
  report(3, "ROC AUC matches pairwise count", auc_check);

  std::optional<Run> first, second;
  std::string pipeline_error;
  try {
    fs::remove_all(workdir);
    first = run_pipeline(fs::path(workdir) / "run1", configs);
    second = run_pipeline(fs::path(workdir) / "run2", configs);
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  auto need = [&](const std::function<Outcome(const Run&)>& f) {
    return [&, f] {
      if (!first) return Outcome{false, "pipeline failed: " + pipeline_error};
      return f(*first);
    };
  };
  report(4, "per-class detection on the held-out attack day", need(detection));
  report(5, "fingerprint matching and scale invariance", need(fingerprinting));
  report(6, "k-means on normalized gradients", need(clustering));
  report(7, "feature recomputation and permutation invariance", need(feature_recompute));
  report(8, "single-worker extraction throughput", need(throughput));
  report(9, "same-seed reruns are byte-identical", [&] {
    if (!first || !second) return Outcome{false, "pipeline failed: " + pipeline_error};
    return reproducibility(*first, *second);
  });

  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
