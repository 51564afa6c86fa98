// End-to-end stages behind the command line: extract, train, score,
// explain, fingerprint, match, cluster, eval and synth. Every output carries
// the producing stage's configuration snapshot and is byte-identical across
// reruns with the same inputs, configuration and seed.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flowvae/error.hpp"
#include "flowvae/eval.hpp"
#include "flowvae/explain.hpp"
#include "flowvae/features.hpp"
#include "flowvae/io.hpp"
#include "flowvae/models.hpp"
#include "flowvae/netflow.hpp"
#include "flowvae/synth.hpp"

namespace flowvae::pipeline {

struct RunConfig {
  std::string schema;  // optional schema override file
  double window = 180.0;
  double stride = 180.0;
  std::uint64_t min_flows = 10;
  std::string model = "vae";
  std::optional<std::uint64_t> epochs;
  std::optional<std::uint64_t> minibatch;
  std::optional<double> weight_decay;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> mc_samples;
  double threshold_percentile = 0.05;
  std::string fingerprint_mode = "l2n";
  std::uint64_t k = 100;
  std::uint64_t max_iter = 300;
  bool raw_gradients = false;
  std::uint64_t seed = 0;
  std::uint64_t workers = 0;  // 0: available cores

  static RunConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> kKeys = {
        "schema", "window", "stride", "min_flows", "model", "epochs", "minibatch", "weight_decay", "learning_rate",
        "mc_samples", "threshold_percentile", "fingerprint_mode", "k", "max_iter", "raw_gradients", "seed", "workers"};
    if (!j.is_object()) raise(ErrorCode::InvalidConfig, "run config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!kKeys.count(it.key())) raise(ErrorCode::InvalidConfig, "unknown config key '" + it.key() + "'");
    RunConfig c;
    try {
      c.schema = j.value("schema", c.schema);
      c.window = j.value("window", c.window);
      c.stride = j.value("stride", c.stride);
      c.min_flows = j.value("min_flows", c.min_flows);
      c.model = j.value("model", c.model);
      if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::uint64_t>();
      if (j.contains("minibatch")) c.minibatch = j.at("minibatch").get<std::uint64_t>();
      if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
      if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
      if (j.contains("mc_samples")) c.mc_samples = j.at("mc_samples").get<std::uint64_t>();
      c.threshold_percentile = j.value("threshold_percentile", c.threshold_percentile);
      c.fingerprint_mode = j.value("fingerprint_mode", c.fingerprint_mode);
      c.k = j.value("k", c.k);
      c.max_iter = j.value("max_iter", c.max_iter);
      c.raw_gradients = j.value("raw_gradients", c.raw_gradients);
      c.seed = j.value("seed", c.seed);
      c.workers = j.value("workers", c.workers);
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::InvalidConfig, std::string("run config: ") + e.what());
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::InvalidConfig, "cannot open config '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::InvalidConfig, "config '" + path + "': " + e.what());
    }
    return from_json(j);
  }

  void validate() const {
    window_config().validate();
    model_kind_from_string(model);
    distance_mode_from_string(fingerprint_mode);
    if (!(threshold_percentile > 0 && threshold_percentile < 1))
      raise(ErrorCode::InvalidConfig, "threshold_percentile must lie in (0, 1)");
    if (k == 0) raise(ErrorCode::InvalidConfig, "k must be positive");
    train_config(model_kind_from_string(model)).validate();
  }

  WindowConfig window_config() const { return WindowConfig{window, stride, min_flows}; }

  TrainConfig train_config(ModelKind kind) const {
    TrainConfig t = TrainConfig::for_kind(kind);
    if (epochs) t.epochs = *epochs;
    if (minibatch) t.minibatch = *minibatch;
    if (weight_decay) t.weight_decay = *weight_decay;
    if (learning_rate) t.learning_rate = *learning_rate;
    if (mc_samples) t.mc_samples = *mc_samples;
    t.seed = seed;
    return t;
  }

  std::size_t worker_count() const {
    if (workers > 0) return workers;
    return std::max(1u, std::thread::hardware_concurrency());
  }

  /// Values that shape outputs; paths and worker counts are left out so
  /// reruns elsewhere stay byte-identical.
  nlohmann::json snapshot(const std::string& stage) const {
    nlohmann::json j = {{"stage", stage},
                        {"window", window},
                        {"stride", stride},
                        {"min_flows", min_flows},
                        {"model", model},
                        {"threshold_percentile", threshold_percentile},
                        {"fingerprint_mode", fingerprint_mode},
                        {"k", k},
                        {"max_iter", max_iter},
                        {"raw_gradients", raw_gradients},
                        {"seed", seed}};
    j["train"] = train_config(model_kind_from_string(model)).to_json();
    return j;
  }
};

enum class LogLevel { Quiet = 0, Warn = 1, Info = 2 };

/// Log level from FLOWVAE_LOG_LEVEL (quiet, warn, info); default info.
inline LogLevel log_level() {
  const char* env = std::getenv("FLOWVAE_LOG_LEVEL");
  if (!env) return LogLevel::Info;
  const std::string v = env;
  if (v == "quiet") return LogLevel::Quiet;
  if (v == "warn") return LogLevel::Warn;
  return LogLevel::Info;
}

inline void log(const std::string& msg) {
  if (log_level() >= LogLevel::Info) std::cerr << msg << '\n';
}
inline void warn(const std::string& msg) {
  if (log_level() >= LogLevel::Warn) std::cerr << "warning: " << msg << '\n';
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

struct ExtractResult {
  IngestStats stats;
  std::uint64_t rows = 0;
  std::uint64_t filtered = 0;
};

inline io::FeatureTable to_table(const std::vector<RawFeatureVector>& vectors, const nlohmann::json& snapshot) {
  io::FeatureTable t;
  t.feature_hash = feature_list_hash();
  t.feature_names = feature_names();
  t.config = snapshot;
  for (const auto& v : vectors) {
    t.rows.emplace_back(v.values.begin(), v.values.end());
    const WindowLabel lbl = label_window(v.label_counts, v.flow_count);
    t.index.push_back({v.key, v.flow_count, lbl.label, lbl.attack_flow_share, 0.0});
  }
  return t;
}

/// Aggregates a record stream into finalized windows. With more than one
/// worker, rows are parsed and accumulated in parallel blocks and merged.
inline std::vector<RawFeatureVector> aggregate_stream(std::istream& in, const RecordSchema& schema,
                                                      const WindowConfig& wc, std::size_t workers, ExtractResult& result) {
  WindowAggregator agg(wc);
  if (workers <= 1) {
    result.stats = stream_records(in, schema, [&](FlowRecord&& r) { agg.add(r); });
  } else {
    constexpr std::size_t kBlockLines = 1 << 16;
    std::vector<std::pair<std::uint64_t, std::string>> block;
    std::string line;
    bool first = true;
    std::uint64_t line_no = 0;
    auto flush = [&] {
      std::vector<WindowAggregator> parts(workers, WindowAggregator(wc));
      std::vector<IngestStats> stats(workers);
      const std::size_t chunk = (block.size() + workers - 1) / workers;
      std::vector<std::thread> threads;
      for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
          const std::size_t b = w * chunk, e = std::min(block.size(), b + chunk);
          for (std::size_t i = b; i < e; ++i) {
            ++stats[w].total_lines;
            auto res = parse_record(block[i].second, schema);
            if (auto* rec = std::get_if<FlowRecord>(&res)) {
              ++stats[w].parsed;
              parts[w].add(*rec);
            } else {
              stats[w].record_rejection(block[i].first, std::get<ParseError>(res), 20);
            }
          }
        });
      }
      for (auto& t : threads) t.join();
      for (std::size_t w = 0; w < workers; ++w) {
        agg.merge(std::move(parts[w]));
        result.stats.merge(stats[w]);
      }
      block.clear();
    };
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.front() == '#') continue;
      if (first) {
        first = false;
        if (detail::is_header(line, schema)) continue;
      }
      block.emplace_back(line_no, line);
      if (block.size() == kBlockLines) flush();
    }
    if (in.bad()) throw StreamError("read failure after line " + std::to_string(line_no), result.stats);
    flush();
    if (result.stats.rejection_log.size() > 20) result.stats.rejection_log.resize(20);
  }
  auto vectors = agg.drain_all();
  result.filtered = agg.filtered_windows();
  return vectors;
}

inline ExtractResult extract(const RunConfig& cfg, const std::string& input, const std::string& output) {
  cfg.validate();
  const RecordSchema schema = cfg.schema.empty() ? RecordSchema::default_schema() : RecordSchema::load(cfg.schema);
  ExtractResult result;
  InputFile file(input);
  auto vectors = aggregate_stream(file.stream(), schema, cfg.window_config(), cfg.worker_count(), result);
  result.rows = vectors.size();
  nlohmann::json snap = cfg.snapshot("extract");
  snap["ingest"] = result.stats.to_json();
  snap["filtered_windows"] = result.filtered;
  io::write_table(to_table(vectors, snap), output);
  if (result.rows == 0) warn("'" + input + "' produced no feature windows");
  return result;
}

// ---------------------------------------------------------------------------
// train / score
// ---------------------------------------------------------------------------

inline void check_table_features(const io::FeatureTable& t, const std::string& path) {
  if (t.feature_hash != feature_list_hash() || t.feature_names != feature_names())
    raise(ErrorCode::FeatureListMismatch, "'" + path + "' was written with a different feature list");
}

/// Normalized rows of a raw feature table under `norm`.
inline std::vector<std::vector<double>> normalized_rows(const io::FeatureTable& t, const Normalizer& norm) {
  std::vector<std::vector<double>> rows;
  rows.reserve(t.size());
  for (const auto& r : t.rows) {
    std::vector<double> raw(r.begin(), r.end());
    rows.push_back(normalize(std::span<const double>(raw), norm));
  }
  return rows;
}

inline std::vector<double> score_rows(const io::AnyModel& model, const std::vector<std::vector<double>>& rows,
                                      std::size_t workers) {
  return std::visit(
      [&](const auto& m) -> std::vector<double> {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, GbtModel>) return gbt_scores(m, rows);
        else return reconstruction_errors(m, rows, workers);
      },
      model);
}

inline const Normalizer& normalizer_of(const io::AnyModel& model) {
  return std::visit([](const auto& m) -> const Normalizer& { return m.normalizer; }, model);
}
inline std::uint64_t feature_hash_of(const io::AnyModel& model) {
  return std::visit([](const auto& m) { return m.feature_hash; }, model);
}

inline io::AnyModel train(const RunConfig& cfg, const std::string& features, const std::string& model_path,
                          const TrainObserver& observer = {}) {
  cfg.validate();
  const io::FeatureTable table = io::read_features(features);
  check_table_features(table, features);
  if (table.size() == 0) raise(ErrorCode::EmptyDataset, "'" + features + "' has no feature rows");
  std::vector<std::vector<double>> raw = table.rows_as_double();
  Normalizer norm = fit_normalizer(std::span<const std::vector<double>>(raw));
  Dataset data{normalized_rows(table, norm), table.feature_hash};
  const ModelKind kind = model_kind_from_string(cfg.model);
  const TrainConfig tc = cfg.train_config(kind);
  io::AnyModel model = GbtModel{};
  switch (kind) {
    case ModelKind::Vae: {
      VaeModel m = train_vae(data, tc, {}, observer);
      m.normalizer = norm;
      model = std::move(m);
      break;
    }
    case ModelKind::Ae: {
      AeModel m = train_ae(data, tc, {}, observer);
      m.normalizer = norm;
      model = std::move(m);
      break;
    }
    case ModelKind::Gbt: {
      GbtModel m = gbt_fit(data);
      m.normalizer = norm;
      model = std::move(m);
      break;
    }
  }
  const auto train_scores = score_rows(model, data.rows, 1);
  const double threshold = threshold_at_percentile(train_scores, cfg.threshold_percentile);
  std::visit([&](auto& m) { m.threshold = threshold; }, model);
  io::save_model(model, model_path, cfg.snapshot("train"));
  return model;
}

inline std::string csv_header_comment(const nlohmann::json& snapshot, const std::string& kind, const std::string& direction) {
  return "# flowvae " + kind + " v1\n# config: " + snapshot.dump() + "\n# direction: " + direction + "\n";
}

/// Writes src_ip, window_start, label, score[, flagged].
inline std::vector<double> score(const RunConfig& cfg, const std::string& model_path, const std::string& features,
                                 const std::string& output, std::optional<ModelKind> expected_kind = std::nullopt) {
  const io::LoadedModel loaded = io::load_model(model_path);
  const ModelKind kind = io::kind_of(loaded.model);
  if (expected_kind && *expected_kind != kind)
    raise(ErrorCode::KindMismatch, "'" + model_path + "' holds a " + to_string(kind) + " model, expected " +
                                       to_string(*expected_kind));
  const io::FeatureTable table = io::read_features(features);
  check_feature_hash(feature_hash_of(loaded.model), table.feature_hash);
  const auto rows = normalized_rows(table, normalizer_of(loaded.model));
  const auto scores = score_rows(loaded.model, rows, cfg.worker_count());
  const double threshold = std::visit([](const auto& m) { return m.threshold; }, loaded.model);

  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write '" + output + "'");
  nlohmann::json snap = cfg.snapshot("score");
  snap["model_kind"] = to_string(kind);
  snap["model_config"] = loaded.config;
  out << csv_header_comment(snap, "scores", "higher");
  const bool flag = std::isfinite(threshold);
  out << "src_ip,window_start,label," << to_string(kind) << (flag ? ",flagged" : "") << '\n';
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& m = table.index[i];
    out << m.key.src_ip.to_string() << ',' << format_datetime(m.key.window_start) << ',' << m.label << ','
        << format_real(scores[i]);
    if (flag) out << ',' << (scores[i] > threshold ? 1 : 0);
    out << '\n';
  }
  if (!out) raise(ErrorCode::Io, "write failed for '" + output + "'");
  return scores;
}

// ---------------------------------------------------------------------------
// explain / fingerprint / match / cluster
// ---------------------------------------------------------------------------

inline io::FeatureTable explain(const RunConfig& cfg, const std::string& model_path, const std::string& features,
                                const std::string& output) {
  const io::LoadedModel loaded = io::load_model(model_path);
  const auto* vae = std::get_if<VaeModel>(&loaded.model);
  if (!vae) raise(ErrorCode::KindMismatch, "gradient explanations need a vae model, got " + to_string(io::kind_of(loaded.model)));
  const io::FeatureTable table = io::read_features(features);
  check_feature_hash(vae->feature_hash, table.feature_hash);
  const auto rows = normalized_rows(table, vae->normalizer);
  const auto grads = input_gradients(vae->net, std::span<const std::vector<double>>(rows), cfg.worker_count());
  io::FeatureTable out;
  out.magic = std::string(io::kGradientMagic);
  out.feature_hash = table.feature_hash;
  out.feature_names = table.feature_names;
  out.normalized = true;
  out.config = cfg.snapshot("explain");
  out.config["model_config"] = loaded.config;
  out.index = table.index;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    out.rows.emplace_back(grads[i].grad.begin(), grads[i].grad.end());
    out.index[i].aux = grads[i].loss;
  }
  io::write_table(out, output);
  return out;
}

inline std::string safe_file_token(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out.empty() ? "_" : out;
}

/// One fingerprint file per attack class found in the gradient table.
inline std::vector<std::string> fingerprint(const RunConfig&, const std::string& gradients, const std::string& out_dir) {
  const io::FeatureTable table = io::read_gradients(gradients);
  std::map<std::string, std::vector<std::vector<double>>> by_class;
  for (std::size_t i = 0; i < table.size(); ++i)
    if (table.index[i].label != kBackgroundLabel)
      by_class[table.index[i].label].emplace_back(table.rows[i].begin(), table.rows[i].end());
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> written;
  for (auto& [cls, grads] : by_class) {
    Fingerprint fp = build_fingerprint(std::span<const std::vector<double>>(grads), cls);
    fp.feature_hash = table.feature_hash;
    const std::string path = (std::filesystem::path(out_dir) / (safe_file_token(cls) + ".fp")).string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::Io, "cannot write '" + path + "'");
    write_fingerprint(fp, out, table.feature_names);
    written.push_back(path);
  }
  if (written.empty()) warn("no labeled attack windows in '" + gradients + "'");
  return written;
}

inline Fingerprint load_fingerprint(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open '" + path + "'");
  return read_fingerprint(in);
}

struct MatchResult {
  std::uint64_t rows = 0;
  std::uint64_t skipped_zero = 0;
};

/// Distance of every gradient to every fingerprint; one column per class.
/// Zero gradients cannot be normalized in L2n mode and are skipped.
inline MatchResult match(const RunConfig& cfg, const std::vector<std::string>& fingerprint_paths,
                         const std::string& gradients, const std::string& output) {
  const DistanceMode mode = distance_mode_from_string(cfg.fingerprint_mode);
  if (fingerprint_paths.empty()) raise(ErrorCode::InvalidConfig, "no fingerprint files given");
  std::vector<Fingerprint> fps;
  for (const auto& p : fingerprint_paths) fps.push_back(load_fingerprint(p));
  const io::FeatureTable table = io::read_gradients(gradients);
  for (const auto& fp : fps) {
    check_feature_hash(fp.feature_hash, table.feature_hash);
    if (fp.mean_normalized_grad.size() != table.feature_names.size())
      raise(ErrorCode::DimensionMismatch, "fingerprint width differs from gradient table");
  }
  std::ostringstream body;
  MatchResult res;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const std::vector<double> g(table.rows[i].begin(), table.rows[i].end());
    if (mode == DistanceMode::L2n && !(l2_norm(g) > 0)) {
      ++res.skipped_zero;
      continue;
    }
    const auto& m = table.index[i];
    body << m.key.src_ip.to_string() << ',' << format_datetime(m.key.window_start) << ',' << m.label;
    for (const auto& fp : fps) body << ',' << format_real(fingerprint_distance(fp, g, mode));
    body << '\n';
    ++res.rows;
  }
  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write '" + output + "'");
  nlohmann::json snap = cfg.snapshot("match");
  snap["skipped_zero_gradients"] = res.skipped_zero;
  out << csv_header_comment(snap, "distances", "lower");
  out << "src_ip,window_start,label";
  for (const auto& fp : fps) out << ",fp_" << fp.attack_class;
  out << '\n' << body.str();
  if (res.skipped_zero) warn("match: skipped " + std::to_string(res.skipped_zero) + " zero-gradient rows");
  return res;
}

struct ClusterResult {
  Clustering clustering;
  std::map<std::string, std::vector<ClusterShare>> report;
};

/// Writes <prefix>_assignments.csv, <prefix>_report.csv and
/// <prefix>_inertia.csv.
inline ClusterResult cluster(const RunConfig& cfg, const std::string& gradients, const std::string& prefix) {
  const io::FeatureTable table = io::read_gradients(gradients);
  std::vector<std::vector<double>> points;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < table.size(); ++i) {
    std::vector<double> g(table.rows[i].begin(), table.rows[i].end());
    points.push_back(cfg.raw_gradients ? g : unit_normalized(g));
    labels.push_back(table.index[i].label);
  }
  ClusterResult res;
  res.clustering = kmeans(std::span<const std::vector<double>>(points), cfg.k, cfg.seed, cfg.max_iter);
  res.report = cluster_report(res.clustering, labels);
  const std::string header = csv_header_comment(cfg.snapshot("cluster"), "clusters", "none");
  auto open = [](const std::string& p) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) raise(ErrorCode::Io, "cannot write '" + p + "'");
    return out;
  };
  {
    auto out = open(prefix + "_assignments.csv");
    out << header << "src_ip,window_start,label,cluster\n";
    for (std::size_t i = 0; i < table.size(); ++i)
      out << table.index[i].key.src_ip.to_string() << ',' << format_datetime(table.index[i].key.window_start) << ','
          << labels[i] << ',' << res.clustering.assignments[i] << '\n';
  }
  {
    auto out = open(prefix + "_report.csv");
    out << header << "label,cluster,count,share\n";
    for (const auto& [label, rows] : res.report)
      for (const auto& r : rows) out << label << ',' << r.cluster << ',' << r.count << ',' << format_real(r.share) << '\n';
  }
  {
    auto out = open(prefix + "_inertia.csv");
    out << header << "iteration,inertia\n";
    for (std::size_t i = 0; i < res.clustering.inertia_trace.size(); ++i)
      out << i << ',' << format_real(res.clustering.inertia_trace[i]) << '\n';
  }
  return res;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Parsed score or distance file: key columns, label and score columns.
struct ScoreFile {
  std::string path;
  bool higher_is_anomalous = true;
  std::vector<std::string> score_names;
  std::vector<std::string> labels;
  std::vector<std::vector<double>> columns;  // one per score name
};

inline ScoreFile read_score_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open '" + path + "'");
  ScoreFile f;
  f.path = path;
  std::string line;
  bool header_seen = false;
  std::vector<std::string> cols;
  std::size_t label_col = 0, first_score = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# direction: ", 0) == 0) f.higher_is_anomalous = line.substr(13) != "lower";
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (!header_seen) {
      header_seen = true;
      cols = cells;
      auto it = std::find(cols.begin(), cols.end(), "label");
      if (it == cols.end()) raise(ErrorCode::InvalidConfig, "'" + path + "' has no label column");
      label_col = static_cast<std::size_t>(it - cols.begin());
      first_score = label_col + 1;
      for (std::size_t i = first_score; i < cols.size(); ++i)
        if (cols[i] != "flagged") f.score_names.push_back(cols[i]);
      f.columns.resize(f.score_names.size());
      continue;
    }
    if (cells.size() != cols.size()) raise(ErrorCode::InvalidConfig, "ragged row in '" + path + "'");
    f.labels.push_back(cells[label_col]);
    std::size_t s = 0;
    for (std::size_t i = first_score; i < cols.size(); ++i) {
      if (cols[i] == "flagged") continue;
      double v = 0;
      if (!detail::parse_real(cells[i], v)) raise(ErrorCode::BadNumber, "bad score in '" + path + "': " + cells[i]);
      f.columns[s++].push_back(v);
    }
  }
  if (!header_seen) raise(ErrorCode::InvalidConfig, "'" + path + "' is empty");
  return f;
}

struct EvalRow {
  std::string source;
  std::string model;
  std::string attack;
  RocCurve roc;
};

/// Per input file (and pooled across files when there are several) and per
/// score column x attack class: AUC table plus one ROC data file per panel.
inline std::vector<EvalRow> evaluate(const RunConfig& cfg, const std::vector<std::string>& inputs, const std::string& prefix) {
  if (inputs.empty()) raise(ErrorCode::InvalidConfig, "no score files given");
  std::vector<ScoreFile> files;
  for (const auto& p : inputs) files.push_back(read_score_file(p));
  std::vector<EvalRow> rows;
  auto add = [&](const std::string& source, const std::string& name, const std::vector<double>& scores,
                 const std::vector<std::string>& labels, bool higher) {
    for (auto& ce : evaluate_per_class(scores, labels, higher)) rows.push_back({source, name, ce.attack, std::move(ce.roc)});
  };
  for (const auto& f : files)
    for (std::size_t s = 0; s < f.score_names.size(); ++s)
      add(std::filesystem::path(f.path).filename().string(), f.score_names[s], f.columns[s], f.labels,
          f.higher_is_anomalous);
  if (files.size() > 1) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<std::string>>> pooled;
    std::map<std::string, bool> direction;
    for (const auto& f : files)
      for (std::size_t s = 0; s < f.score_names.size(); ++s) {
        auto& [sc, lb] = pooled[f.score_names[s]];
        sc.insert(sc.end(), f.columns[s].begin(), f.columns[s].end());
        lb.insert(lb.end(), f.labels.begin(), f.labels.end());
        direction[f.score_names[s]] = f.higher_is_anomalous;
      }
    for (auto& [name, data] : pooled) add("pooled", name, data.first, data.second, direction[name]);
  }
  std::ofstream out(prefix + "_auc.csv", std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write '" + prefix + "_auc.csv'");
  out << csv_header_comment(cfg.snapshot("eval"), "evaluation", "none");
  out << "source,model,attack,auc,positives,negatives\n";
  for (const auto& r : rows)
    out << r.source << ',' << r.model << ',' << r.attack << ',' << format_real(r.roc.auc) << ',' << r.roc.positives << ','
        << r.roc.negatives << '\n';
  for (const auto& r : rows) {
    const std::string panel = prefix + "_roc_" + safe_file_token(r.source) + "_" + safe_file_token(r.model) + "_" +
                              safe_file_token(r.attack) + ".csv";
    std::ofstream p(panel, std::ios::binary | std::ios::trunc);
    if (!p) raise(ErrorCode::Io, "cannot write '" + panel + "'");
    p << "fpr,tpr,threshold\n";
    for (const auto& pt : r.roc.points) p << format_real(pt.fpr) << ',' << format_real(pt.tpr) << ',' << format_real(pt.threshold) << '\n';
  }
  return rows;
}

/// CSV rendering of a feature or gradient table, chosen by the file magic.
inline std::size_t export_csv(const std::string& table_path, const std::string& output) {
  std::ifstream probe(table_path, std::ios::binary);
  if (!probe) raise(ErrorCode::Io, "cannot open '" + table_path + "'");
  char magic[4] = {};
  probe.read(magic, 4);
  const std::string_view m(magic, static_cast<std::size_t>(probe.gcount()));
  probe.close();
  const io::FeatureTable t = m == io::kGradientMagic ? io::read_gradients(table_path) : io::read_features(table_path);
  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write '" + output + "'");
  io::write_table_csv(t, out);
  if (!out) raise(ErrorCode::Io, "write failed for '" + output + "'");
  return t.size();
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline std::size_t synthesize(const std::string& config_path, const std::string& output) {
  std::ifstream in(config_path);
  if (!in) raise(ErrorCode::InvalidConfig, "cannot open synth config '" + config_path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::InvalidConfig, "synth config '" + config_path + "': " + e.what());
  }
  const auto flows = synth::generate(synth::SynthConfig::from_json(j));
  synth::write_csv(flows, output);
  return flows.size();
}

}  // namespace flowvae::pipeline
