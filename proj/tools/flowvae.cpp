#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowvae/pipeline.hpp"

namespace {

using flowvae::ErrorCode;
using flowvae::pipeline::RunConfig;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io:
    case ErrorCode::CorruptFile:
    case ErrorCode::VersionMismatch:
      return 3;
    case ErrorCode::InvalidConfig:
    case ErrorCode::MissingColumn:
    case ErrorCode::FeatureListMismatch:
    case ErrorCode::KindMismatch:
    case ErrorCode::DimensionMismatch:
      return 2;
    default:
      return 1;
  }
}

// Flag values that override the config file when given.
struct Overrides {
  std::string config_path;
  std::optional<std::string> schema;
  std::optional<double> window, stride;
  std::optional<std::uint64_t> min_flows;
  std::optional<std::string> model;
  std::optional<std::uint64_t> epochs, minibatch, mc_samples;
  std::optional<double> weight_decay, learning_rate, threshold_percentile;
  std::optional<std::string> fingerprint_mode;
  std::optional<std::uint64_t> k, max_iter, seed, workers;
  bool raw_gradients = false;

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (schema) c.schema = *schema;
    if (window) c.window = *window;
    if (stride) c.stride = *stride;
    if (min_flows) c.min_flows = *min_flows;
    if (model) c.model = *model;
    if (epochs) c.epochs = *epochs;
    if (minibatch) c.minibatch = *minibatch;
    if (mc_samples) c.mc_samples = *mc_samples;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (learning_rate) c.learning_rate = *learning_rate;
    if (threshold_percentile) c.threshold_percentile = *threshold_percentile;
    if (fingerprint_mode) c.fingerprint_mode = *fingerprint_mode;
    if (k) c.k = *k;
    if (max_iter) c.max_iter = *max_iter;
    if (seed) c.seed = *seed;
    if (workers) c.workers = *workers;
    if (raw_gradients) c.raw_gradients = true;
    c.validate();
    return c;
  }
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON run config; flags override its values");
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--workers", o.workers, "Worker threads (0 = available cores)");
}

void add_window(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--schema", o.schema, "JSON schema override for the flow columns");
  cmd->add_option("--window", o.window, "Window length in seconds");
  cmd->add_option("--stride", o.stride, "Window stride in seconds");
  cmd->add_option("--min-flows", o.min_flows, "Minimum flows per kept window");
}

void add_training(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--model", o.model, "Model kind: vae, ae or gbt");
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--minibatch", o.minibatch, "Minibatch size");
  cmd->add_option("--mc-samples", o.mc_samples, "Latent samples per input during training");
  cmd->add_option("--weight-decay", o.weight_decay, "Decoupled weight decay");
  cmd->add_option("--learning-rate", o.learning_rate, "Adam learning rate");
  cmd->add_option("--threshold-percentile", o.threshold_percentile, "Fraction of training windows above the stored threshold");
}

}  // namespace

int main(int argc, char** argv) {
  namespace pl = flowvae::pipeline;
  CLI::App app{"flowvae: NetFlow anomaly detection with gradient explanations"};
  app.require_subcommand(1);
  Overrides o;
  std::string in, out, model_path, features, gradients, expect_kind;
  std::vector<std::string> inputs;

  auto* extract = app.add_subcommand("extract", "Aggregate flow records into per-source feature windows");
  add_common(extract, o);
  add_window(extract, o);
  extract->add_option("input", in, "Flow CSV (plain or gzip)")->required();
  extract->add_option("-o,--output", out, "Feature table output")->required();

  auto* train = app.add_subcommand("train", "Fit a vae, ae or gbt model on a feature table");
  add_common(train, o);
  add_training(train, o);
  train->add_option("features", features, "Feature table")->required();
  train->add_option("-o,--output", out, "Model output")->required();

  auto* score = app.add_subcommand("score", "Anomaly scores for every window of a feature table");
  add_common(score, o);
  score->add_option("model", model_path, "Model file")->required();
  score->add_option("features", features, "Feature table")->required();
  score->add_option("-o,--output", out, "Score CSV output")->required();
  score->add_option("--expect-kind", expect_kind, "Fail unless the model is of this kind");

  auto* explain = app.add_subcommand("explain", "Input gradients of the vae objective for every window");
  add_common(explain, o);
  explain->add_option("model", model_path, "VAE model file")->required();
  explain->add_option("features", features, "Feature table")->required();
  explain->add_option("-o,--output", out, "Gradient table output")->required();

  auto* fingerprint = app.add_subcommand("fingerprint", "One gradient fingerprint per labeled attack class");
  add_common(fingerprint, o);
  fingerprint->add_option("gradients", gradients, "Gradient table")->required();
  fingerprint->add_option("-o,--output", out, "Output directory")->required();

  auto* match = app.add_subcommand("match", "Distance of each window's gradient to each fingerprint");
  add_common(match, o);
  match->add_option("--fingerprint-mode", o.fingerprint_mode, "Distance: l2 or l2n");
  match->add_option("gradients", gradients, "Gradient table")->required();
  match->add_option("-f,--fingerprint", inputs, "Fingerprint file (repeatable)")->required();
  match->add_option("-o,--output", out, "Distance CSV output")->required();

  auto* cluster = app.add_subcommand("cluster", "k-means over window gradients with per-label cluster shares");
  add_common(cluster, o);
  cluster->add_option("-k,--clusters", o.k, "Number of clusters");
  cluster->add_option("--max-iter", o.max_iter, "Lloyd iteration cap");
  cluster->add_flag("--raw-gradients", o.raw_gradients, "Cluster raw instead of unit-normalized gradients");
  cluster->add_option("gradients", gradients, "Gradient table")->required();
  cluster->add_option("-o,--output", out, "Output prefix")->required();

  auto* eval = app.add_subcommand("eval", "Per-class ROC and AUC for score or distance files");
  add_common(eval, o);
  eval->add_option("inputs", inputs, "Score or distance CSV files")->required();
  eval->add_option("-o,--output", out, "Output prefix")->required();

  auto* exporter = app.add_subcommand("export", "Write a feature or gradient table as CSV");
  exporter->add_option("table", in, "Feature (.geef) or gradient (.geeg) table")->required();
  exporter->add_option("-o,--output", out, "CSV output")->required();

  auto* synth = app.add_subcommand("synth", "Generate labeled synthetic flows from a JSON description");
  synth->add_option("config", in, "Synth config")->required();
  synth->add_option("-o,--output", out, "Flow CSV output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      const auto n = pl::synthesize(in, out);
      pl::log("synth: wrote " + std::to_string(n) + " flows to " + out);
      return 0;
    }
    if (*exporter) {
      const auto n = pl::export_csv(in, out);
      pl::log("export: wrote " + std::to_string(n) + " rows to " + out);
      return 0;
    }
    const RunConfig cfg = o.resolve();
    if (*extract) {
      const auto r = pl::extract(cfg, in, out);
      pl::log("extract: " + r.stats.to_json().dump());
      pl::log("extract: " + std::to_string(r.rows) + " windows kept, " + std::to_string(r.filtered) + " below min_flows");
      for (const auto& entry : r.stats.rejection_log) pl::log("  rejected " + entry);
    } else if (*train) {
      flowvae::TrainObserver obs;
      obs.on_epoch = [](std::uint64_t epoch, double loss) {
        pl::log("train: epoch " + std::to_string(epoch + 1) + " loss " + flowvae::format_real(loss));
      };
      pl::train(cfg, features, out, obs);
    } else if (*score) {
      std::optional<flowvae::ModelKind> kind;
      if (!expect_kind.empty()) kind = flowvae::model_kind_from_string(expect_kind);
      pl::score(cfg, model_path, features, out, kind);
    } else if (*explain) {
      pl::explain(cfg, model_path, features, out);
    } else if (*fingerprint) {
      for (const auto& p : pl::fingerprint(cfg, gradients, out)) pl::log("fingerprint: wrote " + p);
    } else if (*match) {
      const auto r = pl::match(cfg, inputs, gradients, out);
      pl::log("match: " + std::to_string(r.rows) + " rows, " + std::to_string(r.skipped_zero) + " skipped");
    } else if (*cluster) {
      const auto r = pl::cluster(cfg, gradients, out);
      pl::log("cluster: inertia " + flowvae::format_real(r.clustering.inertia) + " after " +
              std::to_string(r.clustering.iterations) + " iterations");
    } else if (*eval) {
      for (const auto& r : pl::evaluate(cfg, inputs, out))
        pl::log("eval: " + r.source + " " + r.model + " " + r.attack + " auc " + flowvae::format_real(r.roc.auc));
    }
    return 0;
  } catch (const flowvae::StreamError& e) {
    std::cerr << "error: " << e.what() << " (" << e.stats().to_json().dump() << ")\n";
    return 3;
  } catch (const flowvae::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}
