#pragma once

#include "casdgr/checkpoint.hpp"
#include "casdgr/config.hpp"
#include "casdgr/data.hpp"
#include "casdgr/metrics.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace casdgr::cmd {

// synth ---------------------------------------------------------------------

struct SynthOptions {
  std::filesystem::path out;
  data::SynthSpec spec;
};

struct SynthSummary {
  size_t samples = 0;
  size_t foregrounds = 0;
  double min_soft_fraction = 0.0;
  std::uint64_t hash = 0;  // data::dataset_hash of the written corpus
};

SynthSummary synth(const SynthOptions& opts, std::ostream& log);

// train ---------------------------------------------------------------------

struct TrainOptions {
  RunConfig config;
  std::filesystem::path dataset;
  /// Written after every epoch when non-empty.
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> resume;
  /// Tab-separated per-step loss components.
  std::optional<std::filesystem::path> loss_log;
  /// Stop after this many optimizer steps in this invocation (< 0: unlimited).
  std::int64_t max_steps = -1;
};

struct StepLoss {
  int epoch = 0;
  std::uint64_t step = 0;
  double total = 0;
  std::vector<double> alpha;
  double comp = 0;
  double grad = 0;
};

struct TrainResult {
  std::vector<StepLoss> steps;       // this invocation only
  std::vector<double> epoch_losses;  // full history including resumed epochs
  int epochs_completed = 0;
  bool plateaued = false;
  double seconds = 0;
};

/// Thrown when a loss or gradient stops being finite.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

TrainResult train(const TrainOptions& opts, std::ostream& log);

/// True when the last 6 epoch losses show < 1e-3 relative improvement over 5 epochs.
bool plateau(const std::vector<double>& epoch_losses);

// eval ----------------------------------------------------------------------

enum class SplitKind { heldout, train, all };
SplitKind parse_split(const std::string& name);

struct EvalRow {
  std::string id;
  metrics::MetricReport m;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  metrics::MetricReport mean;
};

/// Scores `model` on the given dataset entries at the model resolution.
/// With `oracle`, the ground truth is scored against itself.
EvalReport evaluate(const CascadeModel& model, const std::filesystem::path& dataset,
                    const std::vector<data::ManifestEntry>& entries, bool oracle = false);

/// Same, against a constant prediction.
EvalReport evaluate_constant(double value, Index resolution, const std::filesystem::path& dataset,
                             const std::vector<data::ManifestEntry>& entries);

std::vector<data::ManifestEntry> select_split(const std::vector<data::ManifestEntry>& entries, SplitKind split,
                                              double holdout_fraction);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path dataset;
  SplitKind split = SplitKind::heldout;
  bool oracle = false;
  std::optional<std::filesystem::path> json_out;
};

EvalReport eval(const EvalOptions& opts, std::ostream& out);
void print_report(const EvalReport& r, std::ostream& out);
std::string report_json(const EvalReport& r);

// infer ---------------------------------------------------------------------

struct InferOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path image;
  std::filesystem::path out;
  std::optional<std::filesystem::path> dump_stages;
  int bit_depth = 8;
};

/// Returns the final clipped alpha (1 x R x R).
Tensor infer(const InferOptions& opts, std::ostream& log);

// params --------------------------------------------------------------------

void params(const ModelConfig& config, bool ablate_dgr, std::ostream& out);

}  // namespace casdgr::cmd
