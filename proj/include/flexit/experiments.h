// flexit/experiments.h
//
// The named experiment grid, the trainer and the train/evaluate sweep.

#ifndef FLEXIT_EXPERIMENTS_H_
#define FLEXIT_EXPERIMENTS_H_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flexit/corpus.h"
#include "flexit/metrics.h"
#include "flexit/model.h"
#include "flexit/runtime.h"

namespace flexit {

enum class ContextMode {
  kFixed,      // one center size for both domains, no altering
  kPerDomain,  // domain-specific center split off a shared base segment
  kRandom,     // center drawn per batch from [random_min_ms, random_max_ms]
};

struct ExperimentConfig {
  std::string name;
  ContextMode mode = ContextMode::kFixed;
  double base_segment_ms = 120;
  double center_vcmd_ms = 120;  // training centers (kFixed: equal)
  double center_dict_ms = 120;
  double random_min_ms = 120;
  double random_max_ms = 1200;
  double bl_ms = 300;
  double br_vcmd_ms = 420;
  double br_dict_ms = 420;
  bool domain_vector = false;
  double infer_center_vcmd_ms = 120;
  double infer_center_dict_ms = 120;

  // "120", "120/600" or "random".
  std::string EmfCtxLabel() const;
  double br_ms(DomainId d) const { return d == DomainId::kVCmd ? br_vcmd_ms : br_dict_ms; }
  double infer_center_ms(DomainId d) const {
    return d == DomainId::kVCmd ? infer_center_vcmd_ms : infer_center_dict_ms;
  }
  // Inference chunking for a domain, in frames of `frame_ms`.
  InferenceContext Inference(DomainId d, double frame_ms) const;
  void Validate(double frame_ms) const;
};

// The 14 names, sorted.
const std::vector<std::string>& RegistryNames();
// Throws std::invalid_argument listing the valid names.
ExperimentConfig Registry(const std::string& name);

// Published results re-encoded as report rows (rtf absent).
ReportRow PublishedRow(const std::string& name);

// Applies "key = value" overrides (keys are ExperimentConfig field names,
// e.g. br_vcmd_ms, domain_vector, mode). Throws on unknown keys.
void ApplyOverrides(ExperimentConfig& config, const std::map<std::string, std::string>& overrides);

// Parses a config file of "[NAME]" sections with "key = value" lines; '#'
// starts a comment. Keys before any section apply to every experiment.
std::map<std::string, std::map<std::string, std::string>> ParseConfigText(const std::string& text);

struct TrainingHyper {
  std::size_t epochs = 8;
  std::size_t batch_size = 8;
  AdamHyper adam;
  std::size_t warmup_steps = 200;
  double clip_norm = 0.0;  // 0 = no clipping
};

// What one training batch is presented with.
struct BatchPlan {
  DomainId domain = DomainId::kVCmd;
  std::size_t base_segment = 0;  // frames
  std::size_t center = 0;        // frames
  double bl_ms = 0;
  double br_ms = 0;
  bool domain_vector = false;
};

BatchPlan PlanBatch(const ExperimentConfig& config, DomainId domain, double frame_ms,
                    std::mt19937_64& rng);

struct TrainStats {
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_wall_s;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::function<void(std::size_t epoch, std::size_t step, const BatchPlan&)> on_batch;
  std::function<void(std::size_t epoch, double mean_loss, double wall_s)> on_epoch;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Run seed for an experiment: mixes `seed` with a hash of the name.
std::uint64_t ExperimentSeed(std::uint64_t seed, const std::string& name);

ModelConfig ModelConfigFor(const ExperimentConfig& config);

// The initialisation TrainModel starts from.
Model InitialModel(const ExperimentConfig& config, std::uint64_t seed);

// Checkpoint metadata ("exp.*" keys) and back. Unknown names start from
// default fields; every stored field is re-applied as an override.
std::map<std::string, std::string> ExperimentMetadata(const ExperimentConfig& config);
ExperimentConfig ExperimentFromMetadata(const std::map<std::string, std::string>& meta);

// Trains from a fresh initialisation. Throws TrainingDivergedError on a
// non-finite loss or gradient.
Model TrainModel(const ExperimentConfig& config, std::span<const Utterance> train,
                 const TrainingHyper& hyper, std::uint64_t seed, TrainStats* stats = nullptr,
                 const TrainHooks& hooks = {});

struct DomainEval {
  WerBreakdown wer;
  std::size_t utterances = 0;
  std::size_t fd_tokens = 0;
  double avg_fd_ms = 0;            // token-weighted over matched tokens
  std::optional<double> l_avg_ms;  // endpointed evaluation only
  std::size_t forced_decisions = 0;
  std::size_t early_decisions = 0;
};

// Decodes every utterance of `domain` in `eval` with the experiment's
// inference context. With `endpointer` set, hypotheses are truncated at the
// endpoint decision. Emission trace lines are appended to `trace` if given.
DomainEval EvaluateDomain(const Model& model, const ExperimentConfig& config,
                          std::span<const Utterance> eval, DomainId domain,
                          const std::optional<EndpointerConfig>& endpointer,
                          std::string* trace = nullptr);

struct RtfSample {
  double wall_s = 0;
  double audio_s = 0;
  double ratio() const { return audio_s > 0 ? wall_s / audio_s : 0.0; }
};

struct RtfMeasurement {
  std::vector<RtfSample> repetitions;
  double mean = 0;
  double variance = 0;
};

// Times `decode` over every utterance `repetitions` times after one untimed
// warm-up pass. Throws if repetitions == 0 or the audio is empty.
RtfMeasurement MeasureRtf(std::span<const Utterance> utterances,
                          const std::function<void(const Utterance&)>& decode,
                          std::size_t repetitions);

struct EvalOptions {
  EndpointerConfig endpointer;
  std::size_t rtf_repetitions = 3;
  bool measure_rtf = true;
};

struct SweepResult {
  ExperimentConfig config;
  TrainStats training;
  DomainEval dictation;
  DomainEval vcmd;
  std::optional<RtfMeasurement> rtf;

  ReportRow Row() const;
};

SweepResult EvaluateExperiment(const Model& model, const ExperimentConfig& config,
                               std::span<const Utterance> eval, const EvalOptions& options,
                               std::string* trace = nullptr);

SweepResult RunExperiment(const ExperimentConfig& config, const Corpus& corpus,
                          const TrainingHyper& hyper, std::uint64_t seed,
                          const EvalOptions& options = {}, const TrainHooks& hooks = {});

// Runs the experiments ordered by name.
std::vector<SweepResult> RunSweep(std::vector<ExperimentConfig> configs, const Corpus& corpus,
                                  const TrainingHyper& hyper, std::uint64_t seed,
                                  const EvalOptions& options = {}, const TrainHooks& hooks = {});

}  // namespace flexit

#endif  // FLEXIT_EXPERIMENTS_H_
