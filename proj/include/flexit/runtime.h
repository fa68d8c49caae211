// flexit/runtime.h
//
// Chunked greedy decoding, the blank-posterior endpointer and latency
// bookkeeping. Audio time is measured in ms from utterance start; a chunk
// whose centers end at frame e becomes decodable once frames up to
// min(e + right_context, T) have arrived, and every token it yields is
// stamped with that time.

#ifndef FLEXIT_RUNTIME_H_
#define FLEXIT_RUNTIME_H_

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flexit/corpus.h"
#include "flexit/model.h"

namespace flexit {

struct EmissionEvent {
  int token = 0;
  double emission_ms = 0.0;
  std::size_t t = 0;
  std::size_t u = 0;  // labels emitted before this one

  bool operator==(const EmissionEvent&) const = default;
};

// Per-frame record for the endpointer: blank posterior of the first joiner
// evaluation at frame t, and when that evaluation could run.
struct FrameObservation {
  std::size_t t = 0;
  double blank_posterior = 0.0;
  double available_ms = 0.0;
};

struct InferenceContext {
  std::size_t base_segment = 2;  // frames
  std::size_t center = 2;        // frames
};

struct DecodeOptions {
  std::size_t max_symbols_per_frame = 10;
};

struct DecodeResult {
  std::vector<EmissionEvent> events;
  std::vector<FrameObservation> frames;
  double audio_ms = 0.0;

  std::vector<int> tokens() const;
};

// `stacked` is (T x input_dim). Throws std::invalid_argument if the domain
// does not match the model's domain-vector setting or the context is
// invalid.
DecodeResult GreedyStreamingDecode(const Model& model, const Tensor& stacked,
                                   const InferenceContext& context, std::optional<DomainId> domain,
                                   const DecodeOptions& options = {});

struct EndpointerConfig {
  double threshold = 0.95;
  std::size_t consecutive = 5;
};

struct EndpointDecision {
  double decision_ms = 0.0;
  std::size_t frame = 0;         // frame whose evaluation fired
  double blank_posterior = 0.0;  // at that evaluation
  std::size_t run_length = 0;
  bool forced = false;           // end of audio reached without firing
};

// Fires once blank_posterior > threshold on `consecutive` evaluations in a
// row; afterwards stays silent.
class Endpointer {
 public:
  explicit Endpointer(const EndpointerConfig& config = {}) : config_(config) {}
  std::optional<EndpointDecision> Step(double blank_posterior, double time_ms, std::size_t frame);
  bool decided() const { return decided_; }

 private:
  EndpointerConfig config_;
  std::size_t run_ = 0;
  bool decided_ = false;
};

// Finalization delays over reference tokens matched (edit-distance, exact
// token) by a hypothesis token: emission_ms - (a_k + 1) * frame_ms.
struct LatencyReport {
  std::vector<double> delays_ms;
  double average_fd_ms = 0.0;  // 0 when nothing matched
  std::optional<double> endpoint_latency_ms;
  bool early_decision = false;  // endpoint before speech end (negative L)
  bool forced_decision = false;

  std::size_t matched() const { return delays_ms.size(); }
};

// Throws std::invalid_argument on an empty reference.
LatencyReport FinalizationDelay(std::span<const EmissionEvent> events,
                                std::span<const int> reference, const Alignment& alignment,
                                double frame_ms);

struct EndpointedResult {
  DecodeResult decode;             // un-truncated
  std::vector<int> hypothesis;     // tokens surfaced no later than the decision
  EndpointDecision decision;
  LatencyReport latency;           // FD from the un-truncated decode, plus L
};

// Decodes, runs the endpointer over the frame observations at
// max((t + 1) * frame_ms, available_ms), and drops tokens surfaced after the
// decision. If the endpointer never fires the decision is forced at the end
// of the audio.
EndpointedResult EndpointedDecode(const Model& model, const Utterance& utterance,
                                  const InferenceContext& context, std::optional<DomainId> domain,
                                  const EndpointerConfig& endpointer = {},
                                  const DecodeOptions& options = {});

Tensor StackUtterance(const Utterance& utterance, const EncoderConfig& config);

// Tab-separated lines: utterance id, token, emission ms, t, u.
void AppendEmissionTrace(std::string& out, const std::string& utterance_id,
                         std::span<const EmissionEvent> events);

}  // namespace flexit

#endif  // FLEXIT_RUNTIME_H_
