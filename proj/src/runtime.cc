// flexit/runtime.cc

#include "flexit/runtime.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flexit/metrics.h"

namespace flexit {

std::vector<int> DecodeResult::tokens() const {
  std::vector<int> out;
  out.reserve(events.size());
  for (const EmissionEvent& e : events) out.push_back(e.token);
  return out;
}

Tensor StackUtterance(const Utterance& utterance, const EncoderConfig& config) {
  return StackFeatures(utterance.features, config.stack_factor, config.stack_stride);
}

DecodeResult GreedyStreamingDecode(const Model& model, const Tensor& stacked,
                                   const InferenceContext& context, std::optional<DomainId> domain,
                                   const DecodeOptions& options) {
  const ModelConfig& cfg = model.config;
  if (context.center == 0 || context.center > context.base_segment) {
    throw std::invalid_argument("decode: center must be in [1, base_segment]");
  }
  if (stacked.cols() != cfg.encoder.input_dim()) {
    throw std::invalid_argument("decode: features have width " + std::to_string(stacked.cols()) +
                                ", model expects " + std::to_string(cfg.encoder.input_dim()));
  }
  if (cfg.encoder.domain_vector != domain.has_value()) {
    throw std::invalid_argument(cfg.encoder.domain_vector
                                    ? "decode: model uses a domain vector but no domain was given"
                                    : "decode: domain given to a model without domain vector");
  }
  const std::size_t T = stacked.rows();
  const double frame_ms = cfg.encoder.frame_ms;
  const std::size_t rc = cfg.right_context;
  StreamingEncoder encoder(model.params, cfg.encoder, context.base_segment, context.center, rc,
                           cfg.left_cap, domain);
  JoinerStep joiner(model.params, cfg.joiner);

  PredictorState state = PredictorState::Initial(cfg.predictor);
  auto advance = [&](std::span<const int> tok) {
    auto [rows, next] = PredictorForward(model.params, cfg.predictor, tok, state);
    state = std::move(next);
    Tensor last = Tensor::Matrix(1, rows.cols());
    std::copy(rows.row(rows.rows() - 1).begin(), rows.row(rows.rows() - 1).end(),
              last.data().begin());
    return joiner.ProjectPredictor(last);
  };
  Tensor pred_proj = advance({});

  DecodeResult result;
  result.audio_ms = static_cast<double>(T) * frame_ms;
  std::vector<double> log_probs;
  std::size_t u = 0;
  for (std::size_t start = 0; start < T; start += context.center) {
    const std::size_t nc = std::min(context.center, T - start);
    const std::size_t la = std::min(rc, T - start - nc);
    Tensor chunk = Tensor::Matrix(nc + la, stacked.cols());
    std::copy(stacked.row(start).begin(), stacked.row(start).begin() +
                                              static_cast<std::ptrdiff_t>((nc + la) * stacked.cols()),
              chunk.data().begin());
    const Tensor enc = encoder.Step(start, chunk, nc);
    const double available_ms = static_cast<double>(start + nc + la) * frame_ms;
    const Tensor frame_proj = joiner.ProjectFrames(enc);
    for (std::size_t i = 0; i < nc; ++i) {
      const std::size_t t = start + i;
      for (std::size_t emitted = 0;; ++emitted) {
        joiner.LogProbs(frame_proj.row(i), pred_proj.row(0), log_probs);
        if (emitted == 0) result.frames.push_back({t, std::exp(log_probs[kBlank]), available_ms});
        if (emitted >= options.max_symbols_per_frame) break;
        const auto best = static_cast<int>(
            std::max_element(log_probs.begin(), log_probs.end()) - log_probs.begin());
        if (best == kBlank) break;
        result.events.push_back({best, available_ms, t, u});
        ++u;
        const int tok[] = {best};
        pred_proj = advance(tok);
      }
    }
  }
  return result;
}

std::optional<EndpointDecision> Endpointer::Step(double blank_posterior, double time_ms,
                                                 std::size_t frame) {
  if (decided_) return std::nullopt;
  run_ = blank_posterior > config_.threshold ? run_ + 1 : 0;
  if (run_ < config_.consecutive) return std::nullopt;
  decided_ = true;
  return EndpointDecision{time_ms, frame, blank_posterior, run_, false};
}

LatencyReport FinalizationDelay(std::span<const EmissionEvent> events,
                                std::span<const int> reference, const Alignment& alignment,
                                double frame_ms) {
  if (reference.empty()) throw std::invalid_argument("FinalizationDelay: empty reference");
  if (alignment.frames.size() != reference.size()) {
    throw std::invalid_argument("FinalizationDelay: alignment/reference length mismatch");
  }
  std::vector<int> hyp;
  hyp.reserve(events.size());
  for (const EmissionEvent& e : events) hyp.push_back(e.token);
  LatencyReport report;
  for (const EditOp& op : AlignTokens(reference, hyp)) {
    if (op.kind != EditKind::kMatch) continue;
    const double end_ms = static_cast<double>(alignment.frames[op.ref_index] + 1) * frame_ms;
    report.delays_ms.push_back(events[op.hyp_index].emission_ms - end_ms);
  }
  if (!report.delays_ms.empty()) {
    double sum = 0.0;
    for (double d : report.delays_ms) sum += d;
    report.average_fd_ms = sum / static_cast<double>(report.delays_ms.size());
  }
  return report;
}

EndpointedResult EndpointedDecode(const Model& model, const Utterance& utterance,
                                  const InferenceContext& context, std::optional<DomainId> domain,
                                  const EndpointerConfig& endpointer, const DecodeOptions& options) {
  const double frame_ms = model.config.encoder.frame_ms;
  EndpointedResult out;
  out.decode = GreedyStreamingDecode(model, StackUtterance(utterance, model.config.encoder),
                                     context, domain, options);
  Endpointer ep(endpointer);
  std::optional<EndpointDecision> decision;
  for (const FrameObservation& f : out.decode.frames) {
    const double when = std::max(static_cast<double>(f.t + 1) * frame_ms, f.available_ms);
    decision = ep.Step(f.blank_posterior, when, f.t);
    if (decision) break;
  }
  if (!decision) {
    const std::size_t last = out.decode.frames.empty() ? 0 : out.decode.frames.back().t;
    const double p = out.decode.frames.empty() ? 0.0 : out.decode.frames.back().blank_posterior;
    decision = EndpointDecision{out.decode.audio_ms, last, p, 0, true};
  }
  out.decision = *decision;
  for (const EmissionEvent& e : out.decode.events) {
    if (e.emission_ms <= out.decision.decision_ms) out.hypothesis.push_back(e.token);
  }
  out.latency = FinalizationDelay(out.decode.events, utterance.tokens, utterance.alignment, frame_ms);
  out.latency.endpoint_latency_ms = out.decision.decision_ms - utterance.speech_end_ms;
  out.latency.early_decision = *out.latency.endpoint_latency_ms < 0;
  out.latency.forced_decision = out.decision.forced;
  return out;
}

void AppendEmissionTrace(std::string& out, const std::string& utterance_id,
                         std::span<const EmissionEvent> events) {
  for (const EmissionEvent& e : events) {
    out += utterance_id + '\t' + std::to_string(e.token) + '\t' + FormatNumber(e.emission_ms) + '\t' +
           std::to_string(e.t) + '\t' + std::to_string(e.u) + '\n';
  }
}

}  // namespace flexit
