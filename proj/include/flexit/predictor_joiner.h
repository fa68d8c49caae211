// flexit/predictor_joiner.h
//
// Label-history predictor (one LSTM layer followed by layer norm) and the
// additive joiner producing per-(t, u) log-probabilities. Symbol 0 is blank;
// its embedding row doubles as the start-of-sequence input.

#ifndef FLEXIT_PREDICTOR_JOINER_H_
#define FLEXIT_PREDICTOR_JOINER_H_

#include <cstddef>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "flexit/graph.h"
#include "flexit/lattice_loss.h"
#include "flexit/params.h"
#include "flexit/tensor.h"

namespace flexit {

inline constexpr std::size_t kToyVocab = 17;  // 16 labels + blank at index 0

struct PredictorConfig {
  std::size_t vocab = kToyVocab;
  std::size_t embed = 64;
  std::size_t hidden = 64;
};

struct JoinerConfig {
  std::size_t encoder_width = 64;
  std::size_t dim = 64;
};

// Parameter names are prefixed "pred." and "join.".
void InitPredictorParams(ParameterSet& params, const PredictorConfig& config,
                         std::mt19937_64& rng);
void InitJoinerParams(ParameterSet& params, const JoinerConfig& joiner,
                      const PredictorConfig& predictor, std::mt19937_64& rng);

// LSTM memory after the history consumed so far. A fresh state has consumed
// nothing, not even the start symbol.
struct PredictorState {
  Tensor hidden;  // 1 x H
  Tensor cell;    // 1 x H
  Tensor output;  // 1 x H, layer-normed hidden; valid once !fresh
  int last_token = kBlank;
  bool fresh = true;

  static PredictorState Initial(const PredictorConfig& config);
};

// Rows of g for the label history. Row 0 is the output for the history
// before `tokens` (the start symbol for a fresh state), row u the output
// after tokens[0..u). Throws if a token is blank or outside the vocabulary.
Var PredictorGraph(ParameterBinder& binder, const PredictorConfig& config,
                   std::span<const int> tokens);

std::pair<Tensor, PredictorState> PredictorForward(const ParameterSet& params,
                                                   const PredictorConfig& config,
                                                   std::span<const int> tokens,
                                                   const PredictorState& state);

// log_softmax(W_o tanh(W_f f_t + W_g g_u + b) + b_o) for every (t, u), as a
// (T * (U+1)) x V graph node in (t-major, u-minor) row order.
Var JoinerGraph(ParameterBinder& binder, const JoinerConfig& config, Var encoder_frames,
                Var predictor_rows);

LatticeLogits JoinerForward(const ParameterSet& params, const JoinerConfig& config,
                            const Tensor& encoder_frames, const Tensor& predictor_rows);

// Single-cell joiner for decoding: `frame_proj` is W_f f_t (1 x dim) and
// `pred_proj` is W_g g_u (1 x dim). Writes V log-probabilities.
class JoinerStep {
 public:
  JoinerStep(const ParameterSet& params, const JoinerConfig& config);
  // W_f applied to every row of `frames` (n x encoder_width -> n x dim).
  Tensor ProjectFrames(const Tensor& frames) const;
  Tensor ProjectPredictor(const Tensor& predictor_output) const;
  void LogProbs(std::span<const double> frame_proj, std::span<const double> pred_proj,
                std::vector<double>& out) const;

 private:
  const Tensor& wf_;
  const Tensor& wg_;
  const Tensor& b_;
  const Tensor& wo_;
  const Tensor& bo_;
  std::size_t dim_;
  mutable std::vector<double> hidden_;
};

}  // namespace flexit

#endif  // FLEXIT_PREDICTOR_JOINER_H_
