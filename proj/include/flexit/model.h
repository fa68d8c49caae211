// flexit/model.h
//
// The whole transducer (encoder, predictor, joiner) behind one parameter set,
// and the per-utterance training objective.

#ifndef FLEXIT_MODEL_H_
#define FLEXIT_MODEL_H_

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "flexit/encoder.h"
#include "flexit/lattice_loss.h"
#include "flexit/params.h"
#include "flexit/predictor_joiner.h"

namespace flexit {

struct ModelConfig {
  EncoderConfig encoder;
  PredictorConfig predictor;
  JoinerConfig joiner;
  std::optional<std::size_t> left_cap = 20;  // frames of base left context
  std::size_t right_context = 1;            // look-ahead frames

  static ModelConfig Toy(bool domain_vector = false);
  void Validate() const;

  std::map<std::string, std::string> ToMetadata() const;
  // Missing keys keep their Toy() defaults.
  static ModelConfig FromMetadata(const std::map<std::string, std::string>& meta);
};

struct Model {
  ModelConfig config;
  ParameterSet params;

  static Model Init(const ModelConfig& config, std::uint64_t seed);
  Checkpoint ToCheckpoint(std::map<std::string, std::string> extra = {}) const;
  static Model FromCheckpoint(const Checkpoint& ckpt);
};

// How one utterance is presented to the encoder and the loss.
struct UtteranceSetup {
  std::size_t base_segment = 2;
  std::size_t center = 2;
  std::optional<DomainId> domain;  // required iff the model has the domain vector
  const RestrictionBand* band = nullptr;
};

struct Objective {
  double loss = 0.0;
  GradientSet grads;
};

// Transducer loss for (stacked features, tokens) and its gradient w.r.t.
// every parameter. `dropout` null = evaluation mode. Throws
// InfeasibleLatticeError if the band leaves no path.
Objective UtteranceObjective(const Model& model, const Tensor& stacked,
                             std::span<const int> tokens, const UtteranceSetup& setup,
                             const Dropout* dropout = nullptr);

// Loss only (no backward pass, no dropout).
double UtteranceLoss(const Model& model, const Tensor& stacked, std::span<const int> tokens,
                     const UtteranceSetup& setup);

}  // namespace flexit

#endif  // FLEXIT_MODEL_H_
