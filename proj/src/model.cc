// flexit/model.cc

#include "flexit/model.h"

#include <stdexcept>
#include <string>

namespace flexit {

namespace {

std::size_t ReadSize(const std::map<std::string, std::string>& meta, const std::string& key,
                     std::size_t fallback) {
  auto it = meta.find(key);
  if (it == meta.end()) return fallback;
  return static_cast<std::size_t>(std::stoull(it->second));
}

double ReadDouble(const std::map<std::string, std::string>& meta, const std::string& key,
                  double fallback) {
  auto it = meta.find(key);
  return it == meta.end() ? fallback : std::stod(it->second);
}

}  // namespace

ModelConfig ModelConfig::Toy(bool domain_vector) {
  ModelConfig c;
  c.encoder.domain_vector = domain_vector;
  return c;
}

void ModelConfig::Validate() const {
  encoder.Validate();
  if (joiner.encoder_width != encoder.width) {
    throw std::invalid_argument("ModelConfig: joiner expects encoder width " +
                                std::to_string(joiner.encoder_width) + ", encoder has " +
                                std::to_string(encoder.width));
  }
  if (predictor.vocab < 2) throw std::invalid_argument("ModelConfig: vocabulary needs blank + 1");
}

std::map<std::string, std::string> ModelConfig::ToMetadata() const {
  std::map<std::string, std::string> m;
  m["enc.layers"] = std::to_string(encoder.layers);
  m["enc.heads"] = std::to_string(encoder.heads);
  m["enc.width"] = std::to_string(encoder.width);
  m["enc.ffn"] = std::to_string(encoder.ffn);
  m["enc.dropout"] = std::to_string(encoder.dropout);
  m["enc.frame_ms"] = std::to_string(encoder.frame_ms);
  m["enc.feature_dim"] = std::to_string(encoder.feature_dim);
  m["enc.stack"] = std::to_string(encoder.stack_factor);
  m["enc.domain_vector"] = encoder.domain_vector ? "1" : "0";
  m["enc.max_positions"] = std::to_string(encoder.max_positions);
  m["pred.vocab"] = std::to_string(predictor.vocab);
  m["pred.embed"] = std::to_string(predictor.embed);
  m["pred.hidden"] = std::to_string(predictor.hidden);
  m["join.dim"] = std::to_string(joiner.dim);
  m["left_cap"] = left_cap ? std::to_string(*left_cap) : "unlimited";
  m["right_context"] = std::to_string(right_context);
  return m;
}

ModelConfig ModelConfig::FromMetadata(const std::map<std::string, std::string>& meta) {
  ModelConfig c = Toy();
  EncoderConfig& e = c.encoder;
  e.layers = ReadSize(meta, "enc.layers", e.layers);
  e.heads = ReadSize(meta, "enc.heads", e.heads);
  e.width = ReadSize(meta, "enc.width", e.width);
  e.ffn = ReadSize(meta, "enc.ffn", e.ffn);
  e.dropout = ReadDouble(meta, "enc.dropout", e.dropout);
  e.frame_ms = ReadDouble(meta, "enc.frame_ms", e.frame_ms);
  e.feature_dim = ReadSize(meta, "enc.feature_dim", e.feature_dim);
  e.stack_factor = e.stack_stride = ReadSize(meta, "enc.stack", e.stack_factor);
  e.domain_vector = ReadSize(meta, "enc.domain_vector", 0) != 0;
  e.max_positions = ReadSize(meta, "enc.max_positions", e.max_positions);
  c.predictor.vocab = ReadSize(meta, "pred.vocab", c.predictor.vocab);
  c.predictor.embed = ReadSize(meta, "pred.embed", c.predictor.embed);
  c.predictor.hidden = ReadSize(meta, "pred.hidden", c.predictor.hidden);
  c.joiner.dim = ReadSize(meta, "join.dim", c.joiner.dim);
  c.joiner.encoder_width = e.width;
  if (auto it = meta.find("left_cap"); it != meta.end()) {
    c.left_cap = it->second == "unlimited" ? std::nullopt
                                           : std::optional<std::size_t>(std::stoull(it->second));
  }
  c.right_context = ReadSize(meta, "right_context", c.right_context);
  c.Validate();
  return c;
}

Model Model::Init(const ModelConfig& config, std::uint64_t seed) {
  config.Validate();
  Model m{config, {}};
  std::mt19937_64 rng(seed);
  InitEncoderParams(m.params, config.encoder, rng);
  InitPredictorParams(m.params, config.predictor, rng);
  InitJoinerParams(m.params, config.joiner, config.predictor, rng);
  return m;
}

Checkpoint Model::ToCheckpoint(std::map<std::string, std::string> extra) const {
  Checkpoint ckpt;
  ckpt.metadata = std::move(extra);
  for (auto& [k, v] : config.ToMetadata()) ckpt.metadata[k] = v;
  ckpt.params = params;
  return ckpt;
}

Model Model::FromCheckpoint(const Checkpoint& ckpt) {
  Model m{ModelConfig::FromMetadata(ckpt.metadata), ckpt.params};
  // Shape check against a freshly initialised model.
  const Model ref = Init(m.config, 0);
  for (const auto& [name, t] : ref.params.tensors()) {
    if (!m.params.contains(name)) throw std::runtime_error("checkpoint lacks parameter " + name);
    if (m.params.at(name).shape() != t.shape()) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                               ShapeString(m.params.at(name).shape()) + ", expected " +
                               ShapeString(t.shape()));
    }
  }
  return m;
}

namespace {

LatticeLogits BuildAndRun(const Model& model, const Tensor& stacked, std::span<const int> tokens,
                          const UtteranceSetup& setup, const Dropout* dropout, Graph& g,
                          ParameterBinder& pb, Var& log_probs) {
  const ModelConfig& cfg = model.config;
  const std::size_t T = stacked.rows();
  const ContextPlan plan =
      PlanContexts(T, setup.base_segment, setup.center, cfg.right_context, cfg.left_cap);
  const Var enc = EncoderGraph(pb, cfg.encoder, g.Constant(stacked), plan, setup.domain, dropout);
  const Var pred = PredictorGraph(pb, cfg.predictor, tokens);
  log_probs = JoinerGraph(pb, cfg.joiner, enc, pred);
  g.Forward();
  return LatticeLogits::FromTensor(g.value(log_probs), T, tokens.size());
}

}  // namespace

Objective UtteranceObjective(const Model& model, const Tensor& stacked,
                             std::span<const int> tokens, const UtteranceSetup& setup,
                             const Dropout* dropout) {
  Graph g;
  ParameterBinder pb(g, model.params);
  Var log_probs;
  const LatticeLogits lattice = BuildAndRun(model, stacked, tokens, setup, dropout, g, pb, log_probs);
  LossAndGradient lg = RnntLossGrad(lattice, tokens, setup.band);
  const Tensor seed(g.shape(log_probs), std::move(lg.gradient));
  g.Backward(log_probs, seed);
  Objective out;
  out.loss = lg.loss;
  pb.AccumulateGradients(out.grads);
  return out;
}

double UtteranceLoss(const Model& model, const Tensor& stacked, std::span<const int> tokens,
                     const UtteranceSetup& setup) {
  Graph g;
  ParameterBinder pb(g, model.params);
  Var log_probs;
  const LatticeLogits lattice = BuildAndRun(model, stacked, tokens, setup, nullptr, g, pb, log_probs);
  return RnntLoss(lattice, tokens, setup.band);
}

}  // namespace flexit
