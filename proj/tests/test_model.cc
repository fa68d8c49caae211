// Predictor, joiner and the composed per-utterance objective.

#include <cmath>
#include <random>

#include "doctest.h"
#include "flexit/model.h"
#include "fd_check.h"

using namespace flexit;

namespace {

ModelConfig TinyConfig(bool dvec = false) {
  ModelConfig c = ModelConfig::Toy(dvec);
  c.encoder.layers = 1;
  c.encoder.heads = 2;
  c.encoder.width = 8;
  c.encoder.ffn = 8;
  c.encoder.max_positions = 16;
  c.predictor.vocab = 5;
  c.predictor.embed = 4;
  c.predictor.hidden = 6;
  c.joiner.encoder_width = 8;
  c.joiner.dim = 6;
  c.left_cap = 3;
  return c;
}

Tensor RowOf(const Tensor& t, std::size_t r) {
  Tensor out = Tensor::Matrix(1, t.cols());
  std::copy(t.row(r).begin(), t.row(r).end(), out.data().begin());
  return out;
}

}  // namespace

TEST_CASE("predictor: empty history gives a single row") {
  const Model m = Model::Init(ModelConfig::Toy(), 1);
  auto [rows, state] =
      PredictorForward(m.params, m.config.predictor, {}, PredictorState::Initial(m.config.predictor));
  CHECK(rows.rows() == 1);
  CHECK(rows.cols() == m.config.predictor.hidden);
  CHECK_FALSE(state.fresh);
}

TEST_CASE("predictor: incremental steps equal the batch run") {
  const Model m = Model::Init(ModelConfig::Toy(), 2);
  const PredictorConfig& pc = m.config.predictor;
  const std::vector<int> tokens{3, 7, 1, 16, 9, 4};
  auto [batch, final_state] = PredictorForward(m.params, pc, tokens, PredictorState::Initial(pc));
  REQUIRE(batch.rows() == tokens.size() + 1);

  auto [first, state] = PredictorForward(m.params, pc, {}, PredictorState::Initial(pc));
  for (std::size_t k = 0; k < pc.hidden; ++k) CHECK(std::abs(first(0, k) - batch(0, k)) < 1e-9);
  for (std::size_t u = 0; u < tokens.size(); ++u) {
    const int tok[] = {tokens[u]};
    auto [step, next] = PredictorForward(m.params, pc, tok, state);
    REQUIRE(step.rows() == 2);
    for (std::size_t k = 0; k < pc.hidden; ++k) {
      CHECK(std::abs(step(0, k) - batch(u, k)) < 1e-9);
      CHECK(std::abs(step(1, k) - batch(u + 1, k)) < 1e-9);
    }
    state = std::move(next);
  }
  for (std::size_t k = 0; k < pc.hidden; ++k) {
    CHECK(std::abs(state.hidden[k] - final_state.hidden[k]) < 1e-9);
    CHECK(std::abs(state.cell[k] - final_state.cell[k]) < 1e-9);
  }
  CHECK(state.last_token == 4);

  // The graph version agrees with the value version.
  Graph g;
  ParameterBinder pb(g, m.params);
  const Var rows = PredictorGraph(pb, pc, tokens);
  g.Forward();
  for (std::size_t i = 0; i < batch.size(); ++i) CHECK(std::abs(g.value(rows)[i] - batch[i]) < 1e-12);
}

TEST_CASE("predictor: zero weights give identical rows") {
  Model m = Model::Init(ModelConfig::Toy(), 3);
  for (auto& [name, t] : m.params.tensors()) {
    if (name.starts_with("pred.") && name != "pred.ln.g" && name != "pred.ln.b") t.Fill(0.0);
  }
  const std::vector<int> tokens{2, 5, 11};
  auto [rows, state] = PredictorForward(m.params, m.config.predictor, tokens,
                                        PredictorState::Initial(m.config.predictor));
  for (std::size_t u = 1; u < rows.rows(); ++u) {
    for (std::size_t k = 0; k < rows.cols(); ++k) CHECK(rows(u, k) == rows(0, k));
  }
}

TEST_CASE("predictor: blank or out-of-range history is rejected") {
  const Model m = Model::Init(ModelConfig::Toy(), 4);
  const PredictorConfig& pc = m.config.predictor;
  const std::vector<int> with_blank{1, 0, 2};
  CHECK_THROWS_AS(PredictorForward(m.params, pc, with_blank, PredictorState::Initial(pc)),
                  std::invalid_argument);
  const std::vector<int> too_big{17};
  CHECK_THROWS_AS(PredictorForward(m.params, pc, too_big, PredictorState::Initial(pc)),
                  std::invalid_argument);
}

TEST_CASE("joiner: shape, normalisation and frame locality") {
  const Model m = Model::Init(ModelConfig::Toy(), 5);
  std::mt19937_64 rng(6);
  const Tensor f = testing::RandomTensor({5, 64}, rng);
  const Tensor g = testing::RandomTensor({4, 64}, rng);
  const LatticeLogits l = JoinerForward(m.params, m.config.joiner, f, g);
  CHECK(l.frames == 5);
  CHECK(l.labels == 3);
  CHECK(l.vocab == kToyVocab);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t u = 0; u < 4; ++u) {
      double mx = -1e300;
      for (std::size_t v = 0; v < l.vocab; ++v) mx = std::max(mx, l.at(t, u, v));
      double z = 0.0;
      for (std::size_t v = 0; v < l.vocab; ++v) z += std::exp(l.at(t, u, v) - mx);
      CHECK(std::abs(mx + std::log(z)) < 1e-9);
    }
  }
  CHECK(l.MaxNormalizationError() < 1e-9);

  Tensor swapped = f;
  for (std::size_t k = 0; k < 64; ++k) std::swap(swapped(1, k), swapped(3, k));
  const LatticeLogits s = JoinerForward(m.params, m.config.joiner, swapped, g);
  for (std::size_t u = 0; u < 4; ++u) {
    for (std::size_t v = 0; v < l.vocab; ++v) {
      CHECK(s.at(1, u, v) == l.at(3, u, v));
      CHECK(s.at(3, u, v) == l.at(1, u, v));
      CHECK(s.at(0, u, v) == l.at(0, u, v));
    }
  }
  CHECK_THROWS_AS(JoinerForward(m.params, m.config.joiner, Tensor::Matrix(5, 63), g),
                  std::invalid_argument);
}

TEST_CASE("joiner step matches the batch joiner cell by cell") {
  const Model m = Model::Init(ModelConfig::Toy(), 7);
  std::mt19937_64 rng(8);
  const Tensor f = testing::RandomTensor({3, 64}, rng);
  const Tensor g = testing::RandomTensor({2, 64}, rng);
  const LatticeLogits l = JoinerForward(m.params, m.config.joiner, f, g);
  JoinerStep step(m.params, m.config.joiner);
  const Tensor fp = step.ProjectFrames(f);
  std::vector<double> out;
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t u = 0; u < 2; ++u) {
      const Tensor gp = step.ProjectPredictor(RowOf(g, u));
      step.LogProbs(fp.row(t), gp.row(0), out);
      for (std::size_t v = 0; v < l.vocab; ++v) CHECK(std::abs(out[v] - l.at(t, u, v)) < 1e-12);
    }
  }
}

TEST_CASE("model loss equals the lattice loss of the composed forward") {
  const Model m = Model::Init(TinyConfig(true), 9);
  std::mt19937_64 rng(10);
  const Tensor x = testing::RandomTensor({6, m.config.encoder.input_dim()}, rng);
  const std::vector<int> tokens{1, 3, 2};
  UtteranceSetup setup;
  setup.base_segment = 4;
  setup.center = 2;
  setup.domain = DomainId::kDictation;
  const ContextPlan plan = PlanContexts(6, 4, 2, m.config.right_context, m.config.left_cap);
  const Tensor enc = EncoderForward(m.params, m.config.encoder, x, plan, setup.domain);
  auto [pred, st] = PredictorForward(m.params, m.config.predictor, tokens,
                                     PredictorState::Initial(m.config.predictor));
  const LatticeLogits l = JoinerForward(m.params, m.config.joiner, enc, pred);
  const double expected = RnntLoss(l, tokens);
  CHECK(UtteranceLoss(m, x, tokens, setup) == doctest::Approx(expected).epsilon(1e-12));
  const Objective obj = UtteranceObjective(m, x, tokens, setup);
  CHECK(obj.loss == doctest::Approx(expected).epsilon(1e-12));
  CHECK(obj.grads.size() == m.params.tensors().size());
}

TEST_CASE("full model backward passes the finite-difference check") {
  for (bool banded : {false, true}) {
    Model m = Model::Init(TinyConfig(banded), 11 + banded);
    std::mt19937_64 rng(12);
    const Tensor x = testing::RandomTensor({7, m.config.encoder.input_dim()}, rng);
    const std::vector<int> tokens{2, 4};
    const Alignment align{{2, 5}, 5};
    const RestrictionBand band = BuildBand(align, 60, 120, 60, 7);
    UtteranceSetup setup;
    setup.base_segment = 4;
    setup.center = banded ? 2 : 4;
    if (banded) {
      setup.domain = DomainId::kVCmd;
      setup.band = &band;
    }
    const Objective obj = UtteranceObjective(m, x, tokens, setup);
    testing::GradientReport report;
    std::mt19937_64 pick(13);
    for (auto& [name, tensor] : m.params.tensors()) {
      // Up to 12 coordinates per tensor keep the check fast.
      for (int n = 0; n < 12 && n < static_cast<int>(tensor.size()); ++n) {
        const std::size_t i = tensor.size() <= 12 ? static_cast<std::size_t>(n) : pick() % tensor.size();
        const double keep = tensor[i];
        tensor[i] = keep + 1e-4;
        const double up = UtteranceLoss(m, x, tokens, setup);
        tensor[i] = keep - 1e-4;
        const double down = UtteranceLoss(m, x, tokens, setup);
        tensor[i] = keep;
        const double numeric = (up - down) / 2e-4;
        const auto it = obj.grads.find(name);
        const double analytic = it == obj.grads.end() ? 0.0 : it->second[i];
        if (std::abs(analytic) < 1e-8 && std::abs(numeric) < 1e-8) continue;
        if (std::abs(analytic - numeric) > 1e-6 + 1e-3 * std::max(std::abs(analytic), std::abs(numeric))) {
          report.ok = false;
          report.detail += name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) +
                           " numeric " + std::to_string(numeric) + "\n";
        }
      }
    }
    CHECK_MESSAGE(report.ok, report.detail);
  }
}

TEST_CASE("dropout only acts in training mode") {
  const Model m = Model::Init(TinyConfig(), 14);
  std::mt19937_64 rng(15);
  const Tensor x = testing::RandomTensor({6, m.config.encoder.input_dim()}, rng);
  const std::vector<int> tokens{1, 2};
  UtteranceSetup setup{4, 2, std::nullopt, nullptr};
  const double eval = UtteranceLoss(m, x, tokens, setup);
  CHECK(UtteranceObjective(m, x, tokens, setup).loss == eval);
  std::mt19937_64 drop_rng(16);
  Dropout d{0.5, &drop_rng};
  CHECK(UtteranceObjective(m, x, tokens, setup, &d).loss != eval);
}

TEST_CASE("infeasible band is reported") {
  const Model m = Model::Init(TinyConfig(), 17);
  std::mt19937_64 rng(18);
  const Tensor x = testing::RandomTensor({4, m.config.encoder.input_dim()}, rng);
  const std::vector<int> tokens{1, 2};
  RestrictionBand band;
  band.lo = {3, 0};
  band.hi = {3, 1};
  UtteranceSetup setup{2, 2, std::nullopt, &band};
  CHECK_THROWS_AS(UtteranceObjective(m, x, tokens, setup), InfeasibleLatticeError);
}

TEST_CASE("model checkpoint round trip") {
  const Model m = Model::Init(ModelConfig::Toy(true), 19);
  const Checkpoint c = m.ToCheckpoint({{"experiment", "E2"}});
  CHECK(c.metadata.at("experiment") == "E2");
  const Model r = Model::FromCheckpoint(c);
  CHECK(r.config.encoder.domain_vector);
  CHECK(r.config.ToMetadata() == m.config.ToMetadata());
  for (const auto& [name, t] : m.params.tensors()) CHECK(r.params.at(name).storage() == t.storage());

  Checkpoint broken = c;
  broken.params.tensors().at("join.wo") = Tensor::Matrix(3, 3);
  CHECK_THROWS(Model::FromCheckpoint(broken));
  Checkpoint missing = c;
  missing.params.tensors().erase("pred.wh");
  CHECK_THROWS(Model::FromCheckpoint(missing));
}

TEST_CASE("initialisation is deterministic per seed") {
  const Model a = Model::Init(ModelConfig::Toy(), 20);
  const Model b = Model::Init(ModelConfig::Toy(), 20);
  const Model c = Model::Init(ModelConfig::Toy(), 21);
  CHECK(a.params.at("enc.in.w").storage() == b.params.at("enc.in.w").storage());
  CHECK(a.params.at("enc.in.w").storage() != c.params.at("enc.in.w").storage());
}
