// Greedy streaming decode, endpointer and latency bookkeeping.

#include <cmath>
#include <map>

#include "doctest.h"
#include "flexit/corpus.h"
#include "flexit/runtime.h"

using namespace flexit;

namespace {

Model SmallModel(bool dvec, std::uint64_t seed) {
  ModelConfig c = ModelConfig::Toy(dvec);
  c.encoder.layers = 2;
  return Model::Init(c, seed);
}

// Offline greedy search over the full masked forward of the same plan.
std::vector<int> OfflineGreedy(const Model& m, const Tensor& x, const InferenceContext& ctx,
                               std::optional<DomainId> domain) {
  const ContextPlan plan =
      PlanContexts(x.rows(), ctx.base_segment, ctx.center, m.config.right_context, m.config.left_cap);
  const Tensor enc = EncoderForward(m.params, m.config.encoder, x, plan, domain);
  std::vector<int> hyp;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    Tensor f = Tensor::Matrix(1, enc.cols());
    std::copy(enc.row(t).begin(), enc.row(t).end(), f.data().begin());
    for (int n = 0; n < 10; ++n) {
      auto [rows, st] = PredictorForward(m.params, m.config.predictor, hyp,
                                         PredictorState::Initial(m.config.predictor));
      Tensor g = Tensor::Matrix(1, rows.cols());
      std::copy(rows.row(rows.rows() - 1).begin(), rows.row(rows.rows() - 1).end(), g.data().begin());
      const LatticeLogits l = JoinerForward(m.params, m.config.joiner, f, g);
      int best = 0;
      for (std::size_t v = 1; v < l.vocab; ++v) {
        if (l.at(0, 0, v) > l.at(0, 0, best)) best = static_cast<int>(v);
      }
      if (best == kBlank) break;
      hyp.push_back(best);
    }
  }
  return hyp;
}

}  // namespace

TEST_CASE("endpointer counting rule") {
  SUBCASE("posteriors below threshold never fire") {
    Endpointer ep;
    for (std::size_t t = 0; t < 50; ++t) CHECK_FALSE(ep.Step(0.9, (t + 1) * 60.0, t).has_value());
    CHECK_FALSE(ep.decided());
  }
  SUBCASE("threshold exceeded on frames 20-24 fires at frame 24") {
    Endpointer ep(EndpointerConfig{0.95, 5});
    std::optional<EndpointDecision> d;
    for (std::size_t t = 0; t < 30 && !d; ++t) {
      d = ep.Step(t >= 20 && t <= 24 ? 0.99 : 0.5, (t + 1) * 60.0, t);
    }
    REQUIRE(d.has_value());
    CHECK(d->frame == 24);
    CHECK(d->decision_ms == 1500.0);
    CHECK(d->run_length == 5);
    CHECK_FALSE(d->forced);
    CHECK_FALSE(ep.Step(0.99, 1560.0, 25).has_value());
  }
  SUBCASE("a dip resets the run") {
    Endpointer ep(EndpointerConfig{0.95, 3});
    CHECK_FALSE(ep.Step(0.99, 60, 0));
    CHECK_FALSE(ep.Step(0.99, 120, 1));
    CHECK_FALSE(ep.Step(0.95, 180, 2));  // not strictly above
    CHECK_FALSE(ep.Step(0.99, 240, 3));
    CHECK_FALSE(ep.Step(0.99, 300, 4));
    CHECK(ep.Step(0.99, 360, 5).has_value());
  }
}

TEST_CASE("finalization delay") {
  const std::vector<int> ref{4, 9, 2};
  const Alignment align{{4, 9, 14}, 14};  // ends at 300, 600, 900 ms
  SUBCASE("emitted at its end is zero, 180 ms later is 180") {
    const std::vector<EmissionEvent> on_time{{4, 300, 4, 0}, {9, 600, 9, 1}, {2, 1080, 14, 2}};
    const LatencyReport r = FinalizationDelay(on_time, ref, align, 60);
    REQUIRE(r.matched() == 3);
    CHECK(r.delays_ms[0] == 0.0);
    CHECK(r.delays_ms[1] == 0.0);
    CHECK(r.delays_ms[2] == 180.0);
  }
  SUBCASE("delays of 60, 120 and 180 average to 120") {
    const std::vector<EmissionEvent> ev{{4, 360, 5, 0}, {9, 720, 11, 1}, {2, 1080, 16, 2}};
    CHECK(FinalizationDelay(ev, ref, align, 60).average_fd_ms == doctest::Approx(120.0));
  }
  SUBCASE("only exact matches count") {
    const std::vector<EmissionEvent> ev{{4, 360, 5, 0}, {7, 720, 11, 1}, {2, 960, 15, 2}};
    const LatencyReport r = FinalizationDelay(ev, ref, align, 60);
    CHECK(r.matched() == 2);
    CHECK(r.average_fd_ms == doctest::Approx(60.0));
  }
  SUBCASE("nothing matched") {
    const LatencyReport r = FinalizationDelay({}, ref, align, 60);
    CHECK(r.matched() == 0);
    CHECK(r.average_fd_ms == 0.0);
  }
  CHECK_THROWS_AS(FinalizationDelay({}, std::vector<int>{}, Alignment{}, 60), std::invalid_argument);
}

TEST_CASE("decode timing follows chunk availability") {
  const Model m = SmallModel(false, 3);
  const Utterance u = GenerateUtterance(DomainId::kVCmd, 5);
  const Tensor x = StackUtterance(u, m.config.encoder);
  const std::size_t T = x.rows();
  for (std::size_t center : {1u, 2u, 5u, 10u}) {
    const InferenceContext ctx{10, center};
    const DecodeResult r = GreedyStreamingDecode(m, x, ctx, std::nullopt);
    CHECK(r.audio_ms == T * 60.0);
    REQUIRE(r.frames.size() == T);
    std::map<std::size_t, int> per_frame;
    double last = 0.0;
    for (std::size_t k = 0; k < r.events.size(); ++k) {
      const EmissionEvent& e = r.events[k];
      const std::size_t chunk_end = std::min((e.t / center + 1) * center, T);
      const std::size_t avail = std::min(chunk_end + m.config.right_context, T);
      CHECK(e.emission_ms == avail * 60.0);
      CHECK(e.emission_ms >= (e.t + 1) * 60.0);
      CHECK(e.emission_ms >= last);
      CHECK(e.u == k);
      last = e.emission_ms;
      ++per_frame[e.t];
    }
    for (auto [t, n] : per_frame) CHECK(n <= 10);
    for (const FrameObservation& f : r.frames) {
      CHECK(f.blank_posterior >= 0.0);
      CHECK(f.blank_posterior <= 1.0);
    }
  }
}

TEST_CASE("streaming greedy decode equals offline greedy search") {
  for (bool dvec : {false, true}) {
    const Model m = SmallModel(dvec, 7 + dvec);
    for (std::uint64_t seed : {1u, 2u}) {
      const Utterance u = GenerateUtterance(DomainId::kDictation, seed);
      const Tensor x = StackUtterance(u, m.config.encoder);
      const std::optional<DomainId> dom = dvec ? std::optional<DomainId>(u.domain) : std::nullopt;
      for (std::size_t center : {2u, 10u}) {
        const InferenceContext ctx{10, center};
        CHECK(GreedyStreamingDecode(m, x, ctx, dom).tokens() == OfflineGreedy(m, x, ctx, dom));
      }
    }
  }
}

TEST_CASE("decoding is deterministic and validates its inputs") {
  const Model m = SmallModel(true, 11);
  const Utterance u = GenerateUtterance(DomainId::kVCmd, 8);
  const Tensor x = StackUtterance(u, m.config.encoder);
  const InferenceContext ctx{2, 2};
  const DecodeResult a = GreedyStreamingDecode(m, x, ctx, DomainId::kVCmd);
  const DecodeResult b = GreedyStreamingDecode(m, x, ctx, DomainId::kVCmd);
  CHECK(a.events == b.events);
  CHECK_THROWS_AS(GreedyStreamingDecode(m, x, ctx, std::nullopt), std::invalid_argument);
  CHECK_THROWS_AS(GreedyStreamingDecode(m, x, InferenceContext{2, 3}, DomainId::kVCmd),
                  std::invalid_argument);
  CHECK_THROWS_AS(GreedyStreamingDecode(m, Tensor::Matrix(4, 7), ctx, DomainId::kVCmd),
                  std::invalid_argument);
  const Model plain = SmallModel(false, 12);
  CHECK_THROWS_AS(GreedyStreamingDecode(plain, x, ctx, DomainId::kVCmd), std::invalid_argument);
}

TEST_CASE("endpointed decode truncation") {
  const Model m = SmallModel(false, 13);
  const Utterance u = GenerateUtterance(DomainId::kVCmd, 21);
  const InferenceContext ctx{2, 2};
  SUBCASE("an endpointer that never fires keeps every token and forces the decision") {
    const EndpointedResult r = EndpointedDecode(m, u, ctx, std::nullopt, EndpointerConfig{2.0, 5});
    CHECK(r.decision.forced);
    CHECK(r.latency.forced_decision);
    CHECK(r.decision.decision_ms == r.decode.audio_ms);
    CHECK(r.hypothesis == r.decode.tokens());
    CHECK(*r.latency.endpoint_latency_ms == r.decode.audio_ms - u.speech_end_ms);
  }
  SUBCASE("an endpointer firing at the first frame cuts later tokens") {
    const EndpointedResult r = EndpointedDecode(m, u, ctx, std::nullopt, EndpointerConfig{-1.0, 1});
    CHECK_FALSE(r.decision.forced);
    CHECK(r.decision.frame == 0);
    CHECK(r.decision.decision_ms == 180.0);  // frame 0's chunk is decodable at 180 ms
    std::vector<int> kept;
    for (const EmissionEvent& e : r.decode.events) {
      if (e.emission_ms <= 180.0) kept.push_back(e.token);
    }
    CHECK(r.hypothesis == kept);
    CHECK(r.latency.early_decision);
    CHECK(*r.latency.endpoint_latency_ms == 180.0 - u.speech_end_ms);
    // FD still comes from the un-truncated decode.
    CHECK(r.latency.delays_ms ==
          FinalizationDelay(r.decode.events, u.tokens, u.alignment, 60).delays_ms);
  }
  SUBCASE("later endpoints never remove tokens") {
    std::size_t prev = 0;
    for (std::size_t k : {1u, 2u, 4u, 8u, 100u}) {
      const EndpointedResult r = EndpointedDecode(m, u, ctx, std::nullopt, EndpointerConfig{-1.0, k});
      CHECK(r.hypothesis.size() >= prev);
      prev = r.hypothesis.size();
    }
  }
}

TEST_CASE("emission trace lines") {
  std::string out;
  const std::vector<EmissionEvent> ev{{3, 180, 1, 0}, {12, 420, 6, 1}};
  AppendEmissionTrace(out, "u-1", ev);
  CHECK(out == "u-1\t3\t180\t1\t0\nu-1\t12\t420\t6\t1\n");
}
