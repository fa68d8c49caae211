// flexit/experiments.cc

#include "flexit/experiments.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace flexit {

namespace {

struct Published {
  double dict_wer, vcmd_wer, vcmd_del, avg_fd, l_avg;
};

ExperimentConfig Fixed(const std::string& name, double ctx, double br_v, double br_d, bool dvec) {
  ExperimentConfig c;
  c.name = name;
  c.mode = ContextMode::kFixed;
  c.base_segment_ms = c.center_vcmd_ms = c.center_dict_ms = ctx;
  c.infer_center_vcmd_ms = c.infer_center_dict_ms = ctx;
  c.br_vcmd_ms = br_v;
  c.br_dict_ms = br_d;
  c.domain_vector = dvec;
  return c;
}

ExperimentConfig Random(const std::string& name, bool dvec) {
  ExperimentConfig c;
  c.name = name;
  c.mode = ContextMode::kRandom;
  c.base_segment_ms = 1200;
  c.random_min_ms = 120;
  c.random_max_ms = 1200;
  c.center_vcmd_ms = c.center_dict_ms = 0;
  c.infer_center_vcmd_ms = 120;
  c.infer_center_dict_ms = 600;
  c.br_vcmd_ms = 420;
  c.br_dict_ms = 900;
  c.domain_vector = dvec;
  return c;
}

ExperimentConfig PerDomain(const std::string& name, bool dvec) {
  ExperimentConfig c;
  c.name = name;
  c.mode = ContextMode::kPerDomain;
  c.base_segment_ms = 600;
  c.center_vcmd_ms = c.infer_center_vcmd_ms = 120;
  c.center_dict_ms = c.infer_center_dict_ms = 600;
  c.br_vcmd_ms = 420;
  c.br_dict_ms = 900;
  c.domain_vector = dvec;
  return c;
}

const std::map<std::string, ExperimentConfig>& Table() {
  static const std::map<std::string, ExperimentConfig> table = [] {
    std::map<std::string, ExperimentConfig> t;
    auto put = [&](ExperimentConfig c) { t.emplace(c.name, std::move(c)); };
    put(Fixed("B1", 120, 420, 420, false));
    put(Fixed("B2", 300, 600, 600, false));
    put(Fixed("B3", 600, 900, 900, false));
    put(Fixed("C2", 300, 420, 600, false));
    put(Fixed("C3", 600, 420, 900, false));
    put(Fixed("D1", 120, 420, 420, true));
    put(Fixed("D2", 300, 600, 600, true));
    put(Fixed("D3", 600, 900, 900, true));
    put(Fixed("E2", 300, 420, 600, true));
    put(Fixed("E3", 600, 420, 900, true));
    put(Random("R1", false));
    put(Random("R2", true));
    put(PerDomain("S1", false));
    put(PerDomain("S2", true));
    return t;
  }();
  return table;
}

const std::map<std::string, Published>& PublishedTable() {
  static const std::map<std::string, Published> table = {
      {"B1", {15.4, 6.7, 2.8, 148, 449}},  {"B2", {13.8, 7.4, 3.6, 272, 463}},
      {"B3", {13.2, 9.7, 5.4, 470, 505}},  {"C2", {13.7, 7.5, 3.6, 271, 482}},
      {"C3", {13.2, 10.8, 6.4, 483, 548}}, {"D1", {14.0, 6.8, 2.9, 159, 441}},
      {"D2", {12.8, 7.7, 3.8, 297, 464}},  {"D3", {12.4, 10.5, 6.2, 543, 509}},
      {"E2", {12.8, 7.23, 3.28, 263, 457}}, {"E3", {12.5, 9.6, 5.7, 464, 476}},
      {"R1", {13.6, 7.2, 3.1, 173, 440}},  {"R2", {12.7, 7.1, 3.1, 167, 440}},
      {"S1", {12.5, 7.7, 3.3, 185, 458}},  {"S2", {12.6, 7.0, 2.9, 157, 450}},
  };
  return table;
}

std::size_t Frames(double ms, double frame_ms, const char* what) {
  const int f = MsToFrames(ms, frame_ms);
  if (f <= 0) throw std::invalid_argument(std::string(what) + " must be at least one frame");
  return static_cast<std::size_t>(f);
}

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double ParseDouble(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw std::invalid_argument("override " + key + ": '" + v + "' is not a number");
  }
  return out;
}

bool ParseBool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("override " + key + ": '" + v + "' is not a boolean");
}

}  // namespace

std::string ExperimentConfig::EmfCtxLabel() const {
  switch (mode) {
    case ContextMode::kRandom: return "random";
    case ContextMode::kPerDomain:
      return FormatNumber(center_vcmd_ms) + "/" + FormatNumber(center_dict_ms);
    case ContextMode::kFixed: break;
  }
  return FormatNumber(center_vcmd_ms);
}

InferenceContext ExperimentConfig::Inference(DomainId d, double frame_ms) const {
  InferenceContext ctx;
  ctx.center = Frames(infer_center_ms(d), frame_ms, "inference center");
  ctx.base_segment = mode == ContextMode::kFixed ? ctx.center
                                                 : Frames(base_segment_ms, frame_ms, "base segment");
  return ctx;
}

void ExperimentConfig::Validate(double frame_ms) const {
  if (!(bl_ms >= 0) || !(br_vcmd_ms > 0) || !(br_dict_ms > 0)) {
    throw std::invalid_argument(name + ": buffers must be positive (b_l may be 0)");
  }
  const std::size_t base = Frames(base_segment_ms, frame_ms, "base segment");
  auto check_center = [&](double ms, const char* what) {
    const std::size_t c = Frames(ms, frame_ms, what);
    if (mode != ContextMode::kFixed && c > base) {
      throw std::invalid_argument(name + ": " + what + " exceeds the base segment");
    }
  };
  switch (mode) {
    case ContextMode::kFixed:
      if (center_vcmd_ms != center_dict_ms) {
        throw std::invalid_argument(name + ": fixed context needs equal centers");
      }
      check_center(center_vcmd_ms, "training center");
      break;
    case ContextMode::kPerDomain:
      check_center(center_vcmd_ms, "VCmd training center");
      check_center(center_dict_ms, "Dictation training center");
      break;
    case ContextMode::kRandom:
      check_center(random_min_ms, "random minimum");
      check_center(random_max_ms, "random maximum");
      if (random_min_ms > random_max_ms) throw std::invalid_argument(name + ": empty random range");
      break;
  }
  check_center(infer_center_vcmd_ms, "VCmd inference center");
  check_center(infer_center_dict_ms, "Dictation inference center");
}

const std::vector<std::string>& RegistryNames() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [k, v] : Table()) n.push_back(k);
    return n;
  }();
  return names;
}

ExperimentConfig Registry(const std::string& name) {
  auto it = Table().find(name);
  if (it == Table().end()) {
    std::string valid;
    for (const auto& n : RegistryNames()) valid += (valid.empty() ? "" : ",") + n;
    throw std::invalid_argument("unknown experiment '" + name + "'; valid: " + valid);
  }
  return it->second;
}

ReportRow PublishedRow(const std::string& name) {
  const ExperimentConfig c = Registry(name);
  const Published& p = PublishedTable().at(name);
  ReportRow r;
  r.experiment = c.name;
  r.emf_ctx_ms = c.EmfCtxLabel();
  r.br_vcmd_ms = c.br_vcmd_ms;
  r.br_dict_ms = c.br_dict_ms;
  r.domain_vec = c.domain_vector;
  r.dict_wer = p.dict_wer;
  r.vcmd_wer = p.vcmd_wer;
  r.vcmd_del = p.vcmd_del;
  r.avg_fd_ms = p.avg_fd;
  r.l_avg_ms = p.l_avg;
  return r;
}

void ApplyOverrides(ExperimentConfig& c, const std::map<std::string, std::string>& overrides) {
  for (const auto& [key, value] : overrides) {
    if (key == "mode") {
      if (value == "fixed") c.mode = ContextMode::kFixed;
      else if (value == "per_domain") c.mode = ContextMode::kPerDomain;
      else if (value == "random") c.mode = ContextMode::kRandom;
      else throw std::invalid_argument("override mode: expected fixed|per_domain|random, got '" + value + "'");
    } else if (key == "domain_vector") {
      c.domain_vector = ParseBool(key, value);
    } else {
      static const std::map<std::string, double ExperimentConfig::*> fields = {
          {"base_segment_ms", &ExperimentConfig::base_segment_ms},
          {"center_vcmd_ms", &ExperimentConfig::center_vcmd_ms},
          {"center_dict_ms", &ExperimentConfig::center_dict_ms},
          {"random_min_ms", &ExperimentConfig::random_min_ms},
          {"random_max_ms", &ExperimentConfig::random_max_ms},
          {"bl_ms", &ExperimentConfig::bl_ms},
          {"br_vcmd_ms", &ExperimentConfig::br_vcmd_ms},
          {"br_dict_ms", &ExperimentConfig::br_dict_ms},
          {"infer_center_vcmd_ms", &ExperimentConfig::infer_center_vcmd_ms},
          {"infer_center_dict_ms", &ExperimentConfig::infer_center_dict_ms},
      };
      auto it = fields.find(key);
      if (it == fields.end()) throw std::invalid_argument("unknown override key '" + key + "'");
      c.*(it->second) = ParseDouble(key, value);
    }
  }
}

std::map<std::string, std::map<std::string, std::string>> ParseConfigText(const std::string& text) {
  std::map<std::string, std::map<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::string section = "*";
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = Trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw std::invalid_argument("config line " + std::to_string(line_no) + ": bad section");
      section = Trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    out[section][Trim(line.substr(0, eq))] = Trim(line.substr(eq + 1));
  }
  return out;
}

BatchPlan PlanBatch(const ExperimentConfig& config, DomainId domain, double frame_ms,
                    std::mt19937_64& rng) {
  BatchPlan p;
  p.domain = domain;
  p.bl_ms = config.bl_ms;
  p.br_ms = config.br_ms(domain);
  p.domain_vector = config.domain_vector;
  switch (config.mode) {
    case ContextMode::kFixed:
      p.center = p.base_segment = Frames(config.center_vcmd_ms, frame_ms, "training center");
      break;
    case ContextMode::kPerDomain:
      p.base_segment = Frames(config.base_segment_ms, frame_ms, "base segment");
      p.center = Frames(domain == DomainId::kVCmd ? config.center_vcmd_ms : config.center_dict_ms,
                        frame_ms, "training center");
      break;
    case ContextMode::kRandom: {
      p.base_segment = Frames(config.base_segment_ms, frame_ms, "base segment");
      std::uniform_int_distribution<std::size_t> draw(
          Frames(config.random_min_ms, frame_ms, "random minimum"),
          Frames(config.random_max_ms, frame_ms, "random maximum"));
      p.center = draw(rng);
      break;
    }
  }
  return p;
}

std::uint64_t ExperimentSeed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return MixSeed(seed, h);
}

ModelConfig ModelConfigFor(const ExperimentConfig& config) {
  return ModelConfig::Toy(config.domain_vector);
}

Model InitialModel(const ExperimentConfig& config, std::uint64_t seed) {
  return Model::Init(ModelConfigFor(config), MixSeed(ExperimentSeed(seed, config.name), 0));
}

std::map<std::string, std::string> ExperimentMetadata(const ExperimentConfig& c) {
  std::map<std::string, std::string> m;
  m["exp.name"] = c.name;
  switch (c.mode) {
    case ContextMode::kFixed: m["exp.mode"] = "fixed"; break;
    case ContextMode::kPerDomain: m["exp.mode"] = "per_domain"; break;
    case ContextMode::kRandom: m["exp.mode"] = "random"; break;
  }
  m["exp.domain_vector"] = c.domain_vector ? "1" : "0";
  m["exp.base_segment_ms"] = FormatNumber(c.base_segment_ms);
  m["exp.center_vcmd_ms"] = FormatNumber(c.center_vcmd_ms);
  m["exp.center_dict_ms"] = FormatNumber(c.center_dict_ms);
  m["exp.random_min_ms"] = FormatNumber(c.random_min_ms);
  m["exp.random_max_ms"] = FormatNumber(c.random_max_ms);
  m["exp.bl_ms"] = FormatNumber(c.bl_ms);
  m["exp.br_vcmd_ms"] = FormatNumber(c.br_vcmd_ms);
  m["exp.br_dict_ms"] = FormatNumber(c.br_dict_ms);
  m["exp.infer_center_vcmd_ms"] = FormatNumber(c.infer_center_vcmd_ms);
  m["exp.infer_center_dict_ms"] = FormatNumber(c.infer_center_dict_ms);
  return m;
}

ExperimentConfig ExperimentFromMetadata(const std::map<std::string, std::string>& meta) {
  auto name = meta.find("exp.name");
  if (name == meta.end()) throw std::invalid_argument("metadata has no exp.name");
  ExperimentConfig c;
  if (std::find(RegistryNames().begin(), RegistryNames().end(), name->second) !=
      RegistryNames().end()) {
    c = Registry(name->second);
  }
  c.name = name->second;
  std::map<std::string, std::string> overrides;
  for (const auto& [k, v] : meta) {
    if (k.starts_with("exp.") && k != "exp.name") overrides[k.substr(4)] = v;
  }
  ApplyOverrides(c, overrides);
  return c;
}

Model TrainModel(const ExperimentConfig& config, std::span<const Utterance> train,
                 const TrainingHyper& hyper, std::uint64_t seed, TrainStats* stats,
                 const TrainHooks& hooks) {
  const ModelConfig mcfg = ModelConfigFor(config);
  const double frame_ms = mcfg.encoder.frame_ms;
  config.Validate(frame_ms);
  if (hyper.epochs == 0) throw std::invalid_argument("TrainModel: zero epochs");
  const std::uint64_t run_seed = ExperimentSeed(seed, config.name);
  Model model = InitialModel(config, seed);
  std::mt19937_64 plan_rng(MixSeed(run_seed, 1));
  std::mt19937_64 dropout_rng(MixSeed(run_seed, 2));
  const Dropout dropout{mcfg.encoder.dropout, &dropout_rng};

  // Stacked features are reused every epoch.
  std::map<const Utterance*, Tensor> stacked;
  for (const Utterance& u : train) stacked.emplace(&u, StackUtterance(u, mcfg.encoder));

  AdamState adam;
  TrainStats local;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = MakeBatches(train, hyper.batch_size, MixSeed(run_seed, 100 + epoch));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (const Batch& batch : batches) {
      const BatchPlan plan = PlanBatch(config, batch.domain, frame_ms, plan_rng);
      if (hooks.on_batch) hooks.on_batch(epoch, local.steps, plan);
      GradientSet grads;
      double batch_loss = 0.0;
      for (const Utterance* u : batch.utterances) {
        const Tensor& x = stacked.at(u);
        const RestrictionBand band =
            BuildBand(u->alignment, plan.bl_ms, plan.br_ms, frame_ms, x.rows());
        UtteranceSetup setup;
        setup.base_segment = plan.base_segment;
        setup.center = plan.center;
        if (plan.domain_vector) setup.domain = batch.domain;
        setup.band = &band;
        Objective obj = UtteranceObjective(model, x, u->tokens, setup, &dropout);
        if (!std::isfinite(obj.loss)) {
          throw TrainingDivergedError(config.name + ": non-finite loss on " + u->id + " at step " +
                                      std::to_string(local.steps));
        }
        batch_loss += obj.loss;
        Accumulate(grads, obj.grads);
      }
      const double n = static_cast<double>(batch.utterances.size());
      ScaleGradients(grads, 1.0 / n);
      if (hyper.clip_norm > 0) {
        const double norm = GlobalNorm(grads);
        if (norm > hyper.clip_norm) ScaleGradients(grads, hyper.clip_norm / norm);
      }
      AdamHyper step_hyper = hyper.adam;
      if (hyper.warmup_steps > 0) {
        step_hyper.learning_rate *= std::min(1.0, static_cast<double>(local.steps + 1) /
                                                      static_cast<double>(hyper.warmup_steps));
      }
      try {
        AdamStep(model.params, grads, adam, step_hyper);
      } catch (const NonFiniteGradientError& e) {
        throw TrainingDivergedError(config.name + ": " + e.what());
      }
      ++local.steps;
      loss_sum += batch_loss;
      loss_count += batch.utterances.size();
    }
    const double mean = loss_sum / static_cast<double>(loss_count);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    local.epoch_mean_loss.push_back(mean);
    local.epoch_wall_s.push_back(wall);
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean, wall);
  }
  if (stats) *stats = std::move(local);
  return model;
}

DomainEval EvaluateDomain(const Model& model, const ExperimentConfig& config,
                          std::span<const Utterance> eval, DomainId domain,
                          const std::optional<EndpointerConfig>& endpointer, std::string* trace) {
  const double frame_ms = model.config.encoder.frame_ms;
  const InferenceContext ctx = config.Inference(domain, frame_ms);
  const std::optional<DomainId> dvec =
      model.config.encoder.domain_vector ? std::optional<DomainId>(domain) : std::nullopt;
  DomainEval out;
  double fd_sum = 0.0;
  double l_sum = 0.0;
  for (const Utterance& u : eval) {
    if (u.domain != domain) continue;
    ++out.utterances;
    std::vector<int> hyp;
    LatencyReport latency;
    if (endpointer) {
      EndpointedResult r = EndpointedDecode(model, u, ctx, dvec, *endpointer);
      hyp = std::move(r.hypothesis);
      latency = std::move(r.latency);
      l_sum += *latency.endpoint_latency_ms;
      out.forced_decisions += latency.forced_decision ? 1 : 0;
      out.early_decisions += latency.early_decision ? 1 : 0;
      if (trace) AppendEmissionTrace(*trace, u.id, r.decode.events);
    } else {
      const DecodeResult r = GreedyStreamingDecode(model, StackUtterance(u, model.config.encoder),
                                                   ctx, dvec);
      hyp = r.tokens();
      latency = FinalizationDelay(r.events, u.tokens, u.alignment, frame_ms);
      if (trace) AppendEmissionTrace(*trace, u.id, r.events);
    }
    out.wer += Wer(u.tokens, hyp);
    for (double d : latency.delays_ms) fd_sum += d;
    out.fd_tokens += latency.matched();
  }
  if (out.fd_tokens > 0) out.avg_fd_ms = fd_sum / static_cast<double>(out.fd_tokens);
  if (endpointer && out.utterances > 0) out.l_avg_ms = l_sum / static_cast<double>(out.utterances);
  return out;
}

RtfMeasurement MeasureRtf(std::span<const Utterance> utterances,
                          const std::function<void(const Utterance&)>& decode,
                          std::size_t repetitions) {
  if (repetitions == 0) throw std::invalid_argument("MeasureRtf: zero repetitions");
  double audio_s = 0.0;
  for (const Utterance& u : utterances) audio_s += u.duration_ms() / 1000.0;
  if (!(audio_s > 0)) throw std::invalid_argument("MeasureRtf: no audio");
  for (const Utterance& u : utterances) decode(u);  // warm-up
  RtfMeasurement m;
  for (std::size_t r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const Utterance& u : utterances) decode(u);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.repetitions.push_back({wall, audio_s});
  }
  for (const RtfSample& s : m.repetitions) m.mean += s.ratio();
  m.mean /= static_cast<double>(repetitions);
  for (const RtfSample& s : m.repetitions) m.variance += (s.ratio() - m.mean) * (s.ratio() - m.mean);
  m.variance /= static_cast<double>(repetitions);
  return m;
}

ReportRow SweepResult::Row() const {
  ReportRow r;
  r.experiment = config.name;
  r.emf_ctx_ms = config.EmfCtxLabel();
  r.br_vcmd_ms = config.br_vcmd_ms;
  r.br_dict_ms = config.br_dict_ms;
  r.domain_vec = config.domain_vector;
  if (dictation.utterances > 0) r.dict_wer = dictation.wer.wer();
  if (vcmd.utterances > 0) {
    r.vcmd_wer = vcmd.wer.wer();
    r.vcmd_del = vcmd.wer.del();
    r.avg_fd_ms = vcmd.avg_fd_ms;
    r.l_avg_ms = vcmd.l_avg_ms;
  }
  if (rtf) r.rtf = rtf->mean;
  return r;
}

SweepResult EvaluateExperiment(const Model& model, const ExperimentConfig& config,
                               std::span<const Utterance> eval, const EvalOptions& options,
                               std::string* trace) {
  SweepResult res;
  res.config = config;
  res.dictation = EvaluateDomain(model, config, eval, DomainId::kDictation, std::nullopt, trace);
  res.vcmd = EvaluateDomain(model, config, eval, DomainId::kVCmd, options.endpointer, trace);
  if (options.measure_rtf && !eval.empty()) {
    const double frame_ms = model.config.encoder.frame_ms;
    res.rtf = MeasureRtf(
        eval,
        [&](const Utterance& u) {
          const std::optional<DomainId> dvec =
              model.config.encoder.domain_vector ? std::optional<DomainId>(u.domain) : std::nullopt;
          GreedyStreamingDecode(model, StackUtterance(u, model.config.encoder),
                                config.Inference(u.domain, frame_ms), dvec);
        },
        options.rtf_repetitions);
  }
  return res;
}

SweepResult RunExperiment(const ExperimentConfig& config, const Corpus& corpus,
                          const TrainingHyper& hyper, std::uint64_t seed,
                          const EvalOptions& options, const TrainHooks& hooks) {
  TrainStats stats;
  const Model model = TrainModel(config, corpus.train, hyper, seed, &stats, hooks);
  SweepResult res = EvaluateExperiment(model, config, corpus.eval, options);
  res.training = std::move(stats);
  return res;
}

std::vector<SweepResult> RunSweep(std::vector<ExperimentConfig> configs, const Corpus& corpus,
                                  const TrainingHyper& hyper, std::uint64_t seed,
                                  const EvalOptions& options, const TrainHooks& hooks) {
  std::sort(configs.begin(), configs.end(),
            [](const ExperimentConfig& a, const ExperimentConfig& b) { return a.name < b.name; });
  std::vector<SweepResult> out;
  for (const ExperimentConfig& c : configs) out.push_back(RunExperiment(c, corpus, hyper, seed, options, hooks));
  return out;
}

}  // namespace flexit
