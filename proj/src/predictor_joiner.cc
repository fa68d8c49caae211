// flexit/predictor_joiner.cc

#include "flexit/predictor_joiner.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace flexit {

namespace {

Tensor RandomMatrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::Matrix(rows, cols);
  for (double& x : t.storage()) x = dist(rng);
  return t;
}

double InvSqrt(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

void CheckTokens(std::span<const int> tokens, std::size_t vocab) {
  for (int t : tokens) {
    if (t == kBlank) throw std::invalid_argument("predictor: blank in label history");
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::invalid_argument("predictor: token " + std::to_string(t) + " outside vocabulary");
    }
  }
}

struct LstmRun {
  std::vector<Var> hidden_rows;
  Var hidden;
  Var cell;
};

// Steps the LSTM over `symbols` from (h0, c0).
LstmRun RunLstm(ParameterBinder& pb, const PredictorConfig& cfg, const std::vector<std::size_t>& symbols,
                Var h0, Var c0) {
  Graph& g = pb.graph();
  const std::size_t H = cfg.hidden;
  LstmRun run{{}, h0, c0};
  if (symbols.empty()) return run;
  const Var emb = g.Gather(pb("pred.embed"), symbols);
  const Var xw = g.Add(g.MatMul(emb, pb("pred.wx")), pb("pred.b"));
  const Var wh = pb("pred.wh");
  for (std::size_t s = 0; s < symbols.size(); ++s) {
    const Var gates = g.Add(g.Slice(xw, 0, s, s + 1), g.MatMul(run.hidden, wh));
    const Var in_gate = g.Sigmoid(g.Slice(gates, 1, 0, H));
    const Var forget = g.Sigmoid(g.Slice(gates, 1, H, 2 * H));
    const Var candidate = g.Tanh(g.Slice(gates, 1, 2 * H, 3 * H));
    const Var out_gate = g.Sigmoid(g.Slice(gates, 1, 3 * H, 4 * H));
    run.cell = g.Add(g.Mul(forget, run.cell), g.Mul(in_gate, candidate));
    run.hidden = g.Mul(out_gate, g.Tanh(run.cell));
    run.hidden_rows.push_back(run.hidden);
  }
  return run;
}

Var NormRows(ParameterBinder& pb, Var rows) {
  Graph& g = pb.graph();
  return g.Add(g.Mul(g.LayerNorm(rows), pb("pred.ln.g")), pb("pred.ln.b"));
}

}  // namespace

void InitPredictorParams(ParameterSet& params, const PredictorConfig& config,
                         std::mt19937_64& rng) {
  const std::size_t H = config.hidden;
  params.Add("pred.embed", RandomMatrix(config.vocab, config.embed, 1.0, rng));
  params.Add("pred.wx", RandomMatrix(config.embed, 4 * H, InvSqrt(config.embed), rng));
  params.Add("pred.wh", RandomMatrix(H, 4 * H, InvSqrt(H), rng));
  Tensor bias = Tensor::Matrix(1, 4 * H);
  for (std::size_t i = H; i < 2 * H; ++i) bias[i] = 1.0;  // forget gate
  params.Add("pred.b", std::move(bias));
  params.Add("pred.ln.g", Tensor::Matrix(1, H, 1.0));
  params.Add("pred.ln.b", Tensor::Matrix(1, H));
}

void InitJoinerParams(ParameterSet& params, const JoinerConfig& joiner,
                      const PredictorConfig& predictor, std::mt19937_64& rng) {
  params.Add("join.wf", RandomMatrix(joiner.encoder_width, joiner.dim, InvSqrt(joiner.encoder_width), rng));
  params.Add("join.wg", RandomMatrix(predictor.hidden, joiner.dim, InvSqrt(predictor.hidden), rng));
  params.Add("join.b", Tensor::Matrix(1, joiner.dim));
  params.Add("join.wo", RandomMatrix(joiner.dim, predictor.vocab, InvSqrt(joiner.dim), rng));
  params.Add("join.bo", Tensor::Matrix(1, predictor.vocab));
}

PredictorState PredictorState::Initial(const PredictorConfig& config) {
  PredictorState s;
  s.hidden = Tensor::Matrix(1, config.hidden);
  s.cell = Tensor::Matrix(1, config.hidden);
  s.output = Tensor::Matrix(1, config.hidden);
  return s;
}

Var PredictorGraph(ParameterBinder& binder, const PredictorConfig& config,
                   std::span<const int> tokens) {
  CheckTokens(tokens, config.vocab);
  Graph& g = binder.graph();
  std::vector<std::size_t> symbols{static_cast<std::size_t>(kBlank)};
  for (int t : tokens) symbols.push_back(static_cast<std::size_t>(t));
  const Var zeros = g.Constant(Tensor::Matrix(1, config.hidden));
  const LstmRun run = RunLstm(binder, config, symbols, zeros, zeros);
  const Var rows = run.hidden_rows.size() == 1 ? run.hidden_rows[0] : g.Concat(run.hidden_rows, 0);
  return NormRows(binder, rows);
}

std::pair<Tensor, PredictorState> PredictorForward(const ParameterSet& params,
                                                   const PredictorConfig& config,
                                                   std::span<const int> tokens,
                                                   const PredictorState& state) {
  CheckTokens(tokens, config.vocab);
  Graph g;
  ParameterBinder pb(g, params);
  std::vector<std::size_t> symbols;
  if (state.fresh) symbols.push_back(static_cast<std::size_t>(kBlank));
  for (int t : tokens) symbols.push_back(static_cast<std::size_t>(t));
  const LstmRun run = RunLstm(pb, config, symbols, g.Constant(state.hidden), g.Constant(state.cell));
  std::vector<Var> outputs;
  outputs.reserve(run.hidden_rows.size());
  for (Var h : run.hidden_rows) outputs.push_back(NormRows(pb, h));
  g.Forward();

  const std::size_t n_rows = tokens.size() + 1;
  Tensor rows = Tensor::Matrix(n_rows, config.hidden);
  std::size_t r = 0;
  if (!state.fresh) {
    std::copy(state.output.data().begin(), state.output.data().end(), rows.row(r++).begin());
  }
  for (Var o : outputs) {
    const Tensor& v = g.value(o);
    std::copy(v.data().begin(), v.data().end(), rows.row(r++).begin());
  }
  PredictorState next;
  next.hidden = g.value(run.hidden);
  next.cell = g.value(run.cell);
  next.output = outputs.empty() ? state.output : g.value(outputs.back());
  next.last_token = tokens.empty() ? state.last_token : tokens.back();
  next.fresh = false;
  return {std::move(rows), std::move(next)};
}

Var JoinerGraph(ParameterBinder& binder, const JoinerConfig& config, Var encoder_frames,
                Var predictor_rows) {
  Graph& g = binder.graph();
  const std::size_t T = g.shape(encoder_frames).front();
  const std::size_t U1 = g.shape(predictor_rows).front();
  if (g.shape(encoder_frames).back() != config.encoder_width) {
    throw std::invalid_argument("joiner: encoder width " +
                                std::to_string(g.shape(encoder_frames).back()) + " != " +
                                std::to_string(config.encoder_width));
  }
  const Var f = g.MatMul(encoder_frames, binder("join.wf"));
  const Var p = g.MatMul(predictor_rows, binder("join.wg"));
  std::vector<std::size_t> t_index(T * U1);
  std::vector<std::size_t> u_index(T * U1);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u < U1; ++u) {
      t_index[t * U1 + u] = t;
      u_index[t * U1 + u] = u;
    }
  }
  const Var hidden = g.Tanh(
      g.Add(g.Add(g.Gather(f, std::move(t_index)), g.Gather(p, std::move(u_index))), binder("join.b")));
  return g.LogSoftmax(g.Add(g.MatMul(hidden, binder("join.wo")), binder("join.bo")));
}

LatticeLogits JoinerForward(const ParameterSet& params, const JoinerConfig& config,
                            const Tensor& encoder_frames, const Tensor& predictor_rows) {
  Graph g;
  ParameterBinder pb(g, params);
  const Var out = JoinerGraph(pb, config, g.Constant(encoder_frames), g.Constant(predictor_rows));
  g.Forward();
  return LatticeLogits::FromTensor(g.value(out), encoder_frames.rows(), predictor_rows.rows() - 1);
}

JoinerStep::JoinerStep(const ParameterSet& params, const JoinerConfig& config)
    : wf_(params.at("join.wf")),
      wg_(params.at("join.wg")),
      b_(params.at("join.b")),
      wo_(params.at("join.wo")),
      bo_(params.at("join.bo")),
      dim_(config.dim),
      hidden_(config.dim) {}

namespace {

Tensor RowTimes(const Tensor& rows, const Tensor& w) {
  if (rows.cols() != w.rows()) throw std::invalid_argument("joiner: projection width mismatch");
  Tensor out = Tensor::Matrix(rows.rows(), w.cols());
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto in = rows.row(r);
    auto o = out.row(r);
    for (std::size_t k = 0; k < in.size(); ++k) {
      const double x = in[k];
      auto wr = w.row(k);
      for (std::size_t c = 0; c < o.size(); ++c) o[c] += x * wr[c];
    }
  }
  return out;
}

}  // namespace

Tensor JoinerStep::ProjectFrames(const Tensor& frames) const { return RowTimes(frames, wf_); }

Tensor JoinerStep::ProjectPredictor(const Tensor& predictor_output) const {
  return RowTimes(predictor_output, wg_);
}

void JoinerStep::LogProbs(std::span<const double> frame_proj, std::span<const double> pred_proj,
                          std::vector<double>& out) const {
  for (std::size_t j = 0; j < dim_; ++j) hidden_[j] = std::tanh(frame_proj[j] + pred_proj[j] + b_[j]);
  const std::size_t V = wo_.cols();
  out.assign(bo_.data().begin(), bo_.data().end());
  for (std::size_t j = 0; j < dim_; ++j) {
    const double h = hidden_[j];
    auto wr = wo_.row(j);
    for (std::size_t v = 0; v < V; ++v) out[v] += h * wr[v];
  }
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (double x : out) sum += std::exp(x - mx);
  const double lse = mx + std::log(sum);
  for (double& x : out) x -= lse;
}

}  // namespace flexit
