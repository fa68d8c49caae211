// flexit/encoder.cc

#include "flexit/encoder.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flexit/lattice_loss.h"

namespace flexit {

const char* DomainName(DomainId d) { return d == DomainId::kVCmd ? "vcmd" : "dictation"; }

DomainId ParseDomain(const std::string& name) {
  if (name == "vcmd") return DomainId::kVCmd;
  if (name == "dictation") return DomainId::kDictation;
  throw std::invalid_argument("unknown domain '" + name + "' (expected vcmd or dictation)");
}

DomainVector DomainVector::For(DomainId d) {
  DomainVector v{std::vector<double>(kNumDomains, 0.0)};
  v.values[static_cast<std::size_t>(d)] = 1.0;
  return v;
}

EncoderConfig EncoderConfig::FullSize() {
  EncoderConfig c;
  c.layers = 10;
  c.heads = 8;
  c.width = 512;
  c.ffn = 2048;
  c.feature_dim = 80;
  return c;
}

void EncoderConfig::Validate() const {
  if (layers == 0 || heads == 0 || width == 0 || ffn == 0) {
    throw std::invalid_argument("EncoderConfig: sizes must be positive");
  }
  if (width % heads != 0) throw std::invalid_argument("EncoderConfig: width not divisible by heads");
  if (stack_factor != stack_stride) {
    throw std::invalid_argument("EncoderConfig: stacking factor must equal stride");
  }
  if (!(frame_ms > 0)) throw std::invalid_argument("EncoderConfig: frame_ms must be positive");
  if (dropout < 0 || dropout >= 1) throw std::invalid_argument("EncoderConfig: dropout in [0,1)");
  if (max_positions == 0) throw std::invalid_argument("EncoderConfig: max_positions must be positive");
}

Tensor StackFeatures(const Tensor& raw, std::size_t factor, std::size_t stride) {
  if (factor == 0 || stride == 0) throw std::invalid_argument("StackFeatures: zero factor/stride");
  const std::size_t n = raw.rows();
  const std::size_t d = raw.cols();
  const std::size_t out_rows = (n + stride - 1) / stride;
  Tensor out = Tensor::Matrix(out_rows, factor * d);
  for (std::size_t r = 0; r < out_rows; ++r) {
    for (std::size_t k = 0; k < factor; ++k) {
      const std::size_t src = r * stride + k;
      if (src >= n) break;
      auto in = raw.row(src);
      std::copy(in.begin(), in.end(), out.row(r).begin() + k * d);
    }
  }
  return out;
}

std::optional<std::size_t> ContextPlan::left_window() const {
  if (!left_cap) return std::nullopt;
  return *left_cap + (base_segment - center);
}

std::size_t ContextPlan::SegmentOf(std::size_t frame) const {
  if (frame >= num_frames) throw std::out_of_range("ContextPlan::SegmentOf: frame out of range");
  return frame / center;
}

std::size_t LeftBlockBegin(std::size_t center_begin, std::size_t base_segment,
                           std::size_t center, std::optional<std::size_t> left_cap) {
  if (!left_cap) return 0;
  const std::size_t reach = *left_cap + (base_segment - center);
  return center_begin > reach ? center_begin - reach : 0;
}

ContextPlan PlanContexts(std::size_t num_frames, std::size_t base_segment, std::size_t center,
                         std::size_t right_context, std::optional<std::size_t> left_cap) {
  if (center == 0) throw std::invalid_argument("PlanContexts: center must be positive");
  if (center > base_segment) {
    throw std::invalid_argument("PlanContexts: domain center " + std::to_string(center) +
                                " exceeds base segment " + std::to_string(base_segment));
  }
  ContextPlan plan;
  plan.num_frames = num_frames;
  plan.base_segment = base_segment;
  plan.center = center;
  plan.right_context = right_context;
  plan.left_cap = left_cap;
  for (std::size_t begin = 0; begin < num_frames; begin += center) {
    Segment s;
    s.center_begin = begin;
    s.center_end = std::min(begin + center, num_frames);
    s.left_begin = LeftBlockBegin(begin, base_segment, center, left_cap);
    s.right_end = std::min(s.center_end + right_context, num_frames);
    plan.segments.push_back(s);
  }
  return plan;
}

AttentionMask BuildAttentionMask(const ContextPlan& plan) {
  AttentionMask m;
  m.num_frames = plan.num_frames;
  for (std::size_t f = 0; f < plan.num_frames; ++f) {
    m.row_frame.push_back(f);
    m.row_segment.push_back(plan.SegmentOf(f));
  }
  for (std::size_t s = 0; s < plan.segments.size(); ++s) {
    const Segment& seg = plan.segments[s];
    for (std::size_t f = seg.center_end; f < seg.right_end; ++f) {
      m.row_frame.push_back(f);
      m.row_segment.push_back(s);
    }
  }
  const std::size_t n = m.rows();
  m.allowed.assign(n * n, 0);
  for (std::size_t q = 0; q < n; ++q) {
    const Segment& seg = plan.segments[m.row_segment[q]];
    for (std::size_t k = 0; k < n; ++k) {
      const bool real_key = k < plan.num_frames;
      const bool ok = real_key ? (seg.left_begin <= k && k < seg.center_end)
                               : m.row_segment[k] == m.row_segment[q];
      m.allowed[q * n + k] = ok ? 1 : 0;
    }
  }
  return m;
}

std::vector<std::size_t> AttentionMask::AttendedFrames(std::size_t q) const {
  std::vector<std::size_t> frames;
  for (std::size_t k = 0; k < rows(); ++k) {
    if (Allows(q, k)) frames.push_back(row_frame[k]);
  }
  std::sort(frames.begin(), frames.end());
  frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
  return frames;
}

std::vector<std::uint8_t> AttentionMask::FrameView() const {
  std::vector<std::uint8_t> view(num_frames * num_frames, 0);
  for (std::size_t q = 0; q < num_frames; ++q) {
    for (std::size_t f : AttendedFrames(q)) view[q * num_frames + f] = 1;
  }
  return view;
}

Var InjectDomainVector(Graph& graph, Var block_inputs, const DomainVector& d,
                       const EncoderConfig& config) {
  if (!config.domain_vector) {
    throw std::invalid_argument("InjectDomainVector: domain vector disabled in encoder config");
  }
  const std::size_t rows = graph.shape(block_inputs).front();
  Tensor block = Tensor::Matrix(rows, d.values.size());
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(d.values.begin(), d.values.end(), block.row(r).begin());
  }
  const Var parts[] = {block_inputs, graph.Constant(std::move(block))};
  return graph.Concat(parts, 1);
}

namespace {

std::string LayerName(std::size_t l, const char* what) {
  return "enc.l" + std::to_string(l) + "." + what;
}

Tensor RandomMatrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::Matrix(rows, cols);
  for (double& x : t.storage()) x = dist(rng);
  return t;
}

void AddLinear(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out,
               std::mt19937_64& rng) {
  params.Add(prefix + ".w", RandomMatrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  params.Add(prefix + ".b", Tensor::Matrix(1, out));
}

void AddNorm(ParameterSet& params, const std::string& prefix, std::size_t width) {
  params.Add(prefix + ".g", Tensor::Matrix(1, width, 1.0));
  params.Add(prefix + ".b", Tensor::Matrix(1, width));
}

Var Linear(ParameterBinder& pb, Var x, const std::string& prefix) {
  Graph& g = pb.graph();
  return g.Add(g.MatMul(x, pb(prefix + ".w")), pb(prefix + ".b"));
}

Var AffineNorm(ParameterBinder& pb, Var x, const std::string& prefix) {
  Graph& g = pb.graph();
  return g.Add(g.Mul(g.LayerNorm(x), pb(prefix + ".g")), pb(prefix + ".b"));
}

Var ApplyDropout(Graph& g, Var x, const Dropout* dropout) {
  if (dropout == nullptr || dropout->rng == nullptr || dropout->rate <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - dropout->rate);
  Tensor mask(g.shape(x));
  const double scale = 1.0 / (1.0 - dropout->rate);
  for (double& m : mask.storage()) m = keep(*dropout->rng) ? scale : 0.0;
  return g.Mul(x, g.Constant(std::move(mask)));
}

// Input projection plus learned absolute position of each row's frame.
Var EmbedFrames(ParameterBinder& pb, const EncoderConfig& cfg, Var stacked,
                const std::vector<std::size_t>& frames) {
  Graph& g = pb.graph();
  std::vector<std::size_t> pos(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) pos[i] = frames[i] % cfg.max_positions;
  return g.Add(Linear(pb, stacked, "enc.in"), g.Gather(pb("enc.pos"), std::move(pos)));
}

struct Projections {
  Var q, k, v;
};

Projections ProjectLayerInput(ParameterBinder& pb, const EncoderConfig& cfg, std::size_t l, Var x,
                              std::optional<DomainId> domain) {
  Graph& g = pb.graph();
  Var h = AffineNorm(pb, x, LayerName(l, "ln1"));
  if (cfg.domain_vector) {
    if (!domain) throw std::invalid_argument("encoder: domain vector enabled but no domain given");
    h = InjectDomainVector(g, h, DomainVector::For(*domain), cfg);
  }
  return {Linear(pb, h, LayerName(l, "q")), Linear(pb, h, LayerName(l, "k")),
          Linear(pb, h, LayerName(l, "v"))};
}

// Multi-head attention of q over (keys, values) under an additive mask;
// heads concatenated.
Var Attend(Graph& g, const EncoderConfig& cfg, Var q, Var keys, Var values, Var mask) {
  const std::size_t dh = cfg.width / cfg.heads;
  const Var scale = g.Constant(Tensor::Scalar(1.0 / std::sqrt(static_cast<double>(dh))));
  std::vector<Var> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Var qh = g.Slice(q, 1, h * dh, (h + 1) * dh);
    const Var kh = g.Slice(keys, 1, h * dh, (h + 1) * dh);
    const Var vh = g.Slice(values, 1, h * dh, (h + 1) * dh);
    const Var scores = g.Add(g.Mul(g.MatMul(qh, kh, false, true), scale), mask);
    heads.push_back(g.MatMul(g.Softmax(scores), vh));
  }
  return heads.size() == 1 ? heads[0] : g.Concat(heads, 1);
}

// Output projection, residual and feed-forward block.
Var FinishLayer(ParameterBinder& pb, std::size_t l, Var x, Var attended, const Dropout* dropout) {
  Graph& g = pb.graph();
  x = g.Add(x, ApplyDropout(g, Linear(pb, attended, LayerName(l, "o")), dropout));
  const Var h2 = AffineNorm(pb, x, LayerName(l, "ln2"));
  const Var ff = Linear(pb, g.Relu(Linear(pb, h2, LayerName(l, "ff1"))), LayerName(l, "ff2"));
  return g.Add(x, ApplyDropout(g, ff, dropout));
}

// Consecutive segments whose queries share one dense attention block: the
// keys are the union of what the group's rows may see, so masked-out keys
// outside that range are never materialised.
struct AttentionGroup {
  std::vector<std::size_t> queries;
  std::vector<std::size_t> keys;
  Tensor additive;  // queries x keys
};

constexpr std::size_t kGroupFrames = 16;

std::vector<AttentionGroup> GroupAttention(const ContextPlan& plan, const AttentionMask& mask) {
  const std::size_t T = plan.num_frames;
  const std::size_t n_seg = plan.segments.size();
  std::vector<std::size_t> copy_begin(n_seg + 1, T);
  for (std::size_t s = 0; s < n_seg; ++s) {
    copy_begin[s + 1] = copy_begin[s] + plan.segments[s].right_size();
  }
  const std::size_t per_group = std::max<std::size_t>(1, (kGroupFrames + plan.center - 1) / plan.center);
  std::vector<AttentionGroup> groups;
  for (std::size_t a = 0; a < n_seg; a += per_group) {
    const std::size_t b = std::min(a + per_group, n_seg) - 1;
    AttentionGroup grp;
    for (std::size_t r = plan.segments[a].center_begin; r < plan.segments[b].center_end; ++r) {
      grp.queries.push_back(r);
    }
    for (std::size_t r = plan.segments[a].left_begin; r < plan.segments[b].center_end; ++r) {
      grp.keys.push_back(r);
    }
    for (std::size_t r = copy_begin[a]; r < copy_begin[b + 1]; ++r) {
      grp.queries.push_back(r);
      grp.keys.push_back(r);
    }
    grp.additive = Tensor::Matrix(grp.queries.size(), grp.keys.size());
    for (std::size_t i = 0; i < grp.queries.size(); ++i) {
      for (std::size_t j = 0; j < grp.keys.size(); ++j) {
        if (!mask.Allows(grp.queries[i], grp.keys[j])) grp.additive(i, j) = kLogZero;
      }
    }
    groups.push_back(std::move(grp));
  }
  return groups;
}

void CheckDomain(const EncoderConfig& cfg, std::optional<DomainId> domain) {
  if (!cfg.domain_vector && domain.has_value()) {
    throw std::invalid_argument("encoder: domain vector supplied but disabled in config");
  }
  if (cfg.domain_vector && !domain.has_value()) {
    throw std::invalid_argument("encoder: domain vector enabled but no domain given");
  }
}

}  // namespace

void InitEncoderParams(ParameterSet& params, const EncoderConfig& config, std::mt19937_64& rng) {
  config.Validate();
  const std::size_t w = config.width;
  AddLinear(params, "enc.in", config.input_dim(), w, rng);
  params.Add("enc.pos", RandomMatrix(config.max_positions, w, 0.1, rng));
  for (std::size_t l = 0; l < config.layers; ++l) {
    AddNorm(params, LayerName(l, "ln1"), w);
    AddLinear(params, LayerName(l, "q"), config.layer_input_dim(), w, rng);
    AddLinear(params, LayerName(l, "k"), config.layer_input_dim(), w, rng);
    AddLinear(params, LayerName(l, "v"), config.layer_input_dim(), w, rng);
    AddLinear(params, LayerName(l, "o"), w, w, rng);
    AddNorm(params, LayerName(l, "ln2"), w);
    AddLinear(params, LayerName(l, "ff1"), w, config.ffn, rng);
    AddLinear(params, LayerName(l, "ff2"), config.ffn, w, rng);
  }
  AddNorm(params, "enc.out_ln", w);
}

Var EncoderGraph(ParameterBinder& binder, const EncoderConfig& config, Var stacked,
                 const ContextPlan& plan, std::optional<DomainId> domain, const Dropout* dropout) {
  config.Validate();
  CheckDomain(config, domain);
  Graph& g = binder.graph();
  const auto& in_shape = g.shape(stacked);
  if (in_shape.back() != config.input_dim() || in_shape.front() != plan.num_frames) {
    throw std::invalid_argument("EncoderGraph: input " + ShapeString(in_shape) +
                                " does not match plan T=" + std::to_string(plan.num_frames) +
                                " and input_dim=" + std::to_string(config.input_dim()));
  }
  const AttentionMask mask = BuildAttentionMask(plan);
  const std::vector<AttentionGroup> groups = GroupAttention(plan, mask);
  std::vector<Var> group_masks;
  std::vector<std::size_t> order;  // group-concatenated row -> original row
  for (const AttentionGroup& grp : groups) {
    group_masks.push_back(g.Constant(grp.additive));
    order.insert(order.end(), grp.queries.begin(), grp.queries.end());
  }
  std::vector<std::size_t> restore(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) restore[order[i]] = i;

  // Real rows then right-context copies, all embedded from their frame.
  Var x = g.Gather(stacked, mask.row_frame);
  x = EmbedFrames(binder, config, x, mask.row_frame);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const Projections p = ProjectLayerInput(binder, config, l, x, domain);
    std::vector<Var> parts;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      parts.push_back(Attend(g, config, g.Gather(p.q, groups[i].queries),
                             g.Gather(p.k, groups[i].keys), g.Gather(p.v, groups[i].keys),
                             group_masks[i]));
    }
    Var attended = parts.size() == 1 ? parts[0] : g.Concat(parts, 0);
    attended = g.Gather(attended, restore);
    x = FinishLayer(binder, l, x, attended, dropout);
  }
  x = g.Slice(x, 0, 0, plan.num_frames);
  return AffineNorm(binder, x, "enc.out_ln");
}

Tensor EncoderForward(const ParameterSet& params, const EncoderConfig& config,
                      const Tensor& stacked, const ContextPlan& plan,
                      std::optional<DomainId> domain) {
  Graph g;
  ParameterBinder pb(g, params);
  const Var out = EncoderGraph(pb, config, g.Constant(stacked), plan, domain, nullptr);
  g.Forward();
  return g.value(out);
}

StreamingEncoder::StreamingEncoder(const ParameterSet& params, const EncoderConfig& config,
                                   std::size_t base_segment, std::size_t center,
                                   std::size_t right_context, std::optional<std::size_t> left_cap,
                                   std::optional<DomainId> domain)
    : params_(params),
      config_(config),
      base_segment_(base_segment),
      center_(center),
      right_context_(right_context),
      left_cap_(left_cap),
      domain_(domain) {
  config_.Validate();
  CheckDomain(config_, domain_);
  if (center == 0 || center > base_segment) {
    throw std::invalid_argument("StreamingEncoder: need 0 < center <= base segment");
  }
  for (std::size_t l = 0; l < config_.layers; ++l) {
    keys_.push_back(Tensor::Matrix(0, config_.width));
    values_.push_back(Tensor::Matrix(0, config_.width));
  }
}

std::size_t StreamingEncoder::cached_frames() const { return next_frame_ - cache_begin_; }

Tensor StreamingEncoder::Step(std::size_t start_frame, const Tensor& frames,
                              std::size_t num_center) {
  if (finished_) throw std::logic_error("StreamingEncoder: utterance already finished");
  if (start_frame != next_frame_) {
    throw std::invalid_argument("StreamingEncoder: out-of-order chunk starting at frame " +
                                std::to_string(start_frame) + ", expected " +
                                std::to_string(next_frame_));
  }
  if (num_center == 0 || num_center > center_ || frames.rows() < num_center ||
      frames.rows() - num_center > right_context_) {
    throw std::invalid_argument("StreamingEncoder: chunk has " + std::to_string(frames.rows()) +
                                " rows for " + std::to_string(num_center) + " center frames");
  }
  if (frames.cols() != config_.input_dim()) {
    throw std::invalid_argument("StreamingEncoder: chunk width " + std::to_string(frames.cols()) +
                                " != input_dim " + std::to_string(config_.input_dim()));
  }
  const std::size_t valid_rows = frames.rows();
  const std::size_t rows = num_center + right_context_;
  if (num_center < center_) finished_ = true;

  Tensor padded = Tensor::Matrix(rows, config_.input_dim());
  std::copy(frames.data().begin(), frames.data().end(), padded.data().begin());

  const std::size_t left_begin = LeftBlockBegin(start_frame, base_segment_, center_, left_cap_);
  const std::size_t left_rows = start_frame - left_begin;
  const std::size_t skip = left_begin - cache_begin_;

  Graph g;
  ParameterBinder pb(g, params_);
  std::vector<std::size_t> row_frames(rows);
  for (std::size_t i = 0; i < rows; ++i) row_frames[i] = start_frame + i;
  Var x = EmbedFrames(pb, config_, g.Constant(std::move(padded)), row_frames);

  // Keys: cached history rows, then this chunk's rows; padding never attended.
  Tensor additive = Tensor::Matrix(rows, left_rows + rows);
  for (std::size_t q = 0; q < rows; ++q) {
    for (std::size_t k = left_rows + valid_rows; k < left_rows + rows; ++k) additive(q, k) = kLogZero;
  }
  const Var mask = g.Constant(std::move(additive));

  std::vector<Var> new_keys;
  std::vector<Var> new_values;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const Projections p = ProjectLayerInput(pb, config_, l, x, domain_);
    Var keys = p.k;
    Var values = p.v;
    if (left_rows > 0) {
      const Tensor& ck = keys_[l];
      const Tensor& cv = values_[l];
      Tensor hist_k = Tensor::Matrix(left_rows, config_.width);
      Tensor hist_v = Tensor::Matrix(left_rows, config_.width);
      std::copy(ck.data().begin() + skip * config_.width,
                ck.data().begin() + (skip + left_rows) * config_.width, hist_k.data().begin());
      std::copy(cv.data().begin() + skip * config_.width,
                cv.data().begin() + (skip + left_rows) * config_.width, hist_v.data().begin());
      const Var kparts[] = {g.Constant(std::move(hist_k)), p.k};
      const Var vparts[] = {g.Constant(std::move(hist_v)), p.v};
      keys = g.Concat(kparts, 0);
      values = g.Concat(vparts, 0);
    }
    new_keys.push_back(g.Slice(p.k, 0, 0, num_center));
    new_values.push_back(g.Slice(p.v, 0, 0, num_center));
    x = FinishLayer(pb, l, x, Attend(g, config_, p.q, keys, values, mask), nullptr);
  }
  const Var out = AffineNorm(pb, g.Slice(x, 0, 0, num_center), "enc.out_ln");
  g.Forward();

  // Keep only the history a later chunk can still reach.
  const std::size_t next = start_frame + num_center;
  const std::size_t keep_from =
      finished_ ? next : LeftBlockBegin(next, base_segment_, center_, left_cap_);
  const std::size_t drop = keep_from - cache_begin_;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    for (auto [cache, fresh] : {std::pair{&keys_[l], new_keys[l]}, {&values_[l], new_values[l]}}) {
      const Tensor& add = g.value(fresh);
      std::vector<double> merged = cache->storage();
      merged.insert(merged.end(), add.data().begin(), add.data().end());
      merged.erase(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(drop * config_.width));
      const std::size_t n_rows = merged.size() / config_.width;
      *cache = Tensor({n_rows, config_.width}, std::move(merged));
    }
  }
  cache_begin_ = keep_from;
  next_frame_ = next;
  return g.value(out);
}

}  // namespace flexit
