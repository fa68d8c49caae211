// flexit/encoder.h
//
// Block-processing self-attention encoder.
//
// An utterance of T (stacked) frames is cut into segments. Segment i owns a
// center block C_i, sees a left block L_i of earlier frames and a right block
// R_i of look-ahead frames. Context altering splits the base center block
// into [C_left, C_right]; C_left joins the left block and C_right becomes the
// new center, so centers shrink (lower latency) while every frame still sees
// the same span of history.
//
// Right-context frames are processed as per-segment copies: a copy attends to
// its own segment's L, C and R and its output is only consumed by that
// segment. This keeps each frame's receptive field bounded by the end of its
// segment plus the right context at every depth, which is what lets the
// chunk-by-chunk StreamingEncoder reproduce the full forward exactly.

#ifndef FLEXIT_ENCODER_H_
#define FLEXIT_ENCODER_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flexit/graph.h"
#include "flexit/params.h"
#include "flexit/tensor.h"

namespace flexit {

enum class DomainId { kVCmd = 0, kDictation = 1 };

inline constexpr std::size_t kNumDomains = 2;

const char* DomainName(DomainId d);            // "vcmd" / "dictation"
DomainId ParseDomain(const std::string& name);  // throws on unknown

// One-hot domain indicator: VCmd -> [1, 0], Dictation -> [0, 1].
struct DomainVector {
  std::vector<double> values;
  static DomainVector For(DomainId d);
};

struct EncoderConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t ffn = 128;
  double dropout = 0.1;
  double frame_ms = 60.0;        // after stacking
  std::size_t feature_dim = 8;   // raw 10 ms features
  std::size_t stack_factor = 6;
  std::size_t stack_stride = 6;
  bool domain_vector = false;
  std::size_t max_positions = 512;  // learned absolute positions, t mod this

  static EncoderConfig Toy() { return {}; }
  // The full-size shape (10 x 8 heads x 512, FFN 2048, 80-dim input).
  static EncoderConfig FullSize();

  std::size_t input_dim() const { return feature_dim * stack_factor; }
  std::size_t layer_input_dim() const { return width + (domain_vector ? kNumDomains : 0); }
  void Validate() const;
};

// Concatenates `factor` consecutive raw frames every `stride` frames.
// Output has ceil(N / stride) rows; windows running past the end are zero
// padded.
Tensor StackFeatures(const Tensor& raw, std::size_t factor, std::size_t stride);

struct Segment {
  std::size_t left_begin = 0;    // L = [left_begin, center_begin)
  std::size_t center_begin = 0;  // C = [center_begin, center_end)
  std::size_t center_end = 0;
  std::size_t right_end = 0;     // R = [center_end, right_end)

  std::size_t left_size() const { return center_begin - left_begin; }
  std::size_t center_size() const { return center_end - center_begin; }
  std::size_t right_size() const { return right_end - center_end; }
};

struct ContextPlan {
  std::size_t num_frames = 0;
  std::size_t base_segment = 0;  // frames
  std::size_t center = 0;        // domain center length, frames
  std::size_t right_context = 0;
  std::optional<std::size_t> left_cap;  // nullopt = unlimited
  std::vector<Segment> segments;

  // Frames a segment may look back: left_cap + (base_segment - center).
  std::optional<std::size_t> left_window() const;
  // Index of the segment whose center contains `frame`.
  std::size_t SegmentOf(std::size_t frame) const;
};

// First frame of the left block for a center starting at center_begin.
std::size_t LeftBlockBegin(std::size_t center_begin, std::size_t base_segment,
                           std::size_t center, std::optional<std::size_t> left_cap);

// Centers of `center` frames tile [0, T) (the last may be short). Each
// center's left block is its base left block (left_cap frames) plus the
// leading base_segment - center frames split off the base center.
ContextPlan PlanContexts(std::size_t num_frames, std::size_t base_segment, std::size_t center,
                         std::size_t right_context, std::optional<std::size_t> left_cap);

// Mask over the augmented row set: rows [0, T) are the frames themselves
// (computed as centers), followed by one copy of every right-context frame per
// segment. allowed(q, k) says whether query row q may attend key row k.
struct AttentionMask {
  std::size_t num_frames = 0;
  std::vector<std::size_t> row_frame;    // frame index of each row
  std::vector<std::size_t> row_segment;  // segment that owns each row
  std::vector<std::uint8_t> allowed;     // rows x rows

  std::size_t rows() const { return row_frame.size(); }
  bool Allows(std::size_t q, std::size_t k) const { return allowed[q * rows() + k] != 0; }
  // Frames visible to the query at real frame q (through real or copy rows).
  std::vector<std::size_t> AttendedFrames(std::size_t q) const;
  // T x T view: entry (q, f) = 1 iff frame f is visible to frame q.
  std::vector<std::uint8_t> FrameView() const;
};

AttentionMask BuildAttentionMask(const ContextPlan& plan);

// Appends the one-hot domain vector to every row. Throws if the encoder has
// the domain vector disabled.
Var InjectDomainVector(Graph& graph, Var block_inputs, const DomainVector& d,
                       const EncoderConfig& config);

// Parameter names are prefixed "enc.".
void InitEncoderParams(ParameterSet& params, const EncoderConfig& config, std::mt19937_64& rng);

// Training-time dropout; absent = evaluation.
struct Dropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

// Full masked forward as graph nodes; returns the (T x width) embedding.
// `stacked` is (T x input_dim).
Var EncoderGraph(ParameterBinder& binder, const EncoderConfig& config, Var stacked,
                 const ContextPlan& plan, std::optional<DomainId> domain,
                 const Dropout* dropout = nullptr);

// Evaluation-mode forward returning values.
Tensor EncoderForward(const ParameterSet& params, const EncoderConfig& config,
                      const Tensor& stacked, const ContextPlan& plan,
                      std::optional<DomainId> domain);

// Chunk-by-chunk evaluation with per-layer key/value history. Its outputs
// match EncoderForward over the same plan.
class StreamingEncoder {
 public:
  StreamingEncoder(const ParameterSet& params, const EncoderConfig& config,
                   std::size_t base_segment, std::size_t center, std::size_t right_context,
                   std::optional<std::size_t> left_cap, std::optional<DomainId> domain);

  // `frames` holds the chunk's center rows followed by up to right_context
  // look-ahead rows (fewer only at the end of the utterance; the rest are
  // zero padded and never attended). num_center < center marks the final
  // chunk. Returns the (num_center x width) embeddings.
  Tensor Step(std::size_t start_frame, const Tensor& frames, std::size_t num_center);

  std::size_t next_frame() const { return next_frame_; }
  bool finished() const { return finished_; }
  std::size_t center() const { return center_; }
  std::size_t right_context() const { return right_context_; }
  // Rows of history currently cached per layer.
  std::size_t cached_frames() const;

 private:
  const ParameterSet& params_;
  EncoderConfig config_;
  std::size_t base_segment_;
  std::size_t center_;
  std::size_t right_context_;
  std::optional<std::size_t> left_cap_;
  std::optional<DomainId> domain_;
  std::size_t next_frame_ = 0;
  bool finished_ = false;
  // Per layer: keys and values of cached frames [cache_begin_, next_frame_).
  std::size_t cache_begin_ = 0;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
};

}  // namespace flexit

#endif  // FLEXIT_ENCODER_H_
