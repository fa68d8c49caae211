// flexit/lattice_loss.h
//
// Transducer negative log-likelihood over the T x (U+1) lattice, with
// optional per-token alignment-restriction bands.
//
// A lattice state (t, u) means "u labels emitted, currently at frame t".
// From (t, u) a blank moves to (t+1, u) and label y_{u+1} moves to (t, u+1).
// Every path ends with the blank out of (T-1, U). With a band, label u+1 may
// only be emitted at frames lo[u] <= t <= hi[u]; blanks are never restricted.

#ifndef FLEXIT_LATTICE_LOSS_H_
#define FLEXIT_LATTICE_LOSS_H_

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flexit/tensor.h"

namespace flexit {

inline constexpr int kBlank = 0;

// Stand-in for log(0) inside the dynamic programme. Finite, so sums of a few
// of them stay far below any real log-probability without producing NaN.
inline constexpr double kLogZero = -1e30;

inline constexpr double kUnboundedMs = std::numeric_limits<double>::infinity();

// Log-probabilities indexed (t, u, v), v over the vocabulary incl. blank.
struct LatticeLogits {
  std::size_t frames = 0;  // T
  std::size_t labels = 0;  // U
  std::size_t vocab = 0;   // V
  std::vector<double> values;

  LatticeLogits() = default;
  LatticeLogits(std::size_t t, std::size_t u, std::size_t v, double fill = 0.0)
      : frames(t), labels(u), vocab(v), values(t * (u + 1) * v, fill) {}

  // rows = T * (U + 1) in (t-major, u-minor) order, cols = V.
  static LatticeLogits FromTensor(const Tensor& log_probs, std::size_t frames,
                                  std::size_t labels);

  std::size_t index(std::size_t t, std::size_t u, std::size_t v) const {
    return (t * (labels + 1) + u) * vocab + v;
  }
  double& at(std::size_t t, std::size_t u, std::size_t v) { return values[index(t, u, v)]; }
  double at(std::size_t t, std::size_t u, std::size_t v) const { return values[index(t, u, v)]; }

  // Largest |1 - sum_v exp(values(t,u,v))| over all (t, u).
  double MaxNormalizationError() const;
};

// Reference emission frame of every label (frame where its audio ends).
struct Alignment {
  std::vector<int> frames;
  int end_frame = 0;  // last speech frame
};

struct RestrictionBand {
  std::vector<int> lo;  // lo[u]: first frame label u+1 may be emitted at
  std::vector<int> hi;  // hi[u]: last frame
  double left_ms = kUnboundedMs;
  double right_ms = kUnboundedMs;
  double frame_ms = 60.0;

  std::size_t size() const { return lo.size(); }
  bool Allows(std::size_t label_index, std::size_t t) const {
    const auto ti = static_cast<long long>(t);
    return lo[label_index] <= ti && ti <= hi[label_index];
  }
};

// ms -> frames, rounding half up. Infinite input maps to a count larger than
// any utterance.
int MsToFrames(double ms, double frame_ms);

// lo_u = clamp(a_u - frames(left_ms)), hi_u = clamp(a_u + frames(right_ms))
// into [0, num_frames - 1]. Throws on a decreasing alignment.
RestrictionBand BuildBand(const Alignment& alignment, double left_ms, double right_ms,
                          double frame_ms, std::size_t num_frames);

// Describes why `band` admits no path for `num_labels` labels over
// `num_frames` frames (empty interval, intervals that cannot be visited in
// order, too few intervals), or nullopt if at least one path survives.
std::optional<std::string> FindBandDefect(const RestrictionBand& band, std::size_t num_labels,
                                          std::size_t num_frames);

class InfeasibleLatticeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// -log P(labels | logits). Returns +infinity when the band excludes every
// path. Throws std::invalid_argument on malformed input.
double RnntLoss(const LatticeLogits& logits, std::span<const int> labels,
                const RestrictionBand* band = nullptr);

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;  // same layout as LatticeLogits::values
};

// Loss and its gradient w.r.t. every lattice log-probability, from the
// forward (alpha) and backward (beta) variables. Entries of banned or
// unreachable transitions are exactly zero. Throws InfeasibleLatticeError
// when no path survives the band.
LossAndGradient RnntLossGrad(const LatticeLogits& logits, std::span<const int> labels,
                             const RestrictionBand* band = nullptr);

// Testing oracle: explicit enumeration of every monotone path.
inline constexpr std::size_t kBruteForceMaxSteps = 12;
double BruteForceLoss(const LatticeLogits& logits, std::span<const int> labels,
                      const RestrictionBand* band = nullptr);

}  // namespace flexit

#endif  // FLEXIT_LATTICE_LOSS_H_
