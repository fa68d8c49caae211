// flexit/lattice_loss.cc

#include "flexit/lattice_loss.h"

#include <algorithm>
#include <cmath>
#include <functional>

namespace flexit {

namespace {

double LogAdd(double a, double b) {
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

void CheckInputs(const LatticeLogits& logits, std::span<const int> labels,
                 const RestrictionBand* band) {
  if (logits.frames == 0 || logits.vocab == 0) {
    throw std::invalid_argument("rnnt loss: empty lattice");
  }
  if (logits.values.size() != logits.frames * (logits.labels + 1) * logits.vocab) {
    throw std::invalid_argument("rnnt loss: value count does not match T x (U+1) x V");
  }
  if (labels.size() != logits.labels) {
    throw std::invalid_argument("rnnt loss: " + std::to_string(labels.size()) +
                                " labels for a lattice with U=" + std::to_string(logits.labels));
  }
  for (int y : labels) {
    if (y == kBlank) throw std::invalid_argument("rnnt loss: labels contain blank");
    if (y < 0 || static_cast<std::size_t>(y) >= logits.vocab) {
      throw std::invalid_argument("rnnt loss: label " + std::to_string(y) + " outside vocabulary");
    }
  }
  if (band && band->size() < labels.size()) {
    throw std::invalid_argument("rnnt loss: band covers " + std::to_string(band->size()) +
                                " labels, need " + std::to_string(labels.size()));
  }
}

struct Lattice {
  std::size_t T, U;
  std::vector<double> alpha, beta;
  double log_likelihood;
  double& a(std::size_t t, std::size_t u) { return alpha[t * (U + 1) + u]; }
  double& b(std::size_t t, std::size_t u) { return beta[t * (U + 1) + u]; }
};

Lattice RunForwardBackward(const LatticeLogits& lp, std::span<const int> labels,
                           const RestrictionBand* band, bool with_beta) {
  const std::size_t T = lp.frames;
  const std::size_t U = lp.labels;
  Lattice L{T, U, std::vector<double>(T * (U + 1), kLogZero), {}, 0.0};
  auto allowed = [&](std::size_t label_index, std::size_t t) {
    return band == nullptr || band->Allows(label_index, t);
  };
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) {
        L.a(0, 0) = 0.0;
        continue;
      }
      double acc = kLogZero;
      if (t > 0) acc = L.a(t - 1, u) + lp.at(t - 1, u, kBlank);
      if (u > 0) {
        const double emit = allowed(u - 1, t)
                                ? L.a(t, u - 1) + lp.at(t, u - 1, static_cast<std::size_t>(labels[u - 1]))
                                : kLogZero;
        acc = LogAdd(acc, emit);
      }
      L.a(t, u) = acc;
    }
  }
  L.log_likelihood = L.a(T - 1, U) + lp.at(T - 1, U, kBlank);
  if (!with_beta) return L;

  L.beta.assign(T * (U + 1), kLogZero);
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t u = U + 1; u-- > 0;) {
      if (t == T - 1 && u == U) {
        L.b(t, u) = lp.at(t, u, kBlank);
        continue;
      }
      double acc = kLogZero;
      if (t + 1 < T) acc = L.b(t + 1, u) + lp.at(t, u, kBlank);
      if (u < U) {
        const double emit = allowed(u, t)
                                ? L.b(t, u + 1) + lp.at(t, u, static_cast<std::size_t>(labels[u]))
                                : kLogZero;
        acc = LogAdd(acc, emit);
      }
      L.b(t, u) = acc;
    }
  }
  return L;
}

bool Infeasible(double log_likelihood) { return log_likelihood < kLogZero / 2; }

}  // namespace

LatticeLogits LatticeLogits::FromTensor(const Tensor& log_probs, std::size_t frames,
                                        std::size_t labels) {
  if (log_probs.rows() != frames * (labels + 1)) {
    throw std::invalid_argument("LatticeLogits: tensor has " + std::to_string(log_probs.rows()) +
                                " rows, expected T*(U+1)=" + std::to_string(frames * (labels + 1)));
  }
  LatticeLogits out;
  out.frames = frames;
  out.labels = labels;
  out.vocab = log_probs.cols();
  out.values = log_probs.storage();
  return out;
}

double LatticeLogits::MaxNormalizationError() const {
  double worst = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t u = 0; u <= labels; ++u) {
      double s = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) s += std::exp(at(t, u, v));
      worst = std::max(worst, std::abs(1.0 - s));
    }
  }
  return worst;
}

int MsToFrames(double ms, double frame_ms) {
  if (!(frame_ms > 0)) throw std::invalid_argument("MsToFrames: frame_ms must be positive");
  if (std::isinf(ms)) return ms > 0 ? (1 << 28) : -(1 << 28);
  return static_cast<int>(std::floor(ms / frame_ms + 0.5));
}

RestrictionBand BuildBand(const Alignment& alignment, double left_ms, double right_ms,
                          double frame_ms, std::size_t num_frames) {
  if (!(frame_ms > 0)) throw std::invalid_argument("BuildBand: frame_ms must be positive");
  if (num_frames == 0) throw std::invalid_argument("BuildBand: zero frames");
  for (std::size_t i = 1; i < alignment.frames.size(); ++i) {
    if (alignment.frames[i] < alignment.frames[i - 1]) {
      throw std::invalid_argument("BuildBand: alignment decreases at label " + std::to_string(i));
    }
  }
  const int left = MsToFrames(left_ms, frame_ms);
  const int right = MsToFrames(right_ms, frame_ms);
  const long long last = static_cast<long long>(num_frames) - 1;
  auto clamp = [&](long long f) { return static_cast<int>(std::clamp<long long>(f, 0, last)); };
  RestrictionBand band;
  band.left_ms = left_ms;
  band.right_ms = right_ms;
  band.frame_ms = frame_ms;
  for (int a : alignment.frames) {
    band.lo.push_back(clamp(static_cast<long long>(a) - left));
    band.hi.push_back(clamp(static_cast<long long>(a) + right));
  }
  return band;
}

std::optional<std::string> FindBandDefect(const RestrictionBand& band, std::size_t num_labels,
                                          std::size_t num_frames) {
  if (band.size() < num_labels) {
    return "band covers " + std::to_string(band.size()) + " of " + std::to_string(num_labels) +
           " labels";
  }
  // Labels are emitted in order at non-decreasing frames; track the earliest
  // frame label u can be emitted at.
  long long earliest = 0;
  const long long last = static_cast<long long>(num_frames) - 1;
  for (std::size_t u = 0; u < num_labels; ++u) {
    const long long lo = std::max<long long>(band.lo[u], 0);
    const long long hi = std::min<long long>(band.hi[u], last);
    if (lo > hi) return "label " + std::to_string(u + 1) + " has an empty interval";
    earliest = std::max(earliest, lo);
    if (earliest > hi) {
      return "label " + std::to_string(u + 1) + " cannot be emitted after label " +
             std::to_string(u) + " within its interval";
    }
  }
  return std::nullopt;
}

double RnntLoss(const LatticeLogits& logits, std::span<const int> labels,
                const RestrictionBand* band) {
  CheckInputs(logits, labels, band);
  const Lattice L = RunForwardBackward(logits, labels, band, false);
  if (Infeasible(L.log_likelihood)) return std::numeric_limits<double>::infinity();
  return -L.log_likelihood;
}

LossAndGradient RnntLossGrad(const LatticeLogits& logits, std::span<const int> labels,
                             const RestrictionBand* band) {
  CheckInputs(logits, labels, band);
  if (band) {
    if (auto defect = FindBandDefect(*band, labels.size(), logits.frames)) {
      throw InfeasibleLatticeError("rnnt loss gradient: " + *defect);
    }
  }
  Lattice L = RunForwardBackward(logits, labels, band, true);
  if (Infeasible(L.log_likelihood)) {
    throw InfeasibleLatticeError("rnnt loss gradient: no lattice path survives the band");
  }
  const std::size_t T = logits.frames;
  const std::size_t U = logits.labels;
  const double ll = L.log_likelihood;
  LossAndGradient out{-ll, std::vector<double>(logits.values.size(), 0.0)};
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t u = 0; u <= U; ++u) {
      const double a = L.a(t, u);
      if (t + 1 < T || u == U) {
        const double next = (t + 1 < T) ? L.b(t + 1, u) : 0.0;
        const double occ = a + logits.at(t, u, kBlank) + next - ll;
        out.gradient[logits.index(t, u, kBlank)] = -std::exp(occ);
      }
      if (u < U && (band == nullptr || band->Allows(u, t))) {
        const auto y = static_cast<std::size_t>(labels[u]);
        const double occ = a + logits.at(t, u, y) + L.b(t, u + 1) - ll;
        out.gradient[logits.index(t, u, y)] = -std::exp(occ);
      }
    }
  }
  return out;
}

double BruteForceLoss(const LatticeLogits& logits, std::span<const int> labels,
                      const RestrictionBand* band) {
  CheckInputs(logits, labels, band);
  const std::size_t T = logits.frames;
  const std::size_t U = logits.labels;
  if (T + U > kBruteForceMaxSteps) {
    throw std::invalid_argument("BruteForceLoss: T+U=" + std::to_string(T + U) + " exceeds " +
                                std::to_string(kBruteForceMaxSteps));
  }
  double total = 0.0;
  // Depth-first over move sequences; probabilities multiplied in linear space.
  std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t t, std::size_t u,
                                                                   double prob) {
    if (t == T - 1 && u == U) {
      total += prob * std::exp(logits.at(t, u, kBlank));
      return;
    }
    if (u < U && (band == nullptr || band->Allows(u, t))) {
      walk(t, u + 1, prob * std::exp(logits.at(t, u, static_cast<std::size_t>(labels[u]))));
    }
    if (t + 1 < T) walk(t + 1, u, prob * std::exp(logits.at(t, u, kBlank)));
  };
  walk(0, 0, 1.0);
  if (total <= 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(total);
}

}  // namespace flexit
