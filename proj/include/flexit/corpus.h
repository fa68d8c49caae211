// flexit/corpus.h
//
// Two-domain synthetic corpus with exact alignments. Each of the 16 labels
// has a fixed 8-dim signature; a token holds its signature for 3-8 frames of
// 60 ms (six 10 ms feature rows per frame) under Gaussian noise, and every
// utterance ends in 5-15 frames of silence (the all-zero signature).

#ifndef FLEXIT_CORPUS_H_
#define FLEXIT_CORPUS_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flexit/encoder.h"
#include "flexit/lattice_loss.h"
#include "flexit/tensor.h"

namespace flexit {

inline constexpr std::size_t kNumLabels = 16;      // ids 1..16, 0 is blank
inline constexpr std::size_t kFeatureDim = 8;
inline constexpr std::size_t kRawPerFrame = 6;     // 10 ms rows per 60 ms frame
inline constexpr double kCorpusFrameMs = 60.0;

struct GeneratorOptions {
  double noise_sigma = 0.1;
};

struct Utterance {
  std::string id;
  DomainId domain = DomainId::kVCmd;
  std::vector<int> tokens;
  Tensor features;      // (6 * frames) x 8, 10 ms rows
  Alignment alignment;  // last 60 ms frame of each token
  double speech_end_ms = 0.0;

  std::size_t num_frames() const { return features.rows() / kRawPerFrame; }
  double duration_ms() const { return static_cast<double>(num_frames()) * kCorpusFrameMs; }
};

// (kNumLabels + 1) x kFeatureDim; row 0 (silence) is zero.
const Tensor& LabelSignatures();

Utterance GenerateUtterance(DomainId domain, std::uint64_t seed,
                            const GeneratorOptions& options = {});

// `per_domain` utterances of each domain, interleaved VCmd/Dictation, ids
// "<prefix>-<domain>-<index>".
std::vector<Utterance> GenerateSplit(std::size_t per_domain, std::uint64_t seed,
                                     const std::string& prefix,
                                     const GeneratorOptions& options = {});

struct Corpus {
  std::vector<Utterance> train;
  std::vector<Utterance> eval;
};

Corpus GenerateCorpus(std::size_t train_per_domain, std::size_t eval_per_domain,
                      std::uint64_t seed, const GeneratorOptions& options = {});

struct Batch {
  DomainId domain = DomainId::kVCmd;
  std::vector<const Utterance*> utterances;
  Tensor padded;                           // B x max_rows x 8, zero padded
  std::vector<std::vector<bool>> mask;     // [b][row] true on real rows
};

// Domain-pure batches covering every utterance once, shuffled by `seed`.
std::vector<Batch> MakeBatches(std::span<const Utterance> corpus, std::size_t batch_size,
                               std::uint64_t seed);

// Export: DIR/<split>.jsonl holds one record per utterance
//   {"id","domain","tokens","alignment","speech_end_ms","rows","offset"}
// where `offset` counts doubles into DIR/<split>.bin, a flat little-endian
// float64 array of the 10 ms rows (8 values per row).
void WriteSplit(const std::filesystem::path& dir, const std::string& split,
                std::span<const Utterance> utterances);
std::vector<Utterance> ReadSplit(const std::filesystem::path& dir, const std::string& split);

void WriteCorpus(const std::filesystem::path& dir, const Corpus& corpus);  // train + eval
Corpus ReadCorpus(const std::filesystem::path& dir);

// SplitMix64 finaliser, used to derive independent seeds.
std::uint64_t MixSeed(std::uint64_t a, std::uint64_t b);

}  // namespace flexit

#endif  // FLEXIT_CORPUS_H_
