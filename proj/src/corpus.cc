// flexit/corpus.cc

#include "flexit/corpus.h"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace flexit {

namespace {

constexpr std::uint64_t kSignatureSeed = 0x5167'0F1E'C0DE'0001ULL;

struct DomainShape {
  int min_tokens, max_tokens;
};

DomainShape ShapeOf(DomainId d) {
  return d == DomainId::kVCmd ? DomainShape{2, 6} : DomainShape{10, 40};
}

}  // namespace

std::uint64_t MixSeed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

const Tensor& LabelSignatures() {
  static const Tensor table = [] {
    Tensor t = Tensor::Matrix(kNumLabels + 1, kFeatureDim);
    std::mt19937_64 rng(kSignatureSeed);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (std::size_t r = 1; r <= kNumLabels; ++r) {
      for (double& x : t.row(r)) x = n01(rng);
    }
    return t;
  }();
  return table;
}

Utterance GenerateUtterance(DomainId domain, std::uint64_t seed, const GeneratorOptions& options) {
  std::mt19937_64 rng(seed);
  const DomainShape shape = ShapeOf(domain);
  std::uniform_int_distribution<int> count(shape.min_tokens, shape.max_tokens);
  std::uniform_int_distribution<int> label(1, static_cast<int>(kNumLabels));
  std::uniform_int_distribution<int> duration(3, 8);
  std::uniform_int_distribution<int> silence(5, 15);

  Utterance u;
  u.domain = domain;
  const int n = count(rng);
  std::vector<int> frame_label;
  for (int i = 0; i < n; ++i) {
    int y = label(rng);
    // Adjacent repeats would be indistinguishable from one long token.
    while (!u.tokens.empty() && y == u.tokens.back()) y = label(rng);
    u.tokens.push_back(y);
    const int d = duration(rng);
    frame_label.insert(frame_label.end(), d, y);
    u.alignment.frames.push_back(static_cast<int>(frame_label.size()) - 1);
  }
  u.alignment.end_frame = u.alignment.frames.back();
  u.speech_end_ms = static_cast<double>(u.alignment.end_frame + 1) * kCorpusFrameMs;
  frame_label.insert(frame_label.end(), silence(rng), 0);

  const Tensor& sig = LabelSignatures();
  std::normal_distribution<double> noise(0.0, 1.0);
  u.features = Tensor::Matrix(frame_label.size() * kRawPerFrame, kFeatureDim);
  for (std::size_t f = 0; f < frame_label.size(); ++f) {
    auto s = sig.row(static_cast<std::size_t>(frame_label[f]));
    for (std::size_t k = 0; k < kRawPerFrame; ++k) {
      auto row = u.features.row(f * kRawPerFrame + k);
      for (std::size_t j = 0; j < kFeatureDim; ++j) {
        const double e = noise(rng);
        row[j] = s[j] + options.noise_sigma * e;
      }
    }
  }
  return u;
}

std::vector<Utterance> GenerateSplit(std::size_t per_domain, std::uint64_t seed,
                                     const std::string& prefix, const GeneratorOptions& options) {
  std::vector<Utterance> out;
  out.reserve(2 * per_domain);
  for (std::size_t i = 0; i < per_domain; ++i) {
    for (DomainId d : {DomainId::kVCmd, DomainId::kDictation}) {
      const std::uint64_t s = MixSeed(MixSeed(seed, static_cast<std::uint64_t>(d)), i);
      Utterance u = GenerateUtterance(d, s, options);
      u.id = prefix + "-" + DomainName(d) + "-" + std::to_string(i);
      out.push_back(std::move(u));
    }
  }
  return out;
}

Corpus GenerateCorpus(std::size_t train_per_domain, std::size_t eval_per_domain,
                      std::uint64_t seed, const GeneratorOptions& options) {
  Corpus c;
  c.train = GenerateSplit(train_per_domain, MixSeed(seed, 1), "train", options);
  c.eval = GenerateSplit(eval_per_domain, MixSeed(seed, 2), "eval", options);
  return c;
}

std::vector<Batch> MakeBatches(std::span<const Utterance> corpus, std::size_t batch_size,
                               std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("MakeBatches: batch_size must be >= 1");
  if (corpus.empty()) throw std::invalid_argument("MakeBatches: empty corpus");
  std::mt19937_64 rng(seed);
  std::vector<const Utterance*> by_domain[kNumDomains];
  for (const Utterance& u : corpus) by_domain[static_cast<int>(u.domain)].push_back(&u);

  std::vector<Batch> batches;
  for (std::size_t d = 0; d < kNumDomains; ++d) {
    auto& pool = by_domain[d];
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < pool.size(); i += batch_size) {
      Batch b;
      b.domain = static_cast<DomainId>(d);
      b.utterances.assign(pool.begin() + static_cast<std::ptrdiff_t>(i),
                          pool.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, pool.size())));
      batches.push_back(std::move(b));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);

  for (Batch& b : batches) {
    std::size_t max_rows = 0;
    for (const Utterance* u : b.utterances) max_rows = std::max(max_rows, u->features.rows());
    b.padded = Tensor({b.utterances.size(), max_rows, kFeatureDim});
    b.mask.assign(b.utterances.size(), std::vector<bool>(max_rows, false));
    for (std::size_t i = 0; i < b.utterances.size(); ++i) {
      const Tensor& f = b.utterances[i]->features;
      std::copy(f.data().begin(), f.data().end(),
                b.padded.storage().begin() + static_cast<std::ptrdiff_t>(i * max_rows * kFeatureDim));
      std::fill_n(b.mask[i].begin(), f.rows(), true);
    }
  }
  return batches;
}

void WriteSplit(const std::filesystem::path& dir, const std::string& split,
                std::span<const Utterance> utterances) {
  std::filesystem::create_directories(dir);
  std::ofstream meta(dir / (split + ".jsonl"), std::ios::binary);
  std::ofstream blob(dir / (split + ".bin"), std::ios::binary);
  if (!meta || !blob) throw std::runtime_error("cannot write corpus split " + split + " in " + dir.string());
  std::uint64_t offset = 0;
  for (const Utterance& u : utterances) {
    nlohmann::ordered_json j;
    j["id"] = u.id;
    j["domain"] = DomainName(u.domain);
    j["tokens"] = u.tokens;
    j["alignment"] = u.alignment.frames;
    j["speech_end_ms"] = u.speech_end_ms;
    j["rows"] = u.features.rows();
    j["offset"] = offset;
    meta << j.dump() << '\n';
    const auto data = u.features.data();
    blob.write(reinterpret_cast<const char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double)));
    offset += data.size();
  }
  if (!meta || !blob) throw std::runtime_error("short write for corpus split " + split);
}

std::vector<Utterance> ReadSplit(const std::filesystem::path& dir, const std::string& split) {
  std::ifstream meta(dir / (split + ".jsonl"));
  std::ifstream blob(dir / (split + ".bin"), std::ios::binary);
  if (!meta || !blob) throw std::runtime_error("missing corpus split " + split + " in " + dir.string());
  std::vector<Utterance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(meta, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Utterance u;
      u.id = j.at("id").get<std::string>();
      u.domain = ParseDomain(j.at("domain").get<std::string>());
      u.tokens = j.at("tokens").get<std::vector<int>>();
      u.alignment.frames = j.at("alignment").get<std::vector<int>>();
      if (u.alignment.frames.size() != u.tokens.size() || u.tokens.empty()) {
        throw std::runtime_error("token/alignment count mismatch");
      }
      u.alignment.end_frame = u.alignment.frames.back();
      u.speech_end_ms = j.at("speech_end_ms").get<double>();
      const auto rows = j.at("rows").get<std::size_t>();
      const auto offset = j.at("offset").get<std::uint64_t>();
      u.features = Tensor::Matrix(rows, kFeatureDim);
      blob.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
      blob.read(reinterpret_cast<char*>(u.features.storage().data()),
                static_cast<std::streamsize>(rows * kFeatureDim * sizeof(double)));
      if (!blob) throw std::runtime_error("feature blob too short");
      out.push_back(std::move(u));
    } catch (const std::exception& e) {
      throw std::runtime_error(split + ".jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void WriteCorpus(const std::filesystem::path& dir, const Corpus& corpus) {
  WriteSplit(dir, "train", corpus.train);
  WriteSplit(dir, "eval", corpus.eval);
}

Corpus ReadCorpus(const std::filesystem::path& dir) {
  return {ReadSplit(dir, "train"), ReadSplit(dir, "eval")};
}

}  // namespace flexit
