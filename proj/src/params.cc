// flexit/params.cc

#include "flexit/params.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace flexit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

Tensor& ParameterSet::Add(const std::string& name, Tensor init) {
  auto [it, inserted] = tensors_.emplace(name, std::move(init));
  if (!inserted) throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("ParameterSet: no parameter " + name);
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("ParameterSet: no parameter " + name);
  return it->second;
}

std::size_t ParameterSet::TotalSize() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

void Accumulate(GradientSet& into, const std::string& name, const Tensor& grad) {
  auto it = into.find(name);
  if (it == into.end()) {
    into.emplace(name, grad);
    return;
  }
  if (!it->second.SameShape(grad)) {
    throw std::invalid_argument("Accumulate: shape mismatch for " + name);
  }
  for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += grad[i];
}

void Accumulate(GradientSet& into, const GradientSet& from) {
  for (const auto& [name, g] : from) Accumulate(into, name, g);
}

void ScaleGradients(GradientSet& grads, double factor) {
  for (auto& [_, g] : grads) {
    for (double& x : g.storage()) x *= factor;
  }
}

double GlobalNorm(const GradientSet& grads) {
  double sum = 0.0;
  for (const auto& [_, g] : grads) {
    for (double x : g.storage()) sum += x * x;
  }
  return std::sqrt(sum);
}

Var ParameterBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = graph_.Parameter(params_.at(name), name);
  bound_.emplace(name, v);
  return v;
}

void ParameterBinder::AccumulateGradients(GradientSet& into) const {
  for (const auto& [name, v] : bound_) {
    if (const Tensor* g = graph_.grad(v)) Accumulate(into, name, *g);
  }
}

void AdamStep(ParameterSet& params, const GradientSet& grads, AdamState& state,
              const AdamHyper& hyper) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) throw std::invalid_argument("AdamStep: unknown parameter " + name);
    if (!g.SameShape(params.at(name))) {
      throw std::invalid_argument("AdamStep: gradient shape mismatch for " + name);
    }
    if (!g.AllFinite()) throw NonFiniteGradientError("AdamStep: non-finite gradient for " + name);
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.tensors()) {
    auto [m_it, m_new] = state.first_moment.try_emplace(name, p.shape());
    auto [v_it, v_new] = state.second_moment.try_emplace(name, p.shape());
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    auto g_it = grads.find(name);
    const Tensor* g = g_it == grads.end() ? nullptr : &g_it->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
  }
}

namespace {

constexpr char kMagic[8] = {'F', 'L', 'X', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void Put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void PutString(std::ofstream& os, const std::string& s) {
  Put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T Get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string GetString(std::ifstream& is) {
  const auto n = Get<std::uint32_t>(is);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void SaveCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  Put<std::uint32_t>(os, kCheckpointVersion);
  Put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    PutString(os, k);
    PutString(os, v);
  }
  const auto& tensors = ckpt.params.tensors();
  Put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    PutString(os, name);
    Put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) Put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const auto version = Get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto n_meta = Get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = GetString(is);
    ckpt.metadata[k] = GetString(is);
  }
  const auto n_tensor = Get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_tensor; ++i) {
    std::string name = GetString(is);
    const auto rank = Get<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw std::runtime_error("checkpoint: bad rank for " + name);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(Get<std::uint64_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
    ckpt.params.Add(name, std::move(t));
  }
  return ckpt;
}

}  // namespace flexit
