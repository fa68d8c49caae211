// flexit/params.h
//
// Named parameter storage, gradient harvesting from a Graph, the Adam update
// and the checkpoint container.

#ifndef FLEXIT_PARAMS_H_
#define FLEXIT_PARAMS_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "flexit/graph.h"
#include "flexit/tensor.h"

namespace flexit {

// Ordered by name so iteration (and hence checkpoints and updates) is
// deterministic. References returned by at() stay valid for the set's life.
class ParameterSet {
 public:
  Tensor& Add(const std::string& name, Tensor init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::map<std::string, Tensor>& tensors() { return tensors_; }
  std::size_t TotalSize() const;

 private:
  std::map<std::string, Tensor> tensors_;
};

using GradientSet = std::map<std::string, Tensor>;

// Adds `grad` into `into[name]`, allocating on first use.
void Accumulate(GradientSet& into, const std::string& name, const Tensor& grad);
// into += from, name by name.
void Accumulate(GradientSet& into, const GradientSet& from);
void ScaleGradients(GradientSet& grads, double factor);
double GlobalNorm(const GradientSet& grads);

// Binds each parameter into a graph at most once.
class ParameterBinder {
 public:
  ParameterBinder(Graph& graph, const ParameterSet& params) : graph_(graph), params_(params) {}
  Var operator()(const std::string& name);
  // Adds the gradients of every bound parameter (after graph.Backward()).
  void AccumulateGradients(GradientSet& into) const;
  Graph& graph() { return graph_; }

 private:
  Graph& graph_;
  const ParameterSet& params_;
  std::map<std::string, Var> bound_;
};

struct AdamHyper {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::int64_t step = 0;
};

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One bias-corrected Adam update. Parameters absent from `grads` are treated
// as having a zero gradient. The whole step is rejected (nothing modified) if
// any gradient entry is NaN or infinite.
void AdamStep(ParameterSet& params, const GradientSet& grads, AdamState& state,
              const AdamHyper& hyper);

// Checkpoint: little-endian binary container.
//   "FLXTCKPT" | u32 version(=1)
//   u32 n_meta  | n_meta x (u32 len, key bytes, u32 len, value bytes)
//   u32 n_tensor| n_tensor x (u32 len, name bytes, u32 rank, rank x u64 dim,
//                             numel x f64 data)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  ParameterSet params;
};

void SaveCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

}  // namespace flexit

#endif  // FLEXIT_PARAMS_H_
