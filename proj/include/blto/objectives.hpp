#pragma once

#include <torch/torch.h>

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>

#include "blto/augment.hpp"
#include "blto/models.hpp"

namespace blto {

enum class ClMethod { kSimSiam, kSimClr, kByol };

std::string to_string(ClMethod m);
ClMethod cl_method_from_string(const std::string& s);

struct ClObjectiveConfig {
  ClMethod method = ClMethod::kSimSiam;
  double temperature = 0.2;     // SimCLR
  double ema_momentum = 0.99;   // BYOL
  bool simsiam_halved = false;  // -(S(p1,z2) + S(p2,z1)) / 2 instead of the sum

  void validate() const;
};

/// Row-wise cosine similarity of [B, d] batches. A pair involving a zero
/// vector yields 0 and increments degenerate_cosine_count().
torch::Tensor cosine_similarity(const torch::Tensor& a, const torch::Tensor& b);
uint64_t degenerate_cosine_count();

/// -[mean S(p1, z2) + mean S(p2, z1)] from precomputed heads. z must already
/// be detached.
torch::Tensor simsiam_loss(const torch::Tensor& p1, const torch::Tensor& p2, const torch::Tensor& z1,
                           const torch::Tensor& z2, bool halved = false);

/// SimSiam loss of a stack on a view pair.
torch::Tensor simsiam_loss(const EncoderStack& stack, const ViewPair& views, bool halved = false);

/// NT-Xent over the 2B views; row i of `view1` is the positive of row i of
/// `view2`. Requires B >= 2.
torch::Tensor infonce_loss(const torch::Tensor& view1, const torch::Tensor& view2, double temperature);

/// mean(2 - 2 cos(p, z)).
torch::Tensor byol_pair_loss(const torch::Tensor& p, const torch::Tensor& z);

/// Symmetrized BYOL loss: average of the two view directions.
torch::Tensor byol_loss(const torch::Tensor& p1, const torch::Tensor& p2, const torch::Tensor& z1,
                        const torch::Tensor& z2);

/// target <- m * target + (1 - m) * online, in place.
void ema_update(const std::vector<torch::Tensor>& target, const std::vector<torch::Tensor>& online, double m);

/// E ||u - v||^2 over positive pairs of L2-normalized rows.
torch::Tensor alignment_loss(const torch::Tensor& u, const torch::Tensor& v);

/// log E exp(-t ||u - v||^2) over distinct pairs of L2-normalized rows.
torch::Tensor uniformity_loss(const torch::Tensor& x, double t = 2.0);

/// Online stack plus, for BYOL, its EMA target (encoder + projector).
class ContrastiveLearner {
 public:
  ContrastiveLearner(EncoderStack stack, ClObjectiveConfig cfg);

  /// Loss on a view pair; builds the graph through the online stack.
  torch::Tensor loss(const ViewPair& views);

  /// Post-optimizer hook (BYOL target update).
  void after_step();

  /// Parameters updated by the optimizer.
  std::vector<torch::Tensor> trainable_parameters() const;

  EncoderStack& stack() { return stack_; }
  const EncoderStack& stack() const { return stack_; }
  const ClObjectiveConfig& config() const { return cfg_; }

 private:
  EncoderStack stack_;
  ClObjectiveConfig cfg_;
  std::optional<EncoderStack> target_;
};

}  // namespace blto
