#pragma once

// Preference-optimization objectives on sequence log-probabilities.
//
// Sequence log-probs are sums over target tokens. Every log sigma(z) is
// evaluated as -softplus(-z) so losses stay finite for large margins.

#include <functional>
#include <span>
#include <vector>

#include "chemalign/data.hpp"
#include "chemalign/numerics.hpp"
#include "chemalign/policy.hpp"

namespace chemalign::losses {

struct LossConfig {
  double beta = 0.1;
  double lambda_p = 1.0;
  double lambda_d = 1.0;

  // Throws ConfigError.
  void validate() const;
};

// Encoded (x, y) pair; target ends with EOS.
struct SeqExample {
  std::vector<int> prompt;
  std::vector<int> target;
};

struct TripleExample {
  std::vector<int> prompt;
  std::vector<int> preferred;
  std::vector<int> dispreferred;

  bool degenerate() const { return preferred == dispreferred; }
};

struct LabeledExample {
  std::vector<int> prompt;
  std::vector<int> output;
  data::Label label = data::Label::kPreferred;
};

// ---- scalar forms ---------------------------------------------------------------------

// sigma(r_w - r_l). Throws NumericError on non-finite input.
double bt_preference_prob(double r_w, double r_l);
// -log sigma(r_w - r_l).
double reward_pair_loss(double r_w, double r_l);
// Logistic value around the reference point: sigma(r - z) for preferred
// outputs, sigma(z - r) for dispreferred ones.
double kto_value(double r, double z_ref, data::Label label);

// mean(rewards) - beta * mean_i sum_t KL(pi(.|x_i, y_<t) || ref(.|x_i, y_<t)).
double rlhf_objective_estimate(const policy::PolicyParams& policy, const policy::PolicyParams& ref,
                               std::span<const SeqExample> batch, std::span<const double> rewards,
                               double beta);

// ---- differentiable losses --------------------------------------------------------------

// mean_i -log pi(y_i | x_i)
Var sft_loss(const policy::BoundParams& policy, std::span<const SeqExample> batch);

// Frozen reference log-probs for a batch of triples.
struct ReferenceScores {
  std::vector<double> preferred;
  std::vector<double> dispreferred;
};

ReferenceScores reference_scores(const policy::PolicyParams& ref,
                                 std::span<const TripleExample> batch);

// mean_i -log sigma(beta * [(pi_w - ref_w) - (pi_l - ref_l)]). `ref` must be
// non-null; it contributes values only.
Var dpo_loss(const policy::BoundParams& policy, const policy::PolicyParams* ref,
             std::span<const TripleExample> batch, const LossConfig& cfg);
// Same loss with precomputed reference scores.
Var dpo_loss(const policy::BoundParams& policy, const ReferenceScores& ref,
             std::span<const TripleExample> batch, const LossConfig& cfg);

struct CpoTerms {
  Var total;
  Var prefer;  // mean -log sigma(beta * (pi_w - pi_l))
  Var nll;     // mean -log pi_w
};

CpoTerms cpo_loss(const policy::BoundParams& policy, std::span<const TripleExample> batch,
                  const LossConfig& cfg);

struct KtoBatchState {
  double z_ref = 0.0;           // detached
  std::vector<double> rewards;  // values of reward_vars
  std::vector<Var> reward_vars; // beta * (pi - ref), with gradient
};

// z_ref = max(0, beta * mean_i [pi(y_{i+1} | x_i) - ref(y_{i+1} | x_i)]),
// indices mod n. Throws ContractError for batches smaller than two.
KtoBatchState kto_zref(const policy::BoundParams& policy, const policy::PolicyParams* ref,
                       std::span<const LabeledExample> batch, const LossConfig& cfg);

// mean_i w(y_i) * (1 - v(r_i, z_ref)), z_ref constant in the backward pass.
Var kto_loss(const policy::BoundParams& policy, const policy::PolicyParams* ref,
             std::span<const LabeledExample> batch, const LossConfig& cfg);
// Loss from an already computed batch state.
Var kto_loss(const KtoBatchState& state, std::span<const LabeledExample> batch, const LossConfig& cfg);
// Same loss around a caller-supplied reference point.
Var kto_loss(const policy::BoundParams& policy, const policy::PolicyParams* ref,
             std::span<const LabeledExample> batch, const LossConfig& cfg, double z_ref);

// ---- value-function properties ------------------------------------------------------------

struct HaloReport {
  bool monotone = false;
  bool concave = false;
};

// Sampled check that v is non-decreasing and concave on a strictly increasing
// positive grid of at least three points. Throws ContractError on a bad grid.
HaloReport halo_value_check(const std::function<double(double)>& v, std::span<const double> grid);

}  // namespace chemalign::losses
