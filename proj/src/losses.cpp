#include "chemalign/losses.hpp"

#include <cmath>

namespace chemalign::losses {

using policy::BoundParams;
using policy::PolicyParams;

void LossConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be positive");
  if (!(lambda_p > 0.0) || !std::isfinite(lambda_p)) throw ConfigError("lambda_p must be positive");
  if (!(lambda_d > 0.0) || !std::isfinite(lambda_d)) throw ConfigError("lambda_d must be positive");
}

namespace {

void require_finite_inputs(std::initializer_list<double> xs, const char* what) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
  }
}

GradTape& tape_of(const BoundParams& bp) {
  if (bp.vars.empty() || bp.vars.front().tape() == nullptr) {
    throw ContractError("policy parameters are not bound to a tape");
  }
  return *bp.vars.front().tape();
}

Var column(GradTape& tape, const std::vector<double>& values) {
  Matrix m(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) m(static_cast<Index>(i), 0) = values[i];
  return tape.constant(std::move(m));
}

Var stack(const std::vector<Var>& parts) {
  return parts.size() == 1 ? parts.front() : concat_rows(parts);
}

template <typename T>
void require_batch(std::span<const T> batch, const char* what) {
  if (batch.empty()) throw ContractError(std::string(what) + ": empty batch");
}

}  // namespace

double bt_preference_prob(double r_w, double r_l) {
  require_finite_inputs({r_w, r_l}, "bt_preference_prob");
  return sigmoid(r_w - r_l);
}

double reward_pair_loss(double r_w, double r_l) {
  require_finite_inputs({r_w, r_l}, "reward_pair_loss");
  return softplus(-(r_w - r_l));
}

double kto_value(double r, double z_ref, data::Label label) {
  require_finite_inputs({r, z_ref}, "kto_value");
  return label == data::Label::kPreferred ? sigmoid(r - z_ref) : sigmoid(z_ref - r);
}

double rlhf_objective_estimate(const PolicyParams& policy, const PolicyParams& ref,
                               std::span<const SeqExample> batch, std::span<const double> rewards,
                               double beta) {
  if (batch.size() != rewards.size()) {
    throw ContractError("rlhf_objective_estimate: " + std::to_string(rewards.size()) +
                        " rewards for " + std::to_string(batch.size()) + " examples");
  }
  require_batch(batch, "rlhf_objective_estimate");
  if (!(policy.vocab == ref.vocab)) throw ContractError("policy and reference vocabularies differ");
  double reward_sum = 0.0;
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    reward_sum += rewards[i];
    const Matrix lp = policy::target_logprob_rows(policy, batch[i].prompt, batch[i].target);
    const Matrix lq = policy::target_logprob_rows(ref, batch[i].prompt, batch[i].target);
    kl_sum += (lp.array().exp() * (lp - lq).array()).sum();
  }
  const double n = static_cast<double>(batch.size());
  return reward_sum / n - beta * kl_sum / n;
}

Var sft_loss(const BoundParams& policy, std::span<const SeqExample> batch) {
  require_batch(batch, "sft_loss");
  std::vector<Var> totals;
  totals.reserve(batch.size());
  for (const auto& ex : batch) totals.push_back(policy::score_sequence(policy, ex.prompt, ex.target).total);
  return -mean(stack(totals));
}

ReferenceScores reference_scores(const PolicyParams& ref, std::span<const TripleExample> batch) {
  ReferenceScores out;
  out.preferred.reserve(batch.size());
  out.dispreferred.reserve(batch.size());
  for (const auto& t : batch) {
    out.preferred.push_back(policy::sequence_logprob(ref, t.prompt, t.preferred).total);
    out.dispreferred.push_back(policy::sequence_logprob(ref, t.prompt, t.dispreferred).total);
  }
  return out;
}

Var dpo_loss(const BoundParams& policy, const PolicyParams* ref, std::span<const TripleExample> batch,
             const LossConfig& cfg) {
  if (ref == nullptr) throw ContractError("dpo_loss: reference model missing");
  return dpo_loss(policy, reference_scores(*ref, batch), batch, cfg);
}

Var dpo_loss(const BoundParams& policy, const ReferenceScores& ref,
             std::span<const TripleExample> batch, const LossConfig& cfg) {
  cfg.validate();
  require_batch(batch, "dpo_loss");
  if (ref.preferred.size() != batch.size() || ref.dispreferred.size() != batch.size()) {
    throw ContractError("dpo_loss: reference scores missing for part of the batch");
  }
  GradTape& tape = tape_of(policy);
  std::vector<Var> pw, pl;
  for (const auto& t : batch) {
    pw.push_back(policy::score_sequence(policy, t.prompt, t.preferred).total);
    pl.push_back(policy::score_sequence(policy, t.prompt, t.dispreferred).total);
  }
  Var delta_w = stack(pw) - column(tape, ref.preferred);
  Var delta_l = stack(pl) - column(tape, ref.dispreferred);
  Var margin = (delta_w - delta_l) * cfg.beta;
  return mean(softplus(-margin));
}

CpoTerms cpo_loss(const BoundParams& policy, std::span<const TripleExample> batch,
                  const LossConfig& cfg) {
  cfg.validate();
  require_batch(batch, "cpo_loss");
  std::vector<Var> pw, pl;
  for (const auto& t : batch) {
    pw.push_back(policy::score_sequence(policy, t.prompt, t.preferred).total);
    pl.push_back(policy::score_sequence(policy, t.prompt, t.dispreferred).total);
  }
  Var w = stack(pw);
  Var margin = (w - stack(pl)) * cfg.beta;
  CpoTerms out;
  out.prefer = mean(softplus(-margin));
  out.nll = -mean(w);
  out.total = out.prefer + out.nll;
  return out;
}

KtoBatchState kto_zref(const BoundParams& policy, const PolicyParams* ref,
                       std::span<const LabeledExample> batch, const LossConfig& cfg) {
  cfg.validate();
  if (ref == nullptr) throw ContractError("kto_zref: reference model missing");
  if (batch.size() < 2) throw ContractError("kto_zref: mismatched pairing needs at least two examples");
  const std::size_t n = batch.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& x = batch[i].prompt;
    const auto& y = batch[(i + 1) % n].output;
    acc += policy::sequence_logprob(*policy.params, x, y).total -
           policy::sequence_logprob(*ref, x, y).total;
  }
  KtoBatchState state;
  state.z_ref = std::max(0.0, cfg.beta * acc / static_cast<double>(n));
  GradTape& tape = tape_of(policy);
  for (const auto& ex : batch) {
    const double r = policy::sequence_logprob(*ref, ex.prompt, ex.output).total;
    Matrix rm(1, 1);
    rm(0, 0) = r;
    Var reward = (policy::score_sequence(policy, ex.prompt, ex.output).total - tape.constant(rm)) * cfg.beta;
    state.reward_vars.push_back(reward);
    state.rewards.push_back(reward.item());
  }
  return state;
}

namespace {

Var kto_from_state(const KtoBatchState& state, std::span<const LabeledExample> batch,
                   const LossConfig& cfg, GradTape& tape) {
  if (state.reward_vars.size() != batch.size()) throw ContractError("kto_loss: state does not match batch");
  // Preferred: w_p * (1 - sigma(r - z)); dispreferred: w_d * (1 - sigma(z - r)) = w_d * sigma(r - z).
  std::vector<Var> terms;
  terms.reserve(batch.size());
  Matrix zm(1, 1);
  zm(0, 0) = state.z_ref;
  Var z = tape.constant(zm);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var d = state.reward_vars[i] - z;
    if (batch[i].label == data::Label::kPreferred) {
      terms.push_back(sigmoid(-d) * cfg.lambda_p);
    } else {
      terms.push_back(sigmoid(d) * cfg.lambda_d);
    }
  }
  return mean(stack(terms));
}

}  // namespace

Var kto_loss(const KtoBatchState& state, std::span<const LabeledExample> batch, const LossConfig& cfg) {
  if (state.reward_vars.empty()) throw ContractError("kto_loss: empty batch state");
  return kto_from_state(state, batch, cfg, *state.reward_vars.front().tape());
}

Var kto_loss(const BoundParams& policy, const PolicyParams* ref, std::span<const LabeledExample> batch,
             const LossConfig& cfg) {
  const KtoBatchState state = kto_zref(policy, ref, batch, cfg);
  return kto_from_state(state, batch, cfg, tape_of(policy));
}

Var kto_loss(const BoundParams& policy, const PolicyParams* ref, std::span<const LabeledExample> batch,
             const LossConfig& cfg, double z_ref) {
  KtoBatchState state = kto_zref(policy, ref, batch, cfg);
  if (!std::isfinite(z_ref)) throw NumericError("kto_loss: non-finite reference point");
  state.z_ref = z_ref;
  return kto_from_state(state, batch, cfg, tape_of(policy));
}

HaloReport halo_value_check(const std::function<double(double)>& v, std::span<const double> grid) {
  if (grid.size() < 3) throw ContractError("halo_value_check: grid needs at least three points");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0) || !std::isfinite(grid[i])) {
      throw ContractError("halo_value_check: grid points must be positive and finite");
    }
    if (i > 0 && !(grid[i] > grid[i - 1])) {
      throw ContractError("halo_value_check: grid must be strictly increasing");
    }
  }
  std::vector<double> vals(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) vals[i] = v(grid[i]);
  HaloReport r{true, true};
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    if (vals[i + 1] < vals[i] - 1e-12) r.monotone = false;
  }
  // Divided differences, so non-uniform grids are judged correctly.
  for (std::size_t i = 1; i + 1 < grid.size(); ++i) {
    const double left = (vals[i] - vals[i - 1]) / (grid[i] - grid[i - 1]);
    const double right = (vals[i + 1] - vals[i]) / (grid[i + 1] - grid[i]);
    if (right - left > 1e-12) r.concave = false;
  }
  return r;
}

}  // namespace chemalign::losses
