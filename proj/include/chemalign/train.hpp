#pragma once

// Minibatch training of the policy under SFT, DPO, CPO or KTO.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chemalign/data.hpp"
#include "chemalign/losses.hpp"
#include "chemalign/numerics.hpp"
#include "chemalign/policy.hpp"

namespace chemalign::train {

enum class Method { kSft, kDpo, kCpo, kKto };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);
// DPO and KTO anchor on a frozen reference model; SFT and CPO do not.
bool needs_reference(Method m);

struct TrainConfig {
  Method method = Method::kSft;
  losses::LossConfig loss;
  AdamConfig adam;
  int epochs = 1;
  int batch_size = 8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const;
};

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::vector<std::pair<std::string, double>> components;
};

std::string to_json_line(const StepRecord& r);

// Encoded training data; the field matching the method is used.
struct TrainData {
  std::vector<losses::SeqExample> pairs;
  std::vector<losses::TripleExample> triples;
  std::vector<losses::LabeledExample> labeled;
};

// Throws LengthError when an example does not fit the model context.
std::vector<losses::SeqExample> encode_pairs(const policy::PolicyParams& p,
                                             const std::vector<data::LMPair>& rows);
std::vector<losses::TripleExample> encode_triples(const policy::PolicyParams& p,
                                                  const std::vector<data::PreferenceTriple>& rows);
std::vector<losses::LabeledExample> encode_labeled(const policy::PolicyParams& p,
                                                   const std::vector<data::KtoExample>& rows);

using StepCallback = std::function<void(const StepRecord&)>;

// Returns the trained parameters. `ref` is required for DPO/KTO and must be
// null for SFT/CPO. Throws TrainingDivergedError on a non-finite loss or
// gradient.
policy::PolicyParams train(policy::PolicyParams init, const policy::PolicyParams* ref,
                           const TrainData& data, const TrainConfig& cfg,
                           const StepCallback& on_step = {});

// mean_i [log pi(y_w | x) - log pi(y_l | x)]
double preference_margin(const policy::PolicyParams& p, std::span<const losses::TripleExample> triples);

}  // namespace chemalign::train
