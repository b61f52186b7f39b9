#include "chemalign/train.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace chemalign::train {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::kSft: return "sft";
    case Method::kDpo: return "dpo";
    case Method::kCpo: return "cpo";
    case Method::kKto: return "kto";
  }
  return "unknown";
}

Method parse_method(std::string_view s) {
  if (s == "sft") return Method::kSft;
  if (s == "dpo") return Method::kDpo;
  if (s == "cpo") return Method::kCpo;
  if (s == "kto") return Method::kKto;
  throw ConfigError("unknown training method '" + std::string(s) + "' (expected sft, dpo, cpo or kto)");
}

bool needs_reference(Method m) { return m == Method::kDpo || m == Method::kKto; }

void TrainConfig::validate() const {
  loss.validate();
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (method == Method::kKto && batch_size < 2) throw ConfigError("kto needs batch size of at least 2");
  if (!(adam.learning_rate > 0.0) || !std::isfinite(adam.learning_rate)) {
    throw ConfigError("learning rate must be positive");
  }
}

std::string to_json_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["grad_norm"] = r.grad_norm;
  nlohmann::ordered_json comp = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.components) comp[k] = v;
  j["components"] = comp;
  return j.dump();
}

namespace {

void require_fits(const policy::PolicyParams& p, std::size_t prompt, std::size_t target,
                  const std::string& id) {
  if (prompt + target > static_cast<std::size_t>(p.config.context)) {
    throw LengthError("example " + id + " needs " + std::to_string(prompt + target) +
                      " tokens, context is " + std::to_string(p.config.context));
  }
}

}  // namespace

std::vector<losses::SeqExample> encode_pairs(const policy::PolicyParams& p,
                                             const std::vector<data::LMPair>& rows) {
  std::vector<losses::SeqExample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    losses::SeqExample ex{policy::encode_prompt(p.vocab, r.direction, r.source),
                          policy::encode_target(p.vocab, r.target)};
    require_fits(p, ex.prompt.size(), ex.target.size(), r.id);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<losses::TripleExample> encode_triples(const policy::PolicyParams& p,
                                                  const std::vector<data::PreferenceTriple>& rows) {
  std::vector<losses::TripleExample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    losses::TripleExample ex{policy::encode_prompt(p.vocab, r.direction, r.source),
                             policy::encode_target(p.vocab, r.preferred),
                             policy::encode_target(p.vocab, r.dispreferred)};
    require_fits(p, ex.prompt.size(), std::max(ex.preferred.size(), ex.dispreferred.size()), r.id);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<losses::LabeledExample> encode_labeled(const policy::PolicyParams& p,
                                                   const std::vector<data::KtoExample>& rows) {
  std::vector<losses::LabeledExample> out;
  out.reserve(rows.size());
  std::size_t longest = 0;
  for (const auto& r : rows) {
    losses::LabeledExample ex{policy::encode_prompt(p.vocab, r.direction, r.source),
                              policy::encode_target(p.vocab, r.output), r.label};
    require_fits(p, ex.prompt.size(), ex.output.size(), r.id);
    longest = std::max(longest, ex.output.size());
    out.push_back(std::move(ex));
  }
  // Mismatched pairing scores any output against any prompt.
  for (std::size_t i = 0; i < out.size(); ++i) require_fits(p, out[i].prompt.size(), longest, rows[i].id);
  return out;
}

policy::PolicyParams train(policy::PolicyParams params, const policy::PolicyParams* ref,
                           const TrainData& data, const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (needs_reference(cfg.method) && ref == nullptr) {
    throw ConfigError(std::string(to_string(cfg.method)) + " requires a reference model");
  }
  if (!needs_reference(cfg.method) && ref != nullptr) {
    throw ConfigError(std::string(to_string(cfg.method)) + " does not use a reference model");
  }

  std::size_t n = 0;
  switch (cfg.method) {
    case Method::kSft: n = data.pairs.size(); break;
    case Method::kDpo:
    case Method::kCpo: n = data.triples.size(); break;
    case Method::kKto: n = data.labeled.size(); break;
  }
  if (n == 0) throw DataError("no training examples for " + std::string(to_string(cfg.method)));
  if (cfg.method == Method::kKto && n < 2) throw DataError("kto needs at least two examples");

  // The reference is frozen, so its DPO scores are computed once.
  losses::ReferenceScores ref_scores;
  if (cfg.method == Method::kDpo) ref_scores = losses::reference_scores(*ref, data.triples);

  OptimizerState opt(cfg.adam);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  long step = 0;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(data::derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[data::uniform_index(rng, i)]);

    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      if (cfg.method == Method::kKto && end - start < 2) break;
      const std::span<const std::size_t> idx(order.data() + start, end - start);

      GradTape tape;
      const auto bp = policy::bind(tape, params, true);
      StepRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      Var loss;
      try {
        switch (cfg.method) {
          case Method::kSft: {
            std::vector<losses::SeqExample> batch;
            for (auto i : idx) batch.push_back(data.pairs[i]);
            loss = losses::sft_loss(bp, batch);
            break;
          }
          case Method::kDpo: {
            std::vector<losses::TripleExample> batch;
            losses::ReferenceScores rs;
            for (auto i : idx) {
              batch.push_back(data.triples[i]);
              rs.preferred.push_back(ref_scores.preferred[i]);
              rs.dispreferred.push_back(ref_scores.dispreferred[i]);
            }
            loss = losses::dpo_loss(bp, rs, batch, cfg.loss);
            break;
          }
          case Method::kCpo: {
            std::vector<losses::TripleExample> batch;
            for (auto i : idx) batch.push_back(data.triples[i]);
            const auto terms = losses::cpo_loss(bp, batch, cfg.loss);
            rec.components = {{"prefer", terms.prefer.item()}, {"nll", terms.nll.item()}};
            loss = terms.total;
            break;
          }
          case Method::kKto: {
            std::vector<losses::LabeledExample> batch;
            for (auto i : idx) batch.push_back(data.labeled[i]);
            const auto state = losses::kto_zref(bp, ref, batch, cfg.loss);
            rec.components = {{"z_ref", state.z_ref}};
            loss = losses::kto_loss(state, batch, cfg.loss);
            break;
          }
        }
        rec.loss = loss.item();
        if (!std::isfinite(rec.loss)) throw NumericError("loss is not finite");
        backward(tape, loss);
      } catch (const NumericError& e) {
        throw TrainingDivergedError("training diverged at step " + std::to_string(step) + " (epoch " +
                                    std::to_string(epoch) + "): " + e.what());
      }

      std::vector<Matrix> grads;
      grads.reserve(bp.vars.size());
      for (const Var& v : bp.vars) grads.push_back(tape.grad(v));
      rec.grad_norm = cfg.clip_norm > 0.0
                          ? clip_grad_norm(grads, cfg.clip_norm)
                          : std::sqrt(std::accumulate(grads.begin(), grads.end(), 0.0,
                                                      [](double a, const Matrix& g) { return a + g.squaredNorm(); }));
      if (!std::isfinite(rec.grad_norm)) {
        throw TrainingDivergedError("training diverged at step " + std::to_string(step) +
                                    ": non-finite gradient");
      }
      adam_step(opt, params.tensors, grads);
      if (on_step) on_step(rec);
      ++step;
    }
  }
  if (!params.all_finite()) throw TrainingDivergedError("parameters became non-finite");
  return params;
}

double preference_margin(const policy::PolicyParams& p, std::span<const losses::TripleExample> triples) {
  if (triples.empty()) throw ContractError("preference_margin: no triples");
  double acc = 0.0;
  for (const auto& t : triples) {
    acc += policy::sequence_logprob(p, t.prompt, t.preferred).total -
           policy::sequence_logprob(p, t.prompt, t.dispreferred).total;
  }
  return acc / static_cast<double>(triples.size());
}

}  // namespace chemalign::train
