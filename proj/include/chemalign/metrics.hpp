#pragma once

// Generation metrics and per-pair hallucination records.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chemalign/data.hpp"

namespace chemalign::eval {

enum class LengthUnit { kChars, kTokens };

std::vector<std::string> whitespace_tokens(std::string_view s);

// len(pred) - len(ref); negative when the prediction is shorter.
long delta_len(std::string_view pred, std::string_view ref, LengthUnit unit);

// Character n-gram F1 averaged over orders 1..3 present in the reference.
double chrf(std::string_view pred, std::string_view ref);

std::size_t levenshtein(std::string_view a, std::string_view b);

// Sentence BLEU without smoothing; max_n must be 2 or 4.
double bleu(const std::vector<std::string>& pred, const std::vector<std::string>& ref, int max_n);

enum class RougeVariant { kR1, kR2, kRL };

double rouge(const std::vector<std::string>& pred, const std::vector<std::string>& ref,
             RougeVariant variant);

struct NliVerdict {
  double entail = 0.0;
  double neutral = 0.0;
  double contradict = 0.0;

  // Each probability in [0,1] and their sum within 1e-6 of 1.
  bool well_formed() const;
};

// Win iff entailment is the strict argmax.
bool lang_win(const NliVerdict& v);

struct PairRecord {
  std::string id;
  data::Direction direction;
  std::string prediction;
  std::string reference;
};

// Chr-F > 0.3, |delta chars| < 5 and a valid SMILES prediction.
bool mol_win(const PairRecord& rec);

inline constexpr double kMolWinChrf = 0.3;
inline constexpr long kMolWinMaxDelta = 5;

struct PairMetricRecord {
  std::string id;
  data::Direction direction = data::Direction::kLang2Mol;
  long delta_len = 0;
  double chrf = 0.0;
  std::size_t levenshtein = 0;
  // mol2lang only
  std::optional<double> bleu2, bleu4, rouge1, rouge2, rougeL;
  std::optional<NliVerdict> nli;
  // lang2mol only
  std::optional<bool> valid;
  std::optional<double> morgan_tanimoto;
  bool win = false;
};

// Metrics that do not need an NLI scorer. For mol2lang the win flag stays
// false until a verdict is attached with attach_nli().
PairMetricRecord score_pair(const PairRecord& rec);
void attach_nli(PairMetricRecord& rec, const NliVerdict& verdict);

struct Histogram {
  std::vector<double> edges;  // bins.size() + 1 edges
  std::vector<std::size_t> bins;
  std::size_t underflow = 0;
  std::size_t overflow = 0;
};

// Width-1 bins over [-50, 50).
Histogram delta_len_histogram(const std::vector<double>& values);
// 20 bins over [0, 1]; the last bin is closed.
Histogram score_histogram(const std::vector<double>& values);

struct MetricSummary {
  std::string name;
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  Histogram histogram;
};

struct MetricReport {
  data::Direction direction = data::Direction::kLang2Mol;
  std::size_t count = 0;
  std::size_t wins = 0;
  double win_rate = 0.0;
  std::size_t nli_evaluated = 0;
  std::size_t nli_excluded = 0;
  std::vector<MetricSummary> metrics;

  const MetricSummary* find(std::string_view name) const;
};

MetricReport aggregate_report(const std::vector<PairMetricRecord>& records);

double median(std::vector<double> values);

}  // namespace chemalign::eval
