#include "chemalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "chemalign/chem.hpp"
#include "chemalign/errors.hpp"

namespace chemalign::eval {

std::vector<std::string> whitespace_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

long delta_len(std::string_view pred, std::string_view ref, LengthUnit unit) {
  if (unit == LengthUnit::kChars) {
    return static_cast<long>(pred.size()) - static_cast<long>(ref.size());
  }
  return static_cast<long>(whitespace_tokens(pred).size()) -
         static_cast<long>(whitespace_tokens(ref).size());
}

namespace {

using CharCounts = std::unordered_map<std::string_view, int>;

CharCounts char_ngrams(std::string_view s, std::size_t n) {
  CharCounts out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) out[s.substr(i, n)] += 1;
  return out;
}

double f1(double matches, double pred_total, double ref_total) {
  if (pred_total == 0.0 || ref_total == 0.0) return 0.0;
  const double p = matches / pred_total;
  const double r = matches / ref_total;
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

using TokenCounts = std::map<std::vector<std::string>, int>;

TokenCounts token_ngrams(const std::vector<std::string>& toks, std::size_t n) {
  TokenCounts out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    out[std::vector<std::string>(toks.begin() + static_cast<long>(i),
                                 toks.begin() + static_cast<long>(i + n))] += 1;
  }
  return out;
}

template <typename Counts>
int clipped_matches(const Counts& pred, const Counts& ref) {
  int m = 0;
  for (const auto& [gram, c] : pred) {
    auto it = ref.find(gram);
    if (it != ref.end()) m += std::min(c, it->second);
  }
  return m;
}

}  // namespace

double chrf(std::string_view pred, std::string_view ref) {
  if (ref.empty()) throw ContractError("chrf: empty reference");
  double total = 0.0;
  int orders = 0;
  for (std::size_t n = 1; n <= 3; ++n) {
    if (ref.size() < n) continue;
    ++orders;
    const double ref_n = static_cast<double>(ref.size() - n + 1);
    const double pred_n = pred.size() >= n ? static_cast<double>(pred.size() - n + 1) : 0.0;
    if (pred_n == 0.0) continue;
    const int m = clipped_matches(char_ngrams(pred, n), char_ngrams(ref, n));
    total += f1(m, pred_n, ref_n);
  }
  return total / orders;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double bleu(const std::vector<std::string>& pred, const std::vector<std::string>& ref, int max_n) {
  if (max_n != 2 && max_n != 4) throw ContractError("bleu: max_n must be 2 or 4");
  if (pred.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const std::size_t un = static_cast<std::size_t>(n);
    if (pred.size() < un) return 0.0;
    const int m = clipped_matches(token_ngrams(pred, un), token_ngrams(ref, un));
    if (m == 0) return 0.0;
    log_sum += std::log(static_cast<double>(m) / static_cast<double>(pred.size() - un + 1));
  }
  double bp = 1.0;
  if (pred.size() < ref.size()) {
    bp = std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(pred.size()));
  }
  return bp * std::exp(log_sum / max_n);
}

double rouge(const std::vector<std::string>& pred, const std::vector<std::string>& ref,
             RougeVariant variant) {
  if (pred.empty() || ref.empty()) return 0.0;
  if (variant == RougeVariant::kRL) {
    std::vector<std::size_t> prev(ref.size() + 1, 0), cur(ref.size() + 1, 0);
    for (std::size_t i = 1; i <= pred.size(); ++i) {
      for (std::size_t j = 1; j <= ref.size(); ++j) {
        cur[j] = pred[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
      }
      std::swap(prev, cur);
    }
    const double lcs = static_cast<double>(prev[ref.size()]);
    return f1(lcs, static_cast<double>(pred.size()), static_cast<double>(ref.size()));
  }
  const std::size_t n = variant == RougeVariant::kR1 ? 1 : 2;
  if (pred.size() < n || ref.size() < n) return 0.0;
  const int m = clipped_matches(token_ngrams(pred, n), token_ngrams(ref, n));
  return f1(m, static_cast<double>(pred.size() - n + 1), static_cast<double>(ref.size() - n + 1));
}

bool NliVerdict::well_formed() const {
  for (double p : {entail, neutral, contradict}) {
    if (!(p >= 0.0 && p <= 1.0)) return false;
  }
  return std::abs(entail + neutral + contradict - 1.0) <= 1e-6;
}

bool lang_win(const NliVerdict& v) { return v.entail > v.neutral && v.entail > v.contradict; }

bool mol_win(const PairRecord& rec) {
  if (rec.direction != data::Direction::kLang2Mol) {
    throw ContractError("mol_win: record " + rec.id + " is not lang2mol");
  }
  return chrf(rec.prediction, rec.reference) > kMolWinChrf &&
         std::abs(delta_len(rec.prediction, rec.reference, LengthUnit::kChars)) < kMolWinMaxDelta &&
         chem::is_valid_smiles(rec.prediction);
}

PairMetricRecord score_pair(const PairRecord& rec) {
  if (rec.reference.empty()) throw DataError("record " + rec.id + " has an empty reference");
  PairMetricRecord out;
  out.id = rec.id;
  out.direction = rec.direction;
  out.chrf = chrf(rec.prediction, rec.reference);
  out.levenshtein = levenshtein(rec.prediction, rec.reference);
  if (rec.direction == data::Direction::kLang2Mol) {
    out.delta_len = delta_len(rec.prediction, rec.reference, LengthUnit::kChars);
    out.valid = chem::is_valid_smiles(rec.prediction);
    double sim = 0.0;
    if (*out.valid && chem::is_valid_smiles(rec.reference)) {
      sim = chem::tanimoto(chem::morgan_fingerprint(chem::parse_smiles(rec.prediction)),
                           chem::morgan_fingerprint(chem::parse_smiles(rec.reference)));
    }
    out.morgan_tanimoto = sim;
    out.win = out.chrf > kMolWinChrf && std::abs(out.delta_len) < kMolWinMaxDelta && *out.valid;
  } else {
    out.delta_len = delta_len(rec.prediction, rec.reference, LengthUnit::kTokens);
    const auto p = whitespace_tokens(rec.prediction);
    const auto r = whitespace_tokens(rec.reference);
    out.bleu2 = bleu(p, r, 2);
    out.bleu4 = bleu(p, r, 4);
    out.rouge1 = rouge(p, r, RougeVariant::kR1);
    out.rouge2 = rouge(p, r, RougeVariant::kR2);
    out.rougeL = rouge(p, r, RougeVariant::kRL);
    out.win = false;
  }
  return out;
}

void attach_nli(PairMetricRecord& rec, const NliVerdict& verdict) {
  if (rec.direction != data::Direction::kMol2Lang) {
    throw ContractError("attach_nli: NLI applies to mol2lang records only");
  }
  rec.nli = verdict;
  rec.win = lang_win(verdict);
}

// ---- aggregation -------------------------------------------------------------------

namespace {

Histogram fixed_histogram(const std::vector<double>& values, double lo, double width, int nbins,
                          bool close_last) {
  Histogram h;
  h.bins.assign(static_cast<std::size_t>(nbins), 0);
  for (int i = 0; i <= nbins; ++i) h.edges.push_back(lo + width * i);
  const double hi = lo + width * nbins;
  for (double v : values) {
    if (v < lo) {
      ++h.underflow;
    } else if (v > hi || (v == hi && !close_last)) {
      ++h.overflow;
    } else {
      auto b = static_cast<int>(std::floor((v - lo) / width));
      b = std::clamp(b, 0, nbins - 1);
      ++h.bins[static_cast<std::size_t>(b)];
    }
  }
  return h;
}

MetricSummary summarize(std::string name, const std::vector<double>& values, Histogram hist) {
  MetricSummary s;
  s.name = std::move(name);
  s.count = values.size();
  if (!values.empty()) {
    double total = 0.0;
    for (double v : values) total += v;
    s.mean = total / static_cast<double>(values.size());
    s.median = median(values);
  }
  s.histogram = std::move(hist);
  return s;
}

}  // namespace

Histogram delta_len_histogram(const std::vector<double>& values) {
  return fixed_histogram(values, -50.0, 1.0, 100, false);
}

Histogram score_histogram(const std::vector<double>& values) {
  return fixed_histogram(values, 0.0, 0.05, 20, true);
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

const MetricSummary* MetricReport::find(std::string_view name) const {
  for (const auto& m : metrics) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

MetricReport aggregate_report(const std::vector<PairMetricRecord>& records) {
  if (records.empty()) throw ContractError("aggregate_report: no records");
  const data::Direction dir = records.front().direction;
  for (const auto& r : records) {
    if (r.direction != dir) throw ContractError("aggregate_report: mixed directions");
  }
  MetricReport rep;
  rep.direction = dir;
  rep.count = records.size();

  std::vector<double> delta, chrf_v, lev;
  for (const auto& r : records) {
    delta.push_back(static_cast<double>(r.delta_len));
    chrf_v.push_back(r.chrf);
    lev.push_back(static_cast<double>(r.levenshtein));
    if (r.win) ++rep.wins;
  }
  rep.win_rate = static_cast<double>(rep.wins) / static_cast<double>(rep.count);
  rep.metrics.push_back(summarize("delta_len", delta, delta_len_histogram(delta)));
  rep.metrics.push_back(summarize("chrf", chrf_v, score_histogram(chrf_v)));
  rep.metrics.push_back(summarize("levenshtein", lev, fixed_histogram(lev, 0.0, 1.0, 100, false)));

  auto collect = [&records](auto getter) {
    std::vector<double> out;
    for (const auto& r : records) {
      if (auto v = getter(r)) out.push_back(*v);
    }
    return out;
  };

  if (dir == data::Direction::kLang2Mol) {
    auto valid = collect([](const PairMetricRecord& r) -> std::optional<double> {
      if (!r.valid) return std::nullopt;
      return *r.valid ? 1.0 : 0.0;
    });
    auto sim = collect([](const PairMetricRecord& r) { return r.morgan_tanimoto; });
    rep.metrics.push_back(summarize("validity", valid, score_histogram(valid)));
    rep.metrics.push_back(summarize("morgan_tanimoto", sim, score_histogram(sim)));
  } else {
    const std::pair<const char*, std::optional<double> PairMetricRecord::*> fields[] = {
        {"bleu2", &PairMetricRecord::bleu2},   {"bleu4", &PairMetricRecord::bleu4},
        {"rouge1", &PairMetricRecord::rouge1}, {"rouge2", &PairMetricRecord::rouge2},
        {"rougeL", &PairMetricRecord::rougeL}};
    for (const auto& [name, field] : fields) {
      auto vals = collect([field](const PairMetricRecord& r) { return r.*field; });
      rep.metrics.push_back(summarize(name, vals, score_histogram(vals)));
    }
    auto entail = collect([](const PairMetricRecord& r) -> std::optional<double> {
      if (!r.nli) return std::nullopt;
      return r.nli->entail;
    });
    rep.nli_evaluated = entail.size();
    rep.nli_excluded = rep.count - entail.size();
    rep.metrics.push_back(summarize("nli_entail", entail, score_histogram(entail)));
  }
  return rep;
}

}  // namespace chemalign::eval
