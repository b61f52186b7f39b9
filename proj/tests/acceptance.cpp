// Runs every acceptance criterion and prints one PASS/FAIL line per
// criterion. Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chemalign/chem.hpp"
#include "chemalign/commands.hpp"
#include "chemalign/losses.hpp"
#include "chemalign/merge.hpp"
#include "chemalign/metrics.hpp"
#include "support/oracles.hpp"
#include "support/tiny.hpp"

using namespace chemalign;
using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  if (!o.pass) ++failures;
}

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---- 1. gradient suite ----------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  double worst[4] = {0, 0, 0, 0};
  std::size_t max_params = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const int vocab = 5 + inst % 4;
    auto p = tiny::model(vocab, 1 + inst % 2, 1000 + inst);
    tiny::jitter(p, rng, 0.3);
    auto ref = p;
    tiny::jitter(ref, rng, 0.3);
    max_params = std::max(max_params, p.parameter_count());
    losses::LossConfig cfg;
    cfg.beta = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    cfg.lambda_p = 1.0 + 0.1 * (inst % 5);
    const auto seqs = tiny::seq_batch(rng, vocab, 2);
    const auto triples = tiny::triple_batch(rng, vocab, 2);
    const auto labeled = tiny::labeled_batch(rng, vocab, 3);
    GradTape zt;
    const double z = losses::kto_zref(policy::bind(zt, p, false), &ref, labeled, cfg).z_ref;

    const std::function<Var(const policy::BoundParams&)> fs[4] = {
        [&](const policy::BoundParams& bp) { return losses::sft_loss(bp, seqs); },
        [&](const policy::BoundParams& bp) { return losses::dpo_loss(bp, &ref, triples, cfg); },
        [&](const policy::BoundParams& bp) { return losses::cpo_loss(bp, triples, cfg).total; },
        [&](const policy::BoundParams& bp) { return losses::kto_loss(bp, &ref, labeled, cfg, z); }};
    for (int k = 0; k < 4; ++k) {
      auto fn = [&](GradTape&, std::span<const Var> vars) { return fs[k](tiny::bound(p, vars)); };
      worst[k] = std::max(worst[k], grad_check(fn, p.tensors, 1e-5));
    }
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0 && max_params <= 2000;
  std::string d = "max rel err";
  const char* names[4] = {"sft", "dpo", "cpo", "kto"};
  for (int k = 0; k < 4; ++k) {
    ok = ok && worst[k] < 1e-4;
    d += std::string(" ") + names[k] + "=" + fmt(worst[k]);
  }
  d += ", params<=" + std::to_string(max_params) + ", " + fmt(secs) + " s";
  return {ok, d};
}

// ---- 2. closed-form anchors ------------------------------------------------------------

Outcome closed_forms() {
  std::mt19937_64 rng(77);
  double dpo_err = 0, cpo_err = 0, kto_err = 0;
  for (int i = 0; i < 10; ++i) {
    auto p = tiny::model(8, 2, 500 + i);
    tiny::jitter(p, rng, 0.5);
    losses::LossConfig cfg;
    cfg.beta = std::uniform_real_distribution<double>(0.01, 5.0)(rng);
    const auto triples = tiny::triple_batch(rng, 8, 1 + i % 5);
    GradTape tape;
    const auto bp = policy::bind(tape, p, false);
    dpo_err = std::max(dpo_err, std::abs(losses::dpo_loss(bp, &p, triples, cfg).item() - std::log(2.0)));

    auto degenerate = triples;
    for (auto& t : degenerate) t.dispreferred = t.preferred;
    cpo_err = std::max(cpo_err, std::abs(losses::cpo_loss(bp, degenerate, cfg).prefer.item() - std::log(2.0)));

    const auto labeled = tiny::labeled_batch(rng, 8, 2 + i % 4);
    cfg.lambda_p = cfg.lambda_d = 1.0;
    kto_err = std::max(kto_err, std::abs(losses::kto_loss(bp, &p, labeled, cfg).item() - 0.5));
  }
  const bool ok = dpo_err <= 1e-9 && cpo_err <= 1e-9 && kto_err <= 1e-9;
  return {ok, "|dpo-ln2|=" + fmt(dpo_err) + " |cpo-ln2|=" + fmt(cpo_err) + " |kto-0.5|=" + fmt(kto_err)};
}

// ---- 3. merge exactness -----------------------------------------------------------------

double max_abs(const merge::Checkpoint& a, const merge::Checkpoint& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    m = std::max(m, (a.tensors[i].matrix() - b.tensors[i].matrix()).cwiseAbs().maxCoeff());
  }
  return m;
}

merge::Checkpoint as_stored(const merge::Checkpoint& c) {
  return merge::deserialize_checkpoint(merge::serialize_checkpoint(c));
}

Outcome merge_exactness() {
  std::mt19937_64 rng(3);
  auto a = tiny::model(8, 2, 1), b = tiny::model(8, 2, 2);
  tiny::jitter(a, rng, 0.5);
  tiny::jitter(b, rng, 0.5);
  const double e0 = max_abs(as_stored(merge::slerp_merge(a, b, 0.0)), as_stored(a));
  const double e1 = max_abs(as_stored(merge::slerp_merge(a, b, 1.0)), as_stored(b));

  merge::Vector<double> u = merge::Vector<double>::Zero(6), v = merge::Vector<double>::Zero(6);
  u(1) = 1.0;
  v(4) = 1.0;
  const double orth = (merge::slerp(u, v, 0.5) - (u + v) / std::sqrt(2.0)).cwiseAbs().maxCoeff();

  merge::MergeConfig cfg;
  cfg.algorithm = merge::Algorithm::kTies;
  cfg.density = 1.0;
  cfg.weights = {1.0};
  const std::vector<merge::Checkpoint> one{b};
  // base + (model - base) is compared as stored: f32 values, as on disk.
  const double ties_one = max_abs(as_stored(merge::ties_merge(a, one, cfg)), as_stored(b));

  merge::Vector<double> t1(2), t2(2);
  t1 << 1.0, -0.1;
  t2 << -2.0, 0.3;
  const std::vector<merge::Vector<double>> tv{merge::trim_top_magnitude(t1, 1.0), merge::trim_top_magnitude(t2, 1.0)};
  const std::vector<double> w{1.0, 1.0};
  const auto hand = merge::ties_combine<double>(tv, w);
  const bool hand_ok = hand(0) == -2.0 && hand(1) == 0.3;

  const bool ok = e0 <= 1e-6 && e1 <= 1e-6 && orth <= 1e-6 && ties_one == 0.0 && hand_ok;
  return {ok, "slerp t=0 " + fmt(e0) + ", t=1 " + fmt(e1) + ", orthogonal midpoint " + fmt(orth) +
                  ", ties single model " + fmt(ties_one) + ", worked example [" + fmt(hand(0)) + ", " +
                  fmt(hand(1)) + "]"};
}

// ---- 4. metric oracles ----------------------------------------------------------------------

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(404);
  auto rstr = [&](std::string_view alpha) {
    std::string s(rng() % 31, ' ');
    for (char& c : s) c = alpha[rng() % alpha.size()];
    return s;
  };
  auto rtok = [&] {
    static const char* words[] = {"a", "b", "c", "chain", "of", "acid"};
    std::vector<std::string> t(rng() % 31);
    for (auto& x : t) x = words[rng() % 6];
    return t;
  };
  double worst = 0;
  int lev_mismatch = 0;
  for (int i = 0; i < 200; ++i) {
    const std::string a = rstr("CNO()=1c ");
    std::string b = rstr("CNO()=1c ");
    if (b.empty()) b = "C";
    worst = std::max(worst, std::abs(eval::chrf(a, b) - oracle::chrf(a, b)));
    if (eval::levenshtein(a, b) != oracle::levenshtein(a, b)) ++lev_mismatch;
    const auto p = rtok(), r = rtok();
    for (int n : {2, 4}) worst = std::max(worst, std::abs(eval::bleu(p, r, n) - oracle::bleu(p, r, n)));
    worst = std::max(worst, std::abs(eval::rouge(p, r, eval::RougeVariant::kR1) - oracle::rouge(p, r, 1)));
    worst = std::max(worst, std::abs(eval::rouge(p, r, eval::RougeVariant::kR2) - oracle::rouge(p, r, 2)));
    worst = std::max(worst, std::abs(eval::rouge(p, r, eval::RougeVariant::kRL) - oracle::rouge(p, r, 0)));
  }
  const double secs = seconds_since(t0);
  const bool ok = worst <= 1e-9 && lev_mismatch == 0 && secs < 30.0;
  return {ok, "200 pairs, max |diff| " + fmt(worst) + ", levenshtein mismatches " + std::to_string(lev_mismatch) +
                  ", " + fmt(secs) + " s"};
}

// ---- 5. SMILES fixture ------------------------------------------------------------------------

Outcome smiles_fixture() {
  std::ifstream in(std::string(CHEMALIGN_FIXTURES) + "/smiles.tsv");
  if (!in) return {false, "fixture not found"};
  int valid = 0, invalid = 0, correct = 0;
  std::string wrong;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    std::string label, smiles;
    std::getline(row, label, '\t');
    std::getline(row, smiles, '\t');
    const bool expect = label == "valid";
    (expect ? valid : invalid)++;
    if (chem::is_valid_smiles(smiles) == expect) {
      ++correct;
    } else {
      wrong += " " + smiles;
    }
  }
  const bool ok = valid == 30 && invalid == 20 && correct == 50;
  return {ok, std::to_string(correct) + "/" + std::to_string(valid + invalid) + " correct (" +
                  std::to_string(valid) + " valid, " + std::to_string(invalid) + " invalid)" +
                  (wrong.empty() ? "" : ", wrong:" + wrong)};
}

// ---- 6-8. pipeline ----------------------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(fs::path dir) : dir_(std::move(dir)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  void run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) {
      std::string joined;
      for (const auto& a : args) joined += a + " ";
      throw std::runtime_error("chemalign " + joined + "exited " + std::to_string(code) + ": " + err.str());
    }
  }

  json read(const std::string& name) const {
    std::ifstream in(p(name));
    return json::parse(in);
  }

  double win_rate(const std::string& eval_dir) const { return read(eval_dir + "/report.json")["win_rate"]; }
  double margin(const std::string& dir) const { return read(dir + "/margin.json")["margin"]; }

  // Criterion 6: SFT, corruption triples, CPO and DPO, lang2mol.
  void experiment() {
    run({"gen-data", "--n", "2000", "--seed", "7", "--out", p("corpus.jsonl")});
    run({"split", "--data", p("corpus.jsonl"), "--seed", "7", "--out-dir", p("splits")});
    run({"train", "--method", "sft", "--data", p("splits/train.jsonl"), "--direction", "lang2mol", "--vocab-from",
         p("corpus.jsonl"), "--epochs", "3", "--lr", "3e-3", "--seed", "7", "--out", p("l2m.ckpt")});
    run({"build-triples", "--data", p("splits/train.jsonl"), "--direction", "lang2mol", "--strength", "0.3",
         "--seed", "11", "--out", p("triples.jsonl")});
    run({"build-triples", "--data", p("splits/test.jsonl"), "--direction", "lang2mol", "--strength", "0.3",
         "--seed", "12", "--out", p("test_triples.jsonl")});
    run({"train", "--method", "cpo", "--data", p("triples.jsonl"), "--init", p("l2m.ckpt"), "--beta", "0.1",
         "--lr", "1e-3", "--seed", "7", "--out", p("cpo.ckpt")});
    run({"train", "--method", "dpo", "--data", p("triples.jsonl"), "--init", p("l2m.ckpt"), "--ref",
         p("l2m.ckpt"), "--beta", "0.1", "--lr", "1e-3", "--seed", "7", "--out", p("dpo.ckpt")});
    for (const char* m : {"l2m", "cpo", "dpo"}) {
      run({"eval", "--model", p(std::string(m) + ".ckpt"), "--triples", p("test_triples.jsonl"), "--out-dir",
           p(std::string("margin_") + m)});
    }
    run({"translate", "--model", p("cpo.ckpt"), "--data", p("splits/test.jsonl"), "--direction", "lang2mol",
         "--max-len", "64", "--out", p("pred_cpo_lang2mol.jsonl")});
    run({"eval", "--pred", p("pred_cpo_lang2mol.jsonl"), "--data", p("splits/test.jsonl"), "--direction",
         "lang2mol", "--out-dir", p("eval_cpo_lang2mol")});
    // The corruption generator's outputs scored as predictions.
    run({"eval", "--pred", p("test_triples.jsonl"), "--pred-field", "dispreferred", "--data",
         p("splits/test.jsonl"), "--direction", "lang2mol", "--out-dir", p("eval_baseline")});
  }

  // Criterion 7: the mol2lang specialist, fusion at 19:1, both directions.
  void fusion() {
    run({"train", "--method", "sft", "--data", p("splits/train.jsonl"), "--direction", "mol2lang", "--vocab-from",
         p("corpus.jsonl"), "--epochs", "3", "--lr", "3e-3", "--seed", "7", "--out", p("m2l.ckpt")});
    run({"merge", "--algo", "slerp", "--models", p("l2m.ckpt"), p("m2l.ckpt"), "--weights", "19", "1", "--out",
         p("fused.ckpt")});
    for (const char* m : {"l2m", "m2l", "fused"}) {
      for (const char* d : {"lang2mol", "mol2lang"}) {
        const std::string tag = std::string(m) + "_" + d;
        run({"translate", "--model", p(std::string(m) + ".ckpt"), "--data", p("splits/test.jsonl"), "--direction",
             d, "--max-len", std::string(d) == "lang2mol" ? "64" : "96", "--out", p("pred_" + tag + ".jsonl")});
        std::vector<std::string> ev{"eval", "--pred", p("pred_" + tag + ".jsonl"), "--data", p("splits/test.jsonl"),
                                    "--direction", d, "--out-dir", p("eval_" + tag)};
        if (std::string(d) == "mol2lang") {
          ev.push_back("--nli-scorer");
          ev.push_back("lexical");
        }
        run(ev);
      }
    }
    run({"report", "--reports", p("eval_l2m_lang2mol/report.json"), p("eval_m2l_lang2mol/report.json"),
         p("eval_fused_lang2mol/report.json"), p("eval_l2m_mol2lang/report.json"), p("eval_m2l_mol2lang/report.json"),
         p("eval_fused_mol2lang/report.json"), "--labels", "l2m", "m2l", "fused", "l2m", "m2l", "fused", "--out",
         p("summary.csv")});
  }

  // Deterministic artifacts: checkpoints, data, predictions, records and
  // reports. Manifests and training logs carry wall-clock times.
  std::vector<std::string> artifacts() const {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir_)) {
      if (!e.is_regular_file()) continue;
      const std::string rel = fs::relative(e.path(), dir_).string();
      if (rel.ends_with("manifest.json")) continue;
      out.push_back(rel);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "chemalign_acceptance";
  if (argc > 1) work = argv[1];

  report("1 gradient suite", guarded(gradient_suite));
  report("2 closed-form anchors", guarded(closed_forms));
  report("3 merge exactness", guarded(merge_exactness));
  report("4 metric oracles", guarded(metric_oracles));
  report("5 SMILES fixture", guarded(smiles_fixture));

  Pipeline first(work / "run1");
  double e2e_secs = 0;
  bool e2e_ran = false;
  try {
    const auto t0 = Clock::now();
    first.experiment();
    e2e_secs = seconds_since(t0);
    e2e_ran = true;
  } catch (const std::exception& e) {
    report("6 end-to-end experiment", {false, e.what()});
  }
  if (e2e_ran) {
    report("6a held-out margin rises over SFT", guarded([&]() -> Outcome {
             const double sft = first.margin("margin_l2m"), cpo = first.margin("margin_cpo"),
                          dpo = first.margin("margin_dpo");
             return {cpo > sft && dpo > sft,
                     "SFT " + fmt(sft) + ", CPO " + fmt(cpo) + ", DPO " + fmt(dpo)};
           }));
    report("6b CPO lang2mol win rate beats the corruption baseline by 10 points", guarded([&]() -> Outcome {
             const double cpo = first.win_rate("eval_cpo_lang2mol"), base = first.win_rate("eval_baseline");
             return {cpo - base >= 0.10, "CPO " + fmt(cpo) + ", baseline " + fmt(base)};
           }));
  }

  bool fusion_ran = false;
  if (e2e_ran) {
    try {
      first.fusion();
      fusion_ran = true;
    } catch (const std::exception& e) {
      report("7 fusion smoke", {false, e.what()});
    }
  }
  if (fusion_ran) {
    report("7 fusion smoke", guarded([&]() -> Outcome {
             bool ok = true;
             std::string d;
             for (const char* dir : {"lang2mol", "mol2lang"}) {
               const std::string s(dir);
               const double a = first.win_rate("eval_l2m_" + s), b = first.win_rate("eval_m2l_" + s),
                            f = first.win_rate("eval_fused_" + s);
               const double lo = std::min(a, b) - 0.05, hi = std::max(a, b) + 0.05;
               ok = ok && f >= lo && f <= hi;
               d += s + ": l2m " + fmt(a) + ", m2l " + fmt(b) + ", fused " + fmt(f) + "; ";
             }
             return {ok, d + "t = " + fmt(first.read("fused.ckpt.manifest.json")["details"]["t"].get<double>())};
           }));
  }

  if (e2e_ran && fusion_ran) {
    report("8 determinism", guarded([&]() -> Outcome {
             Pipeline second(work / "run2");
             const auto t0 = Clock::now();
             second.experiment();
             const double secs = seconds_since(t0);
             second.fusion();
             const auto a = first.artifacts(), b = second.artifacts();
             if (a != b) return {false, "artifact sets differ"};
             std::size_t differ = 0;
             std::string names;
             for (const auto& rel : a) {
               if (rel.ends_with(".log.jsonl")) continue;
               if (cli::file_sha256(first.dir() / rel) != cli::file_sha256(second.dir() / rel)) {
                 ++differ;
                 names += " " + rel;
               }
             }
             e2e_secs = std::max(e2e_secs, secs);
             return {differ == 0, std::to_string(a.size()) + " artifacts compared, " + std::to_string(differ) +
                                      " differ" + names};
           }));
  } else {
    report("8 determinism", {false, "pipeline did not complete"});
  }
  if (e2e_ran) {
    report("6c end-to-end runtime under 10 minutes", {e2e_secs < 600.0, "slowest run " + fmt(e2e_secs) + " s"});
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
