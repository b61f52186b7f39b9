#include "chemalign/commands.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "chemalign/metrics.hpp"
#include "chemalign/nli.hpp"

#ifndef CHEMALIGN_VERSION
#define CHEMALIGN_VERSION "unknown"
#endif
#ifndef CHEMALIGN_REVISION
#define CHEMALIGN_REVISION "unknown"
#endif

namespace chemalign::cli {

using json = nlohmann::ordered_json;

namespace {

std::string join_ids(const std::vector<std::string>& ids) {
  constexpr std::size_t kShown = 20;
  std::string out;
  for (std::size_t i = 0; i < ids.size() && i < kShown; ++i) {
    if (i > 0) out += ", ";
    out += ids[i];
  }
  if (ids.size() > kShown) out += " and " + std::to_string(ids.size() - kShown) + " more";
  return out;
}

std::string alignment_message(const std::vector<std::string>& missing_pred,
                              const std::vector<std::string>& missing_ref) {
  std::string msg = "predictions and references are not aligned by id";
  if (!missing_pred.empty()) msg += "; no prediction for: " + join_ids(missing_pred);
  if (!missing_ref.empty()) msg += "; no reference for: " + join_ids(missing_ref);
  return msg;
}

}  // namespace

AlignmentError::AlignmentError(std::vector<std::string> missing_predictions,
                               std::vector<std::string> missing_references)
    : DataError(alignment_message(missing_predictions, missing_references)),
      missing_pred_(std::move(missing_predictions)),
      missing_ref_(std::move(missing_references)) {}

// ---- small I/O helpers --------------------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 computation failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string file_sha256(const Path& path) { return sha256_hex(data::read_file(path)); }

std::string to_json_line(const Prediction& p) {
  json j;
  j["id"] = p.id;
  j["direction"] = data::to_string(p.direction);
  j["source"] = p.source;
  j["prediction"] = p.prediction;
  return j.dump();
}

std::vector<std::pair<std::string, std::string>> read_predictions(const Path& path,
                                                                  const std::string& field) {
  std::istringstream in(data::read_file(path));
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
      throw DataError(where + ": missing string field 'id'");
    }
    if (!j.contains(field) || !j[field].is_string()) {
      throw DataError(where + ": missing string field '" + field + "'");
    }
    out.emplace_back(j["id"].get<std::string>(), j[field].get<std::string>());
  }
  return out;
}

namespace {

std::uint64_t require_seed(const RunConfig& cfg) {
  if (!cfg.seed) throw ConfigError(cfg.command + " is stochastic and needs --seed");
  return *cfg.seed;
}

void require_path(const Path& p, const char* flag, const std::string& command) {
  if (p.empty()) throw ConfigError(command + " needs " + flag);
}

template <typename T>
std::vector<T> filter_direction(std::vector<T> rows, std::optional<data::Direction> d) {
  if (!d) return rows;
  std::erase_if(rows, [&](const T& r) { return r.direction != *d; });
  return rows;
}

std::string write_lines(const std::vector<std::string>& lines) {
  std::string buf;
  for (const auto& l : lines) {
    buf += l;
    buf += '\n';
  }
  return buf;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Collects inputs, outputs and extras for one invocation and writes the
// manifest beside the primary output.
class Manifest {
 public:
  explicit Manifest(const RunConfig& cfg)
      : cfg_(cfg), started_(utc_timestamp()), t0_(std::chrono::steady_clock::now()) {}

  void input(const Path& p) { inputs_.push_back(p); }
  void output(const Path& p) { outputs_.push_back(p); }
  json& extra() { return extra_; }
  void loss_curve(std::vector<double> c) { curve_ = std::move(c); }

  void write(const Path& where) const {
    json j;
    j["command"] = cfg_.command;
    j["version"] = std::string("chemalign ") + CHEMALIGN_VERSION;
    j["revision"] = CHEMALIGN_REVISION;
    json echo = json::object();
    for (const auto& [k, v] : cfg_.echo) echo[k] = v;
    j["config"] = echo;
    j["started_at"] = started_;
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    auto digests = [](const std::vector<Path>& paths) {
      json arr = json::array();
      for (const auto& p : paths) {
        const std::string bytes = data::read_file(p);
        arr.push_back(json{{"path", p.string()}, {"bytes", bytes.size()}, {"sha256", sha256_hex(bytes)}});
      }
      return arr;
    };
    j["inputs"] = digests(inputs_);
    j["outputs"] = digests(outputs_);
    if (curve_) j["loss_curve"] = *curve_;
    if (!extra_.empty()) j["details"] = extra_;
    data::write_file_atomic(where, j.dump(2) + "\n");
  }

  void write_beside(const Path& artifact) const {
    Path m = artifact;
    m += ".manifest.json";
    write(m);
  }

 private:
  const RunConfig& cfg_;
  std::string started_;
  std::chrono::steady_clock::time_point t0_;
  std::vector<Path> inputs_, outputs_;
  std::optional<std::vector<double>> curve_;
  json extra_ = json::object();
};

}  // namespace

// ---- gen-data / split --------------------------------------------------------------------

void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  const auto seed = require_seed(cfg);
  require_path(cfg.out, "--out", cfg.command);
  if (cfg.n < 1) throw ConfigError("--n must be at least 1");
  Manifest m(cfg);
  const auto pairs = data::gen_toy_corpus(cfg.n, seed);
  data::write_pairs(cfg.out, pairs);
  m.output(cfg.out);
  m.write_beside(cfg.out);
  log << "wrote " << pairs.size() << " pairs to " << cfg.out.string() << "\n";
}

void cmd_split(const RunConfig& cfg, std::ostream& log) {
  const auto seed = require_seed(cfg);
  require_path(cfg.data, "--data", cfg.command);
  require_path(cfg.out_dir, "--out-dir", cfg.command);
  if (cfg.fractions.size() != 3) throw ConfigError("--fractions takes three values (train val test)");
  double total = 0.0;
  for (double f : cfg.fractions) {
    if (!(f > 0.0) || !std::isfinite(f)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  Manifest m(cfg);
  m.input(cfg.data);
  const auto splits = data::split_dataset(data::read_pairs(cfg.data), cfg.fractions, seed);
  std::filesystem::create_directories(cfg.out_dir);
  const std::pair<const char*, const std::vector<data::LMPair>*> parts[] = {
      {"train.jsonl", &splits.train}, {"val.jsonl", &splits.val}, {"test.jsonl", &splits.test}};
  for (const auto& [name, rows] : parts) {
    data::write_pairs(cfg.out_dir / name, *rows);
    m.output(cfg.out_dir / name);
    log << name << ": " << rows->size() << " pairs\n";
  }
  m.write(cfg.out_dir / "manifest.json");
}

// ---- build-triples -----------------------------------------------------------------------

void cmd_build_triples(const RunConfig& cfg, std::ostream& log) {
  const auto seed = require_seed(cfg);
  require_path(cfg.data, "--data", cfg.command);
  require_path(cfg.out, "--out", cfg.command);
  Manifest m(cfg);
  m.input(cfg.data);
  const auto pairs = filter_direction(data::read_pairs(cfg.data), cfg.direction);

  data::Generator gen;
  std::optional<policy::PolicyParams> model;
  if (cfg.generator == "corruption") {
    if (!(cfg.strength > 0.0) || cfg.strength > 1.0) throw ConfigError("--strength must lie in (0, 1]");
    gen = data::corruption_generator(cfg.strength);
  } else if (cfg.generator == "policy") {
    require_path(cfg.model_path, "--model for the policy generator", cfg.command);
    if (!(cfg.temperature > 0.0)) throw ConfigError("--temperature must be positive");
    model = merge::load_checkpoint(cfg.model_path);
    m.input(cfg.model_path);
    gen = [&model, &cfg](const data::LMPair& p, std::uint64_t s) -> std::optional<std::string> {
      const auto prompt = policy::encode_prompt(model->vocab, p.direction, p.source);
      const auto ids = policy::sample_decode(*model, prompt, cfg.max_len, cfg.temperature, s);
      if (ids.empty()) return std::nullopt;
      return model->vocab.decode(ids);
    };
  } else {
    throw ConfigError("unknown generator '" + cfg.generator + "' (expected corruption or policy)");
  }

  const auto built = data::build_triples(pairs, gen, seed);
  data::write_triples(cfg.out, built.triples);
  m.output(cfg.out);
  if (!cfg.kto_out.empty()) {
    data::write_kto(cfg.kto_out, data::triples_to_kto(built.triples));
    m.output(cfg.kto_out);
  }
  m.extra()["triples"] = built.triples.size();
  m.extra()["skipped"] = built.skipped;
  m.extra()["degenerate"] = built.degenerate;
  m.write_beside(cfg.out);
  log << "wrote " << built.triples.size() << " triples (" << built.skipped << " skipped, "
      << built.degenerate << " degenerate)\n";
}

// ---- train ---------------------------------------------------------------------------------

namespace {

bool first_record_has(const Path& path, const char* key) {
  std::istringstream in(data::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      return j.is_object() && j.contains(key);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": invalid JSON: " + e.what());
    }
  }
  return false;
}

}  // namespace

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto seed = require_seed(cfg);
  require_path(cfg.data, "--data", cfg.command);
  require_path(cfg.out, "--out", cfg.command);
  const auto method = cfg.method;
  const std::string name(train::to_string(method));
  if (train::needs_reference(method) && cfg.ref.empty()) {
    throw ConfigError(name + " requires a frozen reference checkpoint (--ref)");
  }
  if (!train::needs_reference(method) && !cfg.ref.empty()) {
    throw ConfigError(name + " is reference-free; --ref is not allowed");
  }

  train::TrainConfig tc;
  tc.method = method;
  tc.loss = cfg.loss;
  tc.adam.learning_rate = cfg.lr;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.clip_norm = cfg.clip_norm;
  tc.seed = seed;
  tc.validate();

  Manifest m(cfg);
  m.input(cfg.data);

  policy::PolicyParams init;
  if (!cfg.init.empty()) {
    init = merge::load_checkpoint(cfg.init);
    m.input(cfg.init);
  } else {
    if (method != train::Method::kSft) throw ConfigError(name + " needs --init");
    const Path vocab_src = cfg.vocab_from.empty() ? cfg.data : cfg.vocab_from;
    if (!cfg.vocab_from.empty()) m.input(cfg.vocab_from);
    const auto vocab = policy::build_vocab(data::read_pairs(vocab_src));
    policy::ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    mc.seed = seed;
    init = policy::init_params(mc, vocab);
  }
  std::optional<policy::PolicyParams> ref;
  if (!cfg.ref.empty()) {
    ref = merge::load_checkpoint(cfg.ref);
    m.input(cfg.ref);
    merge::require_compatible(init, *ref);
  }

  train::TrainData td;
  switch (method) {
    case train::Method::kSft:
      td.pairs = train::encode_pairs(init, filter_direction(data::read_pairs(cfg.data), cfg.direction));
      break;
    case train::Method::kDpo:
    case train::Method::kCpo:
      td.triples = train::encode_triples(init, filter_direction(data::read_triples(cfg.data), cfg.direction));
      break;
    case train::Method::kKto: {
      // Accepts labeled examples directly or preference triples to split.
      auto rows = first_record_has(cfg.data, "label") ? data::read_kto(cfg.data)
                                                      : data::triples_to_kto(data::read_triples(cfg.data));
      td.labeled = train::encode_labeled(init, filter_direction(std::move(rows), cfg.direction));
      break;
    }
  }

  Path log_path = cfg.log;
  if (log_path.empty()) {
    log_path = cfg.out;
    log_path += ".log.jsonl";
  }
  std::vector<std::string> lines;
  std::vector<double> curve;
  const auto trained = train::train(std::move(init), ref ? &*ref : nullptr, td, tc,
                                    [&](const train::StepRecord& r) {
                                      lines.push_back(train::to_json_line(r));
                                      curve.push_back(r.loss);
                                    });
  merge::save_checkpoint(trained, cfg.out);
  data::write_file_atomic(log_path, write_lines(lines));
  m.output(cfg.out);
  m.output(log_path);
  m.loss_curve(curve);
  m.write_beside(cfg.out);
  log << name << ": " << curve.size() << " steps";
  if (!curve.empty()) log << ", final loss " << curve.back();
  log << "\n";
}

// ---- translate -------------------------------------------------------------------------------

void cmd_translate(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.model_path, "--model", cfg.command);
  require_path(cfg.data, "--data", cfg.command);
  require_path(cfg.out, "--out", cfg.command);
  if (cfg.max_len < 0) throw ConfigError("--max-len must be non-negative");
  std::uint64_t seed = 0;
  if (cfg.sample) {
    seed = require_seed(cfg);
    if (!(cfg.temperature > 0.0)) throw ConfigError("--temperature must be positive");
  }
  Manifest m(cfg);
  m.input(cfg.model_path);
  m.input(cfg.data);
  const auto model = merge::load_checkpoint(cfg.model_path);
  const auto pairs = filter_direction(data::read_pairs(cfg.data), cfg.direction);
  std::vector<std::string> lines;
  lines.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const auto prompt = policy::encode_prompt(model.vocab, p.direction, p.source);
    const auto ids = cfg.sample ? policy::sample_decode(model, prompt, cfg.max_len, cfg.temperature,
                                                        data::derive_seed(seed, i))
                                : policy::greedy_decode(model, prompt, cfg.max_len);
    lines.push_back(to_json_line(Prediction{p.id, p.direction, p.source, model.vocab.decode(ids)}));
  }
  data::write_file_atomic(cfg.out, write_lines(lines));
  m.output(cfg.out);
  m.write_beside(cfg.out);
  log << "translated " << pairs.size() << " sources\n";
}

// ---- merge -------------------------------------------------------------------------------------

void cmd_merge(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.out, "--out", cfg.command);
  for (double w : cfg.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("merge weights must be non-negative");
  }
  merge::MergeConfig mc;
  mc.algorithm = cfg.algorithm;
  mc.weights = cfg.weights;
  mc.density = cfg.density;
  mc.lambda = cfg.lambda;
  mc.parallel_threshold = cfg.parallel_threshold;

  Manifest m(cfg);
  std::vector<merge::Checkpoint> models;
  auto load_models = [&] {
    for (const auto& p : cfg.models) {
      models.push_back(merge::load_checkpoint(p));
      m.input(p);
    }
  };

  merge::Checkpoint merged;
  if (cfg.algorithm == merge::Algorithm::kTies) {
    if (!(cfg.density > 0.0) || cfg.density > 1.0) {
      throw ConfigError("TIES density must lie in (0, 1], got " + std::to_string(cfg.density));
    }
    require_path(cfg.base, "--base", cfg.command);
    if (cfg.models.empty()) throw ConfigError("ties needs at least one --models entry");
    if (!cfg.weights.empty() && cfg.weights.size() != cfg.models.size()) {
      throw ConfigError("--weights needs one value per model");
    }
    const auto base = merge::load_checkpoint(cfg.base);
    m.input(cfg.base);
    load_models();
    merged = merge::ties_merge(base, models, mc);
  } else {
    if (cfg.models.size() != 2) throw ConfigError(std::string(merge::to_string(cfg.algorithm)) + " merges exactly two models");
    if (cfg.weights.size() != 2) {
      throw ConfigError("--weights with two values is required (e.g. --weights 19 1); the ratio is not guessed");
    }
    const double t = merge::ratio_to_t(cfg.weights[0], cfg.weights[1]);
    load_models();
    merged = cfg.algorithm == merge::Algorithm::kSlerp ? merge::slerp_merge(models[0], models[1], t, mc)
                                                       : merge::lerp_merge(models[0], models[1], t);
    m.extra()["t"] = t;
    log << merge::to_string(cfg.algorithm) << " at t = " << t << "\n";
  }
  merge::save_checkpoint(merged, cfg.out);
  m.output(cfg.out);
  m.write_beside(cfg.out);
  log << "wrote " << cfg.out.string() << "\n";
}

// ---- eval --------------------------------------------------------------------------------------

namespace {

json record_to_json(const eval::PairMetricRecord& r) {
  json j;
  j["id"] = r.id;
  j["direction"] = data::to_string(r.direction);
  j["delta_len"] = r.delta_len;
  j["chrf"] = r.chrf;
  j["levenshtein"] = r.levenshtein;
  auto opt = [&j](const char* key, const std::optional<double>& v) {
    j[key] = v ? json(*v) : json(nullptr);
  };
  opt("bleu2", r.bleu2);
  opt("bleu4", r.bleu4);
  opt("rouge1", r.rouge1);
  opt("rouge2", r.rouge2);
  opt("rougeL", r.rougeL);
  j["valid"] = r.valid ? json(*r.valid) : json(nullptr);
  opt("morgan_tanimoto", r.morgan_tanimoto);
  if (r.nli) {
    j["nli"] = json{{"entail", r.nli->entail}, {"neutral", r.nli->neutral}, {"contradict", r.nli->contradict}};
  } else {
    j["nli"] = nullptr;
  }
  j["win"] = r.win;
  return j;
}

json report_to_json(const eval::MetricReport& rep) {
  json j;
  j["direction"] = data::to_string(rep.direction);
  j["count"] = rep.count;
  j["wins"] = rep.wins;
  j["win_rate"] = rep.win_rate;
  if (rep.direction == data::Direction::kMol2Lang) {
    j["nli_evaluated"] = rep.nli_evaluated;
    j["nli_excluded"] = rep.nli_excluded;
  }
  json metrics = json::object();
  for (const auto& s : rep.metrics) {
    json h;
    h["edges"] = s.histogram.edges;
    h["counts"] = s.histogram.bins;
    h["underflow"] = s.histogram.underflow;
    h["overflow"] = s.histogram.overflow;
    metrics[s.name] = json{{"count", s.count}, {"mean", s.mean}, {"median", s.median}, {"histogram", h}};
  }
  j["metrics"] = metrics;
  return j;
}

std::string format_edge(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

// Underflow row, one row per bin, overflow row.
std::string histogram_csv(const eval::Histogram& h) {
  std::string out = "lower,upper,count\n";
  out += "-inf," + format_edge(h.edges.front()) + "," + std::to_string(h.underflow) + "\n";
  for (std::size_t i = 0; i < h.bins.size(); ++i) {
    out += format_edge(h.edges[i]) + "," + format_edge(h.edges[i + 1]) + "," + std::to_string(h.bins[i]) + "\n";
  }
  out += format_edge(h.edges.back()) + ",inf," + std::to_string(h.overflow) + "\n";
  return out;
}

}  // namespace

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.out_dir, "--out-dir", cfg.command);
  const bool pair_mode = !cfg.pred.empty();
  const bool margin_mode = !cfg.triples.empty();
  if (!pair_mode && !margin_mode) throw ConfigError("eval needs --pred/--data or --model/--triples");
  std::unique_ptr<eval::NliScorer> scorer;
  if (!cfg.nli_scorer.empty()) {
    try {
      scorer = eval::make_scorer(cfg.nli_scorer);
    } catch (const eval::ScorerError& e) {
      throw ConfigError(e.what());
    }
  }
  Manifest m(cfg);
  std::filesystem::create_directories(cfg.out_dir);

  if (pair_mode) {
    require_path(cfg.data, "--data (references)", cfg.command);
    m.input(cfg.pred);
    m.input(cfg.data);
    const auto all_refs = data::read_pairs(cfg.data);
    const auto refs = filter_direction(all_refs, cfg.direction);
    // Predictions for references outside the selected direction are ignored.
    std::set<std::string> other_ids;
    for (const auto& r : all_refs) {
      if (cfg.direction && r.direction != *cfg.direction) other_ids.insert(r.id);
    }
    auto preds = read_predictions(cfg.pred, cfg.pred_field);
    std::erase_if(preds, [&](const auto& row) { return other_ids.contains(row.first); });

    std::map<std::string, std::string> by_id;
    for (const auto& [id, text] : preds) {
      if (!by_id.emplace(id, text).second) throw DataError("duplicate prediction id " + id);
    }
    std::set<std::string> ref_ids;
    std::vector<std::string> missing_pred, missing_ref;
    for (const auto& r : refs) {
      if (!ref_ids.insert(r.id).second) throw DataError("duplicate reference id " + r.id);
      if (!by_id.contains(r.id)) missing_pred.push_back(r.id);
    }
    for (const auto& [id, text] : preds) {
      if (!ref_ids.contains(id)) missing_ref.push_back(id);
    }
    if (!missing_pred.empty() || !missing_ref.empty()) throw AlignmentError(missing_pred, missing_ref);
    if (refs.empty()) throw DataError("no records to evaluate");
    for (const auto& r : refs) {
      if (r.direction != refs.front().direction) {
        throw ConfigError("references mix both directions; select one with --direction");
      }
    }

    std::vector<eval::PairMetricRecord> records;
    records.reserve(refs.size());
    for (const auto& r : refs) records.push_back(eval::score_pair({r.id, r.direction, by_id.at(r.id), r.target}));

    if (refs.front().direction == data::Direction::kMol2Lang && scorer) {
      std::vector<eval::NliRequest> reqs;
      for (const auto& r : refs) reqs.push_back({r.id, r.target, by_id.at(r.id)});
      std::vector<std::optional<eval::NliVerdict>> verdicts;
      try {
        verdicts = scorer->score_batch(reqs);
      } catch (const eval::ScorerError& e) {
        log << "warning: NLI scorer failed, all records unevaluated: " << e.what() << "\n";
        verdicts.assign(reqs.size(), std::nullopt);
      }
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (i < verdicts.size() && verdicts[i]) eval::attach_nli(records[i], *verdicts[i]);
      }
    }

    std::vector<std::string> lines;
    for (const auto& r : records) lines.push_back(record_to_json(r).dump());
    data::write_file_atomic(cfg.out_dir / "records.jsonl", write_lines(lines));
    m.output(cfg.out_dir / "records.jsonl");

    const auto rep = eval::aggregate_report(records);
    json rj = report_to_json(rep);
    if (scorer) rj["nli_scorer"] = scorer->name();
    data::write_file_atomic(cfg.out_dir / "report.json", rj.dump(2) + "\n");
    m.output(cfg.out_dir / "report.json");
    for (const auto& s : rep.metrics) {
      const Path csv = cfg.out_dir / ("hist_" + s.name + ".csv");
      data::write_file_atomic(csv, histogram_csv(s.histogram));
      m.output(csv);
    }
    log << data::to_string(rep.direction) << ": " << rep.count << " records, win rate " << rep.win_rate;
    if (rep.direction == data::Direction::kMol2Lang) log << ", NLI excluded " << rep.nli_excluded;
    log << "\n";
  }

  if (margin_mode) {
    require_path(cfg.model_path, "--model with --triples", cfg.command);
    m.input(cfg.model_path);
    m.input(cfg.triples);
    const auto model = merge::load_checkpoint(cfg.model_path);
    const auto rows = filter_direction(data::read_triples(cfg.triples), cfg.direction);
    if (rows.empty()) throw DataError("no triples for the margin");
    const auto enc = train::encode_triples(model, rows);
    const double margin = train::preference_margin(model, enc);
    json j;
    j["count"] = rows.size();
    j["margin"] = margin;
    data::write_file_atomic(cfg.out_dir / "margin.json", j.dump(2) + "\n");
    m.output(cfg.out_dir / "margin.json");
    log << "preference margin " << margin << " over " << rows.size() << " triples\n";
  }
  m.write(cfg.out_dir / "manifest.json");
}

// ---- report -----------------------------------------------------------------------------------

void cmd_report(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.out, "--out", cfg.command);
  if (cfg.reports.empty()) throw ConfigError("report needs at least one --reports file");
  if (!cfg.labels.empty() && cfg.labels.size() != cfg.reports.size()) {
    throw ConfigError("--labels needs one label per report");
  }
  Manifest m(cfg);
  std::vector<std::string> metric_names;
  std::vector<json> rows;
  for (std::size_t i = 0; i < cfg.reports.size(); ++i) {
    m.input(cfg.reports[i]);
    json rep;
    try {
      rep = json::parse(data::read_file(cfg.reports[i]));
    } catch (const json::exception& e) {
      throw DataError(cfg.reports[i].string() + ": " + e.what());
    }
    if (!rep.contains("metrics") || !rep.contains("win_rate")) {
      throw DataError(cfg.reports[i].string() + " is not an eval report");
    }
    json row;
    row["label"] = cfg.labels.empty() ? cfg.reports[i].parent_path().filename().string() : cfg.labels[i];
    row["direction"] = rep.value("direction", "");
    row["count"] = rep.value("count", 0);
    row["win_rate"] = rep["win_rate"];
    for (const auto& [name, s] : rep["metrics"].items()) {
      if (std::find(metric_names.begin(), metric_names.end(), name) == metric_names.end()) {
        metric_names.push_back(name);
      }
      row[name + "_mean"] = s.value("mean", 0.0);
      row[name + "_median"] = s.value("median", 0.0);
    }
    rows.push_back(row);
  }

  std::string csv = "label,direction,count,win_rate";
  for (const auto& n : metric_names) csv += "," + n + "_mean," + n + "_median";
  csv += "\n";
  auto cell = [](const json& v) {
    if (v.is_null()) return std::string();
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  };
  for (const auto& r : rows) {
    csv += cell(r["label"]) + "," + cell(r["direction"]) + "," + cell(r["count"]) + "," + cell(r["win_rate"]);
    for (const auto& n : metric_names) {
      csv += "," + (r.contains(n + "_mean") ? cell(r[n + "_mean"]) : "");
      csv += "," + (r.contains(n + "_median") ? cell(r[n + "_median"]) : "");
    }
    csv += "\n";
  }
  data::write_file_atomic(cfg.out, csv);
  m.output(cfg.out);
  Path json_out = cfg.out;
  json_out.replace_extension(".json");
  if (json_out != cfg.out) {
    data::write_file_atomic(json_out, json(rows).dump(2) + "\n");
    m.output(json_out);
  }
  m.write_beside(cfg.out);
  log << "summarized " << rows.size() << " reports into " << cfg.out.string() << "\n";
}

}  // namespace chemalign::cli
