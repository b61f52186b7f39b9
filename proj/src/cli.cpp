#include <algorithm>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "chemalign/chem.hpp"
#include "chemalign/commands.hpp"
#include "chemalign/nli.hpp"

namespace chemalign::cli {

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const CompatibilityError*>(&e)) return kExitCompatibility;
  if (dynamic_cast<const TrainingDivergedError*>(&e)) return kExitDiverged;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const LengthError*>(&e) ||
      dynamic_cast<const merge::CheckpointError*>(&e) || dynamic_cast<const chem::ParseError*>(&e) ||
      dynamic_cast<const chem::TokenizeError*>(&e)) {
    return kExitData;
  }
  return kExitOther;
}

namespace {

// Plain `key = value` lines; '#' starts a comment. Values split on whitespace.
std::vector<std::pair<std::string, std::vector<std::string>>> read_config_file(const Path& path) {
  std::istringstream in(data::read_file(path));
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    std::istringstream vs(line.substr(eq + 1));
    std::vector<std::string> values;
    for (std::string v; vs >> v;) values.push_back(v);
    out.emplace_back(std::move(key), std::move(values));
  }
  return out;
}

std::optional<std::string> config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
    return a == flag || a.rfind(flag + "=", 0) == 0;
  });
}

// Appends file settings for options the command line leaves unset.
std::vector<std::string> apply_config_file(std::vector<std::string> args, CLI::App& sub) {
  const auto path = config_path(args);
  if (!path) return args;
  for (const auto& [key, values] : read_config_file(*path)) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = nullptr;
    try {
      opt = sub.get_option(flag);
    } catch (const CLI::OptionNotFound&) {
      throw ConfigError(*path + ": unknown setting '" + key + "' for " + sub.get_name());
    }
    if (given_on_command_line(args, flag)) continue;
    if (opt->get_type_size() == 0) {
      if (values.size() != 1) throw ConfigError(*path + ": '" + key + "' expects true or false");
      if (values[0] == "true" || values[0] == "1") {
        args.push_back(flag);
      } else if (values[0] != "false" && values[0] != "0") {
        throw ConfigError(*path + ": '" + key + "' expects true or false");
      }
      continue;
    }
    args.push_back(flag);
    args.insert(args.end(), values.begin(), values.end());
  }
  return args;
}

std::vector<std::pair<std::string, std::string>> resolved_options(const CLI::App& sub) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const CLI::Option* opt : sub.get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help" || names.front() == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      if (opt->get_type_size() == 0) {
        value = "true";
      } else {
        for (const auto& r : opt->results()) value += (value.empty() ? "" : " ") + r;
      }
    } else {
      value = opt->get_default_str();
      if (opt->get_type_size() == 0 && value.empty()) value = "false";
    }
    out.emplace_back(names.front(), value);
  }
  return out;
}

struct Strings {
  std::string direction, method = "sft", algorithm = "slerp";
  std::uint64_t seed = 0;
};

void add_direction(CLI::App* sub, Strings& s) {
  sub->add_option("--direction", s.direction, "Keep only records of this direction")
      ->check(CLI::IsMember({"lang2mol", "mol2lang"}));
}

void add_seed(CLI::App* sub, Strings& s) { sub->add_option("--seed", s.seed, "Random seed"); }

void add_model_config(CLI::App* sub, RunConfig& c) {
  sub->add_option("--d-model", c.model.d_model, "Embedding width for a fresh model");
  sub->add_option("--layers", c.model.n_layers, "Transformer blocks for a fresh model");
  sub->add_option("--heads", c.model.n_heads, "Attention heads for a fresh model");
  sub->add_option("--context", c.model.context, "Maximum prompt + target tokens");
  sub->add_option("--window", c.model.window, "Attention span of the top block");
  sub->add_option("--local-window", c.model.local_window, "Attention span of lower blocks");
  sub->add_option("--mlp-mult", c.model.mlp_mult, "MLP hidden width multiplier");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig c;
  Strings s;
  CLI::App app{"Preference optimization, model fusion and evaluation for language-molecule translation",
               "chemalign"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic caption/SMILES corpus");
  gen->add_option("--n", c.n, "Number of pairs");
  add_seed(gen, s);
  gen->add_option("--out", c.out, "Output pairs JSONL");

  auto* split = app.add_subcommand("split", "Split pairs into train/val/test");
  split->add_option("--data", c.data, "Input pairs JSONL");
  split->add_option("--fractions", c.fractions, "Train, val and test fractions")->expected(3);
  add_seed(split, s);
  split->add_option("--out-dir", c.out_dir, "Directory for train/val/test.jsonl");

  auto* triples = app.add_subcommand("build-triples", "Build preference triples from pairs");
  triples->add_option("--data", c.data, "Input pairs JSONL");
  add_direction(triples, s);
  triples->add_option("--generator", c.generator, "corruption or policy")
      ->check(CLI::IsMember({"corruption", "policy"}));
  triples->add_option("--strength", c.strength, "Corruption strength in (0, 1]");
  triples->add_option("--model", c.model_path, "Checkpoint for the policy generator");
  triples->add_option("--temperature", c.temperature, "Sampling temperature of the policy generator");
  triples->add_option("--max-len", c.max_len, "Maximum generated length");
  add_seed(triples, s);
  triples->add_option("--out", c.out, "Output triples JSONL");
  triples->add_option("--kto-out", c.kto_out, "Also write labeled KTO examples here");

  auto* trn = app.add_subcommand("train", "Train a policy with sft, dpo, cpo or kto");
  trn->add_option("--method", s.method, "sft, dpo, cpo or kto")
      ->check(CLI::IsMember({"sft", "dpo", "cpo", "kto"}));
  trn->add_option("--data", c.data, "Pairs (sft), triples (dpo/cpo) or labeled examples/triples (kto)");
  add_direction(trn, s);
  trn->add_option("--init", c.init, "Initial checkpoint (sft may start from scratch)");
  trn->add_option("--ref", c.ref, "Frozen reference checkpoint (dpo/kto only)");
  trn->add_option("--vocab-from", c.vocab_from, "Pairs JSONL defining the vocabulary of a fresh model");
  add_model_config(trn, c);
  trn->add_option("--beta", c.loss.beta, "Temperature on log-ratio margins");
  trn->add_option("--lambda-p", c.loss.lambda_p, "KTO weight of preferred examples");
  trn->add_option("--lambda-d", c.loss.lambda_d, "KTO weight of dis-preferred examples");
  trn->add_option("--lr", c.lr, "Adam learning rate");
  trn->add_option("--epochs", c.epochs, "Passes over the data");
  trn->add_option("--batch-size", c.batch_size, "Examples per step");
  trn->add_option("--clip-norm", c.clip_norm, "Gradient norm clip (0 disables)");
  add_seed(trn, s);
  trn->add_option("--out", c.out, "Output checkpoint");
  trn->add_option("--log", c.log, "Training log JSONL (default <out>.log.jsonl)");

  auto* tr = app.add_subcommand("translate", "Decode predictions for the sources of a pairs file");
  tr->add_option("--model", c.model_path, "Checkpoint");
  tr->add_option("--data", c.data, "Pairs JSONL whose sources are translated");
  add_direction(tr, s);
  tr->add_option("--max-len", c.max_len, "Maximum generated length");
  tr->add_flag("--sample", c.sample, "Sample instead of greedy decoding");
  tr->add_option("--temperature", c.temperature, "Sampling temperature");
  add_seed(tr, s);
  tr->add_option("--out", c.out, "Output predictions JSONL");

  auto* mrg = app.add_subcommand("merge", "Fuse checkpoints with ties, slerp or lerp");
  mrg->add_option("--algo", s.algorithm, "ties, slerp or lerp")
      ->check(CLI::IsMember({"ties", "slerp", "lerp"}));
  mrg->add_option("--models", c.models, "Checkpoints to fuse");
  mrg->add_option("--weights", c.weights, "One non-negative weight per model, e.g. 19 1");
  mrg->add_option("--base", c.base, "Base checkpoint for ties task vectors");
  mrg->add_option("--density", c.density, "Fraction of task-vector entries ties keeps");
  mrg->add_option("--lambda", c.lambda, "Scale of the merged ties delta");
  mrg->add_option("--parallel-threshold", c.parallel_threshold, "|cos| above which slerp falls back to lerp");
  mrg->add_option("--out", c.out, "Output checkpoint");

  auto* ev = app.add_subcommand("eval", "Score predictions and/or preference margins");
  ev->add_option("--pred", c.pred, "Predictions JSONL");
  ev->add_option("--pred-field", c.pred_field, "Field of --pred holding the prediction text");
  ev->add_option("--data", c.data, "Reference pairs JSONL");
  add_direction(ev, s);
  ev->add_option("--nli-scorer", c.nli_scorer, "lexical, cmd:<command> or http://host:port/path");
  ev->add_option("--model", c.model_path, "Checkpoint for the preference margin");
  ev->add_option("--triples", c.triples, "Triples JSONL for the preference margin");
  ev->add_option("--out-dir", c.out_dir, "Directory for records, report and histograms");

  auto* rep = app.add_subcommand("report", "Tabulate eval reports as CSV and JSON");
  rep->add_option("--reports", c.reports, "report.json files");
  rep->add_option("--labels", c.labels, "Row label per report");
  rep->add_option("--out", c.out, "Output CSV (a .json twin is written beside it)");

  for (CLI::App* sub : app.get_subcommands({})) {
    sub->add_option("--config", "Plain key = value file; command-line flags take precedence");
  }

  try {
    std::vector<std::string> full = args;
    if (!full.empty()) {
      CLI::App* sub = nullptr;
      try {
        sub = app.get_subcommand(full.front());
      } catch (const CLI::OptionNotFound&) {
      }
      if (sub != nullptr) {
        std::vector<std::string> rest(full.begin() + 1, full.end());
        rest = apply_config_file(std::move(rest), *sub);
        full.resize(1);
        full.insert(full.end(), rest.begin(), rest.end());
      }
    }
    std::vector<std::string> reversed(full.rbegin(), full.rend());
    app.parse(reversed);

    CLI::App* sub = app.get_subcommands().front();
    c.command = sub->get_name();
    if (const auto* o = sub->get_option_no_throw("--seed"); o != nullptr && o->count() > 0) c.seed = s.seed;
    if (!s.direction.empty()) c.direction = data::parse_direction(s.direction);
    c.method = train::parse_method(s.method);
    c.algorithm = merge::parse_algorithm(s.algorithm);
    c.echo = resolved_options(*sub);

    if (c.command == "gen-data") cmd_gen_data(c, out);
    else if (c.command == "split") cmd_split(c, out);
    else if (c.command == "build-triples") cmd_build_triples(c, out);
    else if (c.command == "train") cmd_train(c, out);
    else if (c.command == "translate") cmd_translate(c, out);
    else if (c.command == "merge") cmd_merge(c, out);
    else if (c.command == "eval") cmd_eval(c, out);
    else if (c.command == "report") cmd_report(c, out);
    return kExitOk;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    const char* kind = code == kExitConfig          ? "config error"
                       : code == kExitData          ? "data error"
                       : code == kExitCompatibility ? "compatibility error"
                       : code == kExitDiverged      ? "training diverged"
                                                    : "error";
    err << kind << ": " << e.what() << "\n";
    return code;
  }
}

}  // namespace chemalign::cli
