#include "chemalign/data.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "chemalign/chem.hpp"
#include "chemalign/errors.hpp"

namespace chemalign::data {

using nlohmann::json;

std::string_view to_string(Direction d) {
  return d == Direction::kLang2Mol ? "lang2mol" : "mol2lang";
}

Direction parse_direction(std::string_view s) {
  if (s == "lang2mol") return Direction::kLang2Mol;
  if (s == "mol2lang") return Direction::kMol2Lang;
  throw DataError("unknown direction '" + std::string(s) + "'");
}

std::string_view to_string(Label l) { return l == Label::kPreferred ? "preferred" : "dispreferred"; }

Label parse_label(std::string_view s) {
  if (s == "preferred") return Label::kPreferred;
  if (s == "dispreferred") return Label::kDispreferred;
  throw DataError("unknown label '" + std::string(s) + "'");
}

// ---- instruction templates ---------------------------------------------------------

namespace {

const InstructionTemplate kMol2Lang{
    Direction::kMol2Lang,
    "Below is an instruction that describes a task, paired with an input that provides further "
    "context.\n"
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction: You are a researcher. You can come up captions based on your existing "
    "knowledge.\n"
    "Captions are given against the following input. You should be as detailed as possible.\n\n"
    "### Input: Molecule: ",
    "\nIn that molecule, could you formulate a caption about?\n\n\n"
    "### Response:",
    "### Response:"};

const InstructionTemplate kLang2Mol{
    Direction::kLang2Mol,
    "Below is an instruction that describes a task, paired with an input that provides further "
    "context.\n"
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction: You are a researcher. You can come up molecule smile strings based on your "
    "existing knowledge.\n"
    "Molecule smile strings are given against the following input. You should be as detailed as "
    "possible.\n\n"
    "### Input: Caption: ",
    "\nIn that caption, could you generate a molecule smile string?\n\n\n"
    "### Response: ",
    "### Response: "};

}  // namespace

const InstructionTemplate& instruction_template(Direction d) {
  return d == Direction::kLang2Mol ? kLang2Mol : kMol2Lang;
}

std::string render_instruction(const InstructionTemplate& t, std::string_view source,
                               std::optional<std::string_view> target) {
  if (source.empty()) throw DataError("render_instruction: empty source");
  // Any occurrence of the bare marker would make the prompt/response split ambiguous.
  constexpr std::string_view kMarkerCore = "### Response:";
  if (source.find(kMarkerCore) != std::string_view::npos) {
    throw DataError("render_instruction: source contains the response marker");
  }
  std::string out;
  out.reserve(t.prompt_before_source.size() + source.size() + t.prompt_after_source.size() +
              (target ? target->size() : 0));
  out += t.prompt_before_source;
  out += source;
  out += t.prompt_after_source;
  if (target) out += *target;
  return out;
}

// ---- JSONL ---------------------------------------------------------------------------

namespace {

std::string require_string(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw DataError(std::string("missing string field '") + key + "'");
  }
  return j.at(key).get<std::string>();
}

json parse_line(std::string_view line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid JSON: ") + e.what());
  }
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <typename T>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& rows) {
  std::string buf;
  for (const auto& r : rows) {
    buf += to_json_line(r);
    buf += '\n';
  }
  write_file_atomic(path, buf);
}

}  // namespace

std::string to_json_line(const LMPair& p) {
  json j;
  j["id"] = p.id;
  j["direction"] = to_string(p.direction);
  j["source"] = p.source;
  j["target"] = p.target;
  return j.dump();
}

std::string to_json_line(const PreferenceTriple& t) {
  json j;
  j["id"] = t.id;
  j["direction"] = to_string(t.direction);
  j["source"] = t.source;
  j["preferred"] = t.preferred;
  j["dispreferred"] = t.dispreferred;
  return j.dump();
}

std::string to_json_line(const KtoExample& k) {
  json j;
  j["id"] = k.id;
  j["direction"] = to_string(k.direction);
  j["source"] = k.source;
  j["output"] = k.output;
  j["label"] = to_string(k.label);
  return j.dump();
}

LMPair pair_from_json(std::string_view line) {
  const json j = parse_line(line);
  LMPair p{require_string(j, "id"), parse_direction(require_string(j, "direction")),
           require_string(j, "source"), require_string(j, "target")};
  if (p.source.empty() || p.target.empty()) throw DataError("pair " + p.id + " has an empty field");
  return p;
}

PreferenceTriple triple_from_json(std::string_view line) {
  const json j = parse_line(line);
  PreferenceTriple t{require_string(j, "id"), parse_direction(require_string(j, "direction")),
                     require_string(j, "source"), require_string(j, "preferred"),
                     require_string(j, "dispreferred")};
  if (t.source.empty() || t.preferred.empty() || t.dispreferred.empty()) {
    throw DataError("triple " + t.id + " has an empty field");
  }
  return t;
}

KtoExample kto_from_json(std::string_view line) {
  const json j = parse_line(line);
  KtoExample k{require_string(j, "id"), parse_direction(require_string(j, "direction")),
               require_string(j, "source"), require_string(j, "output"),
               parse_label(require_string(j, "label"))};
  if (k.source.empty() || k.output.empty()) throw DataError("example " + k.id + " has an empty field");
  return k;
}

std::vector<LMPair> read_pairs(const std::filesystem::path& path) {
  return read_jsonl<LMPair>(path, pair_from_json);
}
std::vector<PreferenceTriple> read_triples(const std::filesystem::path& path) {
  return read_jsonl<PreferenceTriple>(path, triple_from_json);
}
std::vector<KtoExample> read_kto(const std::filesystem::path& path) {
  return read_jsonl<KtoExample>(path, kto_from_json);
}

void write_pairs(const std::filesystem::path& path, const std::vector<LMPair>& rows) {
  write_jsonl(path, rows);
}
void write_triples(const std::filesystem::path& path, const std::vector<PreferenceTriple>& rows) {
  write_jsonl(path, rows);
}
void write_kto(const std::filesystem::path& path, const std::vector<KtoExample>& rows) {
  write_jsonl(path, rows);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- toy corpus ------------------------------------------------------------------------

std::string ToyMolecule::smiles() const {
  std::string s;
  for (int c = 1; c <= carbons; ++c) {
    s += 'C';
    if (methyl_branch && *methyl_branch == c) s += "(C)";
  }
  switch (group) {
    case FunctionalGroup::kNone: break;
    case FunctionalGroup::kHydroxyl: s += 'O'; break;
    case FunctionalGroup::kAmino: s += 'N'; break;
    case FunctionalGroup::kCarboxylicAcid: s += "(=O)O"; break;
  }
  return s;
}

std::string ToyMolecule::caption() const {
  std::string s = "a chain of " + std::to_string(carbons) + (carbons == 1 ? " carbon" : " carbons");
  switch (group) {
    case FunctionalGroup::kNone: break;
    case FunctionalGroup::kHydroxyl: s += " bearing one hydroxyl group"; break;
    case FunctionalGroup::kAmino: s += " bearing one amino group"; break;
    case FunctionalGroup::kCarboxylicAcid: s += " bearing one carboxylic acid group"; break;
  }
  if (methyl_branch) {
    s += group == FunctionalGroup::kNone ? " with" : " and";
    s += " a methyl branch at carbon " + std::to_string(*methyl_branch);
  }
  return s;
}

std::vector<ToyMolecule> toy_grammar() {
  std::vector<ToyMolecule> out;
  constexpr FunctionalGroup kGroups[] = {FunctionalGroup::kNone, FunctionalGroup::kHydroxyl,
                                         FunctionalGroup::kAmino, FunctionalGroup::kCarboxylicAcid};
  for (FunctionalGroup g : kGroups) {
    for (int n = 1; n <= 10; ++n) {
      out.push_back(ToyMolecule{n, g, std::nullopt});
      for (int k = 2; k <= n - 1; ++k) out.push_back(ToyMolecule{n, g, k});
    }
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return chem::hash_combine(chem::mix64(seed), stream);
}

std::vector<LMPair> gen_toy_corpus(int n, std::uint64_t seed) {
  if (n < 1) throw ContractError("gen_toy_corpus: n must be >= 1");
  const auto grammar = toy_grammar();
  std::mt19937_64 rng(seed);
  std::vector<LMPair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const ToyMolecule& m = grammar[uniform_index(rng, grammar.size())];
    char id[32];
    std::snprintf(id, sizeof id, "toy-%06d", i);
    if (i % 2 == 0) {
      out.push_back(LMPair{id, Direction::kLang2Mol, m.caption(), m.smiles()});
    } else {
      out.push_back(LMPair{id, Direction::kMol2Lang, m.smiles(), m.caption()});
    }
  }
  return out;
}

// ---- corruption --------------------------------------------------------------------------

namespace {

const std::vector<std::string>& smiles_alphabet() {
  static const std::vector<std::string> a = {"C", "N", "O", "(", ")", "=", "#", "1"};
  return a;
}

const std::vector<std::string>& caption_alphabet() {
  static const std::vector<std::string> a = {
      "a",   "chain",      "of",   "carbon", "carbons", "bearing", "one",    "hydroxyl",
      "amino", "carboxylic", "acid", "group",  "with",    "and",     "methyl", "branch",
      "at",  "1",          "2",    "3",      "4",       "5",       "6",      "7",
      "8",   "9",          "10"};
  return a;
}

std::vector<std::string> split_units(std::string_view target, Direction direction) {
  std::vector<std::string> units;
  if (direction == Direction::kLang2Mol) {
    try {
      for (const auto& tok : chem::tokenize_smiles(target)) {
        units.emplace_back(target.substr(tok.offset, tok.length));
      }
      return units;
    } catch (const chem::TokenizeError&) {
      units.clear();
    }
    for (char c : target) units.emplace_back(1, c);
    return units;
  }
  std::istringstream in{std::string(target)};
  std::string w;
  while (in >> w) units.push_back(w);
  return units;
}

std::string join_units(const std::vector<std::string>& units, Direction direction) {
  std::string out;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (direction == Direction::kMol2Lang && i > 0) out += ' ';
    out += units[i];
  }
  return out;
}

template <typename Rng>
void substitute(std::vector<std::string>& units, const std::vector<std::string>& alphabet, Rng& rng) {
  const std::size_t pos = uniform_index(rng, units.size());
  std::vector<std::string> choices;
  for (const auto& a : alphabet) {
    if (a != units[pos]) choices.push_back(a);
  }
  units[pos] = choices[uniform_index(rng, choices.size())];
}

}  // namespace

std::string corrupt_target(std::string_view target, Direction direction, double strength,
                           std::uint64_t seed) {
  if (!(strength > 0.0 && strength <= 1.0)) throw ContractError("corrupt_target: strength must be in (0, 1]");
  const auto& alphabet = direction == Direction::kLang2Mol ? smiles_alphabet() : caption_alphabet();
  std::vector<std::string> units = split_units(target, direction);
  if (units.empty()) units.push_back(alphabet.front());
  std::mt19937_64 rng(seed);
  const auto edits = std::max<long>(1, std::lround(strength * static_cast<double>(units.size())));
  for (long e = 0; e < edits; ++e) {
    const double kind = uniform01(rng);
    if (kind < 0.6 || units.size() < 2) {
      substitute(units, alphabet, rng);
    } else if (kind < 0.8) {
      const std::size_t keep = 1 + uniform_index(rng, units.size() - 1);
      units.resize(keep);
    } else {
      const std::size_t len = 1 + uniform_index(rng, std::min<std::size_t>(3, units.size()));
      const std::size_t start = uniform_index(rng, units.size() - len + 1);
      std::vector<std::string> span(units.begin() + static_cast<long>(start),
                                    units.begin() + static_cast<long>(start + len));
      units.insert(units.begin() + static_cast<long>(start + len), span.begin(), span.end());
    }
  }
  std::string out = join_units(units, direction);
  while (out == target) {
    substitute(units, alphabet, rng);
    out = join_units(units, direction);
  }
  return out;
}

Generator corruption_generator(double strength) {
  if (!(strength > 0.0 && strength <= 1.0)) throw ContractError("corruption strength must be in (0, 1]");
  return [strength](const LMPair& p, std::uint64_t seed) -> std::optional<std::string> {
    return corrupt_target(p.target, p.direction, strength, seed);
  };
}

TripleBuild build_triples(const std::vector<LMPair>& pairs, const Generator& generator,
                          std::uint64_t seed) {
  TripleBuild out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const LMPair& p = pairs[i];
    std::optional<std::string> neg;
    try {
      neg = generator(p, derive_seed(seed, i));
    } catch (const std::exception&) {
      neg.reset();
    }
    if (!neg || neg->empty()) {
      ++out.skipped;
      continue;
    }
    PreferenceTriple t{p.id, p.direction, p.source, p.target, std::move(*neg)};
    if (t.degenerate()) ++out.degenerate;
    out.triples.push_back(std::move(t));
  }
  return out;
}

std::vector<KtoExample> triples_to_kto(const std::vector<PreferenceTriple>& triples) {
  std::vector<KtoExample> out;
  out.reserve(triples.size() * 2);
  for (const auto& t : triples) {
    out.push_back(KtoExample{t.id + "/preferred", t.direction, t.source, t.preferred, Label::kPreferred});
    out.push_back(KtoExample{t.id + "/dispreferred", t.direction, t.source, t.dispreferred,
                             Label::kDispreferred});
  }
  return out;
}

Splits split_dataset(const std::vector<LMPair>& pairs, const std::vector<double>& fractions,
                     std::uint64_t seed) {
  if (fractions.size() != 3) throw ContractError("split_dataset: need three fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ContractError("split_dataset: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("split_dataset: fractions must sum to 1");

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  const std::size_t n = pairs.size();
  const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(fractions[0] * n)));
  const auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
  Splits s;
  for (std::size_t i = 0; i < n; ++i) {
    const LMPair& p = pairs[order[i]];
    if (i < n_train) {
      s.train.push_back(p);
    } else if (i < n_train + n_val) {
      s.val.push_back(p);
    } else {
      s.test.push_back(p);
    }
  }
  return s;
}

}  // namespace chemalign::data
