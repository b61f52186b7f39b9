#pragma once

// Dataset records, instruction rendering, toy corpus generation and
// preference-data construction.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace chemalign::data {

enum class Direction { kLang2Mol, kMol2Lang };

std::string_view to_string(Direction d);
Direction parse_direction(std::string_view s);

enum class Label { kPreferred, kDispreferred };

std::string_view to_string(Label l);
Label parse_label(std::string_view s);

struct LMPair {
  std::string id;
  Direction direction = Direction::kLang2Mol;
  std::string source;
  std::string target;

  friend bool operator==(const LMPair&, const LMPair&) = default;
};

struct PreferenceTriple {
  std::string id;
  Direction direction = Direction::kLang2Mol;
  std::string source;
  std::string preferred;
  std::string dispreferred;

  bool degenerate() const { return preferred == dispreferred; }
  friend bool operator==(const PreferenceTriple&, const PreferenceTriple&) = default;
};

struct KtoExample {
  std::string id;
  Direction direction = Direction::kLang2Mol;
  std::string source;
  std::string output;
  Label label = Label::kPreferred;

  friend bool operator==(const KtoExample&, const KtoExample&) = default;
};

// ---- instruction templates ----------------------------------------------------

struct InstructionTemplate {
  Direction direction;
  std::string_view prompt_before_source;
  std::string_view prompt_after_source;  // ends with the response marker
  std::string_view response_marker;
};

const InstructionTemplate& instruction_template(Direction d);

// Renders the instruction for `source`; with no target the string ends
// exactly at the response marker. Throws DataError when the source is empty
// or contains the marker.
std::string render_instruction(const InstructionTemplate& t, std::string_view source,
                               std::optional<std::string_view> target = std::nullopt);

// ---- JSONL -------------------------------------------------------------------------

std::string to_json_line(const LMPair& p);
std::string to_json_line(const PreferenceTriple& t);
std::string to_json_line(const KtoExample& k);

LMPair pair_from_json(std::string_view line);
PreferenceTriple triple_from_json(std::string_view line);
KtoExample kto_from_json(std::string_view line);

std::vector<LMPair> read_pairs(const std::filesystem::path& path);
std::vector<PreferenceTriple> read_triples(const std::filesystem::path& path);
std::vector<KtoExample> read_kto(const std::filesystem::path& path);

void write_pairs(const std::filesystem::path& path, const std::vector<LMPair>& rows);
void write_triples(const std::filesystem::path& path, const std::vector<PreferenceTriple>& rows);
void write_kto(const std::filesystem::path& path, const std::vector<KtoExample>& rows);

// Writes `contents` to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// ---- toy corpus ----------------------------------------------------------------------

enum class FunctionalGroup { kNone, kHydroxyl, kAmino, kCarboxylicAcid };

struct ToyMolecule {
  int carbons = 1;                      // 1..10
  FunctionalGroup group = FunctionalGroup::kNone;
  std::optional<int> methyl_branch;     // carbon index (1-based) bearing a methyl

  std::string smiles() const;
  std::string caption() const;
};

// Every molecule the toy grammar can produce, in a fixed order.
std::vector<ToyMolecule> toy_grammar();

// n pairs, directions alternating lang2mol / mol2lang, molecules drawn
// uniformly from toy_grammar() with a seeded generator.
std::vector<LMPair> gen_toy_corpus(int n, std::uint64_t seed);

// ---- corruption and triples ------------------------------------------------------------

// Applies max(1, round(strength * units)) random edits (substitution,
// truncation, duplication). SMILES targets are edited at token granularity
// and stay tokenizable; captions are edited at word granularity. The result
// always differs from `target`.
std::string corrupt_target(std::string_view target, Direction direction, double strength,
                           std::uint64_t seed);

// Produces a dis-preferred output for a pair; nullopt signals failure.
using Generator = std::function<std::optional<std::string>(const LMPair&, std::uint64_t seed)>;

Generator corruption_generator(double strength);

struct TripleBuild {
  std::vector<PreferenceTriple> triples;
  std::size_t skipped = 0;
  std::size_t degenerate = 0;
};

// Per-pair generator seeds are derived from (seed, pair index).
TripleBuild build_triples(const std::vector<LMPair>& pairs, const Generator& generator,
                          std::uint64_t seed);

std::vector<KtoExample> triples_to_kto(const std::vector<PreferenceTriple>& triples);

struct Splits {
  std::vector<LMPair> train, val, test;
};

Splits split_dataset(const std::vector<LMPair>& pairs, const std::vector<double>& fractions,
                     std::uint64_t seed);

// Deterministic seed derivation shared by the pipeline.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Uniform double in [0, 1) from a 64-bit generator, identical on every
// standard library implementation.
template <typename Rng>
double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename Rng>
std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

}  // namespace chemalign::data
