#pragma once

// SMILES tokenization and parsing, valence validation, and Morgan-style
// circular fingerprints with Tanimoto similarity.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chemalign::chem {

enum class TokenKind {
  kAtom,         // organic-subset atom, e.g. C, Cl, c
  kBracketAtom,  // [13CH3+]
  kBond,         // - = # : / \ .
  kBranchOpen,
  kBranchClose,
  kRingClosure,  // 1-9 or %nn
  kDot,
};

enum class BondOrder : std::uint8_t { kSingle = 1, kDouble = 2, kTriple = 3, kAromatic = 4 };

struct SmilesToken {
  TokenKind kind = TokenKind::kAtom;
  std::size_t offset = 0;
  std::size_t length = 0;
  // Payload (meaningful for atom kinds unless noted).
  std::string element;  // normalized symbol, e.g. "C", "Cl"; aromatic lowercase kept as "c"
  bool aromatic = false;
  int charge = 0;
  int hydrogens = 0;   // explicit H count (bracket atoms only)
  int isotope = 0;     // 0 when absent
  int ring_digit = 0;  // ring closures
  BondOrder bond = BondOrder::kSingle;  // bonds
};

class TokenizeError : public std::runtime_error {
 public:
  TokenizeError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

std::vector<SmilesToken> tokenize_smiles(std::string_view smiles);

struct Atom {
  std::string element;  // capitalized symbol ("C", "Cl", "N")
  bool aromatic = false;
  int charge = 0;
  int explicit_h = 0;
  bool bracket = false;
};

struct Bond {
  int a = 0;
  int b = 0;
  BondOrder order = BondOrder::kSingle;
};

struct MolGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  int fragments = 0;

  std::vector<int> neighbors(int atom) const;
  // Sum of bond orders with aromatic bonds counted as 1.5.
  double bond_order_sum(int atom) const;
  int degree(int atom) const;
  // Implicit hydrogens for organic-subset atoms (0 for bracket atoms).
  int implicit_h(int atom) const;
  int total_h(int atom) const { return atoms[atom].explicit_h + implicit_h(atom); }
};

enum class ParseErrc {
  kTokenize,
  kEmpty,
  kUnmatchedBranch,
  kEmptyBranch,
  kUnclosedRing,
  kDanglingBond,
  kRingBondConflict,
  kInvalidRingBond,  // ring closure onto itself or onto an existing neighbor
};

const char* to_string(ParseErrc code);

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrc code, const std::string& what, std::size_t offset)
      : std::runtime_error(std::string(to_string(code)) + ": " + what + " at offset " +
                           std::to_string(offset)),
        code_(code),
        offset_(offset) {}
  ParseErrc code() const { return code_; }
  std::size_t offset() const { return offset_; }

 private:
  ParseErrc code_;
  std::size_t offset_;
};

MolGraph parse_smiles(std::string_view smiles);

struct Violation {
  int atom = -1;
  std::string message;
};

struct ValidationResult {
  std::vector<Violation> violations;
  bool valid() const { return violations.empty(); }
};

// Highest allowed valence for the element after charge adjustment, or nullopt
// for elements outside the checked table (those are not valence-checked).
std::optional<int> max_valence(std::string_view element, int charge);

ValidationResult validate_molecule(const MolGraph& g);

// Tokenize + parse + valence check; never throws.
bool is_valid_smiles(std::string_view smiles);

struct Fingerprint {
  std::vector<std::uint64_t> words;
  int nbits = 0;
  int radius = 0;

  bool test(int bit) const { return (words[bit / 64] >> (bit % 64)) & 1u; }
  int popcount() const;
  std::vector<int> on_bits() const;
};

// Bit-mixing hash used for every fingerprint invariant. Stable for the life of
// the repository: splitmix64 finalizer over (seed ^ value) chains.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value);

Fingerprint morgan_fingerprint(const MolGraph& g, int radius = 2, int nbits = 2048);

double tanimoto(const Fingerprint& a, const Fingerprint& b);

}  // namespace chemalign::chem
