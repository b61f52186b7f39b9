#include "chemalign/chem.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include "chemalign/errors.hpp"

namespace chemalign::chem {

namespace {

constexpr std::array<std::string_view, 118> kElements = {
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",
    "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh",
    "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re",
    "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db",
    "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

bool is_element(std::string_view sym) {
  return std::find(kElements.begin(), kElements.end(), sym) != kElements.end();
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::string capitalize(std::string_view sym) {
  std::string out(sym);
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

// Parses the inside of a bracket atom; `i` points just past '['.
SmilesToken parse_bracket(std::string_view s, std::size_t start, std::size_t& i) {
  SmilesToken tok;
  tok.kind = TokenKind::kBracketAtom;
  tok.offset = start;
  auto fail = [&](const std::string& msg) { throw TokenizeError(msg, i); };
  auto need = [&]() {
    if (i >= s.size()) throw TokenizeError("unterminated bracket atom", start);
  };

  need();
  while (i < s.size() && is_digit(s[i])) tok.isotope = tok.isotope * 10 + (s[i++] - '0');

  need();
  static constexpr std::array<std::string_view, 8> kAromatic = {"se", "as", "b", "c",
                                                                "n",  "o",  "p", "s"};
  bool matched = false;
  for (std::string_view a : kAromatic) {
    if (s.substr(i, a.size()) == a) {
      tok.element = std::string(a);
      tok.aromatic = true;
      i += a.size();
      matched = true;
      break;
    }
  }
  if (!matched) {
    if (!std::isupper(static_cast<unsigned char>(s[i]))) fail("expected element symbol");
    if (i + 1 < s.size() && std::islower(static_cast<unsigned char>(s[i + 1])) &&
        is_element(s.substr(i, 2))) {
      tok.element = std::string(s.substr(i, 2));
      i += 2;
    } else if (is_element(s.substr(i, 1))) {
      tok.element = std::string(s.substr(i, 1));
      i += 1;
    } else {
      fail("unknown element");
    }
  }

  // Chirality is accepted and discarded.
  while (i < s.size() && s[i] == '@') ++i;
  while (i < s.size() && std::isupper(static_cast<unsigned char>(s[i])) && s[i] != 'H') {
    // @TH1, @AL2, ... style tags
    ++i;
    while (i < s.size() && (std::isupper(static_cast<unsigned char>(s[i])) || is_digit(s[i]))) ++i;
  }

  if (i < s.size() && s[i] == 'H') {
    ++i;
    if (i < s.size() && is_digit(s[i])) {
      tok.hydrogens = 0;
      while (i < s.size() && is_digit(s[i])) tok.hydrogens = tok.hydrogens * 10 + (s[i++] - '0');
    } else {
      tok.hydrogens = 1;
    }
  }

  if (i < s.size() && (s[i] == '+' || s[i] == '-')) {
    const char sign = s[i];
    const int unit = sign == '+' ? 1 : -1;
    ++i;
    if (i < s.size() && is_digit(s[i])) {
      int mag = 0;
      while (i < s.size() && is_digit(s[i])) mag = mag * 10 + (s[i++] - '0');
      tok.charge = unit * mag;
    } else {
      tok.charge = unit;
      while (i < s.size() && s[i] == sign) {
        tok.charge += unit;
        ++i;
      }
    }
  }

  if (i < s.size() && s[i] == ':') {
    ++i;
    if (i >= s.size() || !is_digit(s[i])) fail("expected atom class digits");
    while (i < s.size() && is_digit(s[i])) ++i;
  }

  need();
  if (s[i] != ']') fail("unexpected character in bracket atom");
  ++i;
  tok.length = i - start;
  return tok;
}

}  // namespace

std::vector<SmilesToken> tokenize_smiles(std::string_view s) {
  std::vector<SmilesToken> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    const std::size_t start = i;
    SmilesToken tok;
    tok.kind = TokenKind::kAtom;
    tok.offset = start;
    switch (c) {
      case 'B':
      case 'C':
        if (i + 1 < s.size() && ((c == 'B' && s[i + 1] == 'r') || (c == 'C' && s[i + 1] == 'l'))) {
          tok.element = std::string(s.substr(i, 2));
          i += 2;
        } else {
          tok.element = std::string(1, c);
          i += 1;
        }
        break;
      case 'N':
      case 'O':
      case 'P':
      case 'S':
      case 'F':
      case 'I':
        tok.element = std::string(1, c);
        i += 1;
        break;
      case 'b':
      case 'c':
      case 'n':
      case 'o':
      case 'p':
      case 's':
        tok.element = std::string(1, c);
        tok.aromatic = true;
        i += 1;
        break;
      case '[':
        ++i;
        tok = parse_bracket(s, start, i);
        break;
      case '-':
      case '=':
      case '#':
      case ':':
      case '/':
      case '\\':
        tok.kind = TokenKind::kBond;
        tok.bond = c == '=' ? BondOrder::kDouble
                 : c == '#' ? BondOrder::kTriple
                 : c == ':' ? BondOrder::kAromatic
                            : BondOrder::kSingle;
        i += 1;
        break;
      case '(':
        tok.kind = TokenKind::kBranchOpen;
        i += 1;
        break;
      case ')':
        tok.kind = TokenKind::kBranchClose;
        i += 1;
        break;
      case '.':
        tok.kind = TokenKind::kDot;
        i += 1;
        break;
      case '%':
        if (i + 2 >= s.size() || !is_digit(s[i + 1]) || !is_digit(s[i + 2])) {
          throw TokenizeError("'%' must be followed by two digits", i);
        }
        tok.kind = TokenKind::kRingClosure;
        tok.ring_digit = (s[i + 1] - '0') * 10 + (s[i + 2] - '0');
        if (tok.ring_digit < 10) throw TokenizeError("'%nn' ring numbers must be 10-99", i);
        i += 3;
        break;
      default:
        if (c >= '1' && c <= '9') {
          tok.kind = TokenKind::kRingClosure;
          tok.ring_digit = c - '0';
          i += 1;
          break;
        }
        throw TokenizeError(std::string("unrecognized character '") + c + "'", i);
    }
    tok.length = i - start;
    out.push_back(std::move(tok));
  }
  return out;
}

const char* to_string(ParseErrc code) {
  switch (code) {
    case ParseErrc::kTokenize: return "tokenize error";
    case ParseErrc::kEmpty: return "empty molecule";
    case ParseErrc::kUnmatchedBranch: return "unmatched branch parenthesis";
    case ParseErrc::kEmptyBranch: return "empty branch";
    case ParseErrc::kUnclosedRing: return "unclosed ring";
    case ParseErrc::kDanglingBond: return "bond with missing atom";
    case ParseErrc::kRingBondConflict: return "conflicting ring-closure bond orders";
    case ParseErrc::kInvalidRingBond: return "invalid ring closure";
  }
  return "parse error";
}

// ---- MolGraph ------------------------------------------------------------------

std::vector<int> MolGraph::neighbors(int atom) const {
  std::vector<int> out;
  for (const Bond& b : bonds) {
    if (b.a == atom) out.push_back(b.b);
    if (b.b == atom) out.push_back(b.a);
  }
  return out;
}

double MolGraph::bond_order_sum(int atom) const {
  double total = 0.0;
  for (const Bond& b : bonds) {
    if (b.a != atom && b.b != atom) continue;
    total += b.order == BondOrder::kAromatic ? 1.5 : static_cast<double>(b.order);
  }
  return total;
}

int MolGraph::degree(int atom) const {
  return static_cast<int>(std::count_if(bonds.begin(), bonds.end(), [atom](const Bond& b) {
    return b.a == atom || b.b == atom;
  }));
}

namespace {

std::vector<int> standard_valences(std::string_view element) {
  if (element == "B") return {3};
  if (element == "C") return {4};
  if (element == "N") return {3, 5};
  if (element == "O") return {2};
  if (element == "P") return {3, 5};
  if (element == "S") return {2, 4, 6};
  if (element == "F" || element == "Cl" || element == "Br" || element == "I") return {1};
  return {};
}

}  // namespace

int MolGraph::implicit_h(int atom) const {
  const Atom& a = atoms[atom];
  if (a.bracket) return 0;
  const auto valences = standard_valences(a.element);
  if (valences.empty()) return 0;
  const int used = static_cast<int>(std::ceil(bond_order_sum(atom)));
  if (a.aromatic) return std::max(0, valences.front() - used);
  for (int v : valences) {
    if (v >= used) return v - used;
  }
  return 0;
}

// ---- parser ---------------------------------------------------------------------

MolGraph parse_smiles(std::string_view smiles) {
  std::vector<SmilesToken> tokens;
  try {
    tokens = tokenize_smiles(smiles);
  } catch (const TokenizeError& e) {
    throw ParseError(ParseErrc::kTokenize, e.what(), e.offset());
  }
  if (tokens.empty()) throw ParseError(ParseErrc::kEmpty, "no atoms", 0);

  MolGraph g;
  struct PendingBond {
    BondOrder order;
    std::size_t offset;
  };
  struct OpenRing {
    int atom;
    std::optional<BondOrder> order;
    std::size_t offset;
  };
  struct BranchFrame {
    int atom;
    std::size_t offset;
    std::size_t atoms_at_open;
  };
  int prev = -1;
  std::optional<PendingBond> pending;
  std::vector<BranchFrame> branches;
  std::map<int, OpenRing> rings;
  bool fragment_started = false;

  auto bonded = [&g](int x, int y) {
    return std::any_of(g.bonds.begin(), g.bonds.end(), [x, y](const Bond& b) {
      return (b.a == x && b.b == y) || (b.a == y && b.b == x);
    });
  };
  auto default_order = [&g](int x, int y) {
    return g.atoms[x].aromatic && g.atoms[y].aromatic ? BondOrder::kAromatic : BondOrder::kSingle;
  };

  for (const SmilesToken& tok : tokens) {
    switch (tok.kind) {
      case TokenKind::kAtom:
      case TokenKind::kBracketAtom: {
        Atom atom;
        atom.element = capitalize(tok.element);
        atom.aromatic = tok.aromatic;
        atom.charge = tok.charge;
        atom.explicit_h = tok.hydrogens;
        atom.bracket = tok.kind == TokenKind::kBracketAtom;
        const int idx = static_cast<int>(g.atoms.size());
        g.atoms.push_back(std::move(atom));
        if (!fragment_started) {
          fragment_started = true;
          g.fragments += 1;
        }
        if (prev >= 0) {
          g.bonds.push_back(Bond{prev, idx, pending ? pending->order : default_order(prev, idx)});
        }
        pending.reset();
        prev = idx;
        break;
      }
      case TokenKind::kBond:
        if (prev < 0) throw ParseError(ParseErrc::kDanglingBond, "bond without a preceding atom", tok.offset);
        if (pending) throw ParseError(ParseErrc::kDanglingBond, "two consecutive bonds", tok.offset);
        pending = PendingBond{tok.bond, tok.offset};
        break;
      case TokenKind::kBranchOpen:
        if (prev < 0) throw ParseError(ParseErrc::kEmptyBranch, "branch without a preceding atom", tok.offset);
        if (pending) throw ParseError(ParseErrc::kDanglingBond, "bond before branch", pending->offset);
        branches.push_back(BranchFrame{prev, tok.offset, g.atoms.size()});
        break;
      case TokenKind::kBranchClose:
        if (branches.empty()) throw ParseError(ParseErrc::kUnmatchedBranch, "')' without '('", tok.offset);
        if (pending) throw ParseError(ParseErrc::kDanglingBond, "bond at end of branch", pending->offset);
        if (branches.back().atoms_at_open == g.atoms.size()) {
          throw ParseError(ParseErrc::kEmptyBranch, "branch contains no atoms", branches.back().offset);
        }
        prev = branches.back().atom;
        branches.pop_back();
        break;
      case TokenKind::kRingClosure: {
        if (prev < 0) throw ParseError(ParseErrc::kDanglingBond, "ring closure without an atom", tok.offset);
        auto it = rings.find(tok.ring_digit);
        std::optional<BondOrder> here;
        if (pending) here = pending->order;
        pending.reset();
        if (it == rings.end()) {
          rings.emplace(tok.ring_digit, OpenRing{prev, here, tok.offset});
          break;
        }
        const OpenRing open = it->second;
        rings.erase(it);
        if (here && open.order && *here != *open.order) {
          throw ParseError(ParseErrc::kRingBondConflict,
                           "ring " + std::to_string(tok.ring_digit) + " closed with a different bond order",
                           tok.offset);
        }
        if (open.atom == prev || bonded(open.atom, prev)) {
          throw ParseError(ParseErrc::kInvalidRingBond,
                           "ring " + std::to_string(tok.ring_digit) + " duplicates an existing bond",
                           tok.offset);
        }
        const BondOrder order = here ? *here : open.order ? *open.order : default_order(open.atom, prev);
        g.bonds.push_back(Bond{open.atom, prev, order});
        break;
      }
      case TokenKind::kDot:
        if (pending) throw ParseError(ParseErrc::kDanglingBond, "bond before '.'", pending->offset);
        if (prev < 0) throw ParseError(ParseErrc::kDanglingBond, "empty fragment", tok.offset);
        prev = -1;
        fragment_started = false;
        break;
    }
  }

  if (pending) throw ParseError(ParseErrc::kDanglingBond, "bond at end of input", pending->offset);
  if (!branches.empty()) throw ParseError(ParseErrc::kUnmatchedBranch, "unclosed '('", branches.back().offset);
  if (!rings.empty()) {
    const auto& [digit, open] = *rings.begin();
    throw ParseError(ParseErrc::kUnclosedRing, "ring " + std::to_string(digit) + " never closed", open.offset);
  }
  if (prev < 0) throw ParseError(ParseErrc::kDanglingBond, "input ends with '.'", smiles.size());
  return g;
}

// ---- validation ---------------------------------------------------------------------

std::optional<int> max_valence(std::string_view element, int charge) {
  if (element == "B") return 3 - charge;
  if (element == "C") return 4 - std::abs(charge);
  if (element == "N") return charge > 0 ? 5 : 3 + charge;
  if (element == "O") return 2 + charge;
  if (element == "P") return 5;
  if (element == "S") return 6;
  if (element == "F" || element == "Cl" || element == "Br" || element == "I") {
    return std::max(0, 1 + charge);
  }
  if (element == "H") return 1 - std::abs(charge);
  return std::nullopt;
}

ValidationResult validate_molecule(const MolGraph& g) {
  ValidationResult result;
  if (g.atoms.empty()) {
    result.violations.push_back({-1, "molecule has no atoms"});
    return result;
  }
  for (int i = 0; i < static_cast<int>(g.atoms.size()); ++i) {
    const Atom& a = g.atoms[i];
    const auto limit = max_valence(a.element, a.charge);
    if (!limit) continue;
    const int used = a.aromatic ? g.degree(i) + a.explicit_h
                                : static_cast<int>(std::ceil(g.bond_order_sum(i))) + a.explicit_h;
    if (used > *limit) {
      result.violations.push_back(
          {i, a.element + " atom " + std::to_string(i) + " uses valence " + std::to_string(used) +
                  " > allowed " + std::to_string(*limit)});
    }
  }
  return result;
}

bool is_valid_smiles(std::string_view smiles) {
  try {
    return validate_molecule(parse_smiles(smiles)).valid();
  } catch (const ParseError&) {
    return false;
  }
}

// ---- fingerprints ---------------------------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) {
  return mix64(seed ^ mix64(value));
}

namespace {

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

int Fingerprint::popcount() const {
  int n = 0;
  for (std::uint64_t w : words) n += std::popcount(w);
  return n;
}

std::vector<int> Fingerprint::on_bits() const {
  std::vector<int> out;
  for (int b = 0; b < nbits; ++b) {
    if (test(b)) out.push_back(b);
  }
  return out;
}

Fingerprint morgan_fingerprint(const MolGraph& g, int radius, int nbits) {
  if (radius < 0) throw ContractError("morgan_fingerprint: radius must be >= 0");
  if (nbits <= 0 || !std::has_single_bit(static_cast<unsigned>(nbits))) {
    throw ContractError("morgan_fingerprint: nbits must be a power of two");
  }
  Fingerprint fp;
  fp.nbits = nbits;
  fp.radius = radius;
  fp.words.assign(static_cast<std::size_t>((nbits + 63) / 64), 0);
  const std::uint64_t mask = static_cast<std::uint64_t>(nbits) - 1;
  auto set = [&fp, mask](std::uint64_t h) {
    const std::uint64_t bit = h & mask;
    fp.words[bit / 64] |= std::uint64_t{1} << (bit % 64);
  };

  const int n = static_cast<int>(g.atoms.size());
  std::vector<std::uint64_t> inv(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Atom& a = g.atoms[i];
    std::uint64_t h = hash_string(a.element);
    h = hash_combine(h, static_cast<std::uint64_t>(g.degree(i)));
    h = hash_combine(h, static_cast<std::uint64_t>(a.charge + 128));
    h = hash_combine(h, static_cast<std::uint64_t>(g.total_h(i)));
    h = hash_combine(h, a.aromatic ? 1u : 0u);
    inv[i] = h;
    set(h);
  }

  std::vector<std::vector<std::pair<int, int>>> adj(static_cast<std::size_t>(n));
  for (const Bond& b : g.bonds) {
    adj[b.a].emplace_back(b.b, static_cast<int>(b.order));
    adj[b.b].emplace_back(b.a, static_cast<int>(b.order));
  }
  for (int round = 1; round <= radius; ++round) {
    std::vector<std::uint64_t> next(inv.size());
    for (int i = 0; i < n; ++i) {
      std::vector<std::pair<int, std::uint64_t>> env;
      for (auto [nbr, order] : adj[i]) env.emplace_back(order, inv[nbr]);
      std::sort(env.begin(), env.end());
      std::uint64_t h = hash_combine(static_cast<std::uint64_t>(round), inv[i]);
      for (auto [order, h_nbr] : env) {
        h = hash_combine(h, static_cast<std::uint64_t>(order));
        h = hash_combine(h, h_nbr);
      }
      next[i] = h;
      set(h);
    }
    inv = std::move(next);
  }
  return fp;
}

double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.nbits != b.nbits || a.words.size() != b.words.size()) {
    throw ContractError("tanimoto: fingerprint lengths differ");
  }
  int both = 0;
  int either = 0;
  for (std::size_t i = 0; i < a.words.size(); ++i) {
    both += std::popcount(a.words[i] & b.words[i]);
    either += std::popcount(a.words[i] | b.words[i]);
  }
  if (either == 0) return 1.0;
  return static_cast<double>(both) / static_cast<double>(either);
}

}  // namespace chemalign::chem
