#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "chemalign/policy.hpp"
#include "support/tiny.hpp"

using namespace chemalign;
using namespace chemalign::policy;

namespace {

void set_uniform_logits(PolicyParams& p) {
  p["head.w"].matrix().setZero();
  p["head.b"].matrix().setZero();
}

bool same_bytes(const PolicyParams& a, const PolicyParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    const auto x = a.tensors[i].data(), y = b.tensors[i].data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("policy") {

TEST_CASE("vocabulary encode/decode") {
  const std::vector<std::string> texts{"CCO", "NC(=O)"};
  const Vocab v = Vocab::from_texts(texts);
  CHECK(v.symbols() == "()=CNO");
  CHECK(v.size() == 4 + 6);
  CHECK(v.encode("").empty());
  const auto ids = v.encode("CCO");
  CHECK(ids.size() == 3);
  for (int id : ids) CHECK(id >= kNumSpecials);
  CHECK(v.decode(ids) == "CCO");
  try {
    v.encode("\xCE\xA9");  // Omega in UTF-8
    FAIL("expected OOV");
  } catch (const OovError& e) {
    CHECK(e.offset() == 0);
  }
  try {
    v.encode("CCX");
    FAIL("expected OOV");
  } catch (const OovError& e) {
    CHECK(e.offset() == 2);
    CHECK(e.character() == 'X');
    CHECK(std::string(e.what()).find("'X'") != std::string::npos);
  }
  const std::vector<int> with_specials{kBos, ids[0], kEos, kPad};
  CHECK(v.decode(with_specials) == "C");
}

TEST_CASE("build_vocab covers both templates") {
  const auto pairs = data::gen_toy_corpus(50, 3);
  const Vocab v = build_vocab(pairs);
  for (const auto& p : pairs) {
    CHECK_NOTHROW(encode_prompt(v, p.direction, p.source));
    CHECK_NOTHROW(encode_target(v, p.target));
  }
}

TEST_CASE("init_params determinism and shape contract") {
  ModelConfig c = tiny::config(8, 2, 7);
  CHECK(same_bytes(init_params(c), init_params(c)));
  ModelConfig other = c;
  other.seed = 8;
  CHECK_FALSE(same_bytes(init_params(c), init_params(other)));

  ModelConfig small = tiny::config(4, 1, 1);
  const auto p = init_params(small);
  CHECK(p["tok_emb"].shape() == std::vector<Index>{4, 8});

  ModelConfig bad = c;
  bad.n_heads = 3;
  CHECK_THROWS_AS(init_params(bad), ConfigError);
  CHECK(p.all_finite());
}

TEST_CASE("uniform logits give -|y| ln V") {
  for (int V : {5, 6, 8}) {
    auto p = tiny::model(V, 1, 2);
    set_uniform_logits(p);
    const std::vector<int> x{kBos, 4};
    const std::vector<int> y{4, V - 1, kEos};
    const auto lp = sequence_logprob(p, x, y);
    CHECK(lp.total == doctest::Approx(-3.0 * std::log(static_cast<double>(V))).epsilon(1e-12));
    CHECK(lp.per_token.size() == 3);
  }
}

TEST_CASE("total equals the per-token sum and is non-positive") {
  std::mt19937_64 rng(3);
  auto p = tiny::model(8, 2, 3);
  tiny::jitter(p, rng, 0.5);
  for (int i = 0; i < 20; ++i) {
    const auto x = tiny::prompt(rng, 8);
    const auto y = tiny::target(rng, 8);
    const auto lp = sequence_logprob(p, x, y);
    double s = 0;
    for (double t : lp.per_token) s += t;
    CHECK(std::abs(s - lp.total) < 1e-12);
    CHECK(lp.total <= 0.0);
    if (y.size() == 1) CHECK(lp.total == lp.per_token[0]);
  }
}

TEST_CASE("next-token distributions are normalized") {
  std::mt19937_64 rng(4);
  auto p = tiny::model(8, 2, 4);
  tiny::jitter(p, rng, 1.0);
  const std::vector<int> x{kBos, 5, 6};
  const std::vector<int> y{7, 4, kEos};
  const Matrix rows = target_logprob_rows(p, x, y);
  CHECK(rows.rows() == 3);
  CHECK(rows.cols() == 8);
  for (Index r = 0; r < rows.rows(); ++r) CHECK(std::abs(rows.row(r).array().exp().sum() - 1.0) < 1e-9);
}

TEST_CASE("length-2 continuation mass matches enumeration") {
  // Oracle: chain the full next-token distributions by hand.
  const int V = 5;
  std::mt19937_64 rng(5);
  auto p = tiny::model(V, 2, 5);
  tiny::jitter(p, rng, 1.0);
  const std::vector<int> x{kBos, 4};
  double scored = 0.0, chained = 0.0, all_pairs = 0.0;
  for (int a = kNumSpecials; a < V; ++a) {
    for (int b = kNumSpecials; b < V; ++b) {
      const std::vector<int> y{a, b, kEos};
      scored += std::exp(sequence_logprob(p, x, y).total);
      const Matrix rows = target_logprob_rows(p, x, y);
      chained += std::exp(rows(0, a) + rows(1, b) + rows(2, kEos));
    }
  }
  // Over every symbol (specials included) the first two steps sum to one.
  for (int a = 0; a < V; ++a) {
    const std::vector<int> ya{kNumSpecials, kEos};
    std::vector<int> prefix = x;
    const Matrix r0 = target_logprob_rows(p, x, ya);
    std::vector<int> xa = x;
    xa.push_back(a);
    const Matrix r1 = target_logprob_rows(p, xa, std::vector<int>{kEos});
    all_pairs += std::exp(r0(0, a)) * r1.row(0).array().exp().sum();
  }
  CHECK(std::abs(scored - chained) < 1e-12);
  CHECK(std::abs(all_pairs - 1.0) < 1e-9);
  CHECK(scored > 0.0);
  CHECK(scored < 1.0);
}

TEST_CASE("PAD after EOS does not change the score") {
  std::mt19937_64 rng(6);
  auto p = tiny::model(8, 2, 6);
  tiny::jitter(p, rng, 0.5);
  const std::vector<int> x{kBos, 5};
  const std::vector<int> y{6, kEos};
  const std::vector<int> padded{6, kEos, kPad, kPad};
  CHECK(sequence_logprob(p, x, y).total == sequence_logprob(p, x, padded).total);
}

TEST_CASE("causality under perturbation") {
  std::mt19937_64 rng(7);
  auto p = tiny::model(8, 2, 7);
  tiny::jitter(p, rng, 0.5);
  const std::vector<int> x{kBos, 5};
  const std::vector<int> y{4, 5, 6, kEos};
  const auto base = sequence_logprob(p, x, y);
  for (std::size_t t = 0; t + 1 < y.size(); ++t) {
    auto z = y;
    z[t] = z[t] == 7 ? 4 : 7;
    const auto moved = sequence_logprob(p, x, z);
    for (std::size_t s = 0; s < t; ++s) CHECK(moved.per_token[s] == base.per_token[s]);
  }
}

TEST_CASE("sliding window matches full attention when it covers the sequence") {
  std::mt19937_64 rng(8);
  ModelConfig c = tiny::config(8, 2, 8);
  c.window = 8;
  c.local_window = 8;
  auto wide = init_params(c);
  tiny::jitter(wide, rng, 0.5);
  // A window wider than the context must not change anything.
  ModelConfig c2 = c;
  c2.window = 64;
  c2.local_window = 64;
  auto wider = init_params(c2);
  wider.tensors = wide.tensors;
  const std::vector<int> x{kBos, 5, 6};
  const std::vector<int> y{4, 7, kEos};
  CHECK(sequence_logprob(wide, x, y).total == sequence_logprob(wider, x, y).total);
}

TEST_CASE("context overflow is a length error") {
  auto p = tiny::model(8, 1, 9);
  const std::vector<int> x{kBos, 4, 5, 6, 7};
  const std::vector<int> y{4, 5, 6, kEos};
  CHECK_THROWS_AS(sequence_logprob(p, x, y), LengthError);
  const std::vector<int> nothing{};
  CHECK_THROWS_AS(sequence_logprob(p, std::vector<int>{kBos}, nothing), ContractError);
  CHECK_THROWS_AS(sequence_logprob(p, std::vector<int>{kBos}, std::vector<int>{4}), ContractError);
}

TEST_CASE("greedy decoding") {
  std::mt19937_64 rng(10);
  auto p = tiny::model(8, 2, 10);
  tiny::jitter(p, rng, 1.0);
  const std::vector<int> x{kBos, 5};
  const auto a = greedy_decode(p, x, 5);
  CHECK(a == greedy_decode(p, x, 5));
  CHECK(a.size() <= 5);
  for (int id : a) CHECK(id >= kNumSpecials);
  CHECK(greedy_decode(p, x, 0).empty());

  auto eos = p;
  eos["head.w"].matrix().setZero();
  eos["head.b"].matrix().setZero();
  eos["head.b"].matrix()(0, kEos) = 10.0;
  CHECK(greedy_decode(eos, x, 5).empty());

  // Specials other than EOS are never emitted even when they dominate.
  auto pad = eos;
  pad["head.b"].matrix()(0, kEos) = 0.0;
  pad["head.b"].matrix()(0, kPad) = 50.0;
  pad["head.b"].matrix()(0, 6) = 1.0;
  const auto out = greedy_decode(pad, x, 3);
  CHECK(out == std::vector<int>{6, 6, 6});
}

TEST_CASE("sampling") {
  std::mt19937_64 rng(11);
  auto p = tiny::model(8, 2, 11);
  tiny::jitter(p, rng, 1.0);
  const std::vector<int> x{kBos, 4};
  CHECK(sample_decode(p, x, 5, 1.0, 3) == sample_decode(p, x, 5, 1.0, 3));
  CHECK(sample_decode(p, x, 5, 1e-6, 3) == greedy_decode(p, x, 5));
  CHECK_THROWS_AS(sample_decode(p, x, 5, 0.0, 3), ContractError);
  CHECK_THROWS_AS(sample_decode(p, x, 5, -1.0, 3), ContractError);
}

TEST_CASE("sample frequencies match softmax within 3 sigma") {
  // Two symbols; logits do not depend on the input, so one step is exact.
  auto p = tiny::model(6, 1, 12);
  p["head.w"].matrix().setZero();
  auto& b = p["head.b"].matrix();
  b.setZero();
  b(0, kBos) = 3.0;  // never emitted
  b(0, kEos) = -0.5;
  b(0, 4) = 0.7;
  b(0, 5) = 0.2;
  const double temperature = 0.8;
  const int emittable[] = {kEos, 4, 5};
  double z = 0;
  for (int id : emittable) z += std::exp(b(0, id) / temperature);
  const int n = 10000;
  std::map<int, int> counts;
  const std::vector<int> x{kBos, 4};
  for (int s = 0; s < n; ++s) {
    const auto out = sample_decode(p, x, 1, temperature, static_cast<std::uint64_t>(s));
    counts[out.empty() ? kEos : out[0]]++;
  }
  for (int id : emittable) {
    const double prob = std::exp(b(0, id) / temperature) / z;
    const double sigma = std::sqrt(n * prob * (1 - prob));
    CHECK(std::abs(counts[id] - n * prob) < 3 * sigma);
  }
  CHECK(counts.size() == 3);
}

TEST_CASE("translate renders the prompt") {
  const auto pairs = data::gen_toy_corpus(20, 1);
  ModelConfig c;
  const Vocab v = build_vocab(pairs);
  c.vocab_size = v.size();
  c.d_model = 16;
  c.n_layers = 1;
  const auto p = init_params(c, v);
  const auto out = translate(p, pairs[0].direction, pairs[0].source, 8);
  CHECK(out.size() <= 8);
  const auto prompt = encode_prompt(v, pairs[0].direction, pairs[0].source);
  CHECK(prompt.front() == kBos);
  CHECK(v.decode(prompt) == data::render_instruction(data::instruction_template(pairs[0].direction), pairs[0].source));
}

}
