#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include <json.hpp>

#include "chemalign/merge.hpp"
#include "support/tiny.hpp"

using namespace chemalign;
using namespace chemalign::merge;
using json = nlohmann::json;

namespace {

Checkpoint jittered(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = tiny::model(8, 2, 1);
  tiny::jitter(p, rng, 0.5);
  return p;
}

// Rewrites the manifest of a serialized checkpoint.
std::string with_manifest(const std::string& bytes, const std::function<void(json&)>& edit) {
  std::uint64_t len;
  std::memcpy(&len, bytes.data(), 8);
  json m = json::parse(bytes.substr(8, len));
  edit(m);
  const std::string text = m.dump();
  std::string out(8, '\0');
  const std::uint64_t n = text.size();
  std::memcpy(out.data(), &n, 8);
  return out + text + bytes.substr(8 + len);
}

LoadErrc load_error(const std::string& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.code();
  }
  FAIL("expected a CheckpointError");
  return LoadErrc::kIo;
}

double max_abs_diff(const Checkpoint& a, const Checkpoint& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    m = std::max(m, (a.tensors[i].matrix() - b.tensors[i].matrix()).cwiseAbs().maxCoeff());
  }
  return m;
}

// Values as stored on disk.
Checkpoint rounded(Checkpoint c) {
  for (auto& t : c.tensors) {
    for (double& v : t.data()) v = static_cast<float>(v);
  }
  return c;
}

Vector<double> vec(std::initializer_list<double> v) {
  Vector<double> out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST_SUITE("merge") {

TEST_CASE("checkpoint round trip is bit-identical") {
  const auto c = jittered(1);
  const std::string bytes = serialize_checkpoint(c);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.names == c.names);
  CHECK(back.config == c.config);
  CHECK(back.vocab == c.vocab);
  CHECK(max_abs_diff(back, rounded(c)) == 0.0);

  const auto dir = std::filesystem::temp_directory_path() / "chemalign_merge_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(c, dir / "a.ckpt");
  CHECK(serialize_checkpoint(load_checkpoint(dir / "a.ckpt")) == bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint load errors are distinct") {
  const std::string bytes = serialize_checkpoint(jittered(2));
  CHECK(load_error(bytes.substr(0, bytes.size() - 1)) == LoadErrc::kTruncatedPayload);
  CHECK(load_error(bytes.substr(0, 4)) == LoadErrc::kTruncatedPayload);
  CHECK(load_error(bytes + "x") == LoadErrc::kTrailingBytes);
  CHECK(load_error(with_manifest(bytes, [](json& m) { m["format_version"] = 999; })) ==
        LoadErrc::kUnsupportedVersion);
  CHECK(load_error(with_manifest(bytes, [](json& m) { m["tensors"][1]["offset"] = 0; })) ==
        LoadErrc::kOffsetOverlap);
  CHECK(load_error(with_manifest(bytes, [](json& m) { m["config"]["d_model"] = 16; })) ==
        LoadErrc::kCorruptManifest);
  CHECK(load_error(with_manifest(bytes, [](json& m) { m["tensors"][0]["dtype"] = "f16"; })) ==
        LoadErrc::kCorruptManifest);
  std::string garbage = bytes;
  garbage[8] = '#';
  CHECK(load_error(garbage) == LoadErrc::kCorruptManifest);
  std::string nan = bytes;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + nan.size() - 4, &q, 4);
  CHECK(load_error(nan) == LoadErrc::kNonFinite);
}

TEST_CASE("task vectors") {
  const auto base = jittered(3);
  const auto model = jittered(4);
  const auto zero = task_vector(base, base);
  for (const auto& d : zero.deltas) CHECK(d.matrix().cwiseAbs().maxCoeff() == 0.0);
  const auto tv = task_vector(model, base);
  CHECK(tv.names == base.names);
  for (std::size_t i = 0; i < tv.deltas.size(); ++i) {
    const Matrix rebuilt = base.tensors[i].matrix() + tv.deltas[i].matrix();
    CHECK((rebuilt - model.tensors[i].matrix()).cwiseAbs().maxCoeff() < 1e-6);
  }
  auto renamed = model;
  renamed.names[0] = "other";
  CHECK_THROWS_AS(task_vector(renamed, base), CompatibilityError);
  const auto bigger = tiny::model(9, 2, 1);
  CHECK_THROWS_AS(task_vector(bigger, base), CompatibilityError);
}

TEST_CASE("TIES kernels") {
  const std::vector<Vector<double>> two{vec({1.0, -0.1}), vec({-2.0, 0.3})};
  const std::vector<double> equal{1.0, 1.0};
  const Vector<double> merged = ties_combine<double>(two, equal);
  CHECK(merged(0) == -2.0);
  CHECK(merged(1) == 0.3);

  const Vector<double> kept = trim_top_magnitude(vec({1.0, -0.1, 2.0, 0.05}), 0.5);
  CHECK(kept(0) == 1.0);
  CHECK(kept(1) == 0.0);
  CHECK(kept(2) == 2.0);
  CHECK(kept(3) == 0.0);
  CHECK_THROWS_AS(trim_top_magnitude(vec({1.0}), 0.0), ConfigError);
  CHECK_THROWS_AS(trim_top_magnitude(vec({1.0}), 1.5), ConfigError);

  // A zero-sum coordinate elects the positive sign.
  const std::vector<Vector<double>> tie{vec({1.0}), vec({-1.0})};
  CHECK(ties_combine<double>(tie, equal)(0) == 1.0);
  // Weighted election and weighted mean.
  const std::vector<Vector<double>> w{vec({1.0}), vec({3.0}), vec({-2.0})};
  const std::vector<double> ws{1.0, 3.0, 1.0};
  CHECK(ties_combine<double>(w, ws)(0) == doctest::Approx((1.0 + 9.0) / 4.0));
}

TEST_CASE("TIES merge on checkpoints") {
  const auto base = jittered(5);
  const auto model = jittered(6);
  MergeConfig cfg;
  cfg.algorithm = Algorithm::kTies;
  cfg.density = 1.0;
  const std::vector<Checkpoint> one{model};
  CHECK(max_abs_diff(ties_merge(base, one, cfg), model) < 1e-12);

  std::vector<Checkpoint> three{jittered(7), jittered(8), jittered(9)};
  cfg.density = 0.3;
  cfg.weights = {1.0, 2.0, 0.5};
  const auto ref = ties_merge(base, three, cfg);
  std::vector<Checkpoint> perm{three[2], three[0], three[1]};
  cfg.weights = {0.5, 1.0, 2.0};
  CHECK(max_abs_diff(ties_merge(base, perm, cfg), ref) == 0.0);

  // Identical task vectors: base + lambda * trimmed vector.
  cfg.weights.clear();
  cfg.lambda = 0.7;
  const std::vector<Checkpoint> same{model, model};
  const auto out = ties_merge(base, same, cfg);
  const auto tv = task_vector(model, base);
  for (std::size_t i = 0; i < base.tensors.size(); ++i) {
    const auto flat = Eigen::Map<const Vector<double>>(tv.deltas[i].matrix().data(), tv.deltas[i].matrix().size());
    const Vector<double> trimmed = trim_top_magnitude(flat, cfg.density);
    const Vector<double> expect =
        Eigen::Map<const Vector<double>>(base.tensors[i].matrix().data(), trimmed.size()) + 0.7 * trimmed;
    const auto got = Eigen::Map<const Vector<double>>(out.tensors[i].matrix().data(), trimmed.size());
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  cfg.density = 0.0;
  CHECK_THROWS_AS(ties_merge(base, same, cfg), ConfigError);
  cfg.density = 0.5;
  cfg.weights = {1.0};
  CHECK_THROWS_AS(ties_merge(base, same, cfg), ConfigError);
  cfg.weights = {0.0, 0.0};
  CHECK_THROWS_AS(ties_merge(base, same, cfg), ConfigError);
  const std::vector<Checkpoint> none;
  cfg.weights.clear();
  CHECK_THROWS_AS(ties_merge(base, none, cfg), ConfigError);
}

TEST_CASE("SLERP") {
  const auto a = jittered(10);
  const auto b = jittered(11);
  const auto ra = deserialize_checkpoint(serialize_checkpoint(slerp_merge(a, b, 0.0)));
  const auto rb = deserialize_checkpoint(serialize_checkpoint(slerp_merge(a, b, 1.0)));
  CHECK(max_abs_diff(ra, rounded(a)) <= 1e-6);
  CHECK(max_abs_diff(rb, rounded(b)) <= 1e-6);

  // Float kernel endpoints.
  std::mt19937_64 rng(12);
  std::normal_distribution<float> g;
  Vector<float> fa(64), fb(64);
  for (int i = 0; i < 64; ++i) {
    fa(i) = g(rng);
    fb(i) = g(rng);
  }
  CHECK((slerp(fa, fb, 0.0f) - fa).cwiseAbs().maxCoeff() <= 1e-6f);
  CHECK((slerp(fa, fb, 1.0f) - fb).cwiseAbs().maxCoeff() <= 1e-6f);

  const Vector<double> e1 = vec({1, 0, 0}), e2 = vec({0, 1, 0});
  const Vector<double> mid = slerp(e1, e2, 0.5);
  CHECK((mid - (e1 + e2) / std::sqrt(2.0)).cwiseAbs().maxCoeff() < 1e-12);

  CHECK(max_abs_diff(slerp_merge(a, a, 0.37), a) < 1e-12);

  // Unit-norm inputs stay unit-norm.
  Vector<double> ua(16), ub(16);
  std::normal_distribution<double> gd;
  for (int i = 0; i < 16; ++i) {
    ua(i) = gd(rng);
    ub(i) = gd(rng);
  }
  ua.normalize();
  ub.normalize();
  for (double t = 0.0; t <= 1.0; t += 0.1) CHECK(std::abs(slerp(ua, ub, t).norm() - 1.0) < 1e-6);

  auto z = a;
  z.tensors[0].matrix().setZero();
  CHECK_THROWS_AS(slerp_merge(z, b, 0.5), DegenerateTensorError);
  CHECK_THROWS_AS(slerp_merge(a, b, 1.5), ConfigError);
  CHECK_THROWS_AS(slerp_merge(a, tiny::model(9, 2, 1), 0.5), CompatibilityError);
}

TEST_CASE("LERP") {
  auto a = tiny::model(8, 1, 1);
  auto b = a;
  a.tensors[0].matrix().setConstant(2.0);
  b.tensors[0].matrix().setConstant(4.0);
  CHECK(lerp_merge(a, b, 0.5).tensors[0].matrix()(0, 0) == 3.0);
  CHECK(max_abs_diff(lerp_merge(a, b, 0.0), a) == 0.0);
  const auto x = jittered(13), y = jittered(14);
  CHECK(max_abs_diff(lerp_merge(x, y, 0.3), lerp_merge(y, x, 0.7)) < 1e-12);
}

TEST_CASE("ratio to t") {
  CHECK(ratio_to_t(19, 1) == doctest::Approx(0.05));
  CHECK(ratio_to_t(1, 1) == 0.5);
  CHECK(ratio_to_t(0, 1) == 1.0);
  CHECK_THROWS_AS(ratio_to_t(0, 0), ConfigError);
  CHECK_THROWS_AS(ratio_to_t(-1, 2), ConfigError);
}

TEST_CASE("algorithm names") {
  CHECK(parse_algorithm("ties") == Algorithm::kTies);
  CHECK(to_string(Algorithm::kSlerp) == "slerp");
  CHECK_THROWS_AS(parse_algorithm("dare"), ConfigError);
}

}
