#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "chemalign/commands.hpp"
#include "chemalign/merge.hpp"

using namespace chemalign;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Workdir {
  fs::path dir;
  std::ostringstream out, err;

  Workdir() {
    dir = fs::temp_directory_path() / ("chemalign_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workdir() { fs::remove_all(dir); }

  std::string p(const std::string& name) const { return (dir / name).string(); }

  int run(std::vector<std::string> args) {
    out.str("");
    err.str("");
    return cli::run(args, out, err);
  }
};

std::vector<std::string> lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  return json::parse(in);
}

const std::vector<std::string> kTiny{"--d-model", "8",  "--layers",       "1", "--heads",    "2",
                                     "--window",  "16", "--local-window", "4", "--mlp-mult", "1"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  return args;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("exit codes") {
  Workdir w;
  CHECK(w.run({"gen-data", "--n", "4", "--bogus", "1"}) == cli::kExitConfig);
  CHECK(w.run({"gen-data", "--n", "4", "--out", w.p("x.jsonl")}) == cli::kExitConfig);  // no seed
  CHECK(w.err.str().find("seed") != std::string::npos);
  CHECK(w.run({"split", "--data", w.p("missing.jsonl"), "--seed", "1", "--out-dir", w.p("s")}) ==
        cli::kExitData);
  CHECK(w.run({"nonsense"}) == cli::kExitConfig);
  CHECK(w.run({"gen-data", "--help"}) == cli::kExitOk);

  CHECK(cli::exit_code_for(ConfigError("x")) == cli::kExitConfig);
  CHECK(cli::exit_code_for(DataError("x")) == cli::kExitData);
  CHECK(cli::exit_code_for(merge::CheckpointError(merge::LoadErrc::kIo, "x")) == cli::kExitData);
  CHECK(cli::exit_code_for(CompatibilityError("x")) == cli::kExitCompatibility);
  CHECK(cli::exit_code_for(TrainingDivergedError("x")) == cli::kExitDiverged);
  CHECK(cli::exit_code_for(std::runtime_error("x")) == cli::kExitOther);
}

TEST_CASE("config file values yield to flags") {
  Workdir w;
  {
    std::ofstream cfg(w.p("run.cfg"));
    cfg << "# comment\nn = 5\nseed = 3\nout = " << w.p("from_file.jsonl") << "\n";
  }
  REQUIRE(w.run({"gen-data", "--config", w.p("run.cfg"), "--n", "7"}) == 0);
  CHECK(lines(w.p("from_file.jsonl")).size() == 7);
  const auto m = read_json(w.p("from_file.jsonl") + ".manifest.json");
  CHECK(m["config"]["n"] == "7");
  CHECK(m["config"]["seed"] == "3");
  CHECK(m["outputs"][0]["sha256"].get<std::string>().size() == 64);
  {
    std::ofstream cfg(w.p("bad.cfg"));
    cfg << "colour = blue\n";
  }
  CHECK(w.run({"gen-data", "--config", w.p("bad.cfg"), "--seed", "1", "--out", w.p("y.jsonl")}) ==
        cli::kExitConfig);
}

TEST_CASE("train method rules") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "--n", "8", "--seed", "1", "--out", w.p("c.jsonl")}) == 0);
  REQUIRE(w.run({"build-triples", "--data", w.p("c.jsonl"), "--seed", "2", "--out", w.p("t.jsonl")}) == 0);
  REQUIRE(w.run(with_tiny({"train", "--method", "sft", "--data", w.p("c.jsonl"), "--seed", "3", "--out",
                           w.p("a.ckpt")})) == 0);
  CHECK(w.run({"train", "--method", "dpo", "--data", w.p("t.jsonl"), "--init", w.p("a.ckpt"), "--seed", "3",
               "--out", w.p("d.ckpt")}) == cli::kExitConfig);
  CHECK(w.err.str().find("ref") != std::string::npos);
  CHECK(w.run({"train", "--method", "cpo", "--data", w.p("t.jsonl"), "--init", w.p("a.ckpt"), "--ref",
               w.p("a.ckpt"), "--seed", "3", "--out", w.p("c2.ckpt")}) == cli::kExitConfig);
  REQUIRE(w.run({"train", "--method", "cpo", "--data", w.p("t.jsonl"), "--init", w.p("a.ckpt"), "--beta", "0.1",
                 "--seed", "7", "--out", w.p("cpo1.ckpt")}) == 0);
  REQUIRE(w.run({"train", "--method", "cpo", "--data", w.p("t.jsonl"), "--init", w.p("a.ckpt"), "--beta", "0.1",
                 "--seed", "7", "--out", w.p("cpo2.ckpt")}) == 0);
  CHECK(cli::file_sha256(w.p("cpo1.ckpt")) == cli::file_sha256(w.p("cpo2.ckpt")));
  CHECK(fs::exists(w.p("cpo1.ckpt.manifest.json")));
  CHECK(!lines(w.p("cpo1.ckpt.log.jsonl")).empty());
  REQUIRE(w.run({"train", "--method", "kto", "--data", w.p("t.jsonl"), "--init", w.p("a.ckpt"), "--ref",
                 w.p("a.ckpt"), "--seed", "7", "--out", w.p("kto.ckpt")}) == 0);
}

TEST_CASE("merge weights") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "--n", "8", "--seed", "1", "--out", w.p("c.jsonl")}) == 0);
  for (const char* s : {"1", "2"}) {
    REQUIRE(w.run(with_tiny({"train", "--data", w.p("c.jsonl"), "--seed", s, "--epochs", "0", "--out",
                             w.p(std::string("m") + s + ".ckpt")})) == 0);
  }
  const auto a = w.p("m1.ckpt"), b = w.p("m2.ckpt");
  REQUIRE(w.run({"merge", "--algo", "slerp", "--models", a, b, "--weights", "19", "1", "--out", w.p("s.ckpt")}) == 0);
  CHECK(read_json(w.p("s.ckpt.manifest.json"))["details"]["t"].get<double>() == doctest::Approx(0.05));
  CHECK(w.run({"merge", "--algo", "slerp", "--models", a, b, "--out", w.p("x.ckpt")}) == cli::kExitConfig);
  CHECK(w.run({"merge", "--algo", "slerp", "--models", a, b, "--weights", "1", "--out", w.p("x.ckpt")}) ==
        cli::kExitConfig);
  CHECK(w.run({"merge", "--algo", "ties", "--models", a, "--base", b, "--density", "0", "--out", w.p("x.ckpt")}) ==
        cli::kExitConfig);

  REQUIRE(w.run({"merge", "--algo", "lerp", "--models", a, b, "--weights", "1", "1", "--out", w.p("l.ckpt")}) == 0);
  const auto ma = merge::load_checkpoint(a), mb = merge::load_checkpoint(b), ml = merge::load_checkpoint(w.p("l.ckpt"));
  for (std::size_t i = 0; i < ma.tensors.size(); ++i) {
    const Matrix mid = 0.5 * (ma.tensors[i].matrix() + mb.tensors[i].matrix());
    CHECK((ml.tensors[i].matrix() - mid).cwiseAbs().maxCoeff() < 1e-6);
  }

  std::vector<std::string> wide = with_tiny({"train", "--data", w.p("c.jsonl"), "--seed", "1", "--epochs", "0",
                                             "--out", w.p("wide.ckpt")});
  wide[std::find(wide.begin(), wide.end(), "--d-model") - wide.begin() + 1] = "12";
  REQUIRE(w.run(wide) == 0);
  CHECK(w.run({"merge", "--algo", "lerp", "--models", a, w.p("wide.ckpt"), "--weights", "1", "1", "--out",
               w.p("x.ckpt")}) == cli::kExitCompatibility);
}

TEST_CASE("eval outputs") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "--n", "12", "--seed", "5", "--out", w.p("c.jsonl")}) == 0);

  // References scored against themselves.
  REQUIRE(w.run({"eval", "--pred", w.p("c.jsonl"), "--pred-field", "target", "--data", w.p("c.jsonl"),
                 "--direction", "lang2mol", "--out-dir", w.p("l2m")}) == 0);
  const auto rep = read_json(w.p("l2m/report.json"));
  CHECK(rep["win_rate"].get<double>() == 1.0);
  CHECK(rep["count"] == 6);
  CHECK(lines(w.p("l2m/records.jsonl")).size() == 6);
  CHECK(lines(w.p("l2m/hist_delta_len.csv")).size() == 1 + 100 + 2);
  CHECK(lines(w.p("l2m/hist_chrf.csv")).size() == 1 + 20 + 2);
  CHECK(fs::exists(w.p("l2m/manifest.json")));

  REQUIRE(w.run({"eval", "--pred", w.p("c.jsonl"), "--pred-field", "target", "--data", w.p("c.jsonl"),
                 "--direction", "mol2lang", "--out-dir", w.p("m2l")}) == 0);
  const auto mrep = read_json(w.p("m2l/report.json"));
  CHECK(mrep["nli_excluded"] == 6);
  CHECK(mrep["win_rate"].get<double>() == 0.0);
  const auto rec = json::parse(lines(w.p("m2l/records.jsonl")).front());
  CHECK(rec["nli"].is_null());
  CHECK(rec["valid"].is_null());

  REQUIRE(w.run({"eval", "--pred", w.p("c.jsonl"), "--pred-field", "target", "--data", w.p("c.jsonl"),
                 "--direction", "mol2lang", "--nli-scorer", "lexical", "--out-dir", w.p("m2l_nli")}) == 0);
  CHECK(read_json(w.p("m2l_nli/report.json"))["nli_excluded"] == 0);

  // Mixed directions need --direction.
  CHECK(w.run({"eval", "--pred", w.p("c.jsonl"), "--pred-field", "target", "--data", w.p("c.jsonl"), "--out-dir",
               w.p("mixed")}) == cli::kExitConfig);

  // Drop one prediction.
  auto rows = lines(w.p("c.jsonl"));
  const auto dropped = json::parse(rows[0])["id"].get<std::string>();
  rows.erase(rows.begin());
  {
    std::ofstream out(w.p("short.jsonl"));
    for (const auto& r : rows) out << r << "\n";
  }
  CHECK(w.run({"eval", "--pred", w.p("short.jsonl"), "--pred-field", "target", "--data", w.p("c.jsonl"),
               "--direction", "lang2mol", "--out-dir", w.p("bad")}) == cli::kExitData);
  CHECK(w.err.str().find(dropped) != std::string::npos);

  REQUIRE(w.run({"report", "--reports", w.p("l2m/report.json"), w.p("m2l_nli/report.json"), "--labels", "a", "b",
                 "--out", w.p("summary.csv")}) == 0);
  const auto csv = lines(w.p("summary.csv"));
  CHECK(csv.size() == 3);
  CHECK(csv[0].rfind("label,direction,count,win_rate", 0) == 0);
  CHECK(fs::exists(w.p("summary.json")));
}

TEST_CASE("translate and margins") {
  Workdir w;
  REQUIRE(w.run({"gen-data", "--n", "6", "--seed", "5", "--out", w.p("c.jsonl")}) == 0);
  // A larger corpus covers every character the corruption can introduce.
  REQUIRE(w.run({"gen-data", "--n", "400", "--seed", "5", "--out", w.p("v.jsonl")}) == 0);
  REQUIRE(w.run(with_tiny({"train", "--data", w.p("c.jsonl"), "--vocab-from", w.p("v.jsonl"), "--seed", "1", "--out",
                           w.p("m.ckpt")})) == 0);
  REQUIRE(w.run({"translate", "--model", w.p("m.ckpt"), "--data", w.p("c.jsonl"), "--max-len", "8", "--out",
                 w.p("p.jsonl")}) == 0);
  CHECK(lines(w.p("p.jsonl")).size() == 6);
  CHECK(w.run({"translate", "--model", w.p("m.ckpt"), "--data", w.p("c.jsonl"), "--sample", "--out",
               w.p("q.jsonl")}) == cli::kExitConfig);
  REQUIRE(w.run({"translate", "--model", w.p("m.ckpt"), "--data", w.p("c.jsonl"), "--sample", "--seed", "4",
                 "--max-len", "8", "--out", w.p("q.jsonl")}) == 0);
  REQUIRE(w.run({"build-triples", "--data", w.p("c.jsonl"), "--seed", "2", "--out", w.p("t.jsonl"), "--kto-out",
                 w.p("k.jsonl")}) == 0);
  CHECK(lines(w.p("k.jsonl")).size() == 12);
  REQUIRE(w.run({"eval", "--model", w.p("m.ckpt"), "--triples", w.p("t.jsonl"), "--out-dir", w.p("mg")}) == 0);
  CHECK(read_json(w.p("mg/margin.json"))["count"] == 6);
}

}
