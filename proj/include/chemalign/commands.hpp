#pragma once

// Pipeline commands behind the chemalign CLI. Each command reads and writes
// the JSONL/checkpoint/CSV formats of the other modules and leaves a run
// manifest next to its primary output.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chemalign/data.hpp"
#include "chemalign/errors.hpp"
#include "chemalign/losses.hpp"
#include "chemalign/merge.hpp"
#include "chemalign/policy.hpp"
#include "chemalign/train.hpp"

namespace chemalign::cli {

using Path = std::filesystem::path;

// Prediction and reference files disagree on their id sets.
class AlignmentError : public DataError {
 public:
  AlignmentError(std::vector<std::string> missing_predictions,
                 std::vector<std::string> missing_references);
  const std::vector<std::string>& missing_predictions() const { return missing_pred_; }
  const std::vector<std::string>& missing_references() const { return missing_ref_; }

 private:
  std::vector<std::string> missing_pred_;
  std::vector<std::string> missing_ref_;
};

struct RunConfig {
  std::string command;
  std::optional<std::uint64_t> seed;
  // Resolved option values in declaration order, echoed into the manifest.
  std::vector<std::pair<std::string, std::string>> echo;

  // data
  int n = 2000;
  Path data, out, out_dir;
  std::optional<data::Direction> direction;
  std::vector<double> fractions{0.8, 0.1, 0.1};

  // build-triples
  std::string generator = "corruption";
  double strength = 0.3;
  Path kto_out;

  // model and training
  policy::ModelConfig model;
  train::Method method = train::Method::kSft;
  Path init, ref, vocab_from, log;
  losses::LossConfig loss;
  double lr = 1e-3;
  int epochs = 1;
  int batch_size = 8;
  double clip_norm = 1.0;

  // translate (also the policy generator of build-triples)
  Path model_path;
  int max_len = 128;
  bool sample = false;
  double temperature = 1.0;

  // merge
  merge::Algorithm algorithm = merge::Algorithm::kSlerp;
  std::vector<Path> models;
  std::vector<double> weights;
  Path base;
  double density = 0.2;
  double lambda = 1.0;
  double parallel_threshold = 0.9995;

  // eval
  Path pred;
  std::string pred_field = "prediction";
  std::string nli_scorer;
  Path triples;

  // report
  std::vector<Path> reports;
  std::vector<std::string> labels;
};

struct Prediction {
  std::string id;
  data::Direction direction = data::Direction::kLang2Mol;
  std::string source;
  std::string prediction;
};

std::string to_json_line(const Prediction& p);

// Reads {"id", <field>} rows; other keys are ignored.
std::vector<std::pair<std::string, std::string>> read_predictions(const Path& path,
                                                                  const std::string& field);

std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const Path& path);

void cmd_gen_data(const RunConfig& cfg, std::ostream& log);
void cmd_split(const RunConfig& cfg, std::ostream& log);
void cmd_build_triples(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_translate(const RunConfig& cfg, std::ostream& log);
void cmd_merge(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);
void cmd_report(const RunConfig& cfg, std::ostream& log);

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitCompatibility = 4;
inline constexpr int kExitDiverged = 5;

int exit_code_for(const std::exception& e);

// Parses `args` (without the program name) and runs the command. Progress
// goes to `out`, diagnostics to `err`. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace chemalign::cli
