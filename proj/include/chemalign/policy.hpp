#pragma once

// Character-level causal translation model: log pi(y | x) and decoding.
//
// The network is a pre-norm transformer with learned absolute positions and
// sliding-window causal attention: in the top layer position p attends to
// (p - window, p], in lower layers to (p - local_window, p]. Only the rows
// that can influence the requested outputs are computed, so scoring a short
// target after a long instruction costs about window + (layers - 1) *
// local_window rows instead of the full context.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chemalign/data.hpp"
#include "chemalign/errors.hpp"
#include "chemalign/numerics.hpp"

namespace chemalign::policy {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kSep = 3;
inline constexpr int kNumSpecials = 4;

class OovError : public DataError {
 public:
  OovError(char c, std::size_t offset);
  char character() const { return character_; }
  std::size_t offset() const { return offset_; }

 private:
  char character_;
  std::size_t offset_;
};

// Byte-level vocabulary: ids 0-3 are BOS, EOS, PAD, SEP; the remaining ids
// are the sorted unique bytes seen at construction.
class Vocab {
 public:
  Vocab();
  static Vocab from_texts(std::span<const std::string> texts);
  static Vocab from_symbols(std::string_view symbols);
  // Specials plus the first size-4 printable ASCII characters from '!'.
  static Vocab synthetic(int size);

  int size() const { return kNumSpecials + static_cast<int>(symbols_.size()); }
  const std::string& symbols() const { return symbols_; }
  bool contains(char c) const { return ids_[static_cast<unsigned char>(c)] >= 0; }
  int id(char c) const;
  // Throws OovError on the first character outside the vocabulary.
  std::vector<int> encode(std::string_view s) const;
  // Special ids are skipped.
  std::string decode(std::span<const int> ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::string symbols_;
  std::vector<int> ids_;  // 256 entries, -1 for absent bytes
};

// Vocabulary covering both instruction templates plus every source/target.
Vocab build_vocab(const std::vector<data::LMPair>& pairs);

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 48;
  int n_layers = 2;
  int n_heads = 4;
  int context = 640;  // maximum prompt + target length, in tokens
  int window = 192;       // attention span of the top layer
  int local_window = 16;  // attention span of every lower layer
  int mlp_mult = 4;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  // Stable digest of every architectural field (seed excluded).
  std::string fingerprint() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PolicyParams {
  ModelConfig config;
  Vocab vocab;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t index_of(std::string_view name) const;
  Tensor& operator[](std::string_view name) { return tensors[index_of(name)]; }
  const Tensor& operator[](std::string_view name) const { return tensors[index_of(name)]; }
  std::size_t parameter_count() const;
  bool all_finite() const;
};

// Tensor names in storage order for a configuration.
std::vector<std::string> parameter_names(const ModelConfig& cfg);
std::vector<Index> parameter_shape(const ModelConfig& cfg, std::string_view name);

// Seeded scaled-uniform initialization. Uses Vocab::synthetic when `vocab`
// is omitted.
PolicyParams init_params(const ModelConfig& cfg, std::optional<Vocab> vocab = std::nullopt);

// Parameters placed on a tape.
struct BoundParams {
  const PolicyParams* params = nullptr;
  std::vector<Var> vars;

  Var operator[](std::size_t i) const { return vars[i]; }
};

BoundParams bind(GradTape& tape, const PolicyParams& params, bool requires_grad);

// Log-softmax rows predicting tokens[first + 1 .. first + count] from the
// prefixes ending at positions first .. first + count - 1.
Var next_token_logprobs(const BoundParams& bp, std::span<const int> tokens, Index first, Index count);

// BOS + rendered instruction prompt.
std::vector<int> encode_prompt(const Vocab& v, data::Direction d, std::string_view source);
// Target characters followed by EOS.
std::vector<int> encode_target(const Vocab& v, std::string_view target);

struct SequenceScore {
  Var total;      // 1 x 1
  Var per_token;  // |y| x 1
};

// Differentiable log pi(y | x). `target` must end with EOS, optionally
// followed by PAD tokens which are ignored.
SequenceScore score_sequence(const BoundParams& bp, std::span<const int> prompt,
                             std::span<const int> target);

struct LogProb {
  double total = 0.0;
  std::vector<double> per_token;
};

LogProb sequence_logprob(const PolicyParams& p, std::span<const int> prompt,
                         std::span<const int> target);

// Full next-token log distributions at each target position (|y| x V).
Matrix target_logprob_rows(const PolicyParams& p, std::span<const int> prompt,
                           std::span<const int> target);

// Stops at EOS (not included) or after max_len tokens. BOS/PAD/SEP are never
// emitted.
std::vector<int> greedy_decode(const PolicyParams& p, std::span<const int> prompt, int max_len);

std::vector<int> sample_decode(const PolicyParams& p, std::span<const int> prompt, int max_len,
                               double temperature, std::uint64_t seed);

// Convenience: prompt rendering, decoding and text conversion in one call.
std::string translate(const PolicyParams& p, data::Direction d, std::string_view source,
                      int max_len);

}  // namespace chemalign::policy
