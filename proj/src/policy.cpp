#include "chemalign/policy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "chemalign/chem.hpp"

namespace chemalign::policy {

namespace {

std::string describe_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  char buf[16];
  if (u >= 0x20 && u < 0x7f) {
    std::snprintf(buf, sizeof buf, "'%c'", c);
  } else {
    std::snprintf(buf, sizeof buf, "0x%02x", u);
  }
  return buf;
}

}  // namespace

OovError::OovError(char c, std::size_t offset)
    : DataError("character " + describe_char(c) + " at offset " + std::to_string(offset) +
                " is not in the vocabulary"),
      character_(c),
      offset_(offset) {}

// ---- vocabulary ------------------------------------------------------------------------

Vocab::Vocab() : ids_(256, -1) {}

Vocab Vocab::from_symbols(std::string_view symbols) {
  std::array<bool, 256> seen{};
  for (char c : symbols) seen[static_cast<unsigned char>(c)] = true;
  Vocab v;
  for (int b = 0; b < 256; ++b) {
    if (!seen[b]) continue;
    v.ids_[b] = kNumSpecials + static_cast<int>(v.symbols_.size());
    v.symbols_ += static_cast<char>(b);
  }
  return v;
}

Vocab Vocab::from_texts(std::span<const std::string> texts) {
  std::string all;
  for (const auto& t : texts) all += t;
  return from_symbols(all);
}

Vocab Vocab::synthetic(int size) {
  if (size < kNumSpecials || size - kNumSpecials > 94) {
    throw ConfigError("synthetic vocabulary size must be in [4, 98], got " + std::to_string(size));
  }
  std::string symbols;
  for (int i = 0; i < size - kNumSpecials; ++i) symbols += static_cast<char>('!' + i);
  return from_symbols(symbols);
}

int Vocab::id(char c) const {
  const int i = ids_[static_cast<unsigned char>(c)];
  if (i < 0) throw OovError(c, 0);
  return i;
}

std::vector<int> Vocab::encode(std::string_view s) const {
  std::vector<int> out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const int id = ids_[static_cast<unsigned char>(s[i])];
    if (id < 0) throw OovError(s[i], i);
    out.push_back(id);
  }
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < kNumSpecials) continue;
    if (id >= size()) throw ContractError("token id " + std::to_string(id) + " out of range");
    out += symbols_[static_cast<std::size_t>(id - kNumSpecials)];
  }
  return out;
}

Vocab build_vocab(const std::vector<data::LMPair>& pairs) {
  std::vector<std::string> texts;
  for (auto d : {data::Direction::kLang2Mol, data::Direction::kMol2Lang}) {
    const auto& t = data::instruction_template(d);
    texts.emplace_back(t.prompt_before_source);
    texts.emplace_back(t.prompt_after_source);
  }
  for (const auto& p : pairs) {
    texts.push_back(p.source);
    texts.push_back(p.target);
  }
  return Vocab::from_texts(texts);
}

// ---- configuration ---------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (vocab_size < kNumSpecials) fail("vocab_size must be at least 4");
  if (d_model < 1) fail("d_model must be positive");
  if (n_layers < 1) fail("n_layers must be positive");
  if (n_heads < 1) fail("n_heads must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (context < 2) fail("context must be at least 2");
  if (window < 1) fail("window must be positive");
  if (local_window < 1) fail("local_window must be positive");
  if (mlp_mult < 1) fail("mlp_mult must be positive");
}

std::string ModelConfig::fingerprint() const {
  const std::string canon = "V=" + std::to_string(vocab_size) + ";d=" + std::to_string(d_model) +
                            ";L=" + std::to_string(n_layers) + ";H=" + std::to_string(n_heads) +
                            ";T=" + std::to_string(context) + ";W=" + std::to_string(window) +
                            ";LW=" + std::to_string(local_window) +
                            ";M=" + std::to_string(mlp_mult);
  std::uint64_t h = 0x63686d61ULL;
  for (unsigned char c : canon) h = chem::hash_combine(h, c);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- parameters ------------------------------------------------------------------------

namespace {

// Per-layer tensor suffixes, in storage order.
constexpr std::array<const char*, 12> kBlockTensors = {
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "ln2.gain", "ln2.bias", "mlp.w1",  "mlp.b1",  "mlp.w2",  "mlp.b2"};

enum BlockSlot { kLn1G, kLn1B, kWq, kWk, kWv, kWo, kLn2G, kLn2B, kW1, kB1, kW2, kB2 };

constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;
constexpr std::size_t kFirstBlock = 2;

std::size_t block_slot(int layer, BlockSlot s) {
  return kFirstBlock + static_cast<std::size_t>(layer) * kBlockTensors.size() + s;
}

std::size_t final_slot(const ModelConfig& cfg, int k) {
  return kFirstBlock + static_cast<std::size_t>(cfg.n_layers) * kBlockTensors.size() +
         static_cast<std::size_t>(k);
}

}  // namespace

std::vector<std::string> parameter_names(const ModelConfig& cfg) {
  std::vector<std::string> names{"tok_emb", "pos_emb"};
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const char* t : kBlockTensors) names.push_back("blocks." + std::to_string(l) + "." + t);
  }
  for (const char* t : {"ln_f.gain", "ln_f.bias", "head.w", "head.b"}) names.emplace_back(t);
  return names;
}

std::vector<Index> parameter_shape(const ModelConfig& cfg, std::string_view name) {
  const Index d = cfg.d_model;
  const Index hidden = d * cfg.mlp_mult;
  if (name == "tok_emb") return {cfg.vocab_size, d};
  if (name == "pos_emb") return {cfg.context, d};
  if (name == "head.w") return {d, cfg.vocab_size};
  if (name == "head.b") return {1, cfg.vocab_size};
  if (name == "ln_f.gain" || name == "ln_f.bias") return {1, d};
  const auto dot = name.rfind('.', name.rfind('.') - 1);
  const std::string_view suffix = name.substr(dot + 1);
  if (suffix == "mlp.w1") return {d, hidden};
  if (suffix == "mlp.b1") return {1, hidden};
  if (suffix == "mlp.w2") return {hidden, d};
  if (suffix.substr(0, 5) == "attn.") return {d, d};
  return {1, d};  // layer-norm gains/biases and mlp.b2
}

std::size_t PolicyParams::index_of(std::string_view name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ContractError("no parameter named " + std::string(name));
  return static_cast<std::size_t>(it - names.begin());
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

bool PolicyParams::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Tensor& t) { return t.all_finite(); });
}

PolicyParams init_params(const ModelConfig& cfg, std::optional<Vocab> vocab) {
  cfg.validate();
  PolicyParams p;
  p.config = cfg;
  p.vocab = vocab ? std::move(*vocab) : Vocab::synthetic(cfg.vocab_size);
  if (p.vocab.size() != cfg.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(p.vocab.size()) +
                      " entries but config.vocab_size is " + std::to_string(cfg.vocab_size));
  }
  p.names = parameter_names(cfg);
  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&](double a) { return (2.0 * data::uniform01(rng) - 1.0) * a; };
  const double residual_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& name : p.names) {
    Tensor t(parameter_shape(cfg, name), true);
    Matrix& m = t.matrix();
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") ||
                         name.ends_with(".b2") || name == "head.b";
    double a;
    if (is_gain || is_bias) {
      // Small nonzero offsets keep every tensor away from the zero vector.
      a = 0.01;
    } else if (name == "tok_emb" || name == "pos_emb") {
      a = 0.1;
    } else {
      a = 1.0 / std::sqrt(static_cast<double>(m.rows()));
      if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) a *= residual_scale;
    }
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = (is_gain ? 1.0 : 0.0) + uniform(a);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

// ---- forward ---------------------------------------------------------------------------

BoundParams bind(GradTape& tape, const PolicyParams& params, bool requires_grad) {
  BoundParams bp;
  bp.params = &params;
  bp.vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) bp.vars.push_back(tape.leaf(t.matrix(), requires_grad));
  return bp;
}

namespace {

// Attention span of layer `layer`.
Index layer_window(const ModelConfig& cfg, int layer) {
  return layer == cfg.n_layers - 1 ? cfg.window : cfg.local_window;
}

// One pre-norm block. `h` holds rows for absolute positions [in_start, end);
// the result holds rows [out_start, end).
Var block(const BoundParams& bp, int layer, Var h, Index in_start, Index out_start, Index end) {
  const ModelConfig& cfg = bp.params->config;
  auto P = [&](BlockSlot s) { return bp[block_slot(layer, s)]; };
  const Index n = end - in_start;
  const Index m = end - out_start;

  Var x = layer_norm(h, P(kLn1G), P(kLn1B));
  Var xq = m == n ? x : slice_rows(x, n - m, m);
  Var att = windowed_attention(matmul(xq, P(kWq)), matmul(x, P(kWk)), matmul(x, P(kWv)),
                               cfg.n_heads, out_start, in_start, layer_window(cfg, layer));
  Var r = (m == n ? h : slice_rows(h, n - m, m)) + matmul(att, P(kWo));
  Var y = layer_norm(r, P(kLn2G), P(kLn2B));
  Var f = gelu(add_row(matmul(y, P(kW1)), P(kB1)));
  return r + add_row(matmul(f, P(kW2)), P(kB2));
}

}  // namespace

Var next_token_logprobs(const BoundParams& bp, std::span<const int> tokens, Index first, Index count) {
  const ModelConfig& cfg = bp.params->config;
  const Index end = first + count;
  if (first < 0 || count < 1 || end > static_cast<Index>(tokens.size())) {
    throw ContractError("next_token_logprobs: row range out of bounds");
  }
  if (end > cfg.context) {
    throw LengthError("sequence of " + std::to_string(end) + " positions exceeds context " +
                      std::to_string(cfg.context));
  }
  // starts[l] is the first position whose activations layer l must see.
  std::vector<Index> starts(static_cast<std::size_t>(cfg.n_layers) + 1);
  starts.back() = first;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    starts[l] = std::max<Index>(0, starts[l + 1] - (layer_window(cfg, l) - 1));
  }
  const Index in_start = starts[0];
  std::vector<int> ids(tokens.begin() + in_start, tokens.begin() + end);
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(in_start) + static_cast<int>(i);
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size) throw ContractError("token id out of range");
  }

  Var h = gather_rows(bp[kTokEmb], ids) + gather_rows(bp[kPosEmb], pos);
  for (int l = 0; l < cfg.n_layers; ++l) h = block(bp, l, h, starts[l], starts[l + 1], end);
  h = layer_norm(h, bp[final_slot(cfg, 0)], bp[final_slot(cfg, 1)]);
  Var logits = add_row(matmul(h, bp[final_slot(cfg, 2)]), bp[final_slot(cfg, 3)]);
  return log_softmax(logits);
}

std::vector<int> encode_prompt(const Vocab& v, data::Direction d, std::string_view source) {
  const std::string text = data::render_instruction(data::instruction_template(d), source);
  std::vector<int> ids{kBos};
  const auto body = v.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

std::vector<int> encode_target(const Vocab& v, std::string_view target) {
  std::vector<int> ids = v.encode(target);
  ids.push_back(kEos);
  return ids;
}

namespace {

// Target without trailing padding; validates EOS termination.
std::span<const int> strip_target(std::span<const int> target) {
  std::size_t n = target.size();
  while (n > 0 && target[n - 1] == kPad) --n;
  if (n == 0) throw ContractError("target sequence is empty");
  if (target[n - 1] != kEos) throw ContractError("target sequence must end with EOS");
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (target[i] == kEos || target[i] == kPad || target[i] == kBos) {
      throw ContractError("special token inside target sequence at position " + std::to_string(i));
    }
  }
  return target.first(n);
}

struct Joined {
  std::vector<int> tokens;
  Index first;
  Index count;
};

Joined join(const ModelConfig& cfg, std::span<const int> prompt, std::span<const int> target) {
  if (prompt.empty()) throw ContractError("prompt must contain at least BOS");
  const auto y = strip_target(target);
  const std::size_t total = prompt.size() + y.size();
  if (total > static_cast<std::size_t>(cfg.context)) {
    throw LengthError("prompt (" + std::to_string(prompt.size()) + ") + target (" +
                      std::to_string(y.size()) + ") tokens exceed context " +
                      std::to_string(cfg.context));
  }
  Joined j;
  j.tokens.assign(prompt.begin(), prompt.end());
  j.tokens.insert(j.tokens.end(), y.begin(), y.end());
  j.first = static_cast<Index>(prompt.size()) - 1;
  j.count = static_cast<Index>(y.size());
  return j;
}

}  // namespace

SequenceScore score_sequence(const BoundParams& bp, std::span<const int> prompt,
                             std::span<const int> target) {
  const Joined j = join(bp.params->config, prompt, target);
  Var rows = next_token_logprobs(bp, j.tokens, j.first, j.count);
  std::span<const int> next(j.tokens.data() + j.first + 1, static_cast<std::size_t>(j.count));
  Var per_token = pick(rows, next);
  return SequenceScore{sum(per_token), per_token};
}

LogProb sequence_logprob(const PolicyParams& p, std::span<const int> prompt,
                         std::span<const int> target) {
  GradTape tape;
  const auto bp = bind(tape, p, false);
  const auto s = score_sequence(bp, prompt, target);
  LogProb out;
  out.total = s.total.item();
  const Matrix& col = s.per_token.value();
  out.per_token.assign(col.data(), col.data() + col.size());
  return out;
}

Matrix target_logprob_rows(const PolicyParams& p, std::span<const int> prompt,
                           std::span<const int> target) {
  const Joined j = join(p.config, prompt, target);
  GradTape tape;
  const auto bp = bind(tape, p, false);
  return next_token_logprobs(bp, j.tokens, j.first, j.count).value();
}

namespace {

template <typename Choose>
std::vector<int> decode_loop(const PolicyParams& p, std::span<const int> prompt, int max_len,
                             Choose&& choose) {
  if (prompt.empty()) throw ContractError("prompt must contain at least BOS");
  if (max_len < 0) throw ContractError("max_len must be non-negative");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  std::vector<int> out;
  GradTape tape;
  auto bp = bind(tape, p, false);
  while (static_cast<int>(out.size()) < max_len &&
         static_cast<Index>(tokens.size()) < p.config.context) {
    const Index last = static_cast<Index>(tokens.size()) - 1;
    Matrix row = next_token_logprobs(bp, tokens, last, 1).value();
    const int next = choose(row);
    if (next == kEos) break;
    out.push_back(next);
    tokens.push_back(next);
    // Drop the per-step graph but keep the bound parameters.
    if (tape.size() > 4 * bp.vars.size()) {
      tape.reset();
      bp = bind(tape, p, false);
    }
  }
  return out;
}

bool emittable(int id) { return id == kEos || id >= kNumSpecials; }

}  // namespace

std::vector<int> greedy_decode(const PolicyParams& p, std::span<const int> prompt, int max_len) {
  return decode_loop(p, prompt, max_len, [](const Matrix& row) {
    int best = kEos;
    double best_v = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < row.cols(); ++j) {
      if (!emittable(j)) continue;
      if (row(0, j) > best_v) {
        best_v = row(0, j);
        best = j;
      }
    }
    return best;
  });
}

std::vector<int> sample_decode(const PolicyParams& p, std::span<const int> prompt, int max_len,
                               double temperature, std::uint64_t seed) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ContractError("sampling temperature must be positive and finite");
  }
  std::mt19937_64 rng(seed);
  return decode_loop(p, prompt, max_len, [&](const Matrix& row) {
    double top = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < row.cols(); ++j) {
      if (emittable(j)) top = std::max(top, row(0, j));
    }
    std::vector<double> w(static_cast<std::size_t>(row.cols()), 0.0);
    double z = 0.0;
    for (int j = 0; j < row.cols(); ++j) {
      if (!emittable(j)) continue;
      w[j] = std::exp((row(0, j) - top) / temperature);
      z += w[j];
    }
    const double u = data::uniform01(rng) * z;
    double acc = 0.0;
    int last = kEos;
    for (int j = 0; j < row.cols(); ++j) {
      if (w[j] <= 0.0) continue;
      acc += w[j];
      last = j;
      if (u < acc) return j;
    }
    return last;
  });
}

std::string translate(const PolicyParams& p, data::Direction d, std::string_view source,
                      int max_len) {
  const auto prompt = encode_prompt(p.vocab, d, source);
  const auto ids = greedy_decode(p, prompt, max_len);
  return p.vocab.decode(ids);
}

}  // namespace chemalign::policy
