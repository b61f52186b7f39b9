#include "chemalign/merge.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "chemalign/data.hpp"

namespace chemalign::merge {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

std::string_view to_string(LoadErrc c) {
  switch (c) {
    case LoadErrc::kIo: return "io";
    case LoadErrc::kCorruptManifest: return "corrupt-manifest";
    case LoadErrc::kOffsetOverlap: return "offset-overlap";
    case LoadErrc::kTruncatedPayload: return "truncated-payload";
    case LoadErrc::kUnsupportedVersion: return "unsupported-version";
    case LoadErrc::kTrailingBytes: return "trailing-bytes";
    case LoadErrc::kNonFinite: return "non-finite";
  }
  return "unknown";
}

CheckpointError::CheckpointError(LoadErrc code, const std::string& msg)
    : std::runtime_error("checkpoint " + std::string(to_string(code)) + ": " + msg), code_(code) {}

// ---- file format -------------------------------------------------------------------------

namespace {

json config_to_json(const policy::ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"context", c.context}, {"window", c.window},
              {"local_window", c.local_window},
              {"mlp_mult", c.mlp_mult},     {"seed", c.seed}};
}

policy::ModelConfig config_from_json(const json& j) {
  policy::ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context = j.at("context").get<int>();
  c.window = j.at("window").get<int>();
  c.local_window = j.at("local_window").get<int>();
  c.mlp_mult = j.at("mlp_mult").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.names.size() != c.tensors.size()) throw ContractError("checkpoint names and tensors differ in count");
  json entries = json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& t = c.tensors[i];
    const std::uint64_t length = 4 * static_cast<std::uint64_t>(t.size());
    entries.push_back(json{{"name", c.names[i]},
                           {"shape", t.shape()},
                           {"dtype", "f32"},
                           {"offset", offset},
                           {"length", length}});
    offset += length;
  }
  std::vector<int> vocab_bytes;
  for (unsigned char ch : c.vocab.symbols()) vocab_bytes.push_back(ch);
  const json manifest{{"format_version", kFormatVersion},
                      {"config_fingerprint", c.config.fingerprint()},
                      {"config", config_to_json(c.config)},
                      {"vocab", vocab_bytes},
                      {"tensors", entries}};
  const std::string text = manifest.dump();
  std::string out;
  out.reserve(8 + text.size() + offset);
  put_u64(out, text.size());
  out += text;
  for (const auto& t : c.tensors) {
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      char buf[4];
      std::memcpy(buf, &f, 4);
      out.append(buf, 4);
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8) throw CheckpointError(LoadErrc::kTruncatedPayload, "file shorter than header");
  std::uint64_t manifest_len;
  std::memcpy(&manifest_len, bytes.data(), 8);
  if (manifest_len > bytes.size() - 8) {
    throw CheckpointError(LoadErrc::kTruncatedPayload, "manifest extends past end of file");
  }
  json manifest;
  try {
    manifest = json::parse(bytes.substr(8, manifest_len));
  } catch (const json::exception& e) {
    throw CheckpointError(LoadErrc::kCorruptManifest, e.what());
  }
  if (!manifest.is_object() || !manifest.contains("format_version") ||
      !manifest["format_version"].is_number_unsigned()) {
    throw CheckpointError(LoadErrc::kCorruptManifest, "missing format_version");
  }
  const auto version = manifest["format_version"].get<std::uint64_t>();
  if (version != kFormatVersion) {
    throw CheckpointError(LoadErrc::kUnsupportedVersion,
                          "format version " + std::to_string(version) + " (supported: " +
                              std::to_string(kFormatVersion) + ")");
  }
  const std::string_view payload = bytes.substr(8 + manifest_len);

  Checkpoint c;
  struct Entry {
    std::string name;
    std::vector<Index> shape;
    std::uint64_t offset, length;
  };
  std::vector<Entry> entries;
  try {
    c.config = config_from_json(manifest.at("config"));
    std::string symbols;
    for (const auto& b : manifest.at("vocab")) {
      const int v = b.get<int>();
      if (v < 0 || v > 255) throw CheckpointError(LoadErrc::kCorruptManifest, "vocab byte out of range");
      symbols += static_cast<char>(v);
    }
    c.vocab = policy::Vocab::from_symbols(symbols);
    if (c.vocab.symbols() != symbols) {
      throw CheckpointError(LoadErrc::kCorruptManifest, "vocab symbols not sorted and unique");
    }
    if (manifest.at("config_fingerprint").get<std::string>() != c.config.fingerprint()) {
      throw CheckpointError(LoadErrc::kCorruptManifest, "config fingerprint mismatch");
    }
    for (const auto& e : manifest.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "f32") {
        throw CheckpointError(LoadErrc::kCorruptManifest, "unsupported dtype");
      }
      entries.push_back(Entry{e.at("name").get<std::string>(), e.at("shape").get<std::vector<Index>>(),
                              e.at("offset").get<std::uint64_t>(), e.at("length").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw CheckpointError(LoadErrc::kCorruptManifest, e.what());
  }
  try {
    c.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(LoadErrc::kCorruptManifest, e.what());
  }
  if (c.vocab.size() != c.config.vocab_size) {
    throw CheckpointError(LoadErrc::kCorruptManifest, "vocab size disagrees with config");
  }

  const auto expected_names = policy::parameter_names(c.config);
  if (entries.size() != expected_names.size()) {
    throw CheckpointError(LoadErrc::kCorruptManifest, "unexpected tensor count");
  }
  std::uint64_t end = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Entry& e = entries[i];
    if (e.name != expected_names[i]) {
      throw CheckpointError(LoadErrc::kCorruptManifest, "unexpected tensor " + e.name);
    }
    if (e.shape != policy::parameter_shape(c.config, e.name)) {
      throw CheckpointError(LoadErrc::kCorruptManifest, "shape mismatch for " + e.name);
    }
    std::uint64_t count = 1;
    for (Index d : e.shape) count *= static_cast<std::uint64_t>(d);
    if (e.length != 4 * count) {
      throw CheckpointError(LoadErrc::kCorruptManifest, "byte length mismatch for " + e.name);
    }
    if (e.offset < end) throw CheckpointError(LoadErrc::kOffsetOverlap, "tensor " + e.name + " overlaps its predecessor");
    if (e.offset > end) throw CheckpointError(LoadErrc::kCorruptManifest, "gap before tensor " + e.name);
    end = e.offset + e.length;
  }
  if (payload.size() < end) {
    throw CheckpointError(LoadErrc::kTruncatedPayload, "payload has " + std::to_string(payload.size()) +
                                                           " bytes, manifest needs " + std::to_string(end));
  }
  if (payload.size() > end) {
    throw CheckpointError(LoadErrc::kTrailingBytes, std::to_string(payload.size() - end) +
                                                        " bytes after the last tensor");
  }

  for (const Entry& e : entries) {
    Tensor t(e.shape, true);
    auto out = t.data();
    for (std::size_t k = 0; k < out.size(); ++k) {
      float f;
      std::memcpy(&f, payload.data() + e.offset + 4 * k, 4);
      if (!std::isfinite(f)) throw CheckpointError(LoadErrc::kNonFinite, "non-finite value in " + e.name);
      out[k] = f;
    }
    c.names.push_back(e.name);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (!c.all_finite()) throw NumericError("refusing to save a checkpoint with non-finite values");
  data::write_file_atomic(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(LoadErrc::kIo, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

// ---- fusion ------------------------------------------------------------------------------

void require_compatible(const Checkpoint& a, const Checkpoint& b) {
  if (a.names != b.names) throw CompatibilityError("checkpoints have different tensor names");
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].shape() != b.tensors[i].shape()) {
      throw CompatibilityError("shape mismatch for tensor " + a.names[i]);
    }
  }
  if (a.config.fingerprint() != b.config.fingerprint()) {
    throw CompatibilityError("model configurations differ");
  }
  if (!(a.vocab == b.vocab)) throw CompatibilityError("vocabularies differ");
}

TaskVector task_vector(const Checkpoint& model, const Checkpoint& base) {
  require_compatible(model, base);
  TaskVector tv;
  tv.names = model.names;
  for (std::size_t i = 0; i < model.tensors.size(); ++i) {
    tv.deltas.emplace_back(model.tensors[i].shape(), model.tensors[i].matrix() - base.tensors[i].matrix());
  }
  return tv;
}

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kTies: return "ties";
    case Algorithm::kSlerp: return "slerp";
    case Algorithm::kLerp: return "lerp";
  }
  return "unknown";
}

Algorithm parse_algorithm(std::string_view s) {
  if (s == "ties") return Algorithm::kTies;
  if (s == "slerp") return Algorithm::kSlerp;
  if (s == "lerp") return Algorithm::kLerp;
  throw ConfigError("unknown merge algorithm '" + std::string(s) + "'");
}

namespace {

Eigen::Map<const Vector<double>> flat(const Tensor& t) {
  return {t.matrix().data(), t.size()};
}

Tensor unflat(const Tensor& like, const Vector<double>& v) {
  Tensor out(like.shape(), like.requires_grad());
  std::copy(v.data(), v.data() + v.size(), out.data().begin());
  return out;
}

void check_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolation factor must lie in [0, 1]");
}

}  // namespace

Checkpoint ties_merge(const Checkpoint& base, std::span<const Checkpoint> models, const MergeConfig& cfg) {
  if (models.empty()) throw ConfigError("ties_merge needs at least one model");
  if (!(cfg.density > 0.0) || cfg.density > 1.0) {
    throw ConfigError("TIES density must lie in (0, 1], got " + std::to_string(cfg.density));
  }
  if (!std::isfinite(cfg.lambda)) throw ConfigError("TIES lambda must be finite");
  std::vector<double> weights = cfg.weights;
  if (weights.empty()) weights.assign(models.size(), 1.0);
  if (weights.size() != models.size()) {
    throw ConfigError("ties_merge: " + std::to_string(weights.size()) + " weights for " +
                      std::to_string(models.size()) + " models");
  }
  if (std::any_of(weights.begin(), weights.end(), [](double w) { return !(w >= 0.0) || !std::isfinite(w); }) ||
      std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) {
    throw ConfigError("merge weights must be non-negative and not all zero");
  }
  std::vector<TaskVector> tvs;
  for (const auto& m : models) tvs.push_back(task_vector(m, base));

  Checkpoint out = base;
  for (std::size_t i = 0; i < base.tensors.size(); ++i) {
    std::vector<Vector<double>> trimmed;
    trimmed.reserve(tvs.size());
    for (const auto& tv : tvs) trimmed.push_back(trim_top_magnitude(flat(tv.deltas[i]), cfg.density));
    const Vector<double> delta = ties_combine<double>(trimmed, weights);
    out.tensors[i] = unflat(base.tensors[i], flat(base.tensors[i]) + cfg.lambda * delta);
  }
  return out;
}

Checkpoint slerp_merge(const Checkpoint& a, const Checkpoint& b, double t, const MergeConfig& cfg) {
  require_compatible(a, b);
  check_t(t);
  Checkpoint out = a;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    try {
      out.tensors[i] = unflat(a.tensors[i], slerp(flat(a.tensors[i]), flat(b.tensors[i]), t,
                                                  cfg.parallel_threshold));
    } catch (const DegenerateTensorError& e) {
      throw DegenerateTensorError(std::string(e.what()) + " (" + a.names[i] + ")");
    }
  }
  return out;
}

Checkpoint lerp_merge(const Checkpoint& a, const Checkpoint& b, double t) {
  require_compatible(a, b);
  check_t(t);
  Checkpoint out = a;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    out.tensors[i].matrix() = (1.0 - t) * a.tensors[i].matrix() + t * b.tensors[i].matrix();
  }
  return out;
}

double ratio_to_t(double w_a, double w_b) {
  if (!(w_a >= 0.0) || !(w_b >= 0.0) || !std::isfinite(w_a) || !std::isfinite(w_b)) {
    throw ConfigError("merge ratio weights must be non-negative and finite");
  }
  if (w_a + w_b == 0.0) throw ConfigError("merge ratio weights are both zero");
  return w_b / (w_a + w_b);
}

}  // namespace chemalign::merge
