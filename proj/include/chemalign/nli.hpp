#pragma once

// Natural-language-inference scoring through an external process or HTTP
// endpoint speaking line-delimited JSON:
//
//   request:  {"id": str, "premise": str, "hypothesis": str}
//   response: {"id": str, "entail": f, "neutral": f, "contradict": f}
//
// One response per request, in any order, matched by id.

#include <chrono>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "chemalign/metrics.hpp"

namespace chemalign::eval {

class ScorerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NliRequest {
  std::string id;
  std::string premise;     // reference
  std::string hypothesis;  // prediction
};

std::string to_json_line(const NliRequest& req);

struct NliResponse {
  std::string id;
  NliVerdict verdict;
};

// Throws ScorerError on malformed JSON or a verdict that is not a
// distribution.
NliResponse parse_nli_response(std::string_view line);

class NliScorer {
 public:
  virtual ~NliScorer() = default;
  // One entry per request; nullopt marks a request the scorer failed to answer.
  virtual std::vector<std::optional<NliVerdict>> score_batch(std::span<const NliRequest> batch) = 0;
  virtual std::string name() const = 0;
};

// Word-overlap stand-in for a real NLI model, for tests and offline runs.
// entail ~ unigram F1 scaled down by unmatched numerals, contradiction ~
// fraction of hypothesis numerals missing from the premise, neutral the rest.
class LexicalNliScorer final : public NliScorer {
 public:
  std::vector<std::optional<NliVerdict>> score_batch(std::span<const NliRequest> batch) override;
  std::string name() const override { return "lexical"; }
  NliVerdict score(std::string_view premise, std::string_view hypothesis) const;
};

// Spawns `/bin/sh -c command` and streams requests over its stdin.
class ProcessNliScorer final : public NliScorer {
 public:
  explicit ProcessNliScorer(std::string command,
                            std::chrono::milliseconds timeout = std::chrono::seconds(30),
                            std::size_t max_in_flight = 64);
  std::vector<std::optional<NliVerdict>> score_batch(std::span<const NliRequest> batch) override;
  std::string name() const override { return "cmd:" + command_; }

 private:
  std::string command_;
  std::chrono::milliseconds timeout_;
  std::size_t max_in_flight_;
};

// POSTs the batch as newline-delimited JSON to `url` (http://host:port/path)
// and reads newline-delimited responses from the body.
class HttpNliScorer final : public NliScorer {
 public:
  explicit HttpNliScorer(std::string url,
                         std::chrono::milliseconds timeout = std::chrono::seconds(30));
  std::vector<std::optional<NliVerdict>> score_batch(std::span<const NliRequest> batch) override;
  std::string name() const override { return url_; }

 private:
  std::string url_;
  std::chrono::milliseconds timeout_;
};

// "lexical", "cmd:<shell command>" or "http://...".
std::unique_ptr<NliScorer> make_scorer(std::string_view spec);

// premise = reference, hypothesis = prediction. Throws ScorerError when the
// scorer does not return a valid verdict.
NliVerdict nli_score(std::string_view premise, std::string_view hypothesis, NliScorer& scorer);

}  // namespace chemalign::eval
