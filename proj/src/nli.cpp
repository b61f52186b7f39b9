#include "chemalign/nli.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <map>
#include <unordered_map>

#include <httplib.h>
#include <json.hpp>

namespace chemalign::eval {

using nlohmann::json;

std::string to_json_line(const NliRequest& req) {
  return json{{"id", req.id}, {"premise", req.premise}, {"hypothesis", req.hypothesis}}.dump();
}

NliResponse parse_nli_response(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ScorerError(std::string("malformed scorer response: ") + e.what());
  }
  try {
    NliResponse r;
    r.id = j.at("id").get<std::string>();
    r.verdict.entail = j.at("entail").get<double>();
    r.verdict.neutral = j.at("neutral").get<double>();
    r.verdict.contradict = j.at("contradict").get<double>();
    if (!r.verdict.well_formed()) {
      throw ScorerError("scorer verdict for id " + r.id + " is not a probability distribution");
    }
    return r;
  } catch (const json::exception& e) {
    throw ScorerError(std::string("scorer response missing fields: ") + e.what());
  }
}

namespace {

std::vector<std::string> lower_words(std::string_view s) {
  std::vector<std::string> words = whitespace_tokens(s);
  for (auto& w : words) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  }
  return words;
}

bool is_numeral(const std::string& w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](unsigned char c) { return std::isdigit(c); });
}

// Fills verdict slots from response lines, ignoring unknown or repeated ids.
void record_response(std::string_view line, const std::unordered_map<std::string, std::size_t>& index,
                     std::vector<std::optional<NliVerdict>>& out, std::size_t& answered) {
  if (line.empty()) return;
  NliResponse r;
  try {
    r = parse_nli_response(line);
  } catch (const ScorerError&) {
    return;
  }
  auto it = index.find(r.id);
  if (it == index.end() || out[it->second]) return;
  out[it->second] = r.verdict;
  ++answered;
}

std::unordered_map<std::string, std::size_t> index_by_id(std::span<const NliRequest> batch) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!index.emplace(batch[i].id, i).second) {
      throw ScorerError("duplicate request id " + batch[i].id);
    }
  }
  return index;
}

}  // namespace

NliVerdict LexicalNliScorer::score(std::string_view premise, std::string_view hypothesis) const {
  const auto p = lower_words(premise);
  const auto h = lower_words(hypothesis);
  std::map<std::string, int> pc, hc;
  for (const auto& w : p) pc[w] += 1;
  for (const auto& w : h) hc[w] += 1;
  int matches = 0;
  for (const auto& [w, c] : hc) {
    auto it = pc.find(w);
    if (it != pc.end()) matches += std::min(c, it->second);
  }
  double overlap = 0.0;
  if (!p.empty() && !h.empty() && matches > 0) {
    const double prec = static_cast<double>(matches) / static_cast<double>(h.size());
    const double rec = static_cast<double>(matches) / static_cast<double>(p.size());
    overlap = 2.0 * prec * rec / (prec + rec);
  }
  int numerals = 0;
  int unsupported = 0;
  for (const auto& w : h) {
    if (!is_numeral(w)) continue;
    ++numerals;
    if (!pc.contains(w)) ++unsupported;
  }
  const double mismatch = numerals == 0 ? 0.0 : static_cast<double>(unsupported) / numerals;
  const double e = overlap * (1.0 - mismatch);
  const double n = 1.0 - e;
  const double c = mismatch;
  const double z = e + n + c;
  return NliVerdict{e / z, n / z, c / z};
}

std::vector<std::optional<NliVerdict>> LexicalNliScorer::score_batch(std::span<const NliRequest> batch) {
  std::vector<std::optional<NliVerdict>> out;
  out.reserve(batch.size());
  for (const auto& r : batch) out.emplace_back(score(r.premise, r.hypothesis));
  return out;
}

// ---- child process ----------------------------------------------------------------

ProcessNliScorer::ProcessNliScorer(std::string command, std::chrono::milliseconds timeout,
                                   std::size_t max_in_flight)
    : command_(std::move(command)), timeout_(timeout), max_in_flight_(std::max<std::size_t>(1, max_in_flight)) {}

std::vector<std::optional<NliVerdict>> ProcessNliScorer::score_batch(std::span<const NliRequest> batch) {
  std::vector<std::optional<NliVerdict>> out(batch.size());
  if (batch.empty()) return out;
  const auto index = index_by_id(batch);

  // A scorer that exits early must not kill us with SIGPIPE.
  ::signal(SIGPIPE, SIG_IGN);

  int to_child[2];
  int from_child[2];
  if (::pipe(to_child) != 0) throw ScorerError("pipe() failed");
  if (::pipe(from_child) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    throw ScorerError("pipe() failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw ScorerError("fork() failed");
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  int wfd = to_child[1];
  const int rfd = from_child[0];
  ::fcntl(wfd, F_SETFL, ::fcntl(wfd, F_GETFL) | O_NONBLOCK);

  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  std::size_t next = 0;
  std::size_t answered = 0;
  std::string outbox;
  std::string inbox;
  bool child_eof = false;

  while (answered < batch.size() && !child_eof) {
    // Queue more requests while under the in-flight limit.
    while (next < batch.size() && next - answered < max_in_flight_ && outbox.size() < 65536) {
      outbox += to_json_line(batch[next++]);
      outbox += '\n';
    }
    if (wfd >= 0 && outbox.empty() && next == batch.size()) {
      ::close(wfd);
      wfd = -1;
    }
    const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (remaining.count() <= 0) break;

    pollfd fds[2];
    nfds_t nfds = 0;
    fds[nfds++] = pollfd{rfd, POLLIN, 0};
    if (wfd >= 0 && !outbox.empty()) fds[nfds++] = pollfd{wfd, POLLOUT, 0};
    const int ready = ::poll(fds, nfds, static_cast<int>(remaining.count()));
    if (ready < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (ready == 0) break;

    if (nfds == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
      const ssize_t n = ::write(wfd, outbox.data(), outbox.size());
      if (n > 0) {
        outbox.erase(0, static_cast<std::size_t>(n));
      } else if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK) {
        ::close(wfd);
        wfd = -1;
        outbox.clear();
        next = batch.size();
      }
    }
    if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
      char buf[8192];
      const ssize_t n = ::read(rfd, buf, sizeof buf);
      if (n <= 0) {
        child_eof = true;
      } else {
        inbox.append(buf, static_cast<std::size_t>(n));
        std::size_t nl;
        while ((nl = inbox.find('\n')) != std::string::npos) {
          record_response(std::string_view(inbox).substr(0, nl), index, out, answered);
          inbox.erase(0, nl + 1);
        }
      }
    }
  }
  if (!inbox.empty()) record_response(inbox, index, out, answered);

  if (wfd >= 0) ::close(wfd);
  ::close(rfd);
  int status = 0;
  if (::waitpid(pid, &status, WNOHANG) == 0) {
    ::kill(pid, SIGTERM);
    ::waitpid(pid, &status, 0);
  }
  return out;
}

// ---- HTTP ----------------------------------------------------------------------------

HttpNliScorer::HttpNliScorer(std::string url, std::chrono::milliseconds timeout)
    : url_(std::move(url)), timeout_(timeout) {}

std::vector<std::optional<NliVerdict>> HttpNliScorer::score_batch(std::span<const NliRequest> batch) {
  std::vector<std::optional<NliVerdict>> out(batch.size());
  if (batch.empty()) return out;
  const auto index = index_by_id(batch);

  constexpr std::string_view kScheme = "http://";
  if (url_.rfind(kScheme, 0) != 0) throw ScorerError("only http:// endpoints are supported: " + url_);
  const std::string rest = url_.substr(kScheme.size());
  const auto slash = rest.find('/');
  const std::string host_port = rest.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : rest.substr(slash);

  httplib::Client client("http://" + host_port);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  client.set_write_timeout(timeout_);

  std::string body;
  for (const auto& r : batch) {
    body += to_json_line(r);
    body += '\n';
  }
  auto res = client.Post(path, body, "application/x-ndjson");
  if (!res) throw ScorerError("NLI endpoint unreachable: " + url_);
  if (res->status != 200) {
    throw ScorerError("NLI endpoint returned HTTP " + std::to_string(res->status));
  }
  std::size_t answered = 0;
  std::string_view rest_body = res->body;
  while (!rest_body.empty()) {
    const auto nl = rest_body.find('\n');
    record_response(rest_body.substr(0, nl), index, out, answered);
    if (nl == std::string_view::npos) break;
    rest_body.remove_prefix(nl + 1);
  }
  return out;
}

std::unique_ptr<NliScorer> make_scorer(std::string_view spec) {
  if (spec == "lexical") return std::make_unique<LexicalNliScorer>();
  if (spec.rfind("cmd:", 0) == 0) return std::make_unique<ProcessNliScorer>(std::string(spec.substr(4)));
  if (spec.rfind("http://", 0) == 0) return std::make_unique<HttpNliScorer>(std::string(spec));
  throw ScorerError("unknown NLI scorer spec '" + std::string(spec) +
                    "' (expected lexical, cmd:<command> or http://...)");
}

NliVerdict nli_score(std::string_view premise, std::string_view hypothesis, NliScorer& scorer) {
  const NliRequest req{"0", std::string(premise), std::string(hypothesis)};
  auto res = scorer.score_batch(std::span<const NliRequest>(&req, 1));
  if (res.size() != 1 || !res[0]) throw ScorerError("scorer " + scorer.name() + " returned no verdict");
  return *res[0];
}

}  // namespace chemalign::eval
