// Test endpoint speaking the line-delimited JSON protocol on stdin/stdout or
// on a TCP port.
//   zero       scorer returning logprob_nats 0
//   replay     scorer replaying exact log-probabilities of --source
//   malformed  answers every request with a non-JSON line
//   hang       reads requests and never answers
//   crash      exits as soon as the first request arrives
//   teacher    trace for "count <n> from <label> mod <V>" queries of --source

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "dlm/dataforge.hpp"
#include "dlm/error.hpp"
#include "dlm/harness.hpp"
#include "dlm/source.hpp"

namespace {

struct Server {
  std::string mode;
  std::shared_ptr<const dlm::MarkovSource> source;
  std::unique_ptr<dlm::SyntheticTeacher> teacher;

  /// Reply line for one request line; empty when nothing should be sent.
  std::string handle(const std::string& line) {
    if (mode == "malformed") return "this is not json";
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      return R"({"error":"bad request"})";
    }
    nlohmann::json reply = {{"id", req.value("id", nlohmann::json(nullptr))}};
    if (mode == "zero") {
      reply["logprob_nats"] = 0.0;
    } else if (mode == "replay") {
      const auto ctx = req.at("context_tokens").get<std::vector<dlm::Token>>();
      const auto cont = req.at("continuation_tokens").get<std::vector<dlm::Token>>();
      const auto gap = req.value("gap", std::size_t{0});
      double lp;
      try {
        lp = dlm::ar_logprob_gap(*source, ctx, gap, cont);
      } catch (const dlm::DomainError&) {
        reply["logprob_nats"] = "nan";
        return reply.dump();
      }
      if (lp == dlm::kNegInf) {
        reply["logprob_nats"] = "-inf";
      } else {
        reply["logprob_nats"] = lp;
      }
    } else if (mode == "teacher") {
      std::istringstream words(req.at("query").get<std::string>());
      std::string count, from, label, mod;
      std::size_t steps = 0;
      words >> count >> steps >> from >> label >> mod;
      dlm::Query q;
      q.text = req.at("query").get<std::string>();
      q.steps = steps;
      const auto t = teacher->config().vocab->find(label);
      if (t) q.context = {*t};
      reply["trace"] = teacher->trace(q, req.value("temperature", 1.0), req.value("seed", std::uint64_t{0}));
    }
    return reply.dump();
  }
};

void serve_stream(Server& server, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (server.mode == "crash") std::_Exit(1);
    if (server.mode == "hang") continue;
    const std::string reply = server.handle(line);
    out << reply << "\n" << std::flush;
  }
  if (server.mode == "hang") std::this_thread::sleep_for(std::chrono::hours(1));
}

int serve_tcp(Server& server, int port, bool once) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  int yes = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 4) != 0) {
    std::perror("stub_endpoint");
    return 1;
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  std::cout << "listening " << ntohs(addr.sin_port) << std::endl;
  for (;;) {
    const int conn = ::accept(fd, nullptr, nullptr);
    if (conn < 0) continue;
    std::string buffer;
    char chunk[4096];
    for (;;) {
      const ssize_t n = ::read(conn, chunk, sizeof chunk);
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t nl;
      while ((nl = buffer.find('\n')) != std::string::npos) {
        const std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        if (server.mode == "crash") std::_Exit(1);
        if (server.mode == "hang") continue;
        const std::string reply = server.handle(line) + "\n";
        if (::send(conn, reply.data(), reply.size(), MSG_NOSIGNAL) < 0) break;
      }
    }
    ::close(conn);
    if (once) break;
  }
  ::close(fd);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Line-delimited JSON test endpoint"};
  Server server;
  std::string source_arg;
  int port = -1;
  bool once = false;
  app.add_option("--mode", server.mode, "zero | replay | malformed | hang | crash | teacher")
      ->required()
      ->check(CLI::IsMember({"zero", "replay", "malformed", "hang", "crash", "teacher"}));
  app.add_option("--source", source_arg, "Source preset file or inline JSON (replay, teacher)");
  app.add_option("--listen", port, "Serve on a loopback TCP port instead of stdin/stdout (0 picks one)");
  app.add_flag("--once", once, "Exit after the first TCP connection closes");
  CLI11_PARSE(app, argc, argv);

  try {
    if (server.mode == "replay" || server.mode == "teacher") {
      if (source_arg.empty()) throw dlm::ConfigError("source", "--source is required for this mode");
      const nlohmann::json j =
          source_arg.front() == '{' ? nlohmann::json::parse(source_arg) : dlm::read_json_file(source_arg);
      server.source = std::make_shared<const dlm::MarkovSource>(dlm::source_from_json(j));
      if (server.mode == "teacher") {
        dlm::SyntheticTeacherConfig cfg;
        cfg.source = server.source;
        server.teacher = std::make_unique<dlm::SyntheticTeacher>(cfg);
      }
    }
    if (port >= 0) return serve_tcp(server, port, once);
    serve_stream(server, std::cin, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "stub_endpoint: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
