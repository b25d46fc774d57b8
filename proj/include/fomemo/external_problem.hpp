#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "fomemo/benchmarks.hpp"
#include "fomemo/errors.hpp"

namespace fomemo {

// Bridges an external objective function spoken over pipes: one JSON object
// per line, {"x":[...]} on the child's stdin, {"y":[...]} on its stdout.
// The child is spawned once (via /bin/sh -c) and persists across
// evaluations.
class ExternalEvaluator {
 public:
  ExternalEvaluator(std::string command, int d, int m,
                    double timeout_sec = 60.0)
      : command_(std::move(command)), d_(d), m_(m), timeout_sec_(timeout_sec) {
    if (d_ < 1 || m_ < 1)
      throw ProblemError("external problem: d and m must be >= 1");
    // A dying child must surface as ChildExitError on the next write, not as
    // a process-killing SIGPIPE.
    ::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw ProblemError("external: pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw ProblemError("external: pipe failed");
    }
    pid_ = ::fork();
    if (pid_ < 0) throw ProblemError("external: fork failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(),
              static_cast<char*>(nullptr));
      _exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
  }

  ExternalEvaluator(const ExternalEvaluator&) = delete;
  ExternalEvaluator& operator=(const ExternalEvaluator&) = delete;

  ~ExternalEvaluator() {
    if (in_fd_ >= 0) ::close(in_fd_);
    if (out_fd_ >= 0) ::close(out_fd_);
    if (pid_ > 0) {
      // Closing stdin asks the child to exit; escalate if it lingers.
      int status = 0;
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
        ::usleep(20000);
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
    }
  }

  Eigen::VectorXd evaluate(const Eigen::VectorXd& x) {
    if (x.size() != d_)
      throw DimensionError("external problem: expected d=" +
                           std::to_string(d_) + " inputs");
    nlohmann::json req;
    req["x"] = std::vector<double>(x.data(), x.data() + x.size());
    write_line(req.dump() + "\n");
    const std::string line = read_line();
    nlohmann::json rep;
    try {
      rep = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ProtocolError(std::string("external problem: malformed reply: ") +
                          e.what());
    }
    if (!rep.is_object() || !rep.contains("y") || !rep["y"].is_array())
      throw ProtocolError("external problem: reply missing \"y\" array");
    const auto& y = rep["y"];
    if (static_cast<int>(y.size()) != m_)
      throw ProtocolError("external problem: expected m=" +
                          std::to_string(m_) + " objectives, got " +
                          std::to_string(y.size()));
    Eigen::VectorXd out(m_);
    for (int j = 0; j < m_; ++j) {
      if (!y[static_cast<size_t>(j)].is_number())
        throw ProtocolError("external problem: non-numeric objective");
      out(j) = y[static_cast<size_t>(j)].get<double>();
    }
    return out;
  }

 private:
  void fail_child_exit() {
    int status = 0;
    std::string detail = "child vanished";
    if (::waitpid(pid_, &status, WNOHANG) == pid_) {
      pid_ = -1;
      if (WIFEXITED(status))
        detail = "child exited with code " + std::to_string(WEXITSTATUS(status));
      else if (WIFSIGNALED(status))
        detail = "child killed by signal " + std::to_string(WTERMSIG(status));
    }
    throw ChildExitError("external problem: " + detail);
  }

  void write_line(const std::string& data) {
    size_t off = 0;
    while (off < data.size()) {
      const ssize_t w = ::write(in_fd_, data.data() + off, data.size() - off);
      if (w < 0) {
        if (errno == EINTR) continue;
        if (errno == EPIPE) fail_child_exit();
        throw ProtocolError(std::string("external problem: write failed: ") +
                            std::strerror(errno));
      }
      off += static_cast<size_t>(w);
    }
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration<double>(timeout_sec_);
    for (;;) {
      const size_t nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto remaining = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (remaining.count() <= 0)
        throw TimeoutError("external problem: no reply within " +
                           std::to_string(timeout_sec_) + " s");
      struct pollfd pfd {out_fd_, POLLIN, 0};
      const int pr = ::poll(&pfd, 1, static_cast<int>(remaining.count()) + 1);
      if (pr < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("external problem: poll failed: ") +
                            std::strerror(errno));
      }
      if (pr == 0)
        throw TimeoutError("external problem: no reply within " +
                           std::to_string(timeout_sec_) + " s");
      char chunk[4096];
      const ssize_t r = ::read(out_fd_, chunk, sizeof(chunk));
      if (r < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("external problem: read failed: ") +
                            std::strerror(errno));
      }
      if (r == 0) fail_child_exit();
      buffer_.append(chunk, static_cast<size_t>(r));
    }
  }

  std::string command_;
  int d_, m_;
  double timeout_sec_;
  pid_t pid_ = -1;
  int in_fd_ = -1, out_fd_ = -1;
  std::string buffer_;
};

// Wraps a persistent child process as a BenchmarkProblem. Bounds default to
// the unit cube when not given.
inline BenchmarkProblem external_problem(const std::string& command, int d,
                                         int m,
                                         Eigen::MatrixX2d bounds = {},
                                         double timeout_sec = 60.0) {
  BenchmarkProblem p;
  p.name = "external:" + command;
  p.d = d;
  p.m = m;
  if (bounds.rows() == 0) {
    p.bounds = Eigen::MatrixX2d(d, 2);
    p.bounds.col(0).setZero();
    p.bounds.col(1).setOnes();
  } else {
    if (bounds.rows() != d)
      throw ProblemError("external problem: bounds rows must equal d");
    p.bounds = std::move(bounds);
  }
  auto child = std::make_shared<ExternalEvaluator>(command, d, m, timeout_sec);
  p.evaluator = [child](const Eigen::VectorXd& x) {
    return child->evaluate(x);
  };
  return p;
}

}  // namespace fomemo
