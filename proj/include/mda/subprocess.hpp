#pragma once

#include <cerrno>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "mda/errors.hpp"

namespace mda::proc {

inline void ignore_sigpipe_once() {
  static const bool done = [] {
    std::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)done;
}

inline std::string shell_quote(std::string_view s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  out += '\'';
  return out;
}

struct CommandResult {
  int exit_code = 0;
  std::string output;  // stdout and stderr interleaved
};

/// Runs `command` under /bin/sh and captures combined output.
inline CommandResult run_command(const std::string& command) {
  ignore_sigpipe_once();
  std::string wrapped = command + " 2>&1";
  FILE* pipe = ::popen(wrapped.c_str(), "r");
  if (!pipe)
    throw Error(errc::io_error, std::string("popen failed: ") + std::strerror(errno), command);
  CommandResult result;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) result.output.append(buf, n);
  int status = ::pclose(pipe);
  if (status == -1) throw Error(errc::io_error, "pclose failed", command);
  if (WIFEXITED(status))
    result.exit_code = WEXITSTATUS(status);
  else if (WIFSIGNALED(status))
    result.exit_code = 128 + WTERMSIG(status);
  else
    result.exit_code = -1;
  return result;
}

/// Child process with piped stdin/stdout, line-oriented. stderr passes
/// through to ours.
class DuplexChild {
 public:
  explicit DuplexChild(const std::string& command) {
    ignore_sigpipe_once();
    int to_child[2] = {-1, -1};
    int from_child[2] = {-1, -1};
    if (::pipe(to_child) != 0)
      throw Error(errc::io_error, std::string("pipe failed: ") + std::strerror(errno));
    if (::pipe(from_child) != 0) {
      int saved = errno;
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw Error(errc::io_error, std::string("pipe failed: ") + std::strerror(saved));
    }
    pid_ = ::fork();
    if (pid_ < 0) {
      int saved = errno;
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      throw Error(errc::io_error, std::string("fork failed: ") + std::strerror(saved));
    }
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) ::close(fd);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    stdin_fd_ = to_child[1];
    stdout_fd_ = from_child[0];
  }

  DuplexChild(const DuplexChild&) = delete;
  DuplexChild& operator=(const DuplexChild&) = delete;

  ~DuplexChild() {
    close_stdin();
    if (stdout_fd_ >= 0) ::close(stdout_fd_);
    if (pid_ > 0 && !waited_) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

  void write_line(std::string_view line) {
    std::string msg(line);
    msg += '\n';
    std::size_t off = 0;
    while (off < msg.size()) {
      ssize_t n = ::write(stdin_fd_, msg.data() + off, msg.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(errc::connection_lost,
                    std::string("write to child failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  /// One line without the trailing newline; nullopt at end of stream.
  std::optional<std::string> read_line() {
    for (;;) {
      std::size_t pos = pending_.find('\n');
      if (pos != std::string::npos) {
        std::string line = pending_.substr(0, pos);
        pending_.erase(0, pos + 1);
        return line;
      }
      char buf[4096];
      ssize_t n = ::read(stdout_fd_, buf, sizeof buf);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error(errc::connection_lost,
                    std::string("read from child failed: ") + std::strerror(errno));
      }
      if (n == 0) {
        if (pending_.empty()) return std::nullopt;
        std::string line = std::move(pending_);
        pending_.clear();
        return line;
      }
      pending_.append(buf, static_cast<std::size_t>(n));
    }
  }

  void close_stdin() {
    if (stdin_fd_ >= 0) {
      ::close(stdin_fd_);
      stdin_fd_ = -1;
    }
  }

  int wait() {
    if (waited_) return exit_code_;
    int status = 0;
    if (::waitpid(pid_, &status, 0) < 0)
      throw Error(errc::io_error, std::string("waitpid failed: ") + std::strerror(errno));
    waited_ = true;
    if (WIFEXITED(status))
      exit_code_ = WEXITSTATUS(status);
    else if (WIFSIGNALED(status))
      exit_code_ = 128 + WTERMSIG(status);
    else
      exit_code_ = -1;
    return exit_code_;
  }

 private:
  pid_t pid_ = -1;
  int stdin_fd_ = -1;
  int stdout_fd_ = -1;
  bool waited_ = false;
  int exit_code_ = 0;
  std::string pending_;
};

}  // namespace mda::proc
