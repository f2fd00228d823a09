#ifndef GRAFT_TESTS_UTIL_HPP
#define GRAFT_TESTS_UTIL_HPP

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>

namespace testutil {

// Fresh scratch directory under the build tree, wiped on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        path = std::filesystem::current_path() / ("scratch_" + tag);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw std::runtime_error("test: cannot write " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("test: cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void flip_byte(const std::string& path, std::size_t offset) {
    std::string data = read_file(path);
    data[offset] = static_cast<char>(data[offset] ^ 0x5A);
    write_file(path, data);
}

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

inline RunResult run_command(const std::string& cmd) {
    RunResult r;
    FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
    if (!pipe) throw std::runtime_error("test: popen failed");
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.output.append(buf, n);
    const int status = pclose(pipe);
    r.exit_code = status >= 0 && WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

// Message of the exception thrown by fn, or "" if nothing was thrown.
template <typename Fn>
std::string thrown_message(Fn&& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return {};
}

template <typename Fn>
bool throws_with(Fn&& fn, const std::string& substr) {
    const std::string msg = thrown_message(fn);
    return !msg.empty() && msg.find(substr) != std::string::npos;
}

}  // namespace testutil

#endif
