#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "omnimatte/image_io.hpp"

namespace test {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("omnimatte_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline std::vector<fs::path> tree(const fs::path& root) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
    std::sort(out.begin(), out.end());
    return out;
}

// Same relative file names with byte-identical contents.
inline bool same_tree(const fs::path& a, const fs::path& b) {
    const auto ta = tree(a), tb = tree(b);
    if (ta != tb) return false;
    for (const auto& rel : ta)
        if (omni::io::read_bytes(a / rel) != omni::io::read_bytes(b / rel)) return false;
    return true;
}

} // namespace test
