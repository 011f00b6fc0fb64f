#include "omnimatte/hash.hpp"

#include <algorithm>
#include <cstdio>
#include <vector>

#include "omnimatte/image_io.hpp"

namespace omni {

void Fnv1a::update(const void* data, std::size_t size) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        state_ ^= p[i];
        state_ *= 0x100000001b3ULL;
    }
}

void Fnv1a::update(std::span<const std::uint8_t> bytes) { update(bytes.data(), bytes.size()); }

void Fnv1a::update(std::string_view text) { update(text.data(), text.size()); }

std::string Fnv1a::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string hash_directory(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    if (fs::exists(root)) {
        for (const auto& entry : fs::recursive_directory_iterator(root))
            if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    Fnv1a h;
    for (const auto& f : files) {
        h.update(fs::relative(f, root).generic_string());
        h.update(io::read_bytes(f));
    }
    return h.hex();
}

std::string hash_file(const std::filesystem::path& path) {
    Fnv1a h;
    h.update(io::read_bytes(path));
    return h.hex();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace omni
