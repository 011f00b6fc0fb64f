#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace omni {

// 64-bit FNV-1a, used for checkpoint and dataset fingerprints.
class Fnv1a {
public:
    void update(std::span<const std::uint8_t> bytes);
    void update(std::string_view text);
    void update(const void* data, std::size_t size);
    std::uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t value);

// Hash of every regular file under root (relative path + bytes), in sorted path order.
std::string hash_directory(const std::filesystem::path& root);
std::string hash_file(const std::filesystem::path& path);

// splitmix64 finalizer; derives independent seeds from (seed, stream) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

} // namespace omni
