#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "omnimatte/nn/model.hpp"

namespace omni::nn {

inline constexpr int kLayoutVersion = 1;

// Binary container: u64 little-endian header length, a JSON header
// {name: {shape, dtype, offset}, "__layout_version__", "__metadata__"}, then raw
// little-endian float32 arrays in header order.
class Checkpoint {
public:
    void put(const std::string& name, const Mat<float>& m);
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Mat<float> get(const std::string& name) const;
    // Reads name into dst, checking the stored shape against dst's shape.
    void get_into(const std::string& name, Mat<float>& dst) const;
    const std::vector<std::string>& names() const { return order_; }

    nlohmann::ordered_json& metadata() { return metadata_; }
    const nlohmann::ordered_json& metadata() const { return metadata_; }

    // Writes atomically through a temporary file in the same directory.
    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

private:
    struct Entry {
        Eigen::Index rows = 0;
        Eigen::Index cols = 0;
        std::vector<float> data;
    };
    std::vector<std::string> order_;
    std::map<std::string, Entry> index_;
    nlohmann::ordered_json metadata_ = nlohmann::ordered_json::object();
};

// Base tensors go under "base/..." and the model config under metadata["model"].
void put_backbone(Checkpoint& ckpt, const BackboneParams<float>& params);
BackboneParams<float> get_backbone(const Checkpoint& ckpt);

// FNV-1a over tensor names, shapes and float bytes in visit order.
std::string base_checksum(const BackboneParams<float>& params);

} // namespace omni::nn
