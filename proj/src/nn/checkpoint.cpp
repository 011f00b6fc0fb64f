#include "omnimatte/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "omnimatte/error.hpp"
#include "omnimatte/hash.hpp"

namespace omni::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using ojson = nlohmann::ordered_json;

void Checkpoint::put(const std::string& name, const Mat<float>& m) {
    if (name.rfind("__", 0) == 0) throw ValidationError("checkpoint tensor names must not start with '__'");
    Entry e{m.rows(), m.cols(), std::vector<float>(m.data(), m.data() + m.size())};
    if (!index_.count(name)) order_.push_back(name);
    index_[name] = std::move(e);
}

Mat<float> Checkpoint::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("checkpoint is missing tensor '" + name + "'");
    Mat<float> m(it->second.rows, it->second.cols);
    std::memcpy(m.data(), it->second.data.data(), it->second.data.size() * sizeof(float));
    return m;
}

void Checkpoint::get_into(const std::string& name, Mat<float>& dst) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("checkpoint is missing tensor '" + name + "'");
    if (it->second.rows != dst.rows() || it->second.cols != dst.cols())
        throw LoadError("checkpoint tensor '" + name + "' has shape [" + std::to_string(it->second.rows) + ", " +
                        std::to_string(it->second.cols) + "], expected [" + std::to_string(dst.rows()) + ", " +
                        std::to_string(dst.cols()) + "]");
    std::memcpy(dst.data(), it->second.data.data(), it->second.data.size() * sizeof(float));
}

void Checkpoint::save(const std::filesystem::path& path) const {
    ojson header = ojson::object();
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
        const Entry& e = index_.at(name);
        header[name] = {{"shape", {e.rows, e.cols}}, {"dtype", "f32"}, {"offset", offset}};
        offset += e.data.size() * sizeof(float);
    }
    header["__layout_version__"] = kLayoutVersion;
    header["__metadata__"] = metadata_;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), std::streamsize(text.size()));
        for (const auto& name : order_) {
            const Entry& e = index_.at(name);
            out.write(reinterpret_cast<const char*>(e.data.data()), std::streamsize(e.data.size() * sizeof(float)));
        }
        if (!out) throw Error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrerequisiteError("checkpoint not found: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1u << 30)) throw LoadError(path.string() + ": truncated or corrupt header");
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    if (!in) throw LoadError(path.string() + ": truncated header");
    ojson header;
    try {
        header = ojson::parse(text);
    } catch (const std::exception& e) {
        throw LoadError(path.string() + ": header is not valid JSON");
    }
    if (!header.contains("__layout_version__")) throw LoadError(path.string() + ": missing field __layout_version__");
    if (header["__layout_version__"] != kLayoutVersion)
        throw LoadError(path.string() + ": unsupported layout version " + header["__layout_version__"].dump());
    const std::streamoff data_start = std::streamoff(sizeof(len) + len);

    Checkpoint ck;
    if (header.contains("__metadata__")) ck.metadata_ = header["__metadata__"];
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key().rfind("__", 0) == 0) continue;
        const auto& v = it.value();
        for (const char* field : {"shape", "dtype", "offset"})
            if (!v.contains(field)) throw LoadError(path.string() + ": tensor '" + it.key() + "' is missing field " + field);
        if (v["dtype"] != "f32") throw LoadError(path.string() + ": tensor '" + it.key() + "' has unsupported dtype");
        Entry e;
        e.rows = v["shape"][0].get<Eigen::Index>();
        e.cols = v["shape"][1].get<Eigen::Index>();
        e.data.resize(std::size_t(e.rows * e.cols));
        in.seekg(data_start + v["offset"].get<std::streamoff>());
        in.read(reinterpret_cast<char*>(e.data.data()), std::streamsize(e.data.size() * sizeof(float)));
        if (!in) throw LoadError(path.string() + ": tensor '" + it.key() + "' is truncated");
        ck.order_.push_back(it.key());
        ck.index_[it.key()] = std::move(e);
    }
    return ck;
}

void put_backbone(Checkpoint& ckpt, const BackboneParams<float>& params) {
    params.visit([&](const std::string& name, const Mat<float>& m) { ckpt.put(name, m); });
    ckpt.metadata()["model"] = params.config.to_json();
}

BackboneParams<float> get_backbone(const Checkpoint& ckpt) {
    if (!ckpt.metadata().contains("model")) throw LoadError("checkpoint metadata is missing field 'model'");
    const ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(ckpt.metadata()["model"].dump()));
    BackboneParams<float> p = init_backbone(cfg, 0, true);
    p.visit([&](const std::string& name, Mat<float>& m) { ckpt.get_into(name, m); });
    return p;
}

std::string base_checksum(const BackboneParams<float>& params) {
    Fnv1a h;
    params.visit([&](const std::string& name, const Mat<float>& m) {
        h.update(name);
        const std::int64_t shape[2] = {m.rows(), m.cols()};
        h.update(shape, sizeof(shape));
        h.update(m.data(), std::size_t(m.size()) * sizeof(float));
    });
    return h.hex();
}

} // namespace omni::nn
