#include "maskdiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maskdiff {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'M', 'D', 'A', 'R', 'C', 'H', '0', '1'};
constexpr int kVersion = 1;
}  // namespace

const TensorF& TensorArchive::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t.value;
    throw std::runtime_error("archive: missing tensor '" + name + "'");
}

bool TensorArchive::contains(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

void write_archive(const std::string& path, const json& meta, const std::vector<NamedTensor>& tensors) {
    json header = meta;
    header["archive_version"] = kVersion;
    json manifest = json::array();
    uint64_t offset = 0;
    for (const auto& t : tensors) {
        json entry;
        entry["name"] = t.name;
        entry["shape"] = t.value.shape();
        entry["offset"] = offset;
        entry["count"] = t.value.numel();
        manifest.push_back(entry);
        offset += static_cast<uint64_t>(t.value.numel()) * sizeof(float);
    }
    header["tensors"] = manifest;
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("archive: cannot create " + path);
    out.write(kMagic, sizeof(kMagic));
    const uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& t : tensors)
        out.write(reinterpret_cast<const char*>(t.value.data()),
                  static_cast<std::streamsize>(t.value.numel() * static_cast<int64_t>(sizeof(float))));
    if (!out) throw std::runtime_error("archive: write failed for " + path);
}

TensorArchive read_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("archive: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("archive: bad format tag in " + path);
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in) throw std::runtime_error("archive: truncated header length in " + path);
    std::string header_text(len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(len));
    if (!in) throw std::runtime_error("archive: truncated header in " + path);

    TensorArchive arch;
    try {
        arch.meta = json::parse(header_text);
    } catch (const json::exception& e) {
        throw std::runtime_error("archive: corrupt header JSON in " + path + ": " + e.what());
    }
    if (!arch.meta.contains("archive_version"))
        throw std::runtime_error("archive: missing field 'archive_version' in " + path);
    if (arch.meta["archive_version"].get<int>() != kVersion)
        throw std::runtime_error("archive: unsupported archive_version in " + path);
    if (!arch.meta.contains("tensors"))
        throw std::runtime_error("archive: missing field 'tensors' in " + path);

    for (const auto& entry : arch.meta["tensors"]) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        const int64_t count = entry.at("count").get<int64_t>();
        t.value = TensorF(shape);
        if (t.value.numel() != count)
            throw std::runtime_error("archive: manifest count mismatch for tensor '" + t.name + "'");
        in.read(reinterpret_cast<char*>(t.value.data()),
                static_cast<std::streamsize>(count * static_cast<int64_t>(sizeof(float))));
        if (!in) throw std::runtime_error("archive: truncated data for tensor '" + t.name + "'");
        arch.tensors.push_back(std::move(t));
    }
    return arch;
}

}  // namespace maskdiff
