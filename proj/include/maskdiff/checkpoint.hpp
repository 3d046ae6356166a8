#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Self-describing binary archive: fixed magic, a JSON header carrying
// arbitrary metadata plus the tensor manifest, then raw float32 blobs.
struct NamedTensor {
    std::string name;
    TensorF value;
};

struct TensorArchive {
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;

    const TensorF& find(const std::string& name) const;
    bool contains(const std::string& name) const;
};

void write_archive(const std::string& path, const nlohmann::json& meta,
                   const std::vector<NamedTensor>& tensors);

// Throws with the offending field on bad magic, version, or manifest.
TensorArchive read_archive(const std::string& path);

}  // namespace maskdiff
