#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "captrack/tensor.hpp"

// Weight files: a JSON manifest (layer names, shapes, dtype, byte offsets)
// next to a flat little-endian binary blob. Loading validates every shape.

namespace captrack {

struct WeightFile {
    std::map<std::string, Tensor> tensors;
    nlohmann::json meta;
};

inline void save_weights(const std::string& manifest_path, const std::string& blob_path,
                         const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                         const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json man;
    man["format"] = "captrack-weights";
    man["version"] = 1;
    man["dtype"] = "f64";
    man["blob"] = std::filesystem::path(blob_path).filename().string();
    man["meta"] = meta;
    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    if (!blob) fail("cannot write weight blob: " + blob_path);
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t->shape;
        e["offset"] = offset;
        e["count"] = t->numel();
        man["tensors"].push_back(e);
        blob.write(reinterpret_cast<const char*>(t->data.data()),
                   static_cast<std::streamsize>(t->data.size() * sizeof(double)));
        offset += t->numel() * sizeof(double);
    }
    if (!blob) fail("weight blob write failed: " + blob_path);
    std::ofstream man_out(manifest_path, std::ios::trunc);
    if (!man_out) fail("cannot write weight manifest: " + manifest_path);
    man_out << man.dump(1) << "\n";
}

inline WeightFile load_weights(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) fail("cannot open weight manifest: " + manifest_path);
    nlohmann::json man;
    in >> man;
    require(man.value("format", "") == "captrack-weights",
            "weight manifest: unrecognized format field in " + manifest_path);
    require(man.value("dtype", "") == "f64", "weight manifest: expected dtype f64");
    std::string blob_path =
        (std::filesystem::path(manifest_path).parent_path() / man["blob"].get<std::string>())
            .string();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) fail("cannot open weight blob: " + blob_path);
    std::string bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    WeightFile wf;
    wf.meta = man.value("meta", nlohmann::json::object());
    for (const auto& e : man["tensors"]) {
        std::string name = e["name"];
        std::vector<int> shape = e["shape"].get<std::vector<int>>();
        uint64_t offset = e["offset"];
        size_t count = e["count"];
        Tensor t(shape);
        require(t.numel() == count, "weight manifest: count/shape mismatch for " + name);
        require(offset + count * sizeof(double) <= bytes.size(),
                "weight blob truncated at tensor " + name);
        std::memcpy(t.data.data(), bytes.data() + offset, count * sizeof(double));
        wf.tensors.emplace(std::move(name), std::move(t));
    }
    return wf;
}

}  // namespace captrack
