#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dosfl/distill.hpp"
#include "dosfl/federation.hpp"
#include "dosfl/sha256.hpp"

namespace dosfl {

namespace detail {

inline std::string base64_encode(const unsigned char* data, size_t len) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (size_t i = 0; i < len; i += 3) {
        uint32_t chunk = uint32_t(data[i]) << 16;
        if (i + 1 < len) chunk |= uint32_t(data[i + 1]) << 8;
        if (i + 2 < len) chunk |= uint32_t(data[i + 2]);
        out.push_back(tbl[(chunk >> 18) & 0x3f]);
        out.push_back(tbl[(chunk >> 12) & 0x3f]);
        out.push_back(i + 1 < len ? tbl[(chunk >> 6) & 0x3f] : '=');
        out.push_back(i + 2 < len ? tbl[chunk & 0x3f] : '=');
    }
    return out;
}

template <typename T>
std::string tensor_b64(const Tensor<T>& t) {
    return base64_encode(reinterpret_cast<const unsigned char*>(t.data().data()),
                         t.data().size() * sizeof(T));
}

} // namespace detail

// Shortest-round-trip decimal rendering, identical across reruns.
inline std::string fmt_double(double v) { return nlohmann::json(v).dump(); }

// Human-readable export of a distilled dataset with base64 tensor payloads.
template <typename T>
nlohmann::ordered_json distilled_to_json(const DistilledDataset<T>& ds) {
    nlohmann::ordered_json j;
    j["arch_id"] = ds.arch_id;
    j["input_shape"] = ds.input_shape;
    j["n_cls"] = ds.n_cls;
    j["distill_batch"] = ds.distill_batch;
    j["soft_labels"] = ds.soft_labels;
    j["seed"] = ds.seed;
    j["client_id"] = ds.client_id;
    j["precision_bits"] = sizeof(T) * 8;
    j["steps"] = nlohmann::ordered_json::array();
    for (const auto& step : ds.steps) {
        j["steps"].push_back({{"eta", static_cast<double>(step.eta.item())},
                              {"x_b64", detail::tensor_b64(step.x)},
                              {"y_b64", detail::tensor_b64(step.y)}});
    }
    return j;
}

// Collects result files under one directory and finalizes a manifest of
// SHA-256 hashes. Identical configs reproduce identical manifests; the
// timing sidecar is written outside the manifest because wall time is not
// reproducible.
class BundleWriter {
public:
    explicit BundleWriter(std::string dir) : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
    }

    const std::string& dir() const { return dir_; }

    std::string path_of(const std::string& name) const { return dir_ + "/" + name; }

    void add_text(const std::string& name, const std::string& content) {
        std::ofstream f(path_of(name), std::ios::binary | std::ios::trunc);
        if (!f) throw IngestionError("cannot write " + path_of(name));
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        f.close();
        hashes_[name] = sha256_hex(content);
    }

    void add_json(const std::string& name, const nlohmann::ordered_json& j) {
        add_text(name, j.dump(2) + "\n");
    }

    // Registers a file some other writer produced inside the bundle dir.
    void track_file(const std::string& name) {
        hashes_[name] = sha256_file_hex(path_of(name));
    }

    void add_timings(double wall_seconds) {
        nlohmann::ordered_json j;
        j["wall_seconds"] = wall_seconds;
        std::ofstream f(path_of("timings.json"), std::ios::trunc);
        f << j.dump(2) << "\n";
    }

    // Writes manifest.json covering every tracked file, keyed by name.
    void finalize() {
        nlohmann::ordered_json j;
        j["algorithm"] = "sha256";
        nlohmann::ordered_json files;
        for (const auto& [name, hash] : hashes_) files[name] = hash;
        j["files"] = files;
        std::ofstream f(path_of("manifest.json"), std::ios::binary | std::ios::trunc);
        f << j.dump(2) << "\n";
    }

    const std::map<std::string, std::string>& hashes() const { return hashes_; }

private:
    std::string dir_;
    std::map<std::string, std::string> hashes_; // sorted by name
};

// column schema: step,accuracy,scalars_uploaded
inline std::string trace_csv(const std::vector<TracePoint>& trace) {
    std::string out = "step,accuracy,scalars_uploaded\n";
    for (const auto& p : trace)
        out += std::to_string(p.step) + "," + fmt_double(p.accuracy) + "," +
               std::to_string(p.scalars_uploaded) + "\n";
    return out;
}

inline nlohmann::ordered_json report_to_json(const RunReport& rep) {
    nlohmann::ordered_json j;
    j["final_accuracy"] = rep.final_accuracy;
    j["scalars_uploaded"] = rep.scalars_uploaded;
    j["scalars_downloaded"] = rep.scalars_downloaded;
    j["trace_points"] = rep.trace.size();
    return j;
}

} // namespace dosfl
