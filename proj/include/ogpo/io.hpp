#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ogpo/config.hpp"
#include "ogpo/envs.hpp"
#include "ogpo/replay.hpp"
#include "ogpo/tensor.hpp"

namespace ogpo {

// --- metrics -----------------------------------------------------------------

// One JSON object per line, flushed per record so a crashed run keeps its
// history. Values are emitted with round-trip double formatting, which makes
// reruns byte-identical.
class MetricsSink {
public:
    MetricsSink() = default;

    explicit MetricsSink(const std::string& path) : out_(path, std::ios::trunc) {
        if (!out_) throw std::runtime_error("cannot open metrics file: " + path);
    }

    void write(long step, const std::string& phase,
               const std::vector<std::pair<std::string, double>>& values) {
        nlohmann::json j;
        j["step"] = step;
        j["phase"] = phase;
        for (const auto& [k, v] : values) j[k] = v;
        records_.push_back(j);
        if (out_.is_open()) {
            out_ << j.dump() << "\n";
            out_.flush();
        }
    }

    const std::vector<nlohmann::json>& records() const { return records_; }

private:
    std::ofstream out_;
    std::vector<nlohmann::json> records_;
};

inline std::vector<nlohmann::json> read_metrics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open metrics file: " + path);
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

// metrics.jsonl -> CSV of the eval records.
inline void export_learning_curve(const std::string& metrics_path, std::ostream& csv) {
    auto records = read_metrics(metrics_path);
    csv << "step,success_rate,mean_succ_len,mean_return\n";
    for (const auto& r : records) {
        if (r.value("phase", "") != "eval") continue;
        csv << r.at("step").get<long>() << ",";
        csv << r.at("success_rate").get<double>() << ",";
        if (r.contains("mean_succ_len")) {
            csv << r.at("mean_succ_len").get<double>();
        }
        csv << "," << r.at("mean_return").get<double>() << "\n";
    }
}

// --- checkpoints -------------------------------------------------------------

// Layout: u64-LE manifest length, manifest JSON, then a raw little-endian
// float64 blob the manifest offsets tile exactly.
struct CheckpointArray {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

struct Checkpoint {
    int version = 1;
    std::string algo;
    std::string config_hash;
    std::vector<CheckpointArray> arrays;

    const CheckpointArray* find(const std::string& name) const {
        for (const auto& a : arrays) {
            if (a.name == name) return &a;
        }
        return nullptr;
    }

    const CheckpointArray& require(const std::string& name) const {
        const auto* a = find(name);
        if (a == nullptr) throw std::runtime_error("checkpoint: missing array '" + name + "'");
        return *a;
    }

    void add(const std::string& name, const Tensor& t) {
        arrays.push_back({name, t.shape(), t.raw()});
    }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["version"] = ckpt.version;
    manifest["algo"] = ckpt.algo;
    manifest["config_hash"] = ckpt.config_hash;
    nlohmann::json arrays = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& a : ckpt.arrays) {
        nlohmann::json e;
        e["name"] = a.name;
        e["shape"] = a.shape;
        e["offset"] = offset;
        e["length"] = a.data.size();
        arrays.push_back(e);
        offset += a.data.size() * sizeof(double);
    }
    manifest["arrays"] = arrays;
    const std::string mstr = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    std::uint64_t mlen = mstr.size();
    unsigned char hdr[8];
    for (int i = 0; i < 8; ++i) hdr[i] = static_cast<unsigned char>((mlen >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(hdr), 8);
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& a : ckpt.arrays) {
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    unsigned char hdr[8];
    in.read(reinterpret_cast<char*>(hdr), 8);
    if (!in) throw std::runtime_error("checkpoint: truncated header");
    std::uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(hdr[i]) << (8 * i);
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw std::runtime_error("checkpoint: truncated manifest");
    nlohmann::json manifest = nlohmann::json::parse(mstr);

    Checkpoint ckpt;
    ckpt.version = manifest.at("version").get<int>();
    ckpt.algo = manifest.at("algo").get<std::string>();
    ckpt.config_hash = manifest.at("config_hash").get<std::string>();
    std::size_t expected_offset = 0;
    for (const auto& e : manifest.at("arrays")) {
        CheckpointArray a;
        a.name = e.at("name").get<std::string>();
        a.shape = e.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = e.at("offset").get<std::size_t>();
        const std::size_t length = e.at("length").get<std::size_t>();
        if (offset != expected_offset) {
            throw std::runtime_error("checkpoint: manifest offsets do not tile the blob");
        }
        std::size_t shape_count = 1;
        for (std::size_t d : a.shape) shape_count *= d;
        if (shape_count != length) throw std::runtime_error("checkpoint: shape/length mismatch");
        a.data.resize(length);
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(length * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated blob for '" + a.name + "'");
        expected_offset += length * sizeof(double);
        ckpt.arrays.push_back(std::move(a));
    }
    char extra;
    if (in.read(&extra, 1)) throw std::runtime_error("checkpoint: trailing bytes after blob");
    return ckpt;
}

inline Tensor tensor_from_array(const CheckpointArray& a) { return Tensor(a.shape, a.data); }

// --- datasets ----------------------------------------------------------------

// JSONL: a header object followed by one self-delimited episode per line.
struct Dataset {
    std::string env;
    std::size_t obs_dim = 0;
    std::size_t action_dim = 0;  // flattened chunk dim
    int h = 0;
    std::vector<DemoEpisode> episodes;
};

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open dataset for writing: " + path);
    nlohmann::json header;
    header["env"] = ds.env;
    header["obs_dim"] = ds.obs_dim;
    header["action_dim"] = ds.action_dim;
    header["h"] = ds.h;
    header["episodes"] = ds.episodes.size();
    out << header.dump() << "\n";
    for (const auto& ep : ds.episodes) {
        nlohmann::json j;
        auto& obs = j["obs"] = nlohmann::json::array();
        auto& act = j["actions"] = nlohmann::json::array();
        for (const auto& s : ep.states) obs.push_back(s.raw());
        for (const auto& a : ep.chunks) act.push_back(a.raw());
        j["rewards"] = ep.rewards;
        j["final_obs"] = ep.final_obs.raw();
        j["success"] = ep.success;
        out << j.dump() << "\n";
    }
    if (!out) throw std::runtime_error("dataset write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("dataset: missing header");
    nlohmann::json header = nlohmann::json::parse(line);
    Dataset ds;
    ds.env = header.at("env").get<std::string>();
    ds.obs_dim = header.at("obs_dim").get<std::size_t>();
    ds.action_dim = header.at("action_dim").get<std::size_t>();
    ds.h = header.at("h").get<int>();
    const std::size_t n = header.at("episodes").get<std::size_t>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        DemoEpisode ep;
        for (const auto& o : j.at("obs")) {
            auto v = o.get<std::vector<double>>();
            if (v.size() != ds.obs_dim) throw std::runtime_error("dataset: obs dim mismatch");
            ep.states.push_back(Tensor::vector(std::move(v)));
        }
        for (const auto& a : j.at("actions")) {
            auto v = a.get<std::vector<double>>();
            if (v.size() != ds.action_dim) throw std::runtime_error("dataset: action dim mismatch");
            ep.chunks.push_back(Tensor::vector(std::move(v)));
        }
        ep.rewards = j.at("rewards").get<std::vector<std::vector<double>>>();
        ep.final_obs = Tensor::vector(j.at("final_obs").get<std::vector<double>>());
        ep.success = j.at("success").get<bool>();
        for (const auto& r : ep.rewards) {
            if (static_cast<int>(r.size()) != ds.h) {
                throw std::runtime_error("dataset: reward chunk size mismatch");
            }
        }
        if (ep.states.size() != ep.chunks.size() || ep.states.size() != ep.rewards.size()) {
            throw std::runtime_error("dataset: ragged episode");
        }
        ds.episodes.push_back(std::move(ep));
    }
    if (ds.episodes.size() != n) throw std::runtime_error("dataset: episode count mismatch");
    return ds;
}

// Chunk transitions reconstructed from demo episodes, for offline mixing.
inline std::vector<ChunkTransition> dataset_to_transitions(const Dataset& ds) {
    std::vector<ChunkTransition> out;
    std::int64_t eid = -1;
    for (const auto& ep : ds.episodes) {
        --eid;  // negative ids keep offline episodes distinct from rollouts
        for (std::size_t t = 0; t < ep.states.size(); ++t) {
            ChunkTransition tr;
            tr.s = ep.states[t];
            tr.a = ep.chunks[t];
            tr.rewards = ep.rewards[t];
            const bool last = (t + 1 == ep.states.size());
            tr.s_next = last ? ep.final_obs : ep.states[t + 1];
            tr.done = last && ep.success;
            tr.truncated = last && !ep.success;
            tr.success = ep.success;
            tr.episode_id = eid;
            out.push_back(std::move(tr));
        }
    }
    return out;
}

inline void ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
}

}  // namespace ogpo
