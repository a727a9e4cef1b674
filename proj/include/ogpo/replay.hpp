#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ogpo/rng.hpp"
#include "ogpo/tensor.hpp"

namespace ogpo {

// One chunk-level transition: h primitive rewards, next observation h
// primitives later. The action is the flattened chunk.
struct ChunkTransition {
    Tensor s;
    Tensor a;                     // flattened chunk, dim = primitive dim * h
    std::vector<double> rewards;  // exactly h entries, zero-padded after done
    Tensor s_next;
    bool done = false;
    bool truncated = false;
    bool success = false;
    std::int64_t episode_id = -1;
    int executed_primitives = 0;  // bookkeeping: real env steps in this chunk
};

// Ring buffer over chunk transitions with a per-episode staging area so the
// success buffer can be filled at episode end. Transitions are sampleable
// as soon as they are pushed.
class RolloutBuffer {
public:
    explicit RolloutBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("RolloutBuffer: capacity must be positive");
    }

    std::size_t size() const { return store_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return store_.empty(); }

    const ChunkTransition& operator[](std::size_t i) const { return store_[i]; }

    void push(const ChunkTransition& tr) {
        if (tr.episode_id < 0) throw std::invalid_argument("push: transition needs an episode id");
        staging_[tr.episode_id].push_back({tr.s, tr.a});
        if (store_.size() == capacity_) {
            store_[cursor_] = tr;
        } else {
            store_.push_back(tr);
        }
        cursor_ = (cursor_ + 1) % capacity_;
    }

    // Episode ids currently staged (not yet finalized).
    bool has_staged(std::int64_t episode_id) const { return staging_.count(episode_id) > 0; }

    std::vector<std::pair<Tensor, Tensor>> take_staged(std::int64_t episode_id) {
        auto it = staging_.find(episode_id);
        if (it == staging_.end()) {
            throw std::invalid_argument("finalize_episode: unknown or already finalized episode");
        }
        auto pairs = std::move(it->second);
        staging_.erase(it);
        return pairs;
    }

private:
    std::size_t capacity_;
    std::size_t cursor_ = 0;
    std::vector<ChunkTransition> store_;
    std::unordered_map<std::int64_t, std::vector<std::pair<Tensor, Tensor>>> staging_;
};

// (s, a) pairs from episodes that ended in success; D_succ is a subset of
// D_roll at insertion time.
class SuccessBuffer {
public:
    struct Entry {
        Tensor s;
        Tensor a;
        std::int64_t episode_id;
    };

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }

    void add(Tensor s, Tensor a, std::int64_t episode_id) {
        entries_.push_back({std::move(s), std::move(a), episode_id});
    }

private:
    std::vector<Entry> entries_;
};

// Flushes an episode's staging area; on success its (s, a) pairs join the
// success buffer.
inline void finalize_episode(RolloutBuffer& buf, SuccessBuffer& succ, std::int64_t episode_id,
                             bool success) {
    auto pairs = buf.take_staged(episode_id);
    if (success) {
        for (auto& [s, a] : pairs) succ.add(std::move(s), std::move(a), episode_id);
    }
}

// Uniform-with-replacement batch; each element comes from the offline set
// with probability r_offline, else from the rollout buffer.
inline std::vector<const ChunkTransition*> sample_batch(const RolloutBuffer& buf,
                                                        const std::vector<ChunkTransition>* offline,
                                                        double r_offline, std::size_t n, Rng& rng) {
    if (n == 0) throw std::invalid_argument("sample_batch: n must be >= 1");
    if (buf.empty()) throw std::invalid_argument("sample_batch: empty rollout buffer");
    if (r_offline < 0.0 || r_offline > 1.0) {
        throw std::invalid_argument("sample_batch: r_offline must be in [0,1]");
    }
    if (r_offline > 0.0 && (offline == nullptr || offline->empty())) {
        throw std::invalid_argument("sample_batch: r_offline > 0 without an offline dataset");
    }
    std::vector<const ChunkTransition*> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool from_offline = r_offline > 0.0 && rng.uniform() < r_offline;
        if (from_offline) {
            out.push_back(&(*offline)[rng.below(offline->size())]);
        } else {
            out.push_back(&buf[rng.below(buf.size())]);
        }
    }
    return out;
}

}  // namespace ogpo
