#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ogpo/replay.hpp"
#include "ogpo/rng.hpp"
#include "ogpo/tensor.hpp"

namespace ogpo {

enum class EnvKind { PointReach, ForkReach };

inline const char* to_string(EnvKind k) {
    return k == EnvKind::PointReach ? "point-reach" : "fork-reach";
}

inline EnvKind env_kind_from_string(const std::string& s) {
    if (s == "point-reach") return EnvKind::PointReach;
    if (s == "fork-reach") return EnvKind::ForkReach;
    throw std::invalid_argument("unknown env: " + s);
}

struct EnvSpec {
    std::size_t obs_dim = 4;
    std::size_t action_dim = 2;
    int step_limit = 100;
    double speed = 0.05;
    double reach_radius = 0.1;
    double min_spawn_dist = 0.5;
    // ForkReach wall: vertical segment at x = 0 with two symmetric gaps.
    double gap_center = 0.5;
    double gap_half_width = 0.15;
};

// Desk-scale sparse-reward 2-D reacher. Reward is -1 per primitive step until
// the goal disc is reached, which terminates with reward 0. ForkReach adds an
// impassable wall between the spawn half and the goal half, pierced by two
// symmetric gaps, as a multimodality probe.
class Env {
public:
    struct StepResult {
        Tensor obs;
        double reward = 0.0;
        bool done = false;
        bool truncated = false;
    };

    explicit Env(EnvKind kind) : kind_(kind) {}

    EnvKind kind() const { return kind_; }
    const EnvSpec& spec() const { return spec_; }
    bool done() const { return done_ || truncated_; }
    bool success() const { return success_; }
    int steps() const { return steps_; }
    long clipped_action_count() const { return clipped_actions_; }

    Tensor reset(std::uint64_t seed) {
        rng_.reseed(seed);
        steps_ = 0;
        done_ = truncated_ = success_ = false;
        if (kind_ == EnvKind::PointReach) {
            do {
                px_ = rng_.uniform(-1.0, 1.0);
                py_ = rng_.uniform(-1.0, 1.0);
                gx_ = rng_.uniform(-1.0, 1.0);
                gy_ = rng_.uniform(-1.0, 1.0);
            } while (dist_to_goal_() < spec_.min_spawn_dist);
        } else {
            // spawn left of the wall, goal right of it
            do {
                px_ = rng_.uniform(-1.0, -0.2);
                py_ = rng_.uniform(-1.0, 1.0);
                gx_ = rng_.uniform(0.2, 1.0);
                gy_ = rng_.uniform(-1.0, 1.0);
            } while (dist_to_goal_() < spec_.min_spawn_dist);
        }
        return obs();
    }

    // Direct state injection for tests (symmetry/collision probes).
    void reset_to(double px, double py, double gx, double gy) {
        steps_ = 0;
        done_ = truncated_ = success_ = false;
        px_ = px;
        py_ = py;
        gx_ = gx;
        gy_ = gy;
    }

    Tensor obs() const { return Tensor::vector({px_, py_, gx_, gy_}); }
    Tensor goal() const { return Tensor::vector({gx_, gy_}); }

    StepResult step(const Tensor& action) {
        if (action.size() != spec_.action_dim) throw std::invalid_argument("Env: action dim");
        if (done()) throw std::logic_error("Env: step after episode end");
        double ax = action[0], ay = action[1];
        if (ax < -1.0 || ax > 1.0 || ay < -1.0 || ay > 1.0) {
            ++clipped_actions_;
            ax = std::clamp(ax, -1.0, 1.0);
            ay = std::clamp(ay, -1.0, 1.0);
        }
        double nx = px_ + spec_.speed * ax;
        double ny = py_ + spec_.speed * ay;
        if (kind_ == EnvKind::ForkReach && crosses_wall_(px_, py_, nx, ny)) {
            nx = px_;  // wall blocks the normal component, tangential passes
        }
        px_ = std::clamp(nx, -1.0, 1.0);
        py_ = std::clamp(ny, -1.0, 1.0);
        steps_ += 1;

        StepResult r;
        if (dist_to_goal_() < spec_.reach_radius) {
            success_ = true;
            done_ = true;
            r.reward = 0.0;
        } else {
            r.reward = -1.0;
        }
        if (steps_ >= spec_.step_limit) truncated_ = true;
        r.done = done_;
        r.truncated = truncated_;
        r.obs = obs();
        return r;
    }

    bool in_gap(double y) const {
        return std::fabs(y - spec_.gap_center) < spec_.gap_half_width ||
               std::fabs(y + spec_.gap_center) < spec_.gap_half_width;
    }

private:
    double dist_to_goal_() const { return std::hypot(px_ - gx_, py_ - gy_); }

    bool crosses_wall_(double x0, double y0, double x1, double y1) const {
        const bool from_left = x0 < 0.0;
        const bool to_left = x1 < 0.0;
        if (from_left == to_left && x1 != 0.0) return false;
        if (x1 == x0) return false;
        const double t = (0.0 - x0) / (x1 - x0);
        const double yc = y0 + t * (y1 - y0);
        return !in_gap(yc);
    }

    EnvKind kind_;
    EnvSpec spec_;
    Rng rng_;
    double px_ = 0.0, py_ = 0.0, gx_ = 0.0, gy_ = 0.0;
    int steps_ = 0;
    bool done_ = false, truncated_ = false, success_ = false;
    long clipped_actions_ = 0;
};

// Executes h primitive actions open-loop. If the episode ends mid-chunk the
// remaining primitives are skipped and their reward slots padded with zero.
inline ChunkTransition chunk_step(Env& env, const Tensor& chunk, int h,
                                  std::int64_t episode_id) {
    if (h < 1) throw std::invalid_argument("chunk_step: h must be >= 1");
    const std::size_t pdim = env.spec().action_dim;
    if (chunk.size() != pdim * static_cast<std::size_t>(h)) {
        throw std::invalid_argument("chunk_step: chunk dim mismatch");
    }
    ChunkTransition tr;
    tr.s = env.obs();
    tr.a = chunk;
    tr.rewards.assign(static_cast<std::size_t>(h), 0.0);
    tr.episode_id = episode_id;
    for (int j = 0; j < h; ++j) {
        Tensor prim({pdim});
        for (std::size_t c = 0; c < pdim; ++c) {
            prim[c] = chunk[static_cast<std::size_t>(j) * pdim + c];
        }
        auto res = env.step(prim);
        tr.rewards[static_cast<std::size_t>(j)] = res.reward;
        tr.executed_primitives += 1;
        if (env.done()) break;
    }
    tr.s_next = env.obs();
    // task success is the only terminal; hitting the step limit is truncation
    tr.done = env.success();
    tr.truncated = !env.success() && env.done();
    tr.success = env.success();
    return tr;
}

// One demonstration episode: proportional controller toward the goal (via the
// nearest gap on ForkReach) with additive Gaussian action noise, recorded in
// chunk units.
struct DemoEpisode {
    std::vector<Tensor> states;
    std::vector<Tensor> chunks;
    std::vector<std::vector<double>> rewards;
    Tensor final_obs;
    bool success = false;
    int primitive_steps = 0;
};

inline Tensor demo_controller_action(const Env& env, const Tensor& obs) {
    const double px = obs[0], py = obs[1], gx = obs[2], gy = obs[3];
    double tx = gx, ty = gy;
    if (env.kind() == EnvKind::ForkReach && px < 0.05 && gx > 0.0) {
        const double gc = env.spec().gap_center;
        const double dup = std::hypot(px, py - gc);
        const double ddn = std::hypot(px, py + gc);
        ty = (dup <= ddn) ? gc : -gc;
        tx = 0.1;  // aim a little past the gap so the controller does not stall
    }
    const double kp = 4.0;
    return Tensor::vector({std::clamp(kp * (tx - px), -1.0, 1.0),
                           std::clamp(kp * (ty - py), -1.0, 1.0)});
}

inline DemoEpisode scripted_demo(Env& env, double noise_std, int h, std::uint64_t episode_seed,
                                 Rng& noise_rng) {
    if (noise_std < 0.0) throw std::invalid_argument("scripted_demo: noise_std must be >= 0");
    DemoEpisode ep;
    Tensor o = env.reset(episode_seed);
    const std::size_t pdim = env.spec().action_dim;
    std::int64_t eid = 0;
    while (!env.done()) {
        Tensor state = env.obs();
        Tensor chunk({pdim * static_cast<std::size_t>(h)});
        // Plan the h noisy actions on a simulated copy so the controller
        // reacts to its own motion; chunk_step then replays them for real.
        Env planner = env;
        for (int j = 0; j < h; ++j) {
            Tensor a = demo_controller_action(env, planner.obs());
            Tensor prim({pdim});
            for (std::size_t c = 0; c < pdim; ++c) {
                double v = a[c] + noise_std * noise_rng.normal();
                v = std::clamp(v, -1.0, 1.0);
                chunk[static_cast<std::size_t>(j) * pdim + c] = v;
                prim[c] = v;
            }
            if (!planner.done()) planner.step(prim);
        }
        ChunkTransition tr = chunk_step(env, chunk, h, eid);
        ep.states.push_back(std::move(state));
        ep.chunks.push_back(tr.a);
        ep.rewards.push_back(tr.rewards);
    }
    ep.final_obs = env.obs();
    ep.success = env.success();
    ep.primitive_steps = env.steps();
    return ep;
}

inline double demo_success_rate(EnvKind kind, double noise_std, int h, int episodes,
                                std::uint64_t seed) {
    Env env(kind);
    int succ = 0;
    for (int e = 0; e < episodes; ++e) {
        Rng noise(mix64(seed, 1000 + static_cast<std::uint64_t>(e)));
        DemoEpisode ep = scripted_demo(env, noise_std, h, mix64(seed, static_cast<std::uint64_t>(e)),
                                       noise);
        succ += ep.success ? 1 : 0;
    }
    return static_cast<double>(succ) / static_cast<double>(episodes);
}

// Bisection for the noise level whose demo success rate lands in
// [target - 0.05, target + 0.05]. Common random numbers across candidates
// keep the estimate monotone enough for bisection.
inline double calibrate_noise(EnvKind kind, double target, int h, int episodes,
                              std::uint64_t seed) {
    double lo = 0.0, hi = 1.5;
    double mid = 0.5 * (lo + hi);
    for (int iter = 0; iter < 24; ++iter) {
        mid = 0.5 * (lo + hi);
        const double rate = demo_success_rate(kind, mid, h, episodes, seed);
        if (rate > target + 0.05) {
            lo = mid;
        } else if (rate < target - 0.05) {
            hi = mid;
        } else {
            return mid;
        }
    }
    return mid;
}

}  // namespace ogpo
