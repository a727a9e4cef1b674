#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ogpo/autodiff.hpp"
#include "ogpo/mlp.hpp"
#include "ogpo/rng.hpp"
#include "ogpo/tensor.hpp"

namespace ogpo {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// One sampled denoising chain a_K..a_0 with everything the PPO machinery
// needs later: per-step log-densities under the sampling policy and the
// reparameterization noise.
struct DenoisingTrajectory {
    Tensor state;
    std::vector<Tensor> chain;      // chain[i] = a_{K-i}; chain[K] = a_0
    std::vector<Tensor> noises;     // noise of step i (a_{K-i} -> a_{K-i-1})
    std::vector<double> log_probs;  // log-density of step i under the sampler
    int K = 0;
    double sigma = 0.0;
    bool corrected = false;

    const Tensor& final_action() const { return chain.back(); }
    const Tensor& initial_noise() const { return chain.front(); }
};

// Scalar noise index tau in [0,1] -> (tau, sin, cos) at one frequency.
inline void time_embedding(double tau, double* out) {
    out[0] = tau;
    out[1] = std::sin(kTwoPi * tau);
    out[2] = std::cos(kTwoPi * tau);
}
constexpr std::size_t kTimeEmbedDim = 3;

// Flow-based generative control policy: a velocity field v and a denoiser
// head zhat over (action, state, time-embedding), plus the noise schedule.
// The drift/score interface (K, sigma(k), velocity_at, zhat_at, correct) is
// all the samplers below touch, so closed-form test policies can reuse them.
struct FlowPolicy {
    Mlp velocity_net;
    Mlp denoiser_net;
    int K = 10;
    std::vector<double> sigmas;  // per-step injected std, constant by default
    bool correct = true;
    std::size_t obs_dim = 0;
    std::size_t action_dim = 0;  // flattened chunk dim

    static FlowPolicy make(std::size_t obs_dim, std::size_t action_dim,
                           const std::vector<std::size_t>& hidden, Activation act, int K,
                           double sigma, bool correct, Rng& rng) {
        if (K < 1) throw std::invalid_argument("FlowPolicy: K must be >= 1");
        if (sigma < 0.0) throw std::invalid_argument("FlowPolicy: sigma must be >= 0");
        FlowPolicy p;
        p.obs_dim = obs_dim;
        p.action_dim = action_dim;
        p.K = K;
        p.sigmas.assign(static_cast<std::size_t>(K), sigma);
        p.correct = correct;
        std::vector<std::size_t> widths;
        widths.push_back(action_dim + obs_dim + kTimeEmbedDim);
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(action_dim);
        p.velocity_net = Mlp(widths, act, rng);
        p.denoiser_net = Mlp(widths, act, rng);
        return p;
    }

    double sigma(int k) const { return sigmas[static_cast<std::size_t>(K - k)]; }
    double sigma_const() const {
        for (double s : sigmas) {
            if (s != sigmas[0]) throw std::logic_error("FlowPolicy: non-constant sigma schedule");
        }
        return sigmas[0];
    }

    // tau at the point step k departs: k runs K..1, tau = (K-k)/K.
    double tau_of(int k) const { return static_cast<double>(K - k) / static_cast<double>(K); }

    Tensor build_input(const Tensor& a, const Tensor& s, double tau) const {
        Tensor x({action_dim + obs_dim + kTimeEmbedDim});
        for (std::size_t i = 0; i < action_dim; ++i) x[i] = a[i];
        for (std::size_t i = 0; i < obs_dim; ++i) x[action_dim + i] = s[i];
        time_embedding(tau, x.data() + action_dim + obs_dim);
        return x;
    }

    Tensor velocity_at(const Tensor& a, double tau, const Tensor& s) const {
        return velocity_net.forward(build_input(a, s, tau));
    }

    Tensor zhat_at(const Tensor& a, double tau, const Tensor& s) const {
        return denoiser_net.forward(build_input(a, s, tau));
    }

    void copy_params_from(const FlowPolicy& o) {
        velocity_net.copy_params_from(o.velocity_net);
        denoiser_net.copy_params_from(o.denoiser_net);
    }

    bool compatible_with(const FlowPolicy& o) const {
        return K == o.K && sigmas == o.sigmas && correct == o.correct &&
               obs_dim == o.obs_dim && action_dim == o.action_dim;
    }
};

// v_theta(a_k, k, s) with k the chain index of the departing point.
inline Tensor velocity(const FlowPolicy& p, const Tensor& a_k, int k, const Tensor& s) {
    if (k < 0 || k > p.K) throw std::invalid_argument("velocity: k out of range");
    if (a_k.size() != p.action_dim) throw std::invalid_argument("velocity: action dim mismatch");
    return p.velocity_at(a_k, p.tau_of(k), s);
}

// The marginal-preserving drift correction. The denoiser estimates the noise
// z with x~ = x + sigma z, so the score is -zhat/sigma and the Euler-Maruyama
// mean picks up eps*score*dt = -(sigma/2)*zhat with eps = sigma^2/(2 dt).
template <class P>
Tensor sde_step_mean(const P& p, const Tensor& a_k, int k, const Tensor& s) {
    const double tau = p.tau_of(k);
    const double dt = 1.0 / static_cast<double>(p.K);
    Tensor v = p.velocity_at(a_k, tau, s);
    Tensor mean = a_k;
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += dt * v[i];
    if (p.correct) {
        const double sig = p.sigma(k);
        Tensor z = p.zhat_at(a_k, tau, s);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] -= 0.5 * sig * z[i];
    }
    mean.assert_finite("sde_step_mean");
    return mean;
}

inline double log_normal_iso(const Tensor& x, const Tensor& mean, double sigma) {
    const double d = static_cast<double>(x.size());
    double q = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double diff = x[i] - mean[i];
        q += diff * diff;
    }
    return -0.5 * d * std::log(kTwoPi * sigma * sigma) - q / (2.0 * sigma * sigma);
}

// Deterministic Euler ODE inference from a given initial noise.
template <class P>
Tensor sample_ode_from(const P& p, const Tensor& s, Tensor a) {
    const double dt = 1.0 / static_cast<double>(p.K);
    for (int k = p.K; k >= 1; --k) {
        Tensor v = p.velocity_at(a, p.tau_of(k), s);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += dt * v[i];
        a.assert_finite("sample_ode");
    }
    return a;
}

template <class P>
Tensor sample_ode(const P& p, const Tensor& s, Rng& rng) {
    Tensor a({p.action_dim});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    return sample_ode_from(p, s, std::move(a));
}

// Noise-injected inference. Each step draws a_{k-1} ~ N(mean_k, sigma_k^2 I)
// and records the exact Gaussian log-density of the drawn point.
template <class P>
DenoisingTrajectory sample_sde(const P& p, const Tensor& s, Rng& rng, bool correct_override,
                               bool use_override = false) {
    const bool corr = use_override ? correct_override : p.correct;
    DenoisingTrajectory traj;
    traj.state = s;
    traj.K = p.K;
    traj.sigma = p.sigma(p.K);
    traj.corrected = corr;
    Tensor a({p.action_dim});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    traj.chain.push_back(a);
    for (int k = p.K; k >= 1; --k) {
        const double sig = p.sigma(k);
        if (sig <= 0.0) throw std::invalid_argument("sample_sde: sigma must be positive");
        Tensor mean;
        if (corr) {
            mean = sde_step_mean(p, a, k, s);
        } else {
            const double dt = 1.0 / static_cast<double>(p.K);
            Tensor v = p.velocity_at(a, p.tau_of(k), s);
            mean = a;
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += dt * v[i];
        }
        Tensor noise({p.action_dim});
        for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
        Tensor next(mean.shape());
        for (std::size_t i = 0; i < next.size(); ++i) next[i] = mean[i] + sig * noise[i];
        traj.log_probs.push_back(log_normal_iso(next, mean, sig));
        traj.noises.push_back(std::move(noise));
        traj.chain.push_back(next);
        a = traj.chain.back();
    }
    return traj;
}

template <class P>
DenoisingTrajectory sample_sde(const P& p, const Tensor& s, Rng& rng) {
    return sample_sde(p, s, rng, false, false);
}

// log N(a_next; mean_k, sigma_k^2 I) with the same mean as sample_sde.
template <class P>
double step_log_prob(const P& p, const Tensor& a_next, const Tensor& a_k, int k, const Tensor& s) {
    const double sig = p.sigma(k);
    if (sig <= 0.0) throw std::invalid_argument("step_log_prob: sigma must be positive");
    Tensor mean;
    if (p.correct) {
        mean = sde_step_mean(p, a_k, k, s);
    } else {
        const double dt = 1.0 / static_cast<double>(p.K);
        Tensor v = p.velocity_at(a_k, p.tau_of(k), s);
        mean = a_k;
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += dt * v[i];
    }
    return log_normal_iso(a_next, mean, sig);
}

inline void check_ratio_compat(const FlowPolicy& p, const DenoisingTrajectory& traj) {
    if (traj.K != p.K || traj.sigma != p.sigma(p.K) || traj.corrected != p.correct) {
        throw std::invalid_argument("trajectory sampled under incompatible K/sigma/correction");
    }
}

// Summed step log-density of a recorded chain under a policy (value path).
inline double chain_log_prob(const FlowPolicy& p, const DenoisingTrajectory& traj) {
    check_ratio_compat(p, traj);
    double lp = 0.0;
    for (int k = p.K; k >= 1; --k) {
        const std::size_t i = static_cast<std::size_t>(p.K - k);
        lp += step_log_prob(p, traj.chain[i + 1], traj.chain[i], k, traj.state);
    }
    return lp;
}

// omega = prod_k pi_theta / pi_ref over the recorded chain. The log-ratio is
// summed term-by-term so identical policies give exactly 1.
inline double chain_ratio(const FlowPolicy& theta, const FlowPolicy& ref,
                          const DenoisingTrajectory& traj) {
    check_ratio_compat(theta, traj);
    check_ratio_compat(ref, traj);
    double log_ratio = 0.0;
    for (int k = theta.K; k >= 1; --k) {
        const std::size_t i = static_cast<std::size_t>(theta.K - k);
        const double lt = step_log_prob(theta, traj.chain[i + 1], traj.chain[i], k, traj.state);
        const double lr = step_log_prob(ref, traj.chain[i + 1], traj.chain[i], k, traj.state);
        log_ratio += lt - lr;
    }
    return std::exp(log_ratio);
}

// --- batched tape machinery -------------------------------------------------

// Summed log-density of N recorded trajectories under theta as an (N) node.
// All trajectories must share K/sigma/correction with the policy. One batched
// velocity-net pass per denoising step; the denoiser contribution to the mean
// is a constant (the denoiser head is frozen during RL).
inline Tape::Ref chain_log_prob_node(Tape& tape, const FlowPolicy& p,
                                     const std::vector<const DenoisingTrajectory*>& trajs) {
    const std::size_t n = trajs.size();
    if (n == 0) throw std::invalid_argument("chain_log_prob_node: empty batch");
    for (const auto* t : trajs) check_ratio_compat(p, *t);
    const std::size_t da = p.action_dim;
    const std::size_t din = da + p.obs_dim + kTimeEmbedDim;
    Tape::Ref total = Tape::kNone;
    const double dt = 1.0 / static_cast<double>(p.K);
    for (int k = p.K; k >= 1; --k) {
        const std::size_t i = static_cast<std::size_t>(p.K - k);
        const double tau = p.tau_of(k);
        const double sig = p.sigma(k);
        Tensor x({n, din});
        Tensor base({n, da});  // a_k
        Tensor corr({n, da});  // constant denoiser correction, zero if off
        Tensor anext({n, da});
        for (std::size_t r = 0; r < n; ++r) {
            const DenoisingTrajectory& t = *trajs[r];
            const Tensor& ak = t.chain[i];
            const Tensor& an = t.chain[i + 1];
            for (std::size_t c = 0; c < da; ++c) {
                x.at(r, c) = ak[c];
                base.at(r, c) = ak[c];
                anext.at(r, c) = an[c];
            }
            for (std::size_t c = 0; c < p.obs_dim; ++c) x.at(r, da + c) = t.state[c];
            time_embedding(tau, x.data() + r * din + da + p.obs_dim);
            if (p.correct) {
                Tensor z = p.zhat_at(ak, tau, t.state);
                for (std::size_t c = 0; c < da; ++c) corr.at(r, c) = 0.5 * sig * z[c];
            }
        }
        Tape::Ref v = p.velocity_net.forward(tape, tape.constant(std::move(x)));
        // (a_k + dt*v) - corr: same evaluation order as the sampler's mean.
        Tape::Ref mean = tape.sub(tape.add(tape.constant(std::move(base)), tape.scale(v, dt)),
                                  tape.constant(std::move(corr)));
        Tape::Ref diff = tape.sub(tape.constant(std::move(anext)), mean);
        Tape::Ref q = tape.row_sum(tape.square(diff));  // (N)
        const double c0 = -0.5 * static_cast<double>(da) * std::log(kTwoPi * sig * sig);
        Tape::Ref lp = tape.add_scalar(tape.scale(q, -1.0 / (2.0 * sig * sig)), c0);
        total = (total == Tape::kNone) ? lp : tape.add(total, lp);
    }
    return total;
}

// Shared sampling for the conditional flow-matching objective: given (s, a)
// pairs, draw z ~ N(0, I) and tau ~ U(0,1), build interpolants and targets.
struct FlowMatchBatch {
    Tensor inputs;   // (B, din)
    Tensor targets;  // (B, da)
};

inline FlowMatchBatch make_flow_match_batch(const FlowPolicy& p,
                                            const std::vector<const Tensor*>& states,
                                            const std::vector<const Tensor*>& actions, Rng& rng) {
    const std::size_t bsz = states.size();
    if (bsz == 0 || actions.size() != bsz) {
        throw std::invalid_argument("flow_matching_loss: empty or mismatched batch");
    }
    const std::size_t da = p.action_dim;
    const std::size_t din = da + p.obs_dim + kTimeEmbedDim;
    FlowMatchBatch b{Tensor({bsz, din}), Tensor({bsz, da})};
    for (std::size_t r = 0; r < bsz; ++r) {
        const Tensor& a = *actions[r];
        const Tensor& s = *states[r];
        if (a.size() != da || s.size() != p.obs_dim) {
            throw std::invalid_argument("flow_matching_loss: dim mismatch");
        }
        const double tau = rng.uniform();
        for (std::size_t c = 0; c < da; ++c) {
            const double z = rng.normal();
            b.inputs.at(r, c) = tau * a[c] + (1.0 - tau) * z;
            b.targets.at(r, c) = a[c] - z;
        }
        for (std::size_t c = 0; c < p.obs_dim; ++c) b.inputs.at(r, da + c) = s[c];
        time_embedding(tau, b.inputs.data() + r * din + da + p.obs_dim);
    }
    return b;
}

// Mean over the batch of ||v_theta(interpolant, tau, s) - (a - z)||^2.
inline Tape::Ref flow_matching_loss(Tape& tape, const FlowPolicy& p, const FlowMatchBatch& batch) {
    const std::size_t bsz = batch.inputs.rows();
    Tape::Ref v = p.velocity_net.forward(tape, tape.constant(batch.inputs));
    Tape::Ref diff = tape.sub(v, tape.constant(batch.targets));
    return tape.scale(tape.sum(tape.square(diff)), 1.0 / static_cast<double>(bsz));
}

inline Tape::Ref flow_matching_loss(Tape& tape, const FlowPolicy& p,
                                    const std::vector<const Tensor*>& states,
                                    const std::vector<const Tensor*>& actions, Rng& rng) {
    return flow_matching_loss(tape, p, make_flow_match_batch(p, states, actions, rng));
}

// Mean over the batch of ||zhat(x_tau + sigma z', tau, s) - z'||^2.
inline Tape::Ref denoiser_loss(Tape& tape, const FlowPolicy& p,
                               const std::vector<const Tensor*>& states,
                               const std::vector<const Tensor*>& actions, Rng& rng) {
    const std::size_t bsz = states.size();
    if (bsz == 0 || actions.size() != bsz) {
        throw std::invalid_argument("denoiser_loss: empty or mismatched batch");
    }
    const double sig = p.sigma_const();
    if (sig <= 0.0) throw std::invalid_argument("denoiser_loss: sigma must be positive");
    const std::size_t da = p.action_dim;
    const std::size_t din = da + p.obs_dim + kTimeEmbedDim;
    Tensor inputs({bsz, din});
    Tensor targets({bsz, da});
    for (std::size_t r = 0; r < bsz; ++r) {
        const Tensor& a = *actions[r];
        const Tensor& s = *states[r];
        const double tau = rng.uniform();
        for (std::size_t c = 0; c < da; ++c) {
            const double z = rng.normal();
            const double zprime = rng.normal();
            inputs.at(r, c) = tau * a[c] + (1.0 - tau) * z + sig * zprime;
            targets.at(r, c) = zprime;
        }
        for (std::size_t c = 0; c < p.obs_dim; ++c) inputs.at(r, da + c) = s[c];
        time_embedding(tau, inputs.data() + r * din + da + p.obs_dim);
    }
    Tape::Ref z = p.denoiser_net.forward(tape, tape.constant(std::move(inputs)));
    Tape::Ref diff = tape.sub(z, tape.constant(std::move(targets)));
    return tape.scale(tape.sum(tape.square(diff)), 1.0 / static_cast<double>(bsz));
}

// Final SDE actions for a batch of (distinct) states, batched per denoising
// step. Used where only the bootstrap action matters, not the chain.
inline std::vector<Tensor> sde_final_actions(const FlowPolicy& p,
                                             const std::vector<const Tensor*>& states, Rng& rng) {
    const std::size_t n = states.size();
    const std::size_t da = p.action_dim;
    const std::size_t din = da + p.obs_dim + kTimeEmbedDim;
    Tensor a({n, da});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    Tensor x({n, din});
    const double dt = 1.0 / static_cast<double>(p.K);
    for (int k = p.K; k >= 1; --k) {
        const double tau = p.tau_of(k);
        const double sig = p.sigma(k);
        if (sig <= 0.0) throw std::invalid_argument("sde_final_actions: sigma must be positive");
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < da; ++c) x.at(r, c) = a.at(r, c);
            for (std::size_t c = 0; c < p.obs_dim; ++c) x.at(r, da + c) = (*states[r])[c];
            time_embedding(tau, x.data() + r * din + da + p.obs_dim);
        }
        Tensor v = p.velocity_net.forward(x);
        Tensor z = p.correct ? p.denoiser_net.forward(x) : Tensor();
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < da; ++c) {
                double mean = a.at(r, c) + dt * v.at(r, c);
                if (p.correct) mean -= 0.5 * sig * z.at(r, c);
                a.at(r, c) = mean + sig * rng.normal();
            }
        }
        a.assert_finite("sde_final_actions");
    }
    std::vector<Tensor> out;
    out.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        Tensor row({da});
        for (std::size_t c = 0; c < da; ++c) row[c] = a.at(r, c);
        out.push_back(std::move(row));
    }
    return out;
}

// G independent corrected-SDE chains from one state, batched per denoising
// step. Per-trajectory rng streams keep the result identical to G sequential
// sample_sde calls on those streams, independent of batching.
inline std::vector<DenoisingTrajectory> sample_sde_group(const FlowPolicy& p, const Tensor& s,
                                                         std::size_t G, Rng& rng) {
    std::vector<Rng> streams;
    streams.reserve(G);
    for (std::size_t j = 0; j < G; ++j) streams.push_back(rng.stream(j));
    const std::size_t da = p.action_dim;
    const std::size_t din = da + p.obs_dim + kTimeEmbedDim;
    std::vector<DenoisingTrajectory> out(G);
    Tensor a({G, da});
    for (std::size_t j = 0; j < G; ++j) {
        out[j].state = s;
        out[j].K = p.K;
        out[j].sigma = p.sigma(p.K);
        out[j].corrected = p.correct;
        Tensor a0({da});
        for (std::size_t c = 0; c < da; ++c) {
            a0[c] = streams[j].normal();
            a.at(j, c) = a0[c];
        }
        out[j].chain.push_back(std::move(a0));
    }
    const double dt = 1.0 / static_cast<double>(p.K);
    Tensor x({G, din});
    for (int k = p.K; k >= 1; --k) {
        const double tau = p.tau_of(k);
        const double sig = p.sigma(k);
        if (sig <= 0.0) throw std::invalid_argument("sample_sde_group: sigma must be positive");
        for (std::size_t j = 0; j < G; ++j) {
            for (std::size_t c = 0; c < da; ++c) x.at(j, c) = a.at(j, c);
            for (std::size_t c = 0; c < p.obs_dim; ++c) x.at(j, da + c) = s[c];
            time_embedding(tau, x.data() + j * din + da + p.obs_dim);
        }
        Tensor v = p.velocity_net.forward(x);
        Tensor z = p.correct ? p.denoiser_net.forward(x) : Tensor();
        for (std::size_t j = 0; j < G; ++j) {
            Tensor mean({da});
            for (std::size_t c = 0; c < da; ++c) {
                mean[c] = a.at(j, c) + dt * v.at(j, c);
                if (p.correct) mean[c] -= 0.5 * sig * z.at(j, c);
            }
            mean.assert_finite("sample_sde_group");
            Tensor noise({da});
            Tensor next({da});
            for (std::size_t c = 0; c < da; ++c) {
                noise[c] = streams[j].normal();
                next[c] = mean[c] + sig * noise[c];
                a.at(j, c) = next[c];
            }
            out[j].log_probs.push_back(log_normal_iso(next, mean, sig));
            out[j].noises.push_back(std::move(noise));
            out[j].chain.push_back(std::move(next));
        }
    }
    return out;
}

}  // namespace ogpo
