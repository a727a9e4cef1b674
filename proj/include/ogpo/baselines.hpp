#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ogpo/autodiff.hpp"
#include "ogpo/critic.hpp"
#include "ogpo/extraction.hpp"
#include "ogpo/flow.hpp"
#include "ogpo/mlp.hpp"
#include "ogpo/optim.hpp"
#include "ogpo/replay.hpp"
#include "ogpo/rng.hpp"

namespace ogpo {

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 2.0;

// Gaussian policy over the flow's initial-noise space: s -> (mean, log-std).
struct LatentPolicy {
    Mlp head;  // obs -> 2 * latent_dim
    std::size_t obs_dim = 0;
    std::size_t latent_dim = 0;

    static LatentPolicy make(std::size_t obs_dim, std::size_t latent_dim,
                             const std::vector<std::size_t>& hidden, Activation act, Rng& rng) {
        LatentPolicy p;
        p.obs_dim = obs_dim;
        p.latent_dim = latent_dim;
        std::vector<std::size_t> widths;
        widths.push_back(obs_dim);
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(2 * latent_dim);
        p.head = Mlp(widths, act, rng);
        return p;
    }

    void mean_logstd(const Tensor& s, Tensor& mean, Tensor& logstd) const {
        Tensor out = head.forward(s);
        mean = Tensor({latent_dim});
        logstd = Tensor({latent_dim});
        for (std::size_t i = 0; i < latent_dim; ++i) {
            mean[i] = out[i];
            logstd[i] = std::clamp(out[latent_dim + i], kLogStdMin, kLogStdMax);
        }
    }

    Tensor sample(const Tensor& s, Rng& rng) const {
        Tensor mean, logstd;
        mean_logstd(s, mean, logstd);
        Tensor w({latent_dim});
        for (std::size_t i = 0; i < latent_dim; ++i) {
            w[i] = mean[i] + std::exp(logstd[i]) * rng.normal();
        }
        return w;
    }
};

// Gaussian edit head over action-chunk deltas, tanh-squashed and scaled.
struct EditPolicy {
    Mlp head;  // (obs, action) -> 2 * action_dim
    std::size_t obs_dim = 0;
    std::size_t action_dim = 0;
    double edit_scale = 0.5;

    static EditPolicy make(std::size_t obs_dim, std::size_t action_dim,
                           const std::vector<std::size_t>& hidden, Activation act,
                           double edit_scale, Rng& rng) {
        EditPolicy p;
        p.obs_dim = obs_dim;
        p.action_dim = action_dim;
        p.edit_scale = edit_scale;
        std::vector<std::size_t> widths;
        widths.push_back(obs_dim + action_dim);
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(2 * action_dim);
        p.head = Mlp(widths, act, rng);
        return p;
    }

    Tensor build_input(const Tensor& s, const Tensor& a) const {
        Tensor x({obs_dim + action_dim});
        for (std::size_t i = 0; i < obs_dim; ++i) x[i] = s[i];
        for (std::size_t i = 0; i < action_dim; ++i) x[obs_dim + i] = a[i];
        return x;
    }

    Tensor sample_delta(const Tensor& s, const Tensor& a, Rng& rng) const {
        Tensor out = head.forward(build_input(s, a));
        Tensor delta({action_dim});
        for (std::size_t i = 0; i < action_dim; ++i) {
            const double mean = out[i];
            const double logstd = std::clamp(out[action_dim + i], kLogStdMin, kLogStdMax);
            const double u = mean + std::exp(logstd) * rng.normal();
            delta[i] = std::tanh(u) * edit_scale;
        }
        return delta;
    }
};

inline std::uint64_t param_checksum(const std::vector<Tensor>& params) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.data());
        for (std::size_t i = 0; i < p.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

inline std::uint64_t policy_checksum(const FlowPolicy& p) {
    std::uint64_t h = param_checksum(p.velocity_net.params());
    return h ^ (param_checksum(p.denoiser_net.params()) * 0x9e3779b97f4a7c15ULL);
}

struct UpdateMetrics {
    double loss = 0.0;
    double aux_loss = 0.0;   // value / critic part where applicable
    double grad_norm = 0.0;
    double extra = 0.0;
};

namespace detail {

inline double grad_l2_norm(const std::vector<Tensor>& grads) {
    double s = 0.0;
    for (const auto& g : grads) {
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * g[i];
    }
    return std::sqrt(s);
}

inline std::vector<Tensor> collect_grads(Tape& tape, const std::vector<Tensor>& params) {
    std::vector<Tensor> gs;
    gs.reserve(params.size());
    for (const auto& p : params) {
        gs.push_back(tape.has_param(p) ? tape.grad_of(p) : Tensor(p.shape()));
    }
    return gs;
}

inline std::vector<Tensor*> param_ptrs(std::vector<Tensor>& params) {
    std::vector<Tensor*> ps;
    ps.reserve(params.size());
    for (auto& p : params) ps.push_back(&p);
    return ps;
}

// (mean, clamped log-std) nodes from a Gaussian head on a batch.
struct GaussianHeadNodes {
    Tape::Ref mean;
    Tape::Ref logstd;
};

inline GaussianHeadNodes gaussian_head(Tape& tape, const Mlp& head, Tape::Ref input,
                                       std::size_t dim) {
    Tape::Ref out = head.forward(tape, input);
    GaussianHeadNodes g;
    g.mean = tape.slice_cols(out, 0, dim);
    g.logstd = tape.clamp(tape.slice_cols(out, dim, dim), kLogStdMin, kLogStdMax);
    return g;
}

}  // namespace detail

// --- DPPO-lite ----------------------------------------------------------------

// One recorded on-policy chunk: state, denoising trajectory (with log-probs
// under the collection policy), and the discounted return-to-go from here.
struct OnPolicyChunk {
    DenoisingTrajectory traj;
    double return_to_go = 0.0;
};

// Per-denoising-step clipped surrogate with per-step Gaussian ratios, each
// weighted by gamma_denoise^(steps-to-action) so early noisy steps count less.
inline Tape::Ref dppo_actor_loss_node(Tape& tape, const FlowPolicy& p,
                                      const std::vector<const DenoisingTrajectory*>& trajs,
                                      const Tensor& adv, double gamma_denoise, double eps) {
    const std::size_t n = trajs.size();
    if (n == 0) throw std::invalid_argument("dppo actor loss: empty batch");
    const int K = p.K;
    const std::size_t da = p.action_dim;
    const std::size_t din = da + p.obs_dim + kTimeEmbedDim;
    const double dt = 1.0 / static_cast<double>(K);
    Tape::Ref total = Tape::kNone;
    for (int k = K; k >= 1; --k) {
        const std::size_t i = static_cast<std::size_t>(K - k);
        const double tau = p.tau_of(k);
        const double sig = p.sigma(k);
        Tensor x({n, din});
        Tensor base({n, da});
        Tensor corr({n, da});
        Tensor anext({n, da});
        Tensor ref_lp({n});
        for (std::size_t r = 0; r < n; ++r) {
            const DenoisingTrajectory& t = *trajs[r];
            for (std::size_t c = 0; c < da; ++c) {
                x.at(r, c) = t.chain[i][c];
                base.at(r, c) = t.chain[i][c];
                anext.at(r, c) = t.chain[i + 1][c];
            }
            for (std::size_t c = 0; c < p.obs_dim; ++c) x.at(r, da + c) = t.state[c];
            time_embedding(tau, x.data() + r * din + da + p.obs_dim);
            if (p.correct) {
                Tensor z = p.zhat_at(t.chain[i], tau, t.state);
                for (std::size_t c = 0; c < da; ++c) corr.at(r, c) = 0.5 * sig * z[c];
            }
            ref_lp[r] = t.log_probs[i];
        }
        Tape::Ref v = p.velocity_net.forward(tape, tape.constant(std::move(x)));
        Tape::Ref mean = tape.sub(tape.add(tape.constant(std::move(base)), tape.scale(v, dt)),
                                  tape.constant(std::move(corr)));
        Tape::Ref diff = tape.sub(tape.constant(std::move(anext)), mean);
        Tape::Ref q = tape.row_sum(tape.square(diff));
        const double c0 = -0.5 * static_cast<double>(da) * std::log(kTwoPi * sig * sig);
        Tape::Ref lp = tape.add_scalar(tape.scale(q, -1.0 / (2.0 * sig * sig)), c0);
        Tape::Ref ratio = tape.exp_op(tape.sub(lp, tape.constant(ref_lp)));
        // k-1 inner steps remain until the action executes
        const double w = std::pow(gamma_denoise, static_cast<double>(k - 1));
        Tensor wadv({n});
        for (std::size_t r = 0; r < n; ++r) wadv[r] = w * adv[r];
        Tape::Ref adv_node = tape.constant(std::move(wadv));
        Tape::Ref term = tape.min_elem(tape.mul(ratio, adv_node),
                                       tape.mul(tape.clamp(ratio, 1.0 - eps, 1.0 + eps), adv_node));
        Tape::Ref step_loss = tape.scale(tape.sum(term), -1.0 / static_cast<double>(n));
        total = (total == Tape::kNone) ? step_loss : tape.add(total, step_loss);
    }
    return total;
}

// Bi-level PPO update on a minibatch of on-policy chunks. Advantages come
// from a learned value net; per-denoising-step terms carry the denoising
// discount gamma_denoise^(steps-to-action), downweighting early noisy steps.
inline UpdateMetrics dppo_update(FlowPolicy& policy, std::vector<OnPolicyChunk*>& batch,
                                 Mlp& value_net, OptimState& value_optim, OptimState& actor_optim,
                                 double value_lr, double actor_lr, double gamma_denoise,
                                 double eps) {
    if (batch.empty()) throw std::invalid_argument("dppo_update: empty batch");
    const std::size_t n = batch.size();

    Tensor vin({n, value_net.input_dim()});
    Tensor vtarget({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor& s = batch[i]->traj.state;
        for (std::size_t c = 0; c < s.size(); ++c) vin.at(i, c) = s[c];
        vtarget[i] = batch[i]->return_to_go;
    }
    // advantages from the pre-update value prediction
    Tensor vpred = value_net.forward(vin);
    Tensor adv({n});
    for (std::size_t i = 0; i < n; ++i) adv[i] = batch[i]->return_to_go - vpred[i];

    // value regression toward return-to-go
    double value_loss;
    {
        Tape tape;
        Tape::Ref v = value_net.forward(tape, tape.constant(vin));
        Tape::Ref loss = tape.mean(tape.square(tape.sub(v, tape.constant(vtarget))));
        value_loss = tape.scalar_value(loss);
        tape.backward(loss);
        auto grads = detail::collect_grads(tape, value_net.params());
        adam_update(detail::param_ptrs(value_net.params()), grads, value_optim, value_lr);
    }

    UpdateMetrics m;
    m.aux_loss = value_loss;

    std::vector<const DenoisingTrajectory*> trajs;
    trajs.reserve(n);
    for (auto* c : batch) trajs.push_back(&c->traj);
    Tape tape;
    Tape::Ref total = dppo_actor_loss_node(tape, policy, trajs, adv, gamma_denoise, eps);
    m.loss = tape.scalar_value(total);
    if (!std::isfinite(m.loss)) throw NonFiniteError("dppo_update: non-finite loss");
    tape.backward(total);
    auto grads = detail::collect_grads(tape, policy.velocity_net.params());
    m.grad_norm = detail::grad_l2_norm(grads);
    adam_update(detail::param_ptrs(policy.velocity_net.params()), grads, actor_optim, actor_lr);
    return m;
}

// --- QC+ ------------------------------------------------------------------

// Policy side of Q-chunking: flow-matching behavior cloning on buffered
// pairs, optionally restricted to the success buffer.
inline UpdateMetrics qc_update(FlowPolicy& policy, const RolloutBuffer& roll,
                               const SuccessBuffer& succ, bool success_only, int batch_size,
                               OptimState& optim, double lr, Rng& rng) {
    UpdateMetrics m;
    std::vector<const Tensor*> states, actions;
    if (success_only) {
        if (succ.empty()) return m;  // nothing successful yet: no-op update
        for (int i = 0; i < batch_size; ++i) {
            const auto& e = succ[rng.below(succ.size())];
            states.push_back(&e.s);
            actions.push_back(&e.a);
        }
    } else {
        if (roll.empty()) return m;
        for (int i = 0; i < batch_size; ++i) {
            const auto& tr = roll[rng.below(roll.size())];
            states.push_back(&tr.s);
            actions.push_back(&tr.a);
        }
    }
    Tape tape;
    Tape::Ref loss = flow_matching_loss(tape, policy, states, actions, rng);
    m.loss = tape.scalar_value(loss);
    if (!std::isfinite(m.loss)) throw NonFiniteError("qc_update: non-finite loss");
    tape.backward(loss);
    auto grads = detail::collect_grads(tape, policy.velocity_net.params());
    m.grad_norm = detail::grad_l2_norm(grads);
    adam_update(detail::param_ptrs(policy.velocity_net.params()), grads, optim, lr);
    return m;
}

// --- DSRL-lite -------------------------------------------------------------

// Latent transitions (s, w, r, s') live in their own buffer; the latent critic
// is a CriticEnsemble over (s, w). Reparameterized ascent on the ensemble-mean
// value plus an entropy bonus (Gaussian entropy up to a constant).
inline Tape::Ref dsrl_actor_loss_node(Tape& tape, const LatentPolicy& latent,
                                      const CriticEnsemble& wcritic,
                                      const std::vector<const Tensor*>& states,
                                      double entropy_bonus, Rng& rng) {
    const std::size_t n = states.size();
    if (n == 0) throw std::invalid_argument("dsrl actor loss: empty batch");
    const std::size_t L = latent.latent_dim;
    Tensor sin({n, latent.obs_dim});
    Tensor xi({n, L});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < latent.obs_dim; ++c) sin.at(r, c) = (*states[r])[c];
        for (std::size_t c = 0; c < L; ++c) xi.at(r, c) = rng.normal();
    }
    Tape::Ref sref = tape.constant(sin);
    auto head = detail::gaussian_head(tape, latent.head, sref, L);
    Tape::Ref w = tape.add(head.mean, tape.mul(tape.exp_op(head.logstd), tape.constant(xi)));
    Tape::Ref qin = tape.concat_cols({sref, w});
    Tape::Ref qsum = Tape::kNone;
    for (const auto& net : wcritic.online) {
        Tape::Ref q = net.forward(tape, qin);
        qsum = (qsum == Tape::kNone) ? q : tape.add(qsum, q);
    }
    Tape::Ref qmean = tape.scale(tape.mean(qsum), 1.0 / static_cast<double>(wcritic.members()));
    Tape::Ref entropy = tape.scale(tape.sum(head.logstd), 1.0 / static_cast<double>(n));
    return tape.sub(tape.scale(qmean, -1.0), tape.scale(entropy, entropy_bonus));
}

inline UpdateMetrics dsrl_actor_update(LatentPolicy& latent, const CriticEnsemble& wcritic,
                                       const std::vector<const Tensor*>& states,
                                       double entropy_bonus, OptimState& optim, double lr,
                                       Rng& rng) {
    Tape tape;
    Tape::Ref loss = dsrl_actor_loss_node(tape, latent, wcritic, states, entropy_bonus, rng);
    UpdateMetrics m;
    m.loss = tape.scalar_value(loss);
    if (!std::isfinite(m.loss)) throw NonFiniteError("dsrl_actor_update: non-finite loss");
    tape.backward(loss);
    auto grads = detail::collect_grads(tape, latent.head.params());
    m.grad_norm = detail::grad_l2_norm(grads);
    adam_update(detail::param_ptrs(latent.head.params()), grads, optim, lr);
    return m;
}

// --- EXPO-lite -------------------------------------------------------------

// On-the-fly selection: the better of {base action, edited action} under the
// target critics (mean aggregation); ties prefer the base action.
inline Tensor expo_otf_action(const EditPolicy& edit, const CriticEnsemble& critic,
                              const Tensor& s, const Tensor& a_base, Rng& rng, bool* picked_edit) {
    Tensor delta = edit.sample_delta(s, a_base, rng);
    Tensor a_edit(a_base.shape());
    for (std::size_t i = 0; i < a_edit.size(); ++i) a_edit[i] = a_base[i] + delta[i];
    Rng agg_rng = rng.stream(17);
    const double qb = aggregate_target(q_eval(critic, s, a_base, true), QAgg::Mean, agg_rng);
    const double qe = aggregate_target(q_eval(critic, s, a_edit, true), QAgg::Mean, agg_rng);
    const bool take_edit = qe > qb;
    if (picked_edit != nullptr) *picked_edit = take_edit;
    return take_edit ? a_edit : a_base;
}

// Reparameterized edit objective: maximize Q(s, a + delta) with an entropy
// bonus; log pi uses the tanh-squashed Gaussian density at the sampled point.
inline Tape::Ref expo_actor_loss_node(Tape& tape, const EditPolicy& edit,
                                      const CriticEnsemble& critic,
                                      const std::vector<const ChunkTransition*>& batch,
                                      double entropy_bonus, Rng& rng) {
    const std::size_t n = batch.size();
    if (n == 0) throw std::invalid_argument("expo actor loss: empty batch");
    const std::size_t da = edit.action_dim;
    Tensor ein({n, edit.obs_dim + da});
    Tensor sin({n, edit.obs_dim});
    Tensor abase({n, da});
    Tensor xi({n, da});
    for (std::size_t r = 0; r < n; ++r) {
        const ChunkTransition& tr = *batch[r];
        for (std::size_t c = 0; c < edit.obs_dim; ++c) {
            ein.at(r, c) = tr.s[c];
            sin.at(r, c) = tr.s[c];
        }
        for (std::size_t c = 0; c < da; ++c) {
            ein.at(r, edit.obs_dim + c) = tr.a[c];
            abase.at(r, c) = tr.a[c];
        }
        for (std::size_t c = 0; c < da; ++c) xi.at(r, c) = rng.normal();
    }
    auto head = detail::gaussian_head(tape, edit.head, tape.constant(ein), da);
    Tape::Ref u = tape.add(head.mean, tape.mul(tape.exp_op(head.logstd), tape.constant(xi)));
    Tape::Ref tanh_u = tape.tanh_op(u);
    Tape::Ref delta = tape.scale(tanh_u, edit.edit_scale);
    Tape::Ref a_new = tape.add(tape.constant(abase), delta);
    Tape::Ref qin = tape.concat_cols({tape.constant(sin), a_new});
    Tape::Ref qsum = Tape::kNone;
    for (const auto& net : critic.online) {
        Tape::Ref q = net.forward(tape, qin);
        qsum = (qsum == Tape::kNone) ? q : tape.add(qsum, q);
    }
    Tape::Ref qmean = tape.scale(tape.mean(qsum), 1.0 / static_cast<double>(critic.members()));
    // -sum(logstd) - 0.5 ||xi||^2 - sum log(1 - tanh(u)^2) - d log(scale) + const
    Tape::Ref log_det = tape.log_op(
        tape.clamp_min(tape.add_scalar(tape.neg(tape.square(tanh_u)), 1.0), 1e-12));
    double xi_term = 0.0;
    for (std::size_t i = 0; i < xi.size(); ++i) xi_term += xi[i] * xi[i];
    const double log_const = -0.5 * xi_term / static_cast<double>(n) -
                             0.5 * static_cast<double>(da) * std::log(kTwoPi) -
                             static_cast<double>(da) * std::log(edit.edit_scale);
    Tape::Ref log_pi =
        tape.add_scalar(tape.scale(tape.add(tape.sum(head.logstd), tape.sum(log_det)),
                                   -1.0 / static_cast<double>(n)),
                        log_const);
    return tape.add(tape.scale(qmean, -1.0), tape.scale(log_pi, entropy_bonus));
}

inline UpdateMetrics expo_actor_update(EditPolicy& edit, const CriticEnsemble& critic,
                                       const std::vector<const ChunkTransition*>& batch,
                                       double entropy_bonus, OptimState& optim, double lr,
                                       Rng& rng) {
    Tape tape;
    Tape::Ref loss = expo_actor_loss_node(tape, edit, critic, batch, entropy_bonus, rng);
    UpdateMetrics m;
    m.loss = tape.scalar_value(loss);
    if (!std::isfinite(m.loss)) throw NonFiniteError("expo_actor_update: non-finite loss");
    tape.backward(loss);
    auto grads = detail::collect_grads(tape, edit.head.params());
    m.grad_norm = detail::grad_l2_norm(grads);
    adam_update(detail::param_ptrs(edit.head.params()), grads, optim, lr);
    return m;
}

// --- BPTT ablation -----------------------------------------------------------

// Reparameterized ascent on the target critics straight through the K-step
// chain. Gradients flow through every velocity call, the frozen denoiser
// head, and the critic input.
inline Tape::Ref bptt_loss_node(Tape& tape, const FlowPolicy& p, const CriticEnsemble& critic,
                                const std::vector<const Tensor*>& states, Rng& rng) {
    const std::size_t n = states.size();
    if (n == 0) throw std::invalid_argument("bptt loss: empty batch");
    const std::size_t da = p.action_dim;
    const double dt = 1.0 / static_cast<double>(p.K);
    Tensor sin({n, p.obs_dim});
    Tensor a0({n, da});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < p.obs_dim; ++c) sin.at(r, c) = (*states[r])[c];
        for (std::size_t c = 0; c < da; ++c) a0.at(r, c) = rng.normal();
    }
    Tape::Ref sref = tape.constant(sin);
    Tape::Ref a = tape.constant(a0);
    for (int k = p.K; k >= 1; --k) {
        const double tau = p.tau_of(k);
        const double sig = p.sigma(k);
        if (sig <= 0.0) throw std::invalid_argument("bptt loss: sigma must be positive");
        Tensor emb({n, kTimeEmbedDim});
        Tensor noise({n, da});
        for (std::size_t r = 0; r < n; ++r) {
            time_embedding(tau, emb.data() + r * kTimeEmbedDim);
            for (std::size_t c = 0; c < da; ++c) noise.at(r, c) = sig * rng.normal();
        }
        Tape::Ref x = tape.concat_cols({a, sref, tape.constant(std::move(emb))});
        Tape::Ref v = p.velocity_net.forward(tape, x);
        Tape::Ref mean = tape.add(a, tape.scale(v, dt));
        if (p.correct) {
            Tape::Ref z = p.denoiser_net.forward(tape, x);
            mean = tape.sub(mean, tape.scale(z, 0.5 * sig));
        }
        a = tape.add(mean, tape.constant(std::move(noise)));
    }
    Tape::Ref qin = tape.concat_cols({sref, a});
    Tape::Ref qsum = Tape::kNone;
    for (const auto& net : critic.targets) {
        Tape::Ref q = net.forward(tape, qin);
        qsum = (qsum == Tape::kNone) ? q : tape.add(qsum, q);
    }
    return tape.scale(tape.mean(qsum), -1.0 / static_cast<double>(critic.members()));
}

inline UpdateMetrics bptt_update(FlowPolicy& policy, const CriticEnsemble& critic,
                                 const std::vector<const Tensor*>& states, OptimState& optim,
                                 double lr, Rng& rng) {
    Tape tape;
    Tape::Ref loss = bptt_loss_node(tape, policy, critic, states, rng);
    UpdateMetrics m;
    m.loss = tape.scalar_value(loss);
    if (!std::isfinite(m.loss)) throw NonFiniteError("bptt_update: non-finite loss");
    tape.backward(loss);
    auto grads = detail::collect_grads(tape, policy.velocity_net.params());
    m.grad_norm = detail::grad_l2_norm(grads);
    adam_update(detail::param_ptrs(policy.velocity_net.params()), grads, optim, lr);
    return m;
}

}  // namespace ogpo
