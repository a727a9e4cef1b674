#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ogpo/autodiff.hpp"
#include "ogpo/critic.hpp"
#include "ogpo/flow.hpp"
#include "ogpo/replay.hpp"
#include "ogpo/rng.hpp"

namespace ogpo {

enum class AdvStrategy { MeanBaseline, Conservative, GrpoStd, Chi2 };

inline const char* to_string(AdvStrategy s) {
    switch (s) {
        case AdvStrategy::MeanBaseline: return "mean-baseline";
        case AdvStrategy::Conservative: return "conservative";
        case AdvStrategy::GrpoStd: return "grpo-std";
        case AdvStrategy::Chi2: return "chi2";
    }
    return "?";
}

inline AdvStrategy adv_strategy_from_string(const std::string& s) {
    if (s == "mean-baseline") return AdvStrategy::MeanBaseline;
    if (s == "conservative") return AdvStrategy::Conservative;
    if (s == "grpo-std") return AdvStrategy::GrpoStd;
    if (s == "chi2") return AdvStrategy::Chi2;
    throw std::invalid_argument("unknown advantage strategy: " + s);
}

// G denoising trajectories from the EMA policy at one state, their per-member
// target-critic values, and the Monte-Carlo value baseline.
struct GroupSample {
    Tensor s;
    std::vector<DenoisingTrajectory> trajs;
    Tensor q_matrix;                 // (G, M), target critics on final actions
    std::vector<double> aggregated;  // per trajectory, configured q_agg
    double v_hat = 0.0;

    std::size_t size() const { return trajs.size(); }
    std::size_t members() const { return q_matrix.cols(); }

    std::vector<double> q_row(std::size_t j) const {
        std::vector<double> row(members());
        for (std::size_t m = 0; m < row.size(); ++m) row[m] = q_matrix.at(j, m);
        return row;
    }
};

inline GroupSample sample_group(const FlowPolicy& policy_ema, const CriticEnsemble& critic,
                                const Tensor& s, std::size_t G, Rng& rng) {
    if (G < 2) throw std::invalid_argument("sample_group: G must be >= 2");
    GroupSample g;
    g.s = s;
    g.trajs = sample_sde_group(policy_ema, s, G, rng);
    Tensor inputs({G, critic.obs_dim + critic.action_dim});
    for (std::size_t j = 0; j < G; ++j) {
        const Tensor& a = g.trajs[j].final_action();
        for (std::size_t c = 0; c < critic.obs_dim; ++c) inputs.at(j, c) = s[c];
        for (std::size_t c = 0; c < critic.action_dim; ++c) {
            inputs.at(j, critic.obs_dim + c) = a[c];
        }
    }
    g.q_matrix = q_eval_batch(critic, inputs, /*use_targets=*/true);
    g.aggregated.resize(G);
    double vsum = 0.0;
    for (std::size_t j = 0; j < G; ++j) {
        g.aggregated[j] = aggregate_target(g.q_row(j), critic.agg, rng);
        vsum += g.aggregated[j];
    }
    g.v_hat = vsum / static_cast<double>(G);
    return g;
}

// Per-group advantages. For the chi2 strategy the penalty -beta*omega_slow is
// re-built on the tape inside ppo_loss so its gradient survives; `base` and
// `betas` carry what that needs, `values` is the current-value snapshot.
struct AdvantageBatch {
    std::vector<double> values;
    std::vector<double> base;
    std::vector<double> betas;
    AdvStrategy strategy = AdvStrategy::MeanBaseline;
};

inline AdvantageBatch mean_baseline_adv(const GroupSample& g) {
    AdvantageBatch b;
    b.strategy = AdvStrategy::MeanBaseline;
    b.values.reserve(g.size());
    for (double q : g.aggregated) b.values.push_back(q - g.v_hat);
    b.base = b.values;
    return b;
}

// Non-zero only under full sign consensus across members, then the least
// magnitude consistent with the sign.
inline AdvantageBatch conservative_adv(const GroupSample& g) {
    const std::size_t G = g.size(), M = g.members();
    std::vector<double> member_mean(M, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t j = 0; j < G; ++j) member_mean[m] += g.q_matrix.at(j, m);
        member_mean[m] /= static_cast<double>(G);
    }
    AdvantageBatch b;
    b.strategy = AdvStrategy::Conservative;
    b.values.reserve(G);
    for (std::size_t j = 0; j < G; ++j) {
        double mn = g.q_matrix.at(j, 0) - member_mean[0];
        double mx = mn;
        for (std::size_t m = 1; m < M; ++m) {
            const double a = g.q_matrix.at(j, m) - member_mean[m];
            mn = std::min(mn, a);
            mx = std::max(mx, a);
        }
        double v = 0.0;
        if (mn > 0.0) v = mn;
        else if (mx < 0.0) v = mx;
        b.values.push_back(v);
    }
    b.base = b.values;
    return b;
}

// Ablation: mean-baseline advantages divided by the group's (population)
// standard deviation of aggregated Q values.
inline AdvantageBatch grpo_std_adv(const GroupSample& g) {
    AdvantageBatch b = mean_baseline_adv(g);
    b.strategy = AdvStrategy::GrpoStd;
    double var = 0.0;
    for (double v : b.values) var += v * v;
    var /= static_cast<double>(b.values.size());
    if (var <= 0.0) throw std::invalid_argument("grpo_std_adv: zero std (degenerate group)");
    const double std = std::sqrt(var);
    for (double& v : b.values) v /= std;
    b.base = b.values;
    return b;
}

inline double population_std(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(v.size()));
}

// Drift-penalized advantages: per-trajectory Q_targ is the pessimism mix
// calibrated by omega(theta||ema), the penalty coefficient scales with the
// ensemble spread, and the omega(theta||slow) term keeps its gradient.
inline AdvantageBatch chi2_adv(const GroupSample& g, const FlowPolicy& policy_theta,
                               const FlowPolicy& policy_ema, const FlowPolicy& policy_slow,
                               double beta_init, double alpha) {
    if (!policy_theta.compatible_with(policy_slow) || !policy_theta.compatible_with(policy_ema)) {
        throw std::invalid_argument("chi2_adv: incompatible K/sigma between policies");
    }
    const std::size_t G = g.size();
    AdvantageBatch b;
    b.strategy = AdvStrategy::Chi2;
    std::vector<double> mixed(G);
    for (std::size_t j = 0; j < G; ++j) {
        const double omega_ema = chain_ratio(policy_theta, policy_ema, g.trajs[j]);
        mixed[j] = pessimism_mix(g.q_row(j), omega_ema, alpha);
    }
    double v_mix = 0.0;
    for (double q : mixed) v_mix += q;
    v_mix /= static_cast<double>(G);
    b.base.reserve(G);
    b.betas.reserve(G);
    b.values.reserve(G);
    for (std::size_t j = 0; j < G; ++j) {
        b.base.push_back(mixed[j] - v_mix);
        b.betas.push_back(beta_init * population_std(g.q_row(j)));
        const double omega_slow = chain_ratio(policy_theta, policy_slow, g.trajs[j]);
        b.values.push_back(b.base[j] - b.betas[j] * omega_slow);
    }
    return b;
}

inline AdvantageBatch compute_advantages(const GroupSample& g, AdvStrategy strategy,
                                         const FlowPolicy& theta, const FlowPolicy& ema,
                                         const FlowPolicy& slow, double beta_init, double alpha) {
    switch (strategy) {
        case AdvStrategy::MeanBaseline: return mean_baseline_adv(g);
        case AdvStrategy::Conservative: return conservative_adv(g);
        case AdvStrategy::GrpoStd: return grpo_std_adv(g);
        case AdvStrategy::Chi2: return chi2_adv(g, theta, ema, slow, beta_init, alpha);
    }
    throw std::logic_error("compute_advantages: bad strategy");
}

namespace detail {

// Flattened (N) constants across groups plus the summed reference log-probs
// recorded at sampling time.
struct FlatGroups {
    std::vector<const DenoisingTrajectory*> trajs;
    Tensor ref_log_prob;
    Tensor adv;
    Tensor mask;  // 1 except no-negative masking
};

inline FlatGroups flatten(const std::vector<GroupSample>& groups,
                          const std::vector<AdvantageBatch>& advs, bool no_negative) {
    if (groups.empty() || advs.size() != groups.size()) {
        throw std::invalid_argument("ppo_loss: group/advantage mismatch");
    }
    std::size_t n = 0;
    for (const auto& g : groups) n += g.size();
    FlatGroups f{{}, Tensor({n}), Tensor({n}), Tensor({n})};
    f.trajs.reserve(n);
    std::size_t idx = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        if (advs[gi].values.size() != groups[gi].size()) {
            throw std::invalid_argument("ppo_loss: advantage count mismatch");
        }
        for (std::size_t j = 0; j < groups[gi].size(); ++j, ++idx) {
            const DenoisingTrajectory& t = groups[gi].trajs[j];
            f.trajs.push_back(&t);
            double lp = 0.0;
            for (double v : t.log_probs) lp += v;
            f.ref_log_prob[idx] = lp;
            f.adv[idx] = advs[gi].values[j];
            f.mask[idx] = (no_negative && advs[gi].values[j] < 0.0) ? 0.0 : 1.0;
        }
    }
    return f;
}

inline Tape::Ref omega_node(Tape& tape, const FlowPolicy& theta, const FlatGroups& f) {
    Tape::Ref lp = chain_log_prob_node(tape, theta, f.trajs);
    return tape.exp_op(tape.sub(lp, tape.constant(f.ref_log_prob)));
}

}  // namespace detail

// Clipped PPO surrogate over denoising trajectories, averaged over all
// (state, trajectory) pairs. Advantages enter as constants; only the chain
// ratio carries actor gradient. For the chi2 strategy the advantage node is
// rebuilt as base - beta * omega(theta||slow) so the drift penalty keeps its
// gradient (policy_slow required then).
inline Tape::Ref ppo_loss(Tape& tape, const std::vector<GroupSample>& groups,
                          const std::vector<AdvantageBatch>& advs, const FlowPolicy& policy_theta,
                          const FlowPolicy& policy_ema, double eps, bool no_negative,
                          const FlowPolicy* policy_slow = nullptr) {
    if (eps <= 0.0) throw std::invalid_argument("ppo_loss: eps must be positive");
    detail::FlatGroups f = detail::flatten(groups, advs, no_negative);
    const std::size_t n = f.trajs.size();
    Tape::Ref omega = detail::omega_node(tape, policy_theta, f);

    Tape::Ref adv_node;
    const bool chi2 = advs[0].strategy == AdvStrategy::Chi2;
    if (chi2) {
        if (policy_slow == nullptr) {
            throw std::invalid_argument("ppo_loss: chi2 advantages need the slow policy");
        }
        Tensor base({n}), betas({n});
        std::size_t idx = 0;
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            for (std::size_t j = 0; j < groups[gi].size(); ++j, ++idx) {
                base[idx] = advs[gi].base[j];
                betas[idx] = advs[gi].betas[j];
            }
        }
        // omega(theta || slow) with the recorded chain; reference log-probs
        // under slow computed as constants.
        Tensor slow_lp({n});
        for (std::size_t i = 0; i < n; ++i) {
            slow_lp[i] = chain_log_prob(*policy_slow, *f.trajs[i]);
        }
        Tape::Ref lp_theta = chain_log_prob_node(tape, policy_theta, f.trajs);
        Tape::Ref omega_slow = tape.exp_op(tape.sub(lp_theta, tape.constant(slow_lp)));
        adv_node = tape.sub(tape.constant(base), tape.mul(tape.constant(betas), omega_slow));
    } else {
        adv_node = tape.constant(f.adv);
    }

    Tape::Ref unclipped = tape.mul(omega, adv_node);
    Tape::Ref clipped = tape.mul(tape.clamp(omega, 1.0 - eps, 1.0 + eps), adv_node);
    Tape::Ref term = tape.min_elem(unclipped, clipped);
    term = tape.mul(term, tape.constant(f.mask));
    return tape.scale(tape.sum(term), -1.0 / static_cast<double>(n));
}

// Flow-matching behavior cloning on the success buffer; zero (with zero
// gradient) while the buffer is empty.
inline Tape::Ref bc_success_loss(Tape& tape, const FlowPolicy& policy_theta,
                                 const SuccessBuffer& succ, std::size_t batch_size, Rng& rng) {
    if (succ.empty()) return tape.constant_scalar(0.0);
    std::vector<const Tensor*> states, actions;
    const std::size_t n = std::max<std::size_t>(batch_size, 1);
    states.reserve(n);
    actions.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& e = succ[rng.below(succ.size())];
        states.push_back(&e.s);
        actions.push_back(&e.a);
    }
    return flow_matching_loss(tape, policy_theta, states, actions, rng);
}

inline Tape::Ref total_loss(Tape& tape, Tape::Ref ppo, Tape::Ref bc, double lambda_bc) {
    return tape.add(ppo, tape.scale(bc, lambda_bc));
}

constexpr double kAwrWeightMax = 20.0;

// Advantage-weighted regression: exponentiated advantages reweight a
// conditional flow-matching pull toward the sampled final actions.
inline Tape::Ref awr_loss(Tape& tape, const FlowPolicy& policy_theta,
                          const std::vector<GroupSample>& groups,
                          const std::vector<AdvantageBatch>& advs, double beta_awr, Rng& rng) {
    if (beta_awr <= 0.0) throw std::invalid_argument("awr_loss: beta must be positive");
    detail::FlatGroups f = detail::flatten(groups, advs, /*no_negative=*/false);
    const std::size_t n = f.trajs.size();
    Tensor weights({n});
    for (std::size_t i = 0; i < n; ++i) {
        weights[i] = std::min(std::exp(f.adv[i] / beta_awr), kAwrWeightMax);
    }
    std::vector<const Tensor*> states, actions;
    states.reserve(n);
    actions.reserve(n);
    for (const auto* t : f.trajs) {
        states.push_back(&t->state);
        actions.push_back(&t->final_action());
    }
    FlowMatchBatch batch = make_flow_match_batch(policy_theta, states, actions, rng);
    Tape::Ref v = policy_theta.velocity_net.forward(tape, tape.constant(batch.inputs));
    Tape::Ref per_row = tape.row_sum(tape.square(tape.sub(v, tape.constant(batch.targets))));
    Tape::Ref weighted = tape.mul(per_row, tape.constant(weights));
    return tape.scale(tape.sum(weighted), 1.0 / static_cast<double>(n));
}

// Advantage-weighted OGPO: exponentiated advantages reweight the unclipped
// chain ratio. positive_only zeroes terms with non-positive advantage.
inline Tape::Ref aw_ogpo_loss(Tape& tape, const FlowPolicy& policy_theta,
                              const FlowPolicy& policy_ema,
                              const std::vector<GroupSample>& groups,
                              const std::vector<AdvantageBatch>& advs, double beta_awr,
                              bool positive_only) {
    (void)policy_ema;
    if (beta_awr <= 0.0) throw std::invalid_argument("aw_ogpo_loss: beta must be positive");
    detail::FlatGroups f = detail::flatten(groups, advs, /*no_negative=*/false);
    const std::size_t n = f.trajs.size();
    Tensor weights({n});
    for (std::size_t i = 0; i < n; ++i) {
        double w = std::min(std::exp(f.adv[i] / beta_awr), kAwrWeightMax);
        if (positive_only && !(f.adv[i] > 0.0)) w = 0.0;
        weights[i] = w;
    }
    Tape::Ref omega = detail::omega_node(tape, policy_theta, f);
    Tape::Ref weighted = tape.mul(omega, tape.constant(weights));
    return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(n));
}

constexpr std::size_t kFpoCfmDraws = 4;

// ASPO on the FPO surrogate ratio r = exp(L_cfm(ema) - L_cfm(theta)) with
// shared (z, tau) draws: clipped PPO term for positive advantages, SPO dead
// zone penalty for negative ones.
inline Tape::Ref fpo_aspo_loss(Tape& tape, const FlowPolicy& policy_theta,
                               const FlowPolicy& policy_ema,
                               const std::vector<GroupSample>& groups,
                               const std::vector<AdvantageBatch>& advs, double eps, Rng& rng) {
    if (eps <= 0.0) throw std::invalid_argument("fpo_aspo_loss: eps must be positive");
    detail::FlatGroups f = detail::flatten(groups, advs, /*no_negative=*/false);
    const std::size_t n = f.trajs.size();

    // Draws shared between theta and ema so the surrogate ratio is comparable.
    std::vector<const Tensor*> states, actions;
    states.reserve(n * kFpoCfmDraws);
    actions.reserve(n * kFpoCfmDraws);
    for (const auto* t : f.trajs) {
        for (std::size_t d = 0; d < kFpoCfmDraws; ++d) {
            states.push_back(&t->state);
            actions.push_back(&t->final_action());
        }
    }
    FlowMatchBatch batch = make_flow_match_batch(policy_theta, states, actions, rng);

    // L_cfm(theta) on the tape: per-trajectory mean over the draws.
    Tape::Ref v = policy_theta.velocity_net.forward(tape, tape.constant(batch.inputs));
    Tape::Ref sq = tape.row_sum(tape.square(tape.sub(v, tape.constant(batch.targets))));
    Tape::Ref per_traj = tape.group_mean(sq, kFpoCfmDraws);

    // L_cfm(ema) on the same draws, as constants.
    Tensor ema_cfm({n});
    {
        Tensor vref = policy_ema.velocity_net.forward(batch.inputs);
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t d = 0; d < kFpoCfmDraws; ++d) {
                const std::size_t r = i * kFpoCfmDraws + d;
                double sqsum = 0.0;
                for (std::size_t c = 0; c < batch.targets.cols(); ++c) {
                    const double diff = vref.at(r, c) - batch.targets.at(r, c);
                    sqsum += diff * diff;
                }
                acc += sqsum;
            }
            ema_cfm[i] = acc / static_cast<double>(kFpoCfmDraws);
        }
    }

    Tape::Ref r_hat = tape.exp_op(tape.sub(tape.constant(ema_cfm), per_traj));

    Tensor adv_pos({n}), adv_neg({n}), neg_coef({n});
    for (std::size_t i = 0; i < n; ++i) {
        const double a = f.adv[i];
        adv_pos[i] = a >= 0.0 ? a : 0.0;
        adv_neg[i] = a < 0.0 ? a : 0.0;
        neg_coef[i] = a < 0.0 ? std::fabs(a) / (4.0 * eps) : 0.0;
    }
    // positive branch: min(r A, clip(r) A)
    Tape::Ref pos_term = tape.min_elem(tape.mul(r_hat, tape.constant(adv_pos)),
                                       tape.mul(tape.clamp(r_hat, 1.0 - eps, 1.0 + eps),
                                                tape.constant(adv_pos)));
    // negative branch: r A - (|A|/(4 eps)) max(0, |r-1| - eps)^2
    Tape::Ref excess = tape.clamp_min(tape.add_scalar(tape.abs_op(tape.add_scalar(r_hat, -1.0)),
                                                      -eps),
                                      0.0);
    Tape::Ref penalty = tape.mul(tape.constant(neg_coef), tape.square(excess));
    Tape::Ref neg_term = tape.sub(tape.mul(r_hat, tape.constant(adv_neg)), penalty);
    Tape::Ref term = tape.add(pos_term, neg_term);
    return tape.scale(tape.sum(term), -1.0 / static_cast<double>(n));
}

}  // namespace ogpo
