#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "ogpo/baselines.hpp"
#include "ogpo/critic.hpp"
#include "ogpo/extraction.hpp"
#include "ogpo/flow.hpp"
#include "ogpo/mlp.hpp"
#include "ogpo/replay.hpp"

namespace ogpo {

// 1-D Gaussian toy with closed-form velocity and score: source N(0,1) at
// tau=0, target N(mu*, var*) at tau=1 under the linear interpolant. Satisfies
// the sampler drift interface, so the marginal oracle exercises the real
// sample_ode / sample_sde code paths.
struct GaussianToyPolicy {
    double mu_star = 1.0;
    double var_star = 0.25;
    int K = 256;
    double sigma_value = 0.01;
    bool correct = true;
    std::size_t action_dim = 1;

    double sigma(int k) const {
        (void)k;
        return sigma_value;
    }
    double tau_of(int k) const { return static_cast<double>(K - k) / static_cast<double>(K); }

    double marginal_mean(double tau) const { return tau * mu_star; }
    double marginal_var(double tau) const {
        return tau * tau * var_star + (1.0 - tau) * (1.0 - tau);
    }

    // v(x,tau) = mu* + c(tau) (x - m(tau)), c = (tau var* - (1-tau)) / s^2
    Tensor velocity_at(const Tensor& a, double tau, const Tensor& s) const {
        (void)s;
        const double m = marginal_mean(tau);
        const double s2 = marginal_var(tau);
        const double c = (tau * var_star - (1.0 - tau)) / s2;
        return Tensor::vector({mu_star + c * (a[0] - m)});
    }

    // The trained denoiser converges to -sigma * score.
    Tensor zhat_at(const Tensor& a, double tau, const Tensor& s) const {
        (void)s;
        return Tensor::vector({-sigma_value * score(a[0], tau)});
    }

    double score(double x, double tau) const {
        return -(x - marginal_mean(tau)) / marginal_var(tau);
    }
};

struct MomentEstimate {
    double mean = 0.0;
    double var = 0.0;
};

inline MomentEstimate sample_moments(const std::vector<double>& xs) {
    MomentEstimate m;
    const double n = static_cast<double>(xs.size());
    for (double x : xs) m.mean += x;
    m.mean /= n;
    for (double x : xs) m.var += (x - m.mean) * (x - m.mean);
    m.var /= (n - 1.0);
    return m;
}

struct MarginalCheckResult {
    MomentEstimate ode, corrected, uncorrected;
    double analytic_mean = 1.0;
    double analytic_var = 0.25;
    double se_mean = 0.0;
    double se_var = 0.0;
    bool corrected_mean_ok = false;
    bool corrected_var_ok = false;
    bool uncorrected_var_detected = false;
    bool pass = false;
};

// Desk-scale reproduction of the ODE-to-SDE correction ablation: with the
// analytic drift and score, the corrected SDE keeps the ODE marginals while
// the naive noise injection inflates the terminal variance.
inline MarginalCheckResult marginal_check(std::size_t n_samples = 100000, int K = 256,
                                          double sigma = 0.01, std::uint64_t seed = 1) {
    GaussianToyPolicy toy;
    toy.K = K;
    toy.sigma_value = sigma;
    Tensor s({1});  // unused state slot
    std::vector<double> ode_x, corr_x, unc_x;
    ode_x.reserve(n_samples);
    corr_x.reserve(n_samples);
    unc_x.reserve(n_samples);
    Rng rng_ode(mix64(seed, 1)), rng_corr(mix64(seed, 2)), rng_unc(mix64(seed, 3));
    for (std::size_t i = 0; i < n_samples; ++i) {
        ode_x.push_back(sample_ode(toy, s, rng_ode)[0]);
        corr_x.push_back(sample_sde(toy, s, rng_corr, true, true).final_action()[0]);
        unc_x.push_back(sample_sde(toy, s, rng_unc, false, true).final_action()[0]);
    }
    MarginalCheckResult r;
    r.ode = sample_moments(ode_x);
    r.corrected = sample_moments(corr_x);
    r.uncorrected = sample_moments(unc_x);
    r.analytic_mean = toy.mu_star;
    r.analytic_var = toy.var_star;
    const double n = static_cast<double>(n_samples);
    r.se_mean = std::sqrt(toy.var_star / n);
    r.se_var = toy.var_star * std::sqrt(2.0 / (n - 1.0));
    r.corrected_mean_ok = std::fabs(r.corrected.mean - r.analytic_mean) < 3.0 * r.se_mean;
    r.corrected_var_ok = std::fabs(r.corrected.var - r.analytic_var) < 3.0 * r.se_var;
    r.uncorrected_var_detected = (r.uncorrected.var - r.analytic_var) > 5.0 * r.se_var;
    r.pass = r.corrected_mean_ok && r.corrected_var_ok && r.uncorrected_var_detected;
    return r;
}

// Constant-velocity flow policy: zero-weight net with the given output bias.
inline FlowPolicy make_constant_flow_policy(std::size_t obs_dim, std::size_t action_dim, int K,
                                            double sigma, double bias, std::uint64_t seed) {
    Rng rng(seed);
    FlowPolicy p = FlowPolicy::make(obs_dim, action_dim, {}, Activation::Tanh, K, sigma,
                                    /*correct=*/false, rng);
    p.velocity_net.zero_params();
    p.denoiser_net.zero_params();
    for (std::size_t i = 0; i < p.velocity_net.bias(0).size(); ++i) {
        p.velocity_net.bias(0)[i] = bias;
    }
    return p;
}

struct Chi2CheckResult {
    double estimate = 0.0;
    double se = 0.0;
    double expected = 0.0;
    bool pass = false;
};

// Monte-Carlo E_theta[omega(theta||ref)] for K=1 Gaussian policies with mean
// shift d: equals 1 + chi^2 = exp(d^2/sigma^2).
inline Chi2CheckResult chi2_check(std::size_t n_draws = 1000000, double d = 0.01,
                                  double sigma = 0.01, std::uint64_t seed = 7) {
    FlowPolicy theta = make_constant_flow_policy(1, 1, 1, sigma, d, 11);
    FlowPolicy ref = make_constant_flow_policy(1, 1, 1, sigma, 0.0, 11);
    Tensor s = Tensor::vector({0.0});
    Rng rng(mix64(seed, 42));
    double sum = 0.0, sumsq = 0.0;
    for (std::size_t i = 0; i < n_draws; ++i) {
        DenoisingTrajectory t = sample_sde(theta, s, rng);
        const double w = chain_ratio(theta, ref, t);
        sum += w;
        sumsq += w * w;
    }
    Chi2CheckResult r;
    const double n = static_cast<double>(n_draws);
    r.estimate = sum / n;
    const double var = sumsq / n - r.estimate * r.estimate;
    r.se = std::sqrt(var / n);
    r.expected = std::exp(d * d / (sigma * sigma));
    r.pass = std::fabs(r.estimate - r.expected) < 3.0 * r.se;
    return r;
}

struct TdCheckResult {
    double q_s0 = 0.0;
    double q_s1 = 0.0;
    double expected_q_s0 = -1.9;
    double expected_q_s1 = -1.0;
    long updates = 0;
    bool pass = false;
};

// Bellman fixed point on the 3-state deterministic chain s0 -> s1 -> terminal
// with r = -1 per step and gamma = 0.9, h = 1: Q(s0) = -1.9, Q(s1) = -1.
inline TdCheckResult td_check(long max_updates = 20000, std::uint64_t seed = 3) {
    Rng rng(seed);
    CriticEnsemble ens = CriticEnsemble::make(1, 1, 2, {32}, Activation::Tanh, 0.0,
                                              Scheduler::Constant, 0, 0, 0.0, QAgg::Mean, rng);
    ChunkTransition t0, t1;
    t0.s = Tensor::vector({0.0});
    t0.a = Tensor::vector({0.0});
    t0.rewards = {-1.0};
    t0.s_next = Tensor::vector({1.0});
    t0.done = false;
    t0.episode_id = 0;
    t0.executed_primitives = 1;
    t1.s = Tensor::vector({1.0});
    t1.a = Tensor::vector({0.0});
    t1.rewards = {-1.0};
    t1.s_next = Tensor::vector({2.0});
    t1.done = true;
    t1.episode_id = 0;
    t1.executed_primitives = 1;
    TdBatch batch;
    batch.transitions = {&t0, &t1};
    batch.bootstrap_actions = {{Tensor::vector({0.0})}, {}};

    TdCheckResult r;
    const double tol = 1e-3;
    for (long u = 1; u <= max_updates; ++u) {
        std::vector<double> ys = td_targets(ens, batch, 0.9, 1, rng);
        td_update(ens, batch, ys, 1e-3);
        for (std::size_t m = 0; m < ens.members(); ++m) {
            ema_update(ens.targets[m].params(), ens.online[m].params(), 0.05);
        }
        r.updates = u;
        if (u % 100 == 0) {
            Rng agg(0);
            r.q_s0 = aggregate_target(q_eval(ens, t0.s, t0.a, false), QAgg::Mean, agg);
            r.q_s1 = aggregate_target(q_eval(ens, t1.s, t1.a, false), QAgg::Mean, agg);
            if (std::fabs(r.q_s0 - r.expected_q_s0) < tol &&
                std::fabs(r.q_s1 - r.expected_q_s1) < tol) {
                r.pass = true;
                return r;
            }
        }
    }
    return r;
}

// --- gradient suite ------------------------------------------------------------

struct GradCheckCase {
    std::string name;
    double worst_rel_err = 0.0;
    bool pass = false;
};

namespace detail {

inline double grad_rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double na = 0.0, nb = 0.0, nd = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].size(); ++j) {
            na += a[i][j] * a[i][j];
            nb += b[i][j] * b[i][j];
            const double d = a[i][j] - b[i][j];
            nd += d * d;
        }
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
    return std::sqrt(nd) / denom;
}

// Re-randomize a parameter set in-place.
inline void shake_params(std::vector<Tensor*>& params, Rng& rng, double scale) {
    for (Tensor* p : params) {
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = rng.normal(0.0, scale);
    }
}

}  // namespace detail

// One loss head to check: `setup(i)` randomizes the scenario for point i,
// `loss(grads)` evaluates the head (filling tape gradients of `params` when
// grads != nullptr). The evaluation must be deterministic between calls.
struct GradHead {
    std::string name;
    std::function<void(int)> setup;
    std::function<double(std::vector<Tensor>*)> loss;
    std::vector<Tensor*> params;
};

// Compares tape gradients against central finite differences (step 1e-5) in
// vector norm at `points` random parameter settings.
inline GradCheckCase run_grad_head(GradHead& head, int points) {
    GradCheckCase c;
    c.name = head.name;
    c.pass = true;
    for (int pt = 0; pt < points; ++pt) {
        head.setup(pt);
        std::vector<Tensor> tape_grads;
        head.loss(&tape_grads);
        auto fd = finite_diff_grad([&]() { return head.loss(nullptr); }, head.params, 1e-5);
        const double rel = detail::grad_rel_err(tape_grads, fd);
        c.worst_rel_err = std::max(c.worst_rel_err, rel);
        if (!(rel < 1e-4)) c.pass = false;
    }
    return c;
}

// Small shared fixture for the gradient suite: tiny policy, critic, and a
// couple of sampled groups at each point.
struct GradSuite {
    static constexpr std::size_t kObs = 3;
    static constexpr std::size_t kDa = 4;
    static constexpr int kK = 3;
    static constexpr double kSigma = 0.05;

    Rng rng{12345};
    FlowPolicy theta = FlowPolicy::make(kObs, kDa, {8}, Activation::Tanh, kK, kSigma, true, rng);
    FlowPolicy ema = theta;
    FlowPolicy slow = theta;
    CriticEnsemble critic = CriticEnsemble::make(kObs, kDa, 2, {8}, Activation::Tanh, 0.0,
                                                 Scheduler::Constant, 0, 0, 0.0, QAgg::Mean, rng);
    std::vector<GroupSample> groups;
    std::vector<AdvantageBatch> advs;
    SuccessBuffer succ;
    std::vector<ChunkTransition> trans;
    std::vector<const Tensor*> state_ptrs;
    std::vector<Tensor> states;

    std::vector<Tensor*> velocity_params() {
        std::vector<Tensor*> ps;
        for (auto& p : theta.velocity_net.params()) ps.push_back(&p);
        return ps;
    }
    std::vector<Tensor*> denoiser_params() {
        std::vector<Tensor*> ps;
        for (auto& p : theta.denoiser_net.params()) ps.push_back(&p);
        return ps;
    }

    void randomize_nets(Rng& r, double scale) {
        for (auto* net : {&theta.velocity_net, &theta.denoiser_net, &ema.velocity_net,
                          &ema.denoiser_net, &slow.velocity_net, &slow.denoiser_net}) {
            for (auto& p : net->params()) {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] = r.normal(0.0, scale);
            }
        }
        for (std::size_t m = 0; m < critic.members(); ++m) {
            for (auto* net : {&critic.online[m], &critic.targets[m]}) {
                for (auto& p : net->params()) {
                    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r.normal(0.0, scale);
                }
            }
        }
    }

    // theta close to the references so chain ratios stay well-scaled.
    void set_theta_near_refs(Rng& r, double jitter) {
        ema.copy_params_from(theta);
        slow.copy_params_from(theta);
        for (auto& p : theta.velocity_net.params()) {
            for (std::size_t i = 0; i < p.size(); ++i) p[i] += r.normal(0.0, jitter);
        }
    }

    void rebuild_scene(int point) {
        Rng r(mix64(777, static_cast<std::uint64_t>(point)));
        randomize_nets(r, 0.3);
        set_theta_near_refs(r, 5e-3);
        states.clear();
        groups.clear();
        advs.clear();
        for (int i = 0; i < 2; ++i) {
            Tensor s({kObs});
            for (std::size_t c = 0; c < kObs; ++c) s[c] = r.normal();
            states.push_back(std::move(s));
        }
        for (int i = 0; i < 2; ++i) {
            Rng gr(mix64(888, static_cast<std::uint64_t>(point * 10 + i)));
            groups.push_back(sample_group(ema, critic, states[static_cast<std::size_t>(i)], 3, gr));
            advs.push_back(mean_baseline_adv(groups.back()));
        }
        succ = SuccessBuffer{};
        trans.clear();
        state_ptrs.clear();
        for (int i = 0; i < 3; ++i) {
            Tensor s({kObs}), a({kDa});
            for (std::size_t c = 0; c < kObs; ++c) s[c] = r.normal();
            for (std::size_t c = 0; c < kDa; ++c) a[c] = r.normal();
            succ.add(s, a, i);
            ChunkTransition tr;
            tr.s = s;
            tr.a = a;
            tr.rewards = {-1.0};
            tr.s_next = s;
            tr.episode_id = i;
            trans.push_back(std::move(tr));
        }
        for (const auto& t : trans) state_ptrs.push_back(&t.s);
    }
};

// The full gradient suite over every differentiable loss head.
inline std::vector<GradCheckCase> run_gradient_suite(int points = 10) {
    auto fixture = std::make_shared<GradSuite>();
    GradSuite& fx = *fixture;
    LatentPolicy latent = LatentPolicy::make(GradSuite::kObs, GradSuite::kDa, {8},
                                             Activation::Tanh, fx.rng);
    EditPolicy edit =
        EditPolicy::make(GradSuite::kObs, GradSuite::kDa, {8}, Activation::Tanh, 0.5, fx.rng);

    auto grads_for = [](Tape& tape, std::vector<Tensor*>& params, std::vector<Tensor>* out) {
        if (out == nullptr) return;
        out->clear();
        for (Tensor* p : params) {
            out->push_back(tape.has_param(*p) ? tape.grad_of(*p) : Tensor(p->shape()));
        }
    };

    std::vector<GradHead> heads;

    {
        GradHead h;
        h.name = "flow-matching";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(4242);
            std::vector<const Tensor*> ss, as;
            for (const auto& t : fx.trans) {
                ss.push_back(&t.s);
                as.push_back(&t.a);
            }
            Tape tape;
            Tape::Ref loss = flow_matching_loss(tape, fx.theta, ss, as, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "denoiser";
        h.params = fx.denoiser_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(4243);
            std::vector<const Tensor*> ss, as;
            for (const auto& t : fx.trans) {
                ss.push_back(&t.s);
                as.push_back(&t.a);
            }
            Tape tape;
            Tape::Ref loss = denoiser_loss(tape, fx.theta, ss, as, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.denoiser_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "td";
        for (auto& p : fx.critic.online[0].params()) h.params.push_back(&p);
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            TdBatch batch;
            for (const auto& t : fx.trans) batch.transitions.push_back(&t);
            Tensor inputs = td_inputs(fx.critic, batch);
            Tensor y({batch.transitions.size(), 1});
            for (std::size_t i = 0; i < batch.transitions.size(); ++i) {
                y[i] = -1.0 - 0.1 * static_cast<double>(i);
            }
            Tape tape;
            Tape::Ref loss = td_member_loss_node(tape, fx.critic.online[0], inputs, y);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                std::vector<Tensor*> ps;
                for (auto& p : fx.critic.online[0].params()) ps.push_back(&p);
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "ppo";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Tape tape;
            Tape::Ref loss = ppo_loss(tape, fx.groups, fx.advs, fx.theta, fx.ema, 0.05, false);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "ppo-chi2";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            std::vector<AdvantageBatch> advs;
            for (const auto& g : fx.groups) {
                advs.push_back(chi2_adv(g, fx.theta, fx.ema, fx.slow, 0.5, 10.0));
            }
            Tape tape;
            Tape::Ref loss =
                ppo_loss(tape, fx.groups, advs, fx.theta, fx.ema, 0.05, false, &fx.slow);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "bc-success";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(555);
            Tape tape;
            Tape::Ref loss = bc_success_loss(tape, fx.theta, fx.succ, 3, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "awr";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(556);
            Tape tape;
            Tape::Ref loss = awr_loss(tape, fx.theta, fx.groups, fx.advs, 1.0, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "aw-ogpo";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Tape tape;
            Tape::Ref loss = aw_ogpo_loss(tape, fx.theta, fx.ema, fx.groups, fx.advs, 1.0, false);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "aspo";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(557);
            Tape tape;
            Tape::Ref loss =
                fpo_aspo_loss(tape, fx.theta, fx.ema, fx.groups, fx.advs, 0.05, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "bptt";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(558);
            Tape tape;
            std::vector<const Tensor*> ss;
            for (const auto& s : fx.states) ss.push_back(&s);
            Tape::Ref loss = bptt_loss_node(tape, fx.theta, fx.critic, ss, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "dsrl-actor";
        for (auto& p : latent.head.params()) h.params.push_back(&p);
        h.setup = [&fx, &latent](int pt) {
            fx.rebuild_scene(pt);
            Rng r(mix64(999, static_cast<std::uint64_t>(pt)));
            for (auto& p : latent.head.params()) {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] = r.normal(0.0, 0.3);
            }
        };
        h.loss = [&fx, &latent, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(559);
            Tape tape;
            std::vector<const Tensor*> ss;
            for (const auto& s : fx.states) ss.push_back(&s);
            Tape::Ref loss = dsrl_actor_loss_node(tape, latent, fx.critic, ss, 1e-3, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                std::vector<Tensor*> ps;
                for (auto& p : latent.head.params()) ps.push_back(&p);
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "expo-actor";
        for (auto& p : edit.head.params()) h.params.push_back(&p);
        h.setup = [&fx, &edit](int pt) {
            fx.rebuild_scene(pt);
            Rng r(mix64(1001, static_cast<std::uint64_t>(pt)));
            for (auto& p : edit.head.params()) {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] = r.normal(0.0, 0.3);
            }
        };
        h.loss = [&fx, &edit, grads_for](std::vector<Tensor>* out) mutable {
            Rng r(560);
            Tape tape;
            std::vector<const ChunkTransition*> batch;
            for (const auto& t : fx.trans) batch.push_back(&t);
            Tape::Ref loss = expo_actor_loss_node(tape, edit, fx.critic, batch, 1e-3, r);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                std::vector<Tensor*> ps;
                for (auto& p : edit.head.params()) ps.push_back(&p);
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }
    {
        GradHead h;
        h.name = "dppo";
        h.params = fx.velocity_params();
        h.setup = [&fx](int pt) { fx.rebuild_scene(pt); };
        h.loss = [&fx, grads_for](std::vector<Tensor>* out) mutable {
            std::vector<const DenoisingTrajectory*> trajs;
            for (const auto& t : fx.groups[0].trajs) trajs.push_back(&t);
            Tensor adv({trajs.size()});
            for (std::size_t i = 0; i < trajs.size(); ++i) adv[i] = fx.advs[0].values[i];
            Tape tape;
            Tape::Ref loss = dppo_actor_loss_node(tape, fx.theta, trajs, adv, 0.9, 0.05);
            const double v = tape.scalar_value(loss);
            if (out != nullptr) {
                tape.backward(loss);
                auto ps = fx.velocity_params();
                grads_for(tape, ps, out);
            }
            return v;
        };
        heads.push_back(std::move(h));
    }

    std::vector<GradCheckCase> results;
    for (auto& h : heads) results.push_back(run_grad_head(h, points));
    return results;
}

}  // namespace ogpo
