#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "ogpo/autodiff.hpp"
#include "ogpo/mlp.hpp"
#include "ogpo/optim.hpp"
#include "ogpo/replay.hpp"
#include "ogpo/rng.hpp"
#include "ogpo/tensor.hpp"

namespace ogpo {

enum class QAgg { Mean, Min, Subsample };

inline const char* to_string(QAgg a) {
    switch (a) {
        case QAgg::Mean: return "mean";
        case QAgg::Min: return "min";
        case QAgg::Subsample: return "subsample";
    }
    return "?";
}

inline QAgg q_agg_from_string(const std::string& s) {
    if (s == "mean") return QAgg::Mean;
    if (s == "min") return QAgg::Min;
    if (s == "subsample") return QAgg::Subsample;
    throw std::invalid_argument("unknown q_agg: " + s);
}

// M online Q-networks over (s, action-chunk) plus EMA target copies.
struct CriticEnsemble {
    std::vector<Mlp> online;
    std::vector<Mlp> targets;
    std::vector<OptimState> optim;
    QAgg agg = QAgg::Mean;
    std::size_t obs_dim = 0;
    std::size_t action_dim = 0;

    static CriticEnsemble make(std::size_t obs_dim, std::size_t action_dim, std::size_t members,
                               const std::vector<std::size_t>& hidden, Activation act,
                               double weight_decay, Scheduler sched, long warmup, long decay,
                               double end_value, QAgg agg, Rng& rng) {
        if (members < 1) throw std::invalid_argument("CriticEnsemble: need at least one member");
        CriticEnsemble e;
        e.obs_dim = obs_dim;
        e.action_dim = action_dim;
        e.agg = agg;
        std::vector<std::size_t> widths;
        widths.push_back(obs_dim + action_dim);
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(1);
        for (std::size_t m = 0; m < members; ++m) {
            e.online.emplace_back(widths, act, rng);
            e.targets.push_back(e.online.back());
            OptimState st = OptimState::for_params(e.online.back().params());
            st.weight_decay = weight_decay;
            st.scheduler = sched;
            st.warmup_steps = warmup;
            st.decay_steps = decay;
            st.end_value = end_value;
            e.optim.push_back(std::move(st));
        }
        return e;
    }

    std::size_t members() const { return online.size(); }

    Tensor build_input(const Tensor& s, const Tensor& a) const {
        if (s.size() != obs_dim || a.size() != action_dim) {
            throw std::invalid_argument("critic: shape mismatch");
        }
        Tensor x({obs_dim + action_dim});
        for (std::size_t i = 0; i < obs_dim; ++i) x[i] = s[i];
        for (std::size_t i = 0; i < action_dim; ++i) x[obs_dim + i] = a[i];
        return x;
    }
};

// One scalar per ensemble member at (s, a).
inline std::vector<double> q_eval(const CriticEnsemble& ens, const Tensor& s, const Tensor& a,
                                  bool use_targets) {
    Tensor x = ens.build_input(s, a);
    std::vector<double> out(ens.members());
    const auto& nets = use_targets ? ens.targets : ens.online;
    for (std::size_t m = 0; m < nets.size(); ++m) {
        Tensor y = nets[m].forward(x);
        if (!std::isfinite(y[0])) throw NonFiniteError("q_eval: non-finite value");
        out[m] = y[0];
    }
    return out;
}

// Batched variant: rows of (s, a) pairs -> (B x M) values.
inline Tensor q_eval_batch(const CriticEnsemble& ens, const Tensor& inputs, bool use_targets) {
    const std::size_t bsz = inputs.rows();
    Tensor out({bsz, ens.members()});
    const auto& nets = use_targets ? ens.targets : ens.online;
    for (std::size_t m = 0; m < nets.size(); ++m) {
        Tensor y = nets[m].forward(inputs);
        for (std::size_t r = 0; r < bsz; ++r) out.at(r, m) = y[r];
    }
    return out;
}

inline double aggregate_target(const std::vector<double>& values, QAgg flag, Rng& rng) {
    if (values.empty()) throw std::invalid_argument("aggregate_target: empty");
    switch (flag) {
        case QAgg::Mean: {
            double s = 0.0;
            for (double v : values) s += v;
            return s / static_cast<double>(values.size());
        }
        case QAgg::Min:
            return *std::min_element(values.begin(), values.end());
        case QAgg::Subsample: {
            const std::size_t m = values.size();
            if (m < 2) throw std::invalid_argument("aggregate_target: subsample needs M >= 2");
            const std::size_t i = rng.below(m);
            std::size_t j = rng.below(m - 1);
            if (j >= i) ++j;
            return std::min(values[i], values[j]);
        }
    }
    throw std::logic_error("aggregate_target: bad flag");
}

// Best-of-N verifier score: min of two uniformly drawn distinct target
// members, a fresh pair per candidate.
inline double q_bon(const CriticEnsemble& ens, const Tensor& s, const Tensor& a, Rng& rng) {
    if (ens.members() < 2) throw std::invalid_argument("q_bon: needs M >= 2");
    std::vector<double> q = q_eval(ens, s, a, /*use_targets=*/true);
    return aggregate_target(q, QAgg::Subsample, rng);
}

// psi = sigmoid(alpha (omega - 1)); (1 - psi) * mean + psi * min.
inline double pessimism_mix(const std::vector<double>& values, double omega, double alpha) {
    if (alpha <= 0.0) throw std::invalid_argument("pessimism_mix: alpha must be positive");
    if (values.empty()) throw std::invalid_argument("pessimism_mix: empty");
    double mean = 0.0, mn = values[0];
    for (double v : values) {
        mean += v;
        mn = std::min(mn, v);
    }
    mean /= static_cast<double>(values.size());
    const double psi = 1.0 / (1.0 + std::exp(-alpha * (omega - 1.0)));
    return (1.0 - psi) * mean + psi * mn;
}

// A TD minibatch: replay transitions plus bootstrap actions a' drawn from the
// EMA policy at s_{t+h} (absent for terminal transitions).
struct TdBatch {
    std::vector<const ChunkTransition*> transitions;
    std::vector<std::vector<Tensor>> bootstrap_actions;  // N_vr per non-done transition
};

// y = sum_j gamma^j r_j + (1-done) gamma^h (1/N_vr) sum_i agg(Q_targ(s', a'_i)).
// Timeout-truncated episodes bootstrap as if not done.
inline std::vector<double> td_targets(const CriticEnsemble& ens, const TdBatch& batch,
                                      double gamma, int h, Rng& rng) {
    std::vector<double> ys;
    ys.reserve(batch.transitions.size());
    for (std::size_t i = 0; i < batch.transitions.size(); ++i) {
        const ChunkTransition& tr = *batch.transitions[i];
        if (static_cast<int>(tr.rewards.size()) != h) {
            throw std::invalid_argument("td_targets: reward count != h");
        }
        double y = 0.0;
        double disc = 1.0;
        for (int j = 0; j < h; ++j) {
            y += disc * tr.rewards[static_cast<std::size_t>(j)];
            disc *= gamma;
        }
        const bool terminal = tr.done && !tr.truncated;
        if (!terminal) {
            const auto& boot = batch.bootstrap_actions[i];
            if (boot.empty()) {
                throw std::invalid_argument("td_targets: missing bootstrap actions");
            }
            double q = 0.0;
            for (const Tensor& a : boot) {
                q += aggregate_target(q_eval(ens, tr.s_next, a, /*use_targets=*/true), ens.agg,
                                      rng);
            }
            q /= static_cast<double>(boot.size());
            y += disc * q;  // disc == gamma^h here
        }
        ys.push_back(y);
    }
    return ys;
}

// Mean squared Bellman error of one member against constant targets.
inline Tape::Ref td_member_loss_node(Tape& tape, const Mlp& member, const Tensor& inputs,
                                     const Tensor& y) {
    Tape::Ref q = member.forward(tape, tape.constant(inputs));
    return tape.mean(tape.square(tape.sub(q, tape.constant(y))));
}

inline Tensor td_inputs(const CriticEnsemble& ens, const TdBatch& batch) {
    const std::size_t bsz = batch.transitions.size();
    Tensor inputs({bsz, ens.obs_dim + ens.action_dim});
    for (std::size_t r = 0; r < bsz; ++r) {
        const ChunkTransition& tr = *batch.transitions[r];
        for (std::size_t c = 0; c < ens.obs_dim; ++c) inputs.at(r, c) = tr.s[c];
        for (std::size_t c = 0; c < ens.action_dim; ++c) {
            inputs.at(r, ens.obs_dim + c) = tr.a[c];
        }
    }
    return inputs;
}

// Every member regresses its own prediction to the shared constant target;
// returns the mean squared error over members and batch.
inline double td_update(CriticEnsemble& ens, const TdBatch& batch,
                        const std::vector<double>& targets, double base_lr) {
    const std::size_t bsz = batch.transitions.size();
    if (targets.size() != bsz) throw std::invalid_argument("td_update: target size mismatch");
    Tensor inputs = td_inputs(ens, batch);
    Tensor y({bsz, 1});
    for (std::size_t r = 0; r < bsz; ++r) y[r] = targets[r];

    double total_loss = 0.0;
    for (std::size_t m = 0; m < ens.members(); ++m) {
        Tape tape;
        Tape::Ref loss = td_member_loss_node(tape, ens.online[m], inputs, y);
        const double lv = tape.scalar_value(loss);
        if (!std::isfinite(lv)) throw NonFiniteError("td_update: non-finite loss");
        total_loss += lv;
        tape.backward(loss);
        std::vector<Tensor*> ps;
        std::vector<Tensor> gs;
        for (auto& p : ens.online[m].params()) {
            ps.push_back(&p);
            gs.push_back(tape.grad_of(p));
        }
        adam_update_scheduled(std::move(ps), gs, ens.optim[m], base_lr);
    }
    return total_loss / static_cast<double>(ens.members());
}

}  // namespace ogpo
