#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ogpo/baselines.hpp"
#include "ogpo/config.hpp"
#include "ogpo/critic.hpp"
#include "ogpo/envs.hpp"
#include "ogpo/extraction.hpp"
#include "ogpo/flow.hpp"
#include "ogpo/io.hpp"
#include "ogpo/optim.hpp"
#include "ogpo/replay.hpp"

namespace ogpo {

struct EvalResult {
    double success_rate = 0.0;
    std::optional<double> mean_succ_len;  // absent when nothing succeeded
    double mean_return = 0.0;
};

struct TrainResult {
    bool aborted = false;
    std::string abort_reason;
    long primitive_steps = 0;
    double final_success = 0.0;
    double max_grad_norm = 0.0;
    long first_step_at_90 = -1;  // primitive step of first eval >= 90%, -1 if never
    long first_step_at_80 = -1;
    double min_eval_success = 1.0;  // over the online phase
};

// rng stream tags
namespace stream {
constexpr std::uint64_t kInit = 1;
constexpr std::uint64_t kTrainEnv = 2;
constexpr std::uint64_t kEvalEnv = 3;
constexpr std::uint64_t kRollout = 4;
constexpr std::uint64_t kCriticBatch = 5;
constexpr std::uint64_t kActor = 6;
constexpr std::uint64_t kPretrain = 7;
constexpr std::uint64_t kWarmup = 8;
}  // namespace stream

// Everything that trains: online policy theta, its EMA copies, the critic
// ensemble, buffers, and the per-algorithm extras.
struct TrainState {
    FlowPolicy policy;   // theta
    FlowPolicy ema;      // theta-bar: rollouts, PPO reference, TD bootstrap
    FlowPolicy slow;     // slow EMA for the chi2 variant
    CriticEnsemble critic;
    std::unique_ptr<RolloutBuffer> roll;
    SuccessBuffer succ;

    // baseline extras (constructed only when used)
    LatentPolicy latent;
    CriticEnsemble latent_critic;
    std::unique_ptr<RolloutBuffer> latent_roll;
    EditPolicy edit;
    Mlp value_net;  // dppo

    OptimState actor_optim;        // RL extraction updates (velocity params)
    OptimState pretrain_optim;     // BC pretraining (velocity + denoiser)
    OptimState baseline_optim;     // qc/dsrl/expo/bptt actor-side updates
    OptimState value_optim;        // dppo value net

    long primitive_steps = 0;
    long chunk_steps = 0;
    std::int64_t episode_counter = 0;
    std::uint64_t frozen_base_checksum = 0;
};

class Trainer {
public:
    Trainer(TrainerConfig cfg, std::string out_dir, bool write_files = true)
        : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)), env_(cfg_.env_kind()) {
        cfg_.validate();
        obs_dim_ = env_.spec().obs_dim;
        prim_dim_ = env_.spec().action_dim;
        action_dim_ = prim_dim_ * static_cast<std::size_t>(cfg_.horizon_length);
        if (write_files) {
            ensure_dir(out_dir_);
            std::ofstream rc(out_dir_ + "/resolved-config.json");
            rc << resolved_config_string(cfg_) << "\n";
            metrics_ = MetricsSink(out_dir_ + "/metrics.jsonl");
        }
        init_state_();
    }

    const TrainerConfig& config() const { return cfg_; }
    TrainState& state() { return st_; }
    const MetricsSink& metrics() const { return metrics_; }
    const std::string& out_dir() const { return out_dir_; }

    void set_offline_dataset(const Dataset& ds) {
        if (ds.obs_dim != obs_dim_ || ds.action_dim != action_dim_) {
            throw std::invalid_argument("offline dataset dims do not match env/config");
        }
        offline_ = dataset_to_transitions(ds);
        offline_pairs_.clear();
        for (const auto& ep : ds.episodes) {
            for (std::size_t t = 0; t < ep.states.size(); ++t) {
                offline_pairs_.push_back({&ep.states[t], &ep.chunks[t]});
            }
        }
    }

    // --- BC pretraining -----------------------------------------------------

    // Minimizes flow-matching + denoiser loss over the offline pairs, with
    // periodic deterministic-ODE evals. Checkpoints stop at the first eval
    // inside the clip band, otherwise the closest-to-target snapshot wins.
    void pretrain_bc() {
        if (offline_pairs_.empty()) throw std::invalid_argument("pretrain_bc: empty dataset");
        if (cfg_.offline_steps <= 0) throw std::invalid_argument("pretrain_bc: zero offline steps");
        Rng rng(mix64(cfg_.seed, stream::kPretrain));
        const double band_lo = (cfg_.bc_clip_target - 5.0) / 100.0;
        const double band_hi = (cfg_.bc_clip_target + 5.0) / 100.0;

        std::vector<Tensor> params_snapshot;
        double best_dist = 1e9;
        FlowPolicy best = st_.policy;
        bool stopped_in_band = false;

        for (long step = 1; step <= cfg_.offline_steps; ++step) {
            std::vector<const Tensor*> states, actions;
            for (int b = 0; b < cfg_.batch_size; ++b) {
                const auto& pr = offline_pairs_[rng.below(offline_pairs_.size())];
                states.push_back(pr.first);
                actions.push_back(pr.second);
            }
            Tape tape;
            Tape::Ref fm = flow_matching_loss(tape, st_.policy, states, actions, rng);
            Tape::Ref dn = denoiser_loss(tape, st_.policy, states, actions, rng);
            Tape::Ref loss = tape.add(fm, dn);
            const double lv = tape.scalar_value(loss);
            if (!std::isfinite(lv)) throw NonFiniteError("pretrain_bc: non-finite loss");
            tape.backward(loss);
            auto params = bc_params_();
            std::vector<Tensor> grads;
            for (Tensor* p : params) {
                grads.push_back(tape.has_param(*p) ? tape.grad_of(*p) : Tensor(p->shape()));
            }
            adam_update(params, grads, st_.pretrain_optim, cfg_.actor_lr);

            if (step % cfg_.bc_eval_interval == 0 || step == cfg_.offline_steps) {
                EvalResult ev = evaluate_policy_(
                    [this](const Tensor& s, Rng& r) { return sample_ode(st_.policy, s, r); },
                    cfg_.bc_eval_episodes, 0xBC00 + static_cast<std::uint64_t>(step));
                metrics_.write(step, "pretrain",
                               {{"bc_loss", lv}, {"success_rate", ev.success_rate}});
                const double dist = std::fabs(ev.success_rate - cfg_.bc_clip_target / 100.0);
                if (dist < best_dist) {
                    best_dist = dist;
                    best = st_.policy;
                }
                if (cfg_.clip_bc && ev.success_rate >= band_lo && ev.success_rate <= band_hi) {
                    stopped_in_band = true;
                    best = st_.policy;
                    break;
                }
            }
        }
        if (cfg_.clip_bc) {
            if (!stopped_in_band) {
                std::cerr << "[pretrain-bc] warning: success never entered ["
                          << band_lo * 100 << "," << band_hi * 100
                          << "]%; keeping closest checkpoint\n";
            }
            st_.policy = best;
        }
        sync_targets_to_policy_();
    }

    void save_bc_checkpoint(const std::string& path) const {
        Checkpoint ck;
        ck.algo = "bc";
        ck.config_hash = config_hash(cfg_);
        add_policy_arrays_(ck, "policy", st_.policy);
        save_checkpoint(path, ck);
    }

    void load_bc_checkpoint(const std::string& path, bool force) {
        Checkpoint ck = load_checkpoint(path);
        if (!force && ck.config_hash != config_hash(cfg_)) {
            throw std::runtime_error("checkpoint config hash mismatch (use --force to override)");
        }
        load_policy_arrays_(ck, "policy", st_.policy);
        sync_targets_to_policy_();
    }

    // --- warmup ---------------------------------------------------------------

    // N_warmup rollouts of the BC policy plus optional critic-only updates.
    void warmup() {
        Rng rng(mix64(cfg_.seed, stream::kWarmup));
        for (int ep = 0; ep < cfg_.warmup_episodes; ++ep) {
            run_env_episode_(rng, /*use_bon=*/false);
        }
        if (cfg_.warmup_critic && !st_.roll->empty() && !is_dppo_()) {
            Rng crng(mix64(cfg_.seed, stream::kCriticBatch) ^ 0x5757);
            Rng crng2(crng.stream(1));
            for (long u = 0; u < cfg_.critic_warmup_updates; ++u) {
                for (int k = 0; k < cfg_.utd_warmup; ++k) critic_update_(crng2);
            }
        }
        st_.frozen_base_checksum = policy_checksum(frozen_base_());
    }

    // --- rollout --------------------------------------------------------------

    // Best-of-N action selection from the EMA policy; ties break toward the
    // lowest candidate index.
    std::pair<Tensor, DenoisingTrajectory> rollout_action(const Tensor& s, Rng& rng,
                                                          bool use_bon) {
        const int N = use_bon ? cfg_.best_of_n : 0;
        if (N <= 1) {
            DenoisingTrajectory t = sample_sde(st_.ema, s, rng);
            Tensor a = t.final_action();
            return {std::move(a), std::move(t)};
        }
        auto cands = sample_sde_group(st_.ema, s, static_cast<std::size_t>(N), rng);
        std::size_t best = 0;
        double best_q = -1e300;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            const double q = q_bon(st_.critic, s, cands[i].final_action(), rng);
            if (q > best_q) {
                best_q = q;
                best = i;
            }
        }
        Tensor a = cands[best].final_action();
        return {std::move(a), std::move(cands[best])};
    }

    // --- evaluation -------------------------------------------------------------

    EvalResult evaluate(int episodes, std::uint64_t round_tag) {
        return evaluate_policy_(eval_action_fn_(), episodes, round_tag);
    }

    // --- top-level run ----------------------------------------------------------

    TrainResult run(const Dataset* demos, const std::string& bc_checkpoint, bool force_load) {
        TrainResult result;
        try {
            if (!bc_checkpoint.empty()) {
                load_bc_checkpoint(bc_checkpoint, force_load);
            } else {
                if (demos == nullptr) throw std::invalid_argument("run: need demos or checkpoint");
                set_offline_dataset(*demos);
                pretrain_bc();
                save_bc_checkpoint(out_dir_ + "/bc.ckpt");
            }
            if (demos != nullptr && offline_.empty()) set_offline_dataset(*demos);
            if (cfg_.use_offline && offline_.empty()) {
                throw std::invalid_argument("use_offline set but no offline dataset given");
            }
            if (is_dppo_()) {
                run_dppo_(result);
            } else {
                warmup();
                run_offpolicy_(result);
            }
        } catch (const NonFiniteError& e) {
            result.aborted = true;
            result.abort_reason = e.what();
            write_abort_dump_(e.what());
        }
        result.primitive_steps = st_.primitive_steps;
        save_final_checkpoint_(out_dir_ + "/final.ckpt");
        return result;
    }

    void save_final_checkpoint_(const std::string& path) const {
        Checkpoint ck;
        ck.algo = cfg_.algo;
        ck.config_hash = config_hash(cfg_);
        add_policy_arrays_(ck, "policy", st_.policy);
        add_policy_arrays_(ck, "ema", st_.ema);
        add_policy_arrays_(ck, "slow", st_.slow);
        add_mlp_arrays_(ck, "value_net", st_.value_net);
        for (std::size_t m = 0; m < st_.critic.members(); ++m) {
            add_mlp_arrays_(ck, "critic.online." + std::to_string(m), st_.critic.online[m]);
            add_mlp_arrays_(ck, "critic.target." + std::to_string(m), st_.critic.targets[m]);
        }
        if (cfg_.algo_kind() == Algo::Dsrl) {
            add_mlp_arrays_(ck, "latent.head", st_.latent.head);
            for (std::size_t m = 0; m < st_.latent_critic.members(); ++m) {
                add_mlp_arrays_(ck, "latent_critic.online." + std::to_string(m),
                                st_.latent_critic.online[m]);
                add_mlp_arrays_(ck, "latent_critic.target." + std::to_string(m),
                                st_.latent_critic.targets[m]);
            }
        }
        if (cfg_.algo_kind() == Algo::Expo) add_mlp_arrays_(ck, "edit.head", st_.edit.head);
        save_checkpoint(path, ck);
    }

    void load_full_checkpoint(const std::string& path, bool force) {
        Checkpoint ck = load_checkpoint(path);
        if (!force && ck.config_hash != config_hash(cfg_)) {
            throw std::runtime_error("checkpoint config hash mismatch (use --force to override)");
        }
        load_policy_arrays_(ck, "policy", st_.policy);
        load_policy_arrays_(ck, "ema", st_.ema);
        load_policy_arrays_(ck, "slow", st_.slow);
        load_mlp_arrays_(ck, "value_net", st_.value_net);
        for (std::size_t m = 0; m < st_.critic.members(); ++m) {
            load_mlp_arrays_(ck, "critic.online." + std::to_string(m), st_.critic.online[m]);
            load_mlp_arrays_(ck, "critic.target." + std::to_string(m), st_.critic.targets[m]);
        }
        if (cfg_.algo_kind() == Algo::Dsrl) {
            load_mlp_arrays_(ck, "latent.head", st_.latent.head);
            for (std::size_t m = 0; m < st_.latent_critic.members(); ++m) {
                load_mlp_arrays_(ck, "latent_critic.online." + std::to_string(m),
                                 st_.latent_critic.online[m]);
                load_mlp_arrays_(ck, "latent_critic.target." + std::to_string(m),
                                 st_.latent_critic.targets[m]);
            }
        }
        if (cfg_.algo_kind() == Algo::Expo) load_mlp_arrays_(ck, "edit.head", st_.edit.head);
    }

    // One environment chunk step plus the configured updates. Exposed for
    // tests; run_offpolicy_ drives it.
    void train_step(Rng& env_rng, Rng& critic_rng, Rng& actor_rng) {
        step_env_once_(env_rng);
        if (!st_.roll->empty()) {
            for (int u = 0; u < cfg_.utd_q; ++u) critic_update_(critic_rng);
            for (int u = 0; u < cfg_.utd_pi; ++u) actor_update_(actor_rng);
        }
        apply_ema_();
        maybe_verify_frozen_base_();
    }

private:
    bool is_dppo_() const { return cfg_.algo_kind() == Algo::Dppo; }

    bool uses_group_extraction_() const {
        switch (cfg_.algo_kind()) {
            case Algo::Ogpo:
            case Algo::OgpoPlus:
            case Algo::OgpoCa:
            case Algo::OgpoChi2:
            case Algo::Awr:
            case Algo::AwOgpo:
            case Algo::Aspo:
                return true;
            default:
                return false;
        }
    }

    const FlowPolicy& frozen_base_() const { return st_.ema; }

    void init_state_() {
        Rng rng(mix64(cfg_.seed, stream::kInit));
        st_.policy = FlowPolicy::make(obs_dim_, action_dim_, cfg_.actor_hidden,
                                      cfg_.activation_kind(), cfg_.flow_steps, cfg_.noise_std,
                                      cfg_.correct_sde, rng);
        st_.ema = st_.policy;
        st_.slow = st_.policy;
        st_.critic = CriticEnsemble::make(
            obs_dim_, action_dim_, static_cast<std::size_t>(cfg_.num_qs), cfg_.value_hidden,
            cfg_.activation_kind(), cfg_.critic_weight_decay,
            scheduler_from_string(cfg_.critic_scheduler), cfg_.critic_warmup_steps,
            cfg_.critic_decay_steps, cfg_.critic_end_value, cfg_.q_agg_kind(), rng);
        st_.roll = std::make_unique<RolloutBuffer>(cfg_.replay_capacity);

        st_.actor_optim = OptimState::for_params(st_.policy.velocity_net.params());
        st_.actor_optim.scheduler = scheduler_from_string(cfg_.actor_scheduler);
        st_.actor_optim.warmup_steps = cfg_.actor_warmup_steps;
        st_.actor_optim.decay_steps = cfg_.actor_decay_steps;
        st_.actor_optim.end_value = cfg_.actor_end_value;
        st_.actor_optim.weight_decay = cfg_.actor_weight_decay;

        {
            auto params = bc_params_();
            std::vector<Tensor> dummy;
            st_.pretrain_optim = OptimState{};
            for (Tensor* p : params) {
                st_.pretrain_optim.m.emplace_back(p->shape());
                st_.pretrain_optim.v.emplace_back(p->shape());
            }
        }

        const Algo a = cfg_.algo_kind();
        if (a == Algo::Dsrl) {
            st_.latent = LatentPolicy::make(obs_dim_, action_dim_, cfg_.actor_hidden,
                                            cfg_.activation_kind(), rng);
            st_.latent_critic = CriticEnsemble::make(
                obs_dim_, action_dim_, static_cast<std::size_t>(cfg_.num_qs), cfg_.value_hidden,
                cfg_.activation_kind(), cfg_.critic_weight_decay,
                scheduler_from_string(cfg_.critic_scheduler), cfg_.critic_warmup_steps,
                cfg_.critic_decay_steps, cfg_.critic_end_value, cfg_.q_agg_kind(), rng);
            st_.latent_roll = std::make_unique<RolloutBuffer>(cfg_.replay_capacity);
            st_.baseline_optim = OptimState::for_params(st_.latent.head.params());
        } else if (a == Algo::Expo) {
            st_.edit = EditPolicy::make(obs_dim_, action_dim_, cfg_.actor_hidden,
                                        cfg_.activation_kind(), cfg_.expo_edit_scale, rng);
            st_.baseline_optim = OptimState::for_params(st_.edit.head.params());
        } else if (a == Algo::Qc || a == Algo::Bptt) {
            st_.baseline_optim = OptimState::for_params(st_.policy.velocity_net.params());
        } else if (a == Algo::Dppo) {
            std::vector<std::size_t> widths;
            widths.push_back(obs_dim_);
            widths.insert(widths.end(), cfg_.value_hidden.begin(), cfg_.value_hidden.end());
            widths.push_back(1);
            st_.value_net = Mlp(widths, cfg_.activation_kind(), rng);
            st_.value_optim = OptimState::for_params(st_.value_net.params());
            st_.baseline_optim = OptimState::for_params(st_.policy.velocity_net.params());
            st_.baseline_optim.scheduler = scheduler_from_string(cfg_.actor_scheduler);
            st_.baseline_optim.warmup_steps = cfg_.actor_warmup_steps;
            st_.baseline_optim.decay_steps = cfg_.actor_decay_steps;
            st_.baseline_optim.end_value = cfg_.actor_end_value;
        }
    }

    std::vector<Tensor*> bc_params_() {
        std::vector<Tensor*> ps;
        for (auto& p : st_.policy.velocity_net.params()) ps.push_back(&p);
        for (auto& p : st_.policy.denoiser_net.params()) ps.push_back(&p);
        return ps;
    }

    void sync_targets_to_policy_() {
        st_.ema.copy_params_from(st_.policy);
        st_.slow.copy_params_from(st_.policy);
    }

    void add_policy_arrays_(Checkpoint& ck, const std::string& prefix,
                            const FlowPolicy& p) const {
        add_mlp_arrays_(ck, prefix + ".velocity", p.velocity_net);
        add_mlp_arrays_(ck, prefix + ".denoiser", p.denoiser_net);
    }

    void add_mlp_arrays_(Checkpoint& ck, const std::string& prefix, const Mlp& net) const {
        if (net.params().empty()) return;
        for (std::size_t i = 0; i < net.params().size(); ++i) {
            ck.add(prefix + ".p" + std::to_string(i), net.params()[i]);
        }
    }

    void load_policy_arrays_(const Checkpoint& ck, const std::string& prefix, FlowPolicy& p) {
        load_mlp_arrays_(ck, prefix + ".velocity", p.velocity_net);
        load_mlp_arrays_(ck, prefix + ".denoiser", p.denoiser_net);
    }

    void load_mlp_arrays_(const Checkpoint& ck, const std::string& prefix, Mlp& net) {
        if (net.params().empty()) return;
        for (std::size_t i = 0; i < net.params().size(); ++i) {
            const auto& arr = ck.require(prefix + ".p" + std::to_string(i));
            Tensor t = tensor_from_array(arr);
            if (!t.same_shape(net.params()[i])) {
                throw std::runtime_error("checkpoint: shape mismatch for " + prefix);
            }
            net.params()[i] = std::move(t);
        }
    }

    // --- environment stepping --------------------------------------------------

    void ensure_episode_(Rng& rng) {
        if (env_started_ && !env_.done()) return;
        if (env_started_) finalize_current_episode_();
        st_.episode_counter += 1;
        const std::uint64_t ep_seed =
            mix64(mix64(cfg_.seed, stream::kTrainEnv), static_cast<std::uint64_t>(st_.episode_counter));
        env_.reset(ep_seed);
        env_started_ = true;
        (void)rng;
    }

    void finalize_current_episode_() {
        const std::int64_t eid = st_.episode_counter;
        if (st_.roll->has_staged(eid)) {
            finalize_episode(*st_.roll, st_.succ, eid, env_.success());
        }
        if (st_.latent_roll && st_.latent_roll->has_staged(eid)) {
            SuccessBuffer scratch;  // latent transitions never feed BC
            finalize_episode(*st_.latent_roll, scratch, eid, env_.success());
        }
    }

    // One chunk in the environment under the current variant's rollout rule.
    void step_env_once_(Rng& rng) {
        ensure_episode_(rng);
        const Algo a = cfg_.algo_kind();
        const Tensor s = env_.obs();
        if (a == Algo::Dsrl) {
            Tensor w = st_.latent.sample(s, rng);
            Tensor action = sample_ode_from(frozen_base_(), s, w);
            ChunkTransition tr = chunk_step(env_, action, cfg_.horizon_length, st_.episode_counter);
            st_.primitive_steps += env_steps_taken_(tr);
            // the latent transition replaces the action with the noise w
            ChunkTransition ltr = tr;
            ltr.a = w;
            st_.latent_roll->push(ltr);
            st_.roll->push(tr);
        } else if (a == Algo::Expo) {
            Rng srng = rng.stream(st_.chunk_steps);
            DenoisingTrajectory t = sample_sde(frozen_base_(), s, srng);
            bool picked_edit = false;
            Tensor action = expo_otf_action(st_.edit, st_.critic, s, t.final_action(), srng,
                                            &picked_edit);
            ChunkTransition tr = chunk_step(env_, action, cfg_.horizon_length, st_.episode_counter);
            st_.primitive_steps += env_steps_taken_(tr);
            st_.roll->push(tr);
        } else {
            const bool bon = cfg_.best_of_n > 1 && a != Algo::Bptt;
            auto [action, traj] = rollout_action(s, rng, bon);
            ChunkTransition tr = chunk_step(env_, action, cfg_.horizon_length, st_.episode_counter);
            st_.primitive_steps += env_steps_taken_(tr);
            st_.roll->push(tr);
        }
        st_.chunk_steps += 1;
        if (env_.done()) finalize_current_episode_();
    }

    long env_steps_taken_(const ChunkTransition& tr) const { return tr.executed_primitives; }

    // --- updates -----------------------------------------------------------------

    TdBatch make_td_batch_(RolloutBuffer& buf, bool latent_mode, Rng& rng) {
        TdBatch batch;
        batch.transitions = sample_batch(buf, cfg_.use_offline ? &offline_ : nullptr,
                                         cfg_.use_offline ? cfg_.r_offline : 0.0,
                                         static_cast<std::size_t>(cfg_.batch_size), rng);
        batch.bootstrap_actions.resize(batch.transitions.size());
        std::vector<const Tensor*> boot_states;
        std::vector<std::size_t> boot_index;
        for (std::size_t i = 0; i < batch.transitions.size(); ++i) {
            const ChunkTransition& tr = *batch.transitions[i];
            const bool terminal = tr.done && !tr.truncated;
            if (terminal) continue;
            for (int v = 0; v < cfg_.n_vr; ++v) {
                boot_states.push_back(&tr.s_next);
                boot_index.push_back(i);
            }
        }
        if (!boot_states.empty()) {
            if (latent_mode) {
                for (std::size_t b = 0; b < boot_states.size(); ++b) {
                    batch.bootstrap_actions[boot_index[b]].push_back(
                        st_.latent.sample(*boot_states[b], rng));
                }
            } else if (cfg_.algo_kind() == Algo::Expo) {
                for (std::size_t b = 0; b < boot_states.size(); ++b) {
                    Rng srng = rng.stream(b);
                    DenoisingTrajectory t = sample_sde(frozen_base_(), *boot_states[b], srng);
                    Tensor astar = expo_otf_action(st_.edit, st_.critic, *boot_states[b],
                                                   t.final_action(), srng, nullptr);
                    batch.bootstrap_actions[boot_index[b]].push_back(std::move(astar));
                }
            } else {
                auto actions = sde_final_actions(st_.ema, boot_states, rng);
                for (std::size_t b = 0; b < actions.size(); ++b) {
                    batch.bootstrap_actions[boot_index[b]].push_back(std::move(actions[b]));
                }
            }
        }
        return batch;
    }

    void critic_update_(Rng& rng) {
        const bool latent_mode = cfg_.algo_kind() == Algo::Dsrl;
        RolloutBuffer& buf = latent_mode ? *st_.latent_roll : *st_.roll;
        CriticEnsemble& ens = latent_mode ? st_.latent_critic : st_.critic;
        if (buf.empty()) return;
        TdBatch batch = make_td_batch_(buf, latent_mode, rng);
        std::vector<double> ys = td_targets(ens, batch, cfg_.gamma, cfg_.horizon_length, rng);
        last_critic_loss_ = td_update(ens, batch, ys, cfg_.critic_lr);
        double ymean = 0.0;
        for (double y : ys) ymean += y;
        last_td_target_mean_ = ys.empty() ? 0.0 : ymean / static_cast<double>(ys.size());
        // ensemble spread diagnostics on the first batch element
        auto qs = q_eval(ens, batch.transitions[0]->s, batch.transitions[0]->a, false);
        last_q_mean_ = 0.0;
        last_q_min_ = qs[0];
        for (double q : qs) {
            last_q_mean_ += q;
            last_q_min_ = std::min(last_q_min_, q);
        }
        last_q_mean_ /= static_cast<double>(qs.size());
    }

    void actor_update_(Rng& rng) {
        switch (cfg_.algo_kind()) {
            case Algo::Ogpo:
            case Algo::OgpoPlus:
            case Algo::OgpoCa:
            case Algo::OgpoChi2:
            case Algo::Awr:
            case Algo::AwOgpo:
            case Algo::Aspo:
                group_actor_update_(rng);
                return;
            case Algo::Qc: {
                UpdateMetrics m =
                    qc_update(st_.policy, *st_.roll, st_.succ, /*success_only=*/true,
                              cfg_.batch_size, st_.baseline_optim, cfg_.actor_lr, rng);
                note_actor_metrics_(m.loss, 0.0, m.grad_norm, 1.0);
                return;
            }
            case Algo::Dsrl: {
                auto states = sample_states_(*st_.latent_roll, cfg_.batch_size, rng);
                UpdateMetrics m =
                    dsrl_actor_update(st_.latent, st_.latent_critic, states,
                                      cfg_.dsrl_entropy_bonus, st_.baseline_optim, cfg_.actor_lr,
                                      rng);
                note_actor_metrics_(m.loss, 0.0, m.grad_norm, 1.0);
                return;
            }
            case Algo::Expo: {
                auto batch = sample_batch(*st_.roll, nullptr, 0.0,
                                          static_cast<std::size_t>(cfg_.batch_size), rng);
                UpdateMetrics m = expo_actor_update(st_.edit, st_.critic, batch,
                                                    cfg_.expo_entropy_bonus, st_.baseline_optim,
                                                    cfg_.actor_lr, rng);
                note_actor_metrics_(m.loss, 0.0, m.grad_norm, 1.0);
                return;
            }
            case Algo::Bptt: {
                auto states = sample_states_(*st_.roll, cfg_.batch_size, rng);
                UpdateMetrics m = bptt_update(st_.policy, st_.critic, states, st_.baseline_optim,
                                              cfg_.actor_lr, rng);
                note_actor_metrics_(m.loss, 0.0, m.grad_norm, 1.0);
                return;
            }
            case Algo::Dppo:
                throw std::logic_error("actor_update_: dppo runs its own loop");
        }
    }

    std::vector<const Tensor*> sample_states_(RolloutBuffer& buf, int n, Rng& rng) {
        auto batch = sample_batch(buf, nullptr, 0.0, static_cast<std::size_t>(n), rng);
        std::vector<const Tensor*> states;
        states.reserve(batch.size());
        for (const auto* tr : batch) states.push_back(&tr->s);
        return states;
    }

    // PPO / AWR / AW-OGPO / ASPO extraction over freshly sampled groups.
    void group_actor_update_(Rng& rng) {
        auto states = sample_states_(*st_.roll, cfg_.ppo_state_batch, rng);
        std::vector<GroupSample> groups;
        groups.reserve(states.size());
        for (std::size_t i = 0; i < states.size(); ++i) {
            Rng grng = rng.stream(0x6000 + i);
            groups.push_back(sample_group(st_.ema, st_.critic, *states[i],
                                          static_cast<std::size_t>(cfg_.group_size), grng));
        }
        const AdvStrategy strat = cfg_.effective_adv_strategy();
        std::vector<AdvantageBatch> advs;
        advs.reserve(groups.size());
        for (const auto& g : groups) {
            advs.push_back(compute_advantages(g, strat, st_.policy, st_.ema, st_.slow,
                                              cfg_.beta_init, cfg_.alpha));
        }

        Tape tape;
        Tape::Ref extraction;
        const Algo a = cfg_.algo_kind();
        if (a == Algo::Awr) {
            extraction = awr_loss(tape, st_.policy, groups, advs, cfg_.beta_awr, rng);
        } else if (a == Algo::AwOgpo) {
            extraction = aw_ogpo_loss(tape, st_.policy, st_.ema, groups, advs, cfg_.beta_awr,
                                      cfg_.aw_positive_only);
        } else if (a == Algo::Aspo) {
            extraction = fpo_aspo_loss(tape, st_.policy, st_.ema, groups, advs, cfg_.clip_epsilon,
                                       rng);
        } else {
            extraction = ppo_loss(tape, groups, advs, st_.policy, st_.ema, cfg_.clip_epsilon,
                                  cfg_.no_negative, strat == AdvStrategy::Chi2 ? &st_.slow : nullptr);
        }
        Tape::Ref bc = bc_success_loss(tape, st_.policy, st_.succ,
                                       static_cast<std::size_t>(cfg_.batch_size), rng);
        const double bc_value = tape.scalar_value(bc);
        Tape::Ref loss = total_loss(tape, extraction, bc, cfg_.bc_coeff);
        const double lv = tape.scalar_value(loss);
        if (!std::isfinite(lv)) throw NonFiniteError("actor update: non-finite loss");
        tape.backward(loss);
        std::vector<Tensor> grads;
        auto& vparams = st_.policy.velocity_net.params();
        for (auto& p : vparams) {
            grads.push_back(tape.has_param(p) ? tape.grad_of(p) : Tensor(p.shape()));
        }
        const double gnorm = detail::grad_l2_norm(grads);
        if (!std::isfinite(gnorm)) throw NonFiniteError("actor update: non-finite gradient");
        std::vector<Tensor*> ps;
        for (auto& p : vparams) ps.push_back(&p);
        adam_update_scheduled(std::move(ps), grads, st_.actor_optim, cfg_.ppo_lr);

        double ratio_mean = 0.0;
        std::size_t count = 0;
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            for (const auto& t : groups[gi].trajs) {
                ratio_mean += chain_ratio(st_.policy, st_.ema, t);
                ++count;
            }
        }
        note_actor_metrics_(lv, bc_value, gnorm, ratio_mean / static_cast<double>(count));
    }

    void note_actor_metrics_(double loss, double bc, double gnorm, double ratio_mean) {
        last_actor_loss_ = loss;
        last_bc_loss_ = bc;
        last_grad_norm_ = gnorm;
        max_grad_norm_ = std::max(max_grad_norm_, gnorm);
        last_ratio_mean_ = ratio_mean;
    }

    void apply_ema_() {
        if (cfg_.algo_kind() == Algo::Dsrl) {
            for (std::size_t m = 0; m < st_.latent_critic.members(); ++m) {
                ema_update(st_.latent_critic.targets[m].params(),
                           st_.latent_critic.online[m].params(), cfg_.tau);
            }
            return;  // base policy and its EMA stay frozen
        }
        ema_update(st_.ema.velocity_net.params(), st_.policy.velocity_net.params(), cfg_.tau);
        ema_update(st_.ema.denoiser_net.params(), st_.policy.denoiser_net.params(), cfg_.tau);
        ema_update(st_.slow.velocity_net.params(), st_.policy.velocity_net.params(),
                   cfg_.tau_slow);
        ema_update(st_.slow.denoiser_net.params(), st_.policy.denoiser_net.params(),
                   cfg_.tau_slow);
        for (std::size_t m = 0; m < st_.critic.members(); ++m) {
            ema_update(st_.critic.targets[m].params(), st_.critic.online[m].params(), cfg_.tau);
        }
    }

    void maybe_verify_frozen_base_() {
        const Algo a = cfg_.algo_kind();
        if (a != Algo::Dsrl && a != Algo::Expo) return;
        if (st_.frozen_base_checksum == 0) return;
        if (policy_checksum(frozen_base_()) != st_.frozen_base_checksum) {
            throw std::logic_error("frozen base policy was mutated");
        }
    }

    // --- episode / eval helpers ---------------------------------------------------

    // Roll one full episode into the buffers with plain EMA sampling (warmup).
    void run_env_episode_(Rng& rng, bool use_bon) {
        ensure_episode_(rng);
        while (!env_.done()) {
            const Tensor s = env_.obs();
            const Algo a = cfg_.algo_kind();
            if (a == Algo::Dsrl) {
                Tensor w = st_.latent.sample(s, rng);
                Tensor action = sample_ode_from(frozen_base_(), s, w);
                ChunkTransition tr =
                    chunk_step(env_, action, cfg_.horizon_length, st_.episode_counter);
                st_.primitive_steps += env_steps_taken_(tr);
                ChunkTransition ltr = tr;
                ltr.a = w;
                st_.latent_roll->push(ltr);
                st_.roll->push(tr);
            } else {
                auto [action, traj] = rollout_action(s, rng, use_bon);
                ChunkTransition tr =
                    chunk_step(env_, action, cfg_.horizon_length, st_.episode_counter);
                st_.primitive_steps += env_steps_taken_(tr);
                st_.roll->push(tr);
            }
            st_.chunk_steps += 1;
        }
        finalize_current_episode_();
    }

    std::function<Tensor(const Tensor&, Rng&)> eval_action_fn_() {
        switch (cfg_.algo_kind()) {
            case Algo::Dsrl:
                return [this](const Tensor& s, Rng& r) {
                    (void)r;
                    Tensor mean, logstd;
                    st_.latent.mean_logstd(s, mean, logstd);
                    return sample_ode_from(frozen_base_(), s, mean);
                };
            case Algo::Expo:
                return [this](const Tensor& s, Rng& r) {
                    Tensor a = sample_ode(frozen_base_(), s, r);
                    Tensor out = st_.edit.head.forward(st_.edit.build_input(s, a));
                    Tensor a_edit(a.shape());
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        a_edit[i] = a[i] + std::tanh(out[i]) * st_.edit.edit_scale;
                    }
                    Rng agg(0);
                    const double qb =
                        aggregate_target(q_eval(st_.critic, s, a, true), QAgg::Mean, agg);
                    const double qe =
                        aggregate_target(q_eval(st_.critic, s, a_edit, true), QAgg::Mean, agg);
                    return qe > qb ? a_edit : a;
                };
            case Algo::Dppo:
                return [this](const Tensor& s, Rng& r) { return sample_ode(st_.policy, s, r); };
            default:
                return [this](const Tensor& s, Rng& r) { return sample_ode(st_.ema, s, r); };
        }
    }

    EvalResult evaluate_policy_(const std::function<Tensor(const Tensor&, Rng&)>& act,
                                int episodes, std::uint64_t round_tag) {
        EvalResult res;
        double succ_len_sum = 0.0;
        int succ_count = 0;
        double ret_sum = 0.0;
        Env env(cfg_.env_kind());
        for (int e = 0; e < episodes; ++e) {
            const std::uint64_t es = mix64(mix64(cfg_.seed, stream::kEvalEnv),
                                           (round_tag << 20) ^ static_cast<std::uint64_t>(e));
            env.reset(es);
            Rng rng(mix64(es, 99));
            double ep_ret = 0.0;
            while (!env.done()) {
                Tensor a = act(env.obs(), rng);
                ChunkTransition tr = chunk_step(env, a, cfg_.horizon_length, 0);
                for (double r : tr.rewards) ep_ret += r;
            }
            ret_sum += ep_ret;
            if (env.success()) {
                ++succ_count;
                succ_len_sum += env.steps();
            }
        }
        res.success_rate = static_cast<double>(succ_count) / static_cast<double>(episodes);
        res.mean_return = ret_sum / static_cast<double>(episodes);
        if (succ_count > 0) res.mean_succ_len = succ_len_sum / succ_count;
        return res;
    }

    void record_eval_(TrainResult& result, long step_axis) {
        EvalResult ev = evaluate(cfg_.eval_episodes, static_cast<std::uint64_t>(eval_round_++));
        std::vector<std::pair<std::string, double>> kv;
        kv.push_back({"success_rate", ev.success_rate});
        if (ev.mean_succ_len) kv.push_back({"mean_succ_len", *ev.mean_succ_len});
        kv.push_back({"mean_return", ev.mean_return});
        metrics_.write(step_axis, "eval", kv);
        result.final_success = ev.success_rate;
        result.min_eval_success = std::min(result.min_eval_success, ev.success_rate);
        if (ev.success_rate >= 0.9 && result.first_step_at_90 < 0) {
            result.first_step_at_90 = step_axis;
        }
        if (ev.success_rate >= 0.8 && result.first_step_at_80 < 0) {
            result.first_step_at_80 = step_axis;
        }
    }

    void record_train_metrics_() {
        metrics_.write(st_.primitive_steps, "train",
                       {{"actor_loss", last_actor_loss_},
                        {"bc_loss", last_bc_loss_},
                        {"critic_loss", last_critic_loss_},
                        {"td_target_mean", last_td_target_mean_},
                        {"q_mean", last_q_mean_},
                        {"q_min", last_q_min_},
                        {"ratio_mean", last_ratio_mean_},
                        {"grad_norm", last_grad_norm_},
                        {"replay_size", static_cast<double>(st_.roll->size())},
                        {"succ_size", static_cast<double>(st_.succ.size())}});
    }

    void write_abort_dump_(const std::string& reason) {
        if (out_dir_.empty()) return;
        nlohmann::json j;
        j["reason"] = reason;
        j["primitive_steps"] = st_.primitive_steps;
        j["chunk_steps"] = st_.chunk_steps;
        j["last_actor_loss"] = last_actor_loss_;
        j["last_critic_loss"] = last_critic_loss_;
        j["last_grad_norm"] = last_grad_norm_;
        std::ofstream out(out_dir_ + "/abort.json");
        out << j.dump(2) << "\n";
    }

    void run_offpolicy_(TrainResult& result) {
        Rng env_rng(mix64(cfg_.seed, stream::kRollout));
        Rng critic_rng(mix64(cfg_.seed, stream::kCriticBatch));
        Rng actor_rng(mix64(cfg_.seed, stream::kActor));
        long next_eval = 0;
        while (st_.primitive_steps < cfg_.online_steps) {
            if (st_.primitive_steps >= next_eval) {
                record_eval_(result, st_.primitive_steps);
                next_eval += cfg_.eval_interval;
            }
            train_step(env_rng, critic_rng, actor_rng);
            if (st_.chunk_steps % cfg_.log_interval == 0) record_train_metrics_();
        }
        record_eval_(result, st_.primitive_steps);
        result.max_grad_norm = max_grad_norm_;
    }

    void run_dppo_(TrainResult& result) {
        Rng env_rng(mix64(cfg_.seed, stream::kRollout));
        Rng update_rng(mix64(cfg_.seed, stream::kActor));
        long next_eval = 0;
        while (st_.primitive_steps < cfg_.online_steps) {
            if (st_.primitive_steps >= next_eval) {
                record_eval_(result, st_.primitive_steps);
                next_eval += cfg_.eval_interval;
            }
            // collect complete episodes until the iteration quota is reached
            std::vector<OnPolicyChunk> chunks;
            while (static_cast<long>(chunks.size()) < cfg_.dppo_iter_chunks &&
                   st_.primitive_steps < cfg_.online_steps) {
                std::vector<OnPolicyChunk> episode;
                st_.episode_counter += 1;
                const std::uint64_t ep_seed = mix64(mix64(cfg_.seed, stream::kTrainEnv),
                                                    static_cast<std::uint64_t>(st_.episode_counter));
                env_.reset(ep_seed);
                std::vector<double> prim_rewards;
                std::vector<std::size_t> chunk_starts;
                while (!env_.done()) {
                    OnPolicyChunk c;
                    c.traj = sample_sde(st_.policy, env_.obs(), env_rng);
                    chunk_starts.push_back(prim_rewards.size());
                    ChunkTransition tr = chunk_step(env_, c.traj.final_action(),
                                                    cfg_.horizon_length, st_.episode_counter);
                    const long executed = env_steps_taken_(tr);
                    st_.primitive_steps += executed;
                    for (long j = 0; j < executed; ++j) {
                        prim_rewards.push_back(tr.rewards[static_cast<std::size_t>(j)]);
                    }
                    episode.push_back(std::move(c));
                }
                // discounted return-to-go per chunk over primitive rewards
                std::vector<double> rtg(prim_rewards.size() + 1, 0.0);
                for (std::size_t i = prim_rewards.size(); i-- > 0;) {
                    rtg[i] = prim_rewards[i] + cfg_.gamma * rtg[i + 1];
                }
                for (std::size_t t = 0; t < episode.size(); ++t) {
                    episode[t].return_to_go = rtg[chunk_starts[t]];
                }
                for (auto& c : episode) chunks.push_back(std::move(c));
            }
            if (chunks.empty()) break;
            // minibatch PPO epochs over the freshly collected set
            std::vector<std::size_t> order(chunks.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (int epoch = 0; epoch < cfg_.dppo_epochs; ++epoch) {
                for (std::size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[update_rng.below(i)]);
                }
                for (std::size_t off = 0; off < order.size();
                     off += static_cast<std::size_t>(cfg_.dppo_minibatch)) {
                    std::vector<OnPolicyChunk*> mb;
                    for (std::size_t i = off;
                         i < std::min(order.size(),
                                      off + static_cast<std::size_t>(cfg_.dppo_minibatch));
                         ++i) {
                        mb.push_back(&chunks[order[i]]);
                    }
                    const double lr = lr_at(st_.baseline_optim.step, st_.baseline_optim,
                                            cfg_.ppo_lr);
                    if (lr <= 0.0) {
                        st_.baseline_optim.step += 1;
                        continue;
                    }
                    UpdateMetrics m = dppo_update(st_.policy, mb, st_.value_net, st_.value_optim,
                                                  st_.baseline_optim, cfg_.critic_lr, lr,
                                                  cfg_.gamma_denoise, cfg_.clip_epsilon);
                    note_actor_metrics_(m.loss, m.aux_loss, m.grad_norm, 1.0);
                }
            }
            record_train_metrics_();
        }
        record_eval_(result, st_.primitive_steps);
        result.max_grad_norm = max_grad_norm_;
    }

    TrainerConfig cfg_;
    std::string out_dir_;
    Env env_;
    bool env_started_ = false;
    std::size_t obs_dim_ = 0, prim_dim_ = 0, action_dim_ = 0;
    TrainState st_;
    MetricsSink metrics_;
    std::vector<ChunkTransition> offline_;
    std::vector<std::pair<const Tensor*, const Tensor*>> offline_pairs_;

    double last_actor_loss_ = 0.0, last_bc_loss_ = 0.0, last_critic_loss_ = 0.0;
    double last_td_target_mean_ = 0.0, last_q_mean_ = 0.0, last_q_min_ = 0.0;
    double last_ratio_mean_ = 1.0, last_grad_norm_ = 0.0, max_grad_norm_ = 0.0;
    int eval_round_ = 0;
};

}  // namespace ogpo
