#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ogpo/critic.hpp"
#include "ogpo/envs.hpp"
#include "ogpo/extraction.hpp"
#include "ogpo/mlp.hpp"
#include "ogpo/optim.hpp"

namespace ogpo {

enum class Algo {
    Ogpo,
    OgpoPlus,
    OgpoCa,
    OgpoChi2,
    Qc,
    Dsrl,
    Expo,
    Dppo,
    Bptt,
    Awr,
    AwOgpo,
    Aspo,
};

inline const char* to_string(Algo a) {
    switch (a) {
        case Algo::Ogpo: return "ogpo";
        case Algo::OgpoPlus: return "ogpo-plus";
        case Algo::OgpoCa: return "ogpo-ca";
        case Algo::OgpoChi2: return "ogpo-chi2";
        case Algo::Qc: return "qc";
        case Algo::Dsrl: return "dsrl";
        case Algo::Expo: return "expo";
        case Algo::Dppo: return "dppo";
        case Algo::Bptt: return "bptt";
        case Algo::Awr: return "awr";
        case Algo::AwOgpo: return "aw-ogpo";
        case Algo::Aspo: return "aspo";
    }
    return "?";
}

inline Algo algo_from_string(const std::string& s) {
    for (Algo a : {Algo::Ogpo, Algo::OgpoPlus, Algo::OgpoCa, Algo::OgpoChi2, Algo::Qc, Algo::Dsrl,
                   Algo::Expo, Algo::Dppo, Algo::Bptt, Algo::Awr, Algo::AwOgpo, Algo::Aspo}) {
        if (s == to_string(a)) return a;
    }
    throw std::invalid_argument("unknown algo: " + s);
}

// Every scalar knob in one place. Defaults follow the agent-default table
// for the algorithmic values; capacity and batch knobs are sized for the
// desk-scale environments.
struct TrainerConfig {
    std::string algo = "ogpo-plus";
    std::string env = "point-reach";
    std::uint64_t seed = 0;

    // MDP / policy structure
    double gamma = 0.99;
    int horizon_length = 4;  // h, primitive steps per chunk
    int flow_steps = 10;     // K
    double noise_std = 0.01;  // constant per-step injected sigma
    bool correct_sde = true;

    // critic ensemble
    int num_qs = 10;
    std::string q_agg = "mean";
    bool subsample_bon = true;
    int n_vr = 1;

    // extraction
    int group_size = 32;            // G
    int ppo_state_batch = 4;        // N_batch states per actor update
    double clip_epsilon = 0.01;
    double bc_coeff = 1.0;
    int best_of_n = 8;              // 0/1 disables
    std::string adv_strategy = "mean-baseline";
    bool no_negative = false;
    bool grpo_std = false;          // ablation switch on top of mean-baseline
    double beta_init = 1.0;         // chi2 penalty scale
    double alpha = 10.0;            // pessimism-mix sensitivity
    double beta_awr = 1.0;
    bool aw_positive_only = false;

    // EMA
    double tau = 0.05;
    double tau_slow = 0.005;

    // data
    bool use_offline = false;
    double r_offline = 0.0;
    std::size_t replay_capacity = 1000000;
    int batch_size = 64;  // critic / BC minibatch

    // learning rates & schedules
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double ppo_lr = 4.5e-5;
    std::string actor_scheduler = "cosine";
    long actor_warmup_steps = 2000;
    long actor_decay_steps = 50000;
    double actor_end_value = 2e-5;
    std::string critic_scheduler = "constant";
    long critic_warmup_steps = 500;
    long critic_decay_steps = 5000;
    double critic_end_value = 0.0;
    double actor_weight_decay = 0.0;
    double critic_weight_decay = 1e-5;

    // network sizes
    std::vector<std::size_t> actor_hidden = {64, 64};
    std::vector<std::size_t> value_hidden = {64, 64};
    std::string activation = "tanh";

    // budgets & cadence (steps are primitive env steps unless noted)
    long offline_steps = 20000;  // BC pretrain gradient steps
    long online_steps = 150000;
    long bc_eval_interval = 1000;  // gradient steps between BC evals
    int bc_eval_episodes = 200;
    bool clip_bc = true;
    double bc_clip_target = 50.0;  // percent
    int warmup_episodes = 20;
    bool warmup_critic = true;
    long critic_warmup_updates = 2000;
    int utd_warmup = 1;
    int utd_q = 1;
    int utd_pi = 1;
    long eval_interval = 2000;
    int eval_episodes = 100;
    long log_interval = 250;  // chunk steps between train-metric records

    // baselines
    double gamma_denoise = 0.9;
    long dppo_iter_chunks = 256;
    int dppo_epochs = 5;
    int dppo_minibatch = 64;
    double dsrl_entropy_bonus = 1e-3;
    double expo_entropy_bonus = 1e-3;
    double expo_edit_scale = 0.5;

    // demo generation
    int demo_episodes = 200;
    double demo_noise = -1.0;  // <0 means calibrate to bc_clip_target

    Algo algo_kind() const { return algo_from_string(algo); }
    EnvKind env_kind() const { return env_kind_from_string(env); }
    QAgg q_agg_kind() const { return q_agg_from_string(q_agg); }
    Activation activation_kind() const { return activation_from_string(activation); }

    AdvStrategy effective_adv_strategy() const {
        AdvStrategy s = adv_strategy_from_string(adv_strategy);
        if (grpo_std && s == AdvStrategy::MeanBaseline) return AdvStrategy::GrpoStd;
        return s;
    }

    void validate() const {
        algo_kind();
        env_kind();
        q_agg_kind();
        activation_kind();
        adv_strategy_from_string(adv_strategy);
        scheduler_from_string(actor_scheduler);
        scheduler_from_string(critic_scheduler);
        if (gamma <= 0.0 || gamma >= 1.0) throw std::invalid_argument("config: gamma in (0,1)");
        if (horizon_length < 1) throw std::invalid_argument("config: horizon_length >= 1");
        if (flow_steps < 1) throw std::invalid_argument("config: flow_steps >= 1");
        if (noise_std < 0.0) throw std::invalid_argument("config: noise_std >= 0");
        if (num_qs < 1) throw std::invalid_argument("config: num_qs >= 1");
        if (n_vr < 1) throw std::invalid_argument("config: n_vr >= 1");
        if (group_size < 2) throw std::invalid_argument("config: group_size >= 2");
        if (ppo_state_batch < 1) throw std::invalid_argument("config: ppo_state_batch >= 1");
        if (clip_epsilon <= 0.0) throw std::invalid_argument("config: clip_epsilon > 0");
        if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("config: tau in [0,1]");
        if (tau_slow < 0.0 || tau_slow > 1.0) throw std::invalid_argument("config: tau_slow in [0,1]");
        if (r_offline < 0.0 || r_offline > 1.0) throw std::invalid_argument("config: r_offline in [0,1]");
        if (replay_capacity < 1) throw std::invalid_argument("config: replay_capacity >= 1");
        if (batch_size < 1) throw std::invalid_argument("config: batch_size >= 1");
        if (actor_lr <= 0.0 || critic_lr <= 0.0 || ppo_lr <= 0.0) {
            throw std::invalid_argument("config: learning rates must be positive");
        }
        if (best_of_n < 0) throw std::invalid_argument("config: best_of_n >= 0");
        if (eval_episodes < 1) throw std::invalid_argument("config: eval_episodes >= 1");
        if (beta_awr <= 0.0) throw std::invalid_argument("config: beta_awr > 0");
        if (alpha <= 0.0) throw std::invalid_argument("config: alpha > 0");
        if (offline_steps < 0 || online_steps < 0) {
            throw std::invalid_argument("config: step budgets must be >= 0");
        }
    }
};

namespace detail {

template <class T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline nlohmann::json to_json(const TrainerConfig& c) {
    nlohmann::json j;
    j["algo"] = c.algo;
    j["env"] = c.env;
    j["seed"] = c.seed;
    j["gamma"] = c.gamma;
    j["horizon_length"] = c.horizon_length;
    j["flow_steps"] = c.flow_steps;
    j["noise_std"] = c.noise_std;
    j["correct_sde"] = c.correct_sde;
    j["num_qs"] = c.num_qs;
    j["q_agg"] = c.q_agg;
    j["subsample_bon"] = c.subsample_bon;
    j["n_vr"] = c.n_vr;
    j["group_size"] = c.group_size;
    j["ppo_state_batch"] = c.ppo_state_batch;
    j["clip_epsilon"] = c.clip_epsilon;
    j["bc_coeff"] = c.bc_coeff;
    j["best_of_n"] = c.best_of_n;
    j["adv_strategy"] = c.adv_strategy;
    j["no_negative"] = c.no_negative;
    j["grpo_std"] = c.grpo_std;
    j["beta_init"] = c.beta_init;
    j["alpha"] = c.alpha;
    j["beta_awr"] = c.beta_awr;
    j["aw_positive_only"] = c.aw_positive_only;
    j["tau"] = c.tau;
    j["tau_slow"] = c.tau_slow;
    j["use_offline"] = c.use_offline;
    j["r_offline"] = c.r_offline;
    j["replay_capacity"] = c.replay_capacity;
    j["batch_size"] = c.batch_size;
    j["actor_lr"] = c.actor_lr;
    j["critic_lr"] = c.critic_lr;
    j["ppo_lr"] = c.ppo_lr;
    j["actor_scheduler"] = c.actor_scheduler;
    j["actor_warmup_steps"] = c.actor_warmup_steps;
    j["actor_decay_steps"] = c.actor_decay_steps;
    j["actor_end_value"] = c.actor_end_value;
    j["critic_scheduler"] = c.critic_scheduler;
    j["critic_warmup_steps"] = c.critic_warmup_steps;
    j["critic_decay_steps"] = c.critic_decay_steps;
    j["critic_end_value"] = c.critic_end_value;
    j["actor_weight_decay"] = c.actor_weight_decay;
    j["critic_weight_decay"] = c.critic_weight_decay;
    j["actor_hidden"] = c.actor_hidden;
    j["value_hidden"] = c.value_hidden;
    j["activation"] = c.activation;
    j["offline_steps"] = c.offline_steps;
    j["online_steps"] = c.online_steps;
    j["bc_eval_interval"] = c.bc_eval_interval;
    j["bc_eval_episodes"] = c.bc_eval_episodes;
    j["clip_bc"] = c.clip_bc;
    j["bc_clip_target"] = c.bc_clip_target;
    j["warmup_episodes"] = c.warmup_episodes;
    j["warmup_critic"] = c.warmup_critic;
    j["critic_warmup_updates"] = c.critic_warmup_updates;
    j["utd_warmup"] = c.utd_warmup;
    j["utd_q"] = c.utd_q;
    j["utd_pi"] = c.utd_pi;
    j["eval_interval"] = c.eval_interval;
    j["eval_episodes"] = c.eval_episodes;
    j["log_interval"] = c.log_interval;
    j["gamma_denoise"] = c.gamma_denoise;
    j["dppo_iter_chunks"] = c.dppo_iter_chunks;
    j["dppo_epochs"] = c.dppo_epochs;
    j["dppo_minibatch"] = c.dppo_minibatch;
    j["dsrl_entropy_bonus"] = c.dsrl_entropy_bonus;
    j["expo_entropy_bonus"] = c.expo_entropy_bonus;
    j["expo_edit_scale"] = c.expo_edit_scale;
    j["demo_episodes"] = c.demo_episodes;
    j["demo_noise"] = c.demo_noise;
    return j;
}

inline void from_json_into(const nlohmann::json& j, TrainerConfig& c) {
    const nlohmann::json reference = to_json(TrainerConfig{});
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!reference.contains(it.key())) {
            throw std::invalid_argument("config: unknown key '" + it.key() + "'");
        }
    }
    detail::get_to(j, "algo", c.algo);
    detail::get_to(j, "env", c.env);
    detail::get_to(j, "seed", c.seed);
    detail::get_to(j, "gamma", c.gamma);
    detail::get_to(j, "horizon_length", c.horizon_length);
    detail::get_to(j, "flow_steps", c.flow_steps);
    detail::get_to(j, "noise_std", c.noise_std);
    detail::get_to(j, "correct_sde", c.correct_sde);
    detail::get_to(j, "num_qs", c.num_qs);
    detail::get_to(j, "q_agg", c.q_agg);
    detail::get_to(j, "subsample_bon", c.subsample_bon);
    detail::get_to(j, "n_vr", c.n_vr);
    detail::get_to(j, "group_size", c.group_size);
    detail::get_to(j, "ppo_state_batch", c.ppo_state_batch);
    detail::get_to(j, "clip_epsilon", c.clip_epsilon);
    detail::get_to(j, "bc_coeff", c.bc_coeff);
    detail::get_to(j, "best_of_n", c.best_of_n);
    detail::get_to(j, "adv_strategy", c.adv_strategy);
    detail::get_to(j, "no_negative", c.no_negative);
    detail::get_to(j, "grpo_std", c.grpo_std);
    detail::get_to(j, "beta_init", c.beta_init);
    detail::get_to(j, "alpha", c.alpha);
    detail::get_to(j, "beta_awr", c.beta_awr);
    detail::get_to(j, "aw_positive_only", c.aw_positive_only);
    detail::get_to(j, "tau", c.tau);
    detail::get_to(j, "tau_slow", c.tau_slow);
    detail::get_to(j, "use_offline", c.use_offline);
    detail::get_to(j, "r_offline", c.r_offline);
    detail::get_to(j, "replay_capacity", c.replay_capacity);
    detail::get_to(j, "batch_size", c.batch_size);
    detail::get_to(j, "actor_lr", c.actor_lr);
    detail::get_to(j, "critic_lr", c.critic_lr);
    detail::get_to(j, "ppo_lr", c.ppo_lr);
    detail::get_to(j, "actor_scheduler", c.actor_scheduler);
    detail::get_to(j, "actor_warmup_steps", c.actor_warmup_steps);
    detail::get_to(j, "actor_decay_steps", c.actor_decay_steps);
    detail::get_to(j, "actor_end_value", c.actor_end_value);
    detail::get_to(j, "critic_scheduler", c.critic_scheduler);
    detail::get_to(j, "critic_warmup_steps", c.critic_warmup_steps);
    detail::get_to(j, "critic_decay_steps", c.critic_decay_steps);
    detail::get_to(j, "critic_end_value", c.critic_end_value);
    detail::get_to(j, "actor_weight_decay", c.actor_weight_decay);
    detail::get_to(j, "critic_weight_decay", c.critic_weight_decay);
    detail::get_to(j, "actor_hidden", c.actor_hidden);
    detail::get_to(j, "value_hidden", c.value_hidden);
    detail::get_to(j, "activation", c.activation);
    detail::get_to(j, "offline_steps", c.offline_steps);
    detail::get_to(j, "online_steps", c.online_steps);
    detail::get_to(j, "bc_eval_interval", c.bc_eval_interval);
    detail::get_to(j, "bc_eval_episodes", c.bc_eval_episodes);
    detail::get_to(j, "clip_bc", c.clip_bc);
    detail::get_to(j, "bc_clip_target", c.bc_clip_target);
    detail::get_to(j, "warmup_episodes", c.warmup_episodes);
    detail::get_to(j, "warmup_critic", c.warmup_critic);
    detail::get_to(j, "critic_warmup_updates", c.critic_warmup_updates);
    detail::get_to(j, "utd_warmup", c.utd_warmup);
    detail::get_to(j, "utd_q", c.utd_q);
    detail::get_to(j, "utd_pi", c.utd_pi);
    detail::get_to(j, "eval_interval", c.eval_interval);
    detail::get_to(j, "eval_episodes", c.eval_episodes);
    detail::get_to(j, "log_interval", c.log_interval);
    detail::get_to(j, "gamma_denoise", c.gamma_denoise);
    detail::get_to(j, "dppo_iter_chunks", c.dppo_iter_chunks);
    detail::get_to(j, "dppo_epochs", c.dppo_epochs);
    detail::get_to(j, "dppo_minibatch", c.dppo_minibatch);
    detail::get_to(j, "dsrl_entropy_bonus", c.dsrl_entropy_bonus);
    detail::get_to(j, "expo_entropy_bonus", c.expo_entropy_bonus);
    detail::get_to(j, "expo_edit_scale", c.expo_edit_scale);
    detail::get_to(j, "demo_episodes", c.demo_episodes);
    detail::get_to(j, "demo_noise", c.demo_noise);
}

// Per-algorithm defaults for the fields the paper varies between variants.
// Only applied when the config file does not set the key itself.
inline void apply_algo_defaults(TrainerConfig& c, const nlohmann::json& user) {
    const Algo a = c.algo_kind();
    if (!user.contains("bc_coeff")) {
        c.bc_coeff = (a == Algo::OgpoPlus || a == Algo::OgpoCa || a == Algo::OgpoChi2) ? 1.0 : 0.0;
    }
    if (!user.contains("best_of_n")) {
        c.best_of_n =
            (a == Algo::OgpoPlus || a == Algo::OgpoCa || a == Algo::OgpoChi2 || a == Algo::Qc) ? 8
                                                                                               : 0;
    }
    if (!user.contains("adv_strategy")) {
        switch (a) {
            case Algo::OgpoCa: c.adv_strategy = "conservative"; break;
            case Algo::OgpoChi2: c.adv_strategy = "chi2"; break;
            default: c.adv_strategy = "mean-baseline"; break;
        }
    }
}

inline TrainerConfig config_from_json(const nlohmann::json& j) {
    TrainerConfig c;
    from_json_into(j, c);
    apply_algo_defaults(c, j);
    c.validate();
    return c;
}

inline TrainerConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    return config_from_json(j);
}

inline std::string resolved_config_string(const TrainerConfig& c) { return to_json(c).dump(2); }

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string config_hash(const TrainerConfig& c) {
    const std::string s = resolved_config_string(c);
    std::ostringstream os;
    os << std::hex << fnv1a64(s.data(), s.size());
    return os.str();
}

}  // namespace ogpo
