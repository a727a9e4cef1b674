// Command-line entry point: demo generation, BC pretraining, RL training,
// evaluation, diagnostic oracles, and action export.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ogpo/config.hpp"
#include "ogpo/diagnostics.hpp"
#include "ogpo/envs.hpp"
#include "ogpo/io.hpp"
#include "ogpo/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckFailed = 3;

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string env;
    std::string algo;
    std::string out;
    long steps = -1;
    std::string checkpoint;
    bool force = false;
};

ogpo::TrainerConfig resolve_config(const CommonArgs& a) {
    ogpo::TrainerConfig cfg;
    nlohmann::json user = nlohmann::json::object();
    if (!a.config_path.empty()) {
        std::ifstream in(a.config_path);
        if (!in) throw std::runtime_error("cannot open config file: " + a.config_path);
        user = nlohmann::json::parse(in);
    }
    if (a.seed_set) user["seed"] = a.seed;
    if (!a.env.empty()) user["env"] = a.env;
    if (!a.algo.empty()) user["algo"] = a.algo;
    cfg = ogpo::config_from_json(user);
    if (a.steps >= 0) cfg.online_steps = a.steps;
    return cfg;
}

std::string out_dir_of(const CommonArgs& a) {
    if (!a.out.empty()) return a.out;
    if (const char* env_out = std::getenv("OGPO_OUT")) return env_out;
    return "runs/out";
}

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "JSON config file");
    cmd->add_option("--seed", a.seed, "RNG seed")->each([&a](const std::string&) {
        a.seed_set = true;
    });
    cmd->add_option("--env", a.env, "environment: point-reach | fork-reach");
    cmd->add_option("--algo", a.algo,
                    "algorithm: ogpo | ogpo-plus | ogpo-ca | ogpo-chi2 | qc | dsrl | expo | "
                    "dppo | bptt | awr | aw-ogpo | aspo");
    cmd->add_option("--out", a.out, "output directory (default $OGPO_OUT or runs/out)");
    cmd->add_option("--steps", a.steps, "primitive env step budget override");
    cmd->add_option("--checkpoint", a.checkpoint, "checkpoint path");
    cmd->add_flag("--force", a.force, "skip config-hash check on checkpoint load");
}

int cmd_gen_demos(const CommonArgs& a, const std::string& dataset_out) {
    ogpo::TrainerConfig cfg = resolve_config(a);
    const ogpo::EnvKind kind = cfg.env_kind();
    double noise = cfg.demo_noise;
    if (noise < 0.0) {
        noise = ogpo::calibrate_noise(kind, cfg.bc_clip_target / 100.0, cfg.horizon_length, 200,
                                      cfg.seed);
        std::cout << "calibrated demo noise_std = " << noise << "\n";
    }
    ogpo::Dataset ds;
    ds.env = cfg.env;
    ds.h = cfg.horizon_length;
    ogpo::Env env(kind);
    ds.obs_dim = env.spec().obs_dim;
    ds.action_dim = env.spec().action_dim * static_cast<std::size_t>(cfg.horizon_length);
    int successes = 0;
    for (int e = 0; e < cfg.demo_episodes; ++e) {
        ogpo::Rng noise_rng(ogpo::mix64(cfg.seed, 5000 + static_cast<std::uint64_t>(e)));
        ogpo::DemoEpisode ep =
            ogpo::scripted_demo(env, noise, cfg.horizon_length,
                                ogpo::mix64(cfg.seed, 4000 + static_cast<std::uint64_t>(e)),
                                noise_rng);
        successes += ep.success ? 1 : 0;
        ds.episodes.push_back(std::move(ep));
    }
    ogpo::ensure_dir(std::filesystem::path(dataset_out).parent_path().string().empty()
                         ? "."
                         : std::filesystem::path(dataset_out).parent_path().string());
    ogpo::save_dataset(dataset_out, ds);
    std::cout << "wrote " << cfg.demo_episodes << " episodes (success rate "
              << static_cast<double>(successes) / cfg.demo_episodes << ") to " << dataset_out
              << "\n";
    return kExitOk;
}

int cmd_pretrain_bc(const CommonArgs& a, const std::string& dataset_path) {
    ogpo::TrainerConfig cfg = resolve_config(a);
    ogpo::Dataset ds = ogpo::load_dataset(dataset_path);
    ogpo::Trainer trainer(cfg, out_dir_of(a));
    trainer.set_offline_dataset(ds);
    trainer.pretrain_bc();
    trainer.save_bc_checkpoint(out_dir_of(a) + "/bc.ckpt");
    ogpo::EvalResult ev = trainer.evaluate(cfg.bc_eval_episodes, 0xF1);
    std::cout << "bc checkpoint success rate: " << ev.success_rate << "\n";
    return kExitOk;
}

int cmd_train(const CommonArgs& a, const std::string& dataset_path) {
    ogpo::TrainerConfig cfg = resolve_config(a);
    ogpo::Trainer trainer(cfg, out_dir_of(a));
    const ogpo::Dataset* demos_ptr = nullptr;
    ogpo::Dataset demos;
    if (!dataset_path.empty()) {
        demos = ogpo::load_dataset(dataset_path);
        demos_ptr = &demos;
    }
    ogpo::TrainResult res = trainer.run(demos_ptr, a.checkpoint, a.force);
    if (res.aborted) {
        std::cerr << "run aborted: " << res.abort_reason << "\n";
        return kExitRuntime;
    }
    std::cout << "final eval success rate: " << res.final_success << " after "
              << res.primitive_steps << " primitive steps\n";
    return kExitOk;
}

int cmd_eval(const CommonArgs& a) {
    ogpo::TrainerConfig cfg = resolve_config(a);
    if (a.checkpoint.empty()) throw std::runtime_error("eval: --checkpoint required");
    ogpo::Trainer trainer(cfg, out_dir_of(a));
    trainer.load_full_checkpoint(a.checkpoint, a.force);
    ogpo::EvalResult ev = trainer.evaluate(cfg.eval_episodes, 0xEE);
    std::cout << "success_rate " << ev.success_rate << "\n";
    std::cout << "mean_return " << ev.mean_return << "\n";
    if (ev.mean_succ_len) std::cout << "mean_succ_len " << *ev.mean_succ_len << "\n";
    return kExitOk;
}

int cmd_gradcheck() {
    auto results = ogpo::run_gradient_suite(10);
    bool all = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << " " << r.name
                  << " worst_rel_err=" << r.worst_rel_err << "\n";
        all = all && r.pass;
    }
    return all ? kExitOk : kExitCheckFailed;
}

int cmd_marginal_check(const CommonArgs& a) {
    auto r = ogpo::marginal_check(100000, 256, 0.01, a.seed_set ? a.seed : 1);
    std::cout << "ode       mean=" << r.ode.mean << " var=" << r.ode.var << "\n";
    std::cout << "corrected mean=" << r.corrected.mean << " var=" << r.corrected.var
              << (r.corrected_mean_ok && r.corrected_var_ok ? "  (within 3*SE)" : "  (OUT OF BAND)")
              << "\n";
    std::cout << "uncorrect mean=" << r.uncorrected.mean << " var=" << r.uncorrected.var
              << (r.uncorrected_var_detected ? "  (inflation detected >5*SE)" : "  (NOT detected)")
              << "\n";
    std::cout << (r.pass ? "PASS" : "FAIL") << " marginal-check\n";
    return r.pass ? kExitOk : kExitCheckFailed;
}

int cmd_chi2_check(const CommonArgs& a) {
    auto r = ogpo::chi2_check(1000000, 0.01, 0.01, a.seed_set ? a.seed : 7);
    std::cout << "E[omega] = " << r.estimate << " +- " << r.se << " (expected " << r.expected
              << ")\n";
    std::cout << (r.pass ? "PASS" : "FAIL") << " chi2-check\n";
    return r.pass ? kExitOk : kExitCheckFailed;
}

int cmd_td_check() {
    auto r = ogpo::td_check();
    std::cout << "Q(s0)=" << r.q_s0 << " (expect " << r.expected_q_s0 << "), Q(s1)=" << r.q_s1
              << " (expect " << r.expected_q_s1 << ") after " << r.updates << " updates\n";
    std::cout << (r.pass ? "PASS" : "FAIL") << " td-check\n";
    return r.pass ? kExitOk : kExitCheckFailed;
}

int cmd_export_actions(const CommonArgs& a, const std::string& states_path,
                       const std::string& csv_out, int n) {
    ogpo::TrainerConfig cfg = resolve_config(a);
    if (a.checkpoint.empty()) throw std::runtime_error("export-actions: --checkpoint required");
    ogpo::Trainer trainer(cfg, out_dir_of(a), /*write_files=*/false);
    trainer.load_full_checkpoint(a.checkpoint, a.force);

    std::ifstream in(states_path);
    if (!in) throw std::runtime_error("cannot open states file: " + states_path);
    nlohmann::json j = nlohmann::json::parse(in);
    std::vector<std::vector<double>> states = j.at("states").get<std::vector<std::vector<double>>>();

    std::ofstream csv(csv_out, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open output: " + csv_out);
    const std::size_t da = trainer.state().policy.action_dim;
    const std::size_t M = trainer.state().critic.members();
    csv << "state_index";
    for (std::size_t c = 0; c < da; ++c) csv << ",a" << c;
    for (std::size_t m = 0; m < M; ++m) csv << ",q" << m;
    csv << "\n";
    ogpo::Rng rng(ogpo::mix64(cfg.seed, 0xACED));
    for (std::size_t si = 0; si < states.size(); ++si) {
        if (states[si].size() != trainer.state().policy.obs_dim) {
            throw std::runtime_error("export-actions: state dim mismatch");
        }
        ogpo::Tensor s = ogpo::Tensor::vector(states[si]);
        for (int i = 0; i < n; ++i) {
            ogpo::DenoisingTrajectory t = ogpo::sample_sde(trainer.state().ema, s, rng);
            const ogpo::Tensor& act = t.final_action();
            auto qs = ogpo::q_eval(trainer.state().critic, s, act, /*use_targets=*/true);
            csv << si;
            for (std::size_t c = 0; c < da; ++c) csv << "," << act[c];
            for (double q : qs) csv << "," << q;
            csv << "\n";
        }
    }
    return kExitOk;
}

int cmd_export_curve(const std::string& metrics_path, const std::string& csv_out) {
    std::ofstream csv(csv_out, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open output: " + csv_out);
    ogpo::export_learning_curve(metrics_path, csv);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Off-policy RL fine-tuning for flow-based control policies"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string dataset_path, dataset_out, states_path, csv_out, metrics_path;
    int export_n = 16;

    auto* gen = app.add_subcommand("gen-demos", "generate scripted demonstrations");
    add_common(gen, args);
    gen->add_option("--dataset-out", dataset_out, "output dataset path")->required();

    auto* pre = app.add_subcommand("pretrain-bc", "behavior-clone the flow policy on demos");
    add_common(pre, args);
    pre->add_option("--dataset", dataset_path, "demo dataset path")->required();

    auto* train = app.add_subcommand("train", "run RL fine-tuning");
    add_common(train, args);
    train->add_option("--dataset", dataset_path, "demo dataset (for BC pretrain/offline mixing)");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, args);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");

    auto* marg = app.add_subcommand("marginal-check", "ODE-to-SDE correction oracle");
    add_common(marg, args);

    auto* chi2 = app.add_subcommand("chi2-check", "chain-ratio chi^2 lemma oracle");
    add_common(chi2, args);

    auto* td = app.add_subcommand("td-check", "TD fixed-point oracle");

    auto* exp = app.add_subcommand("export-actions", "sample actions + Q values to CSV");
    add_common(exp, args);
    exp->add_option("--states", states_path, "JSON file with a \"states\" array")->required();
    exp->add_option("--csv-out", csv_out, "output CSV path")->required();
    exp->add_option("-n,--samples", export_n, "samples per state");

    auto* curve = app.add_subcommand("export-curve", "metrics.jsonl -> learning-curve CSV");
    curve->add_option("--metrics", metrics_path, "metrics.jsonl path")->required();
    curve->add_option("--csv-out", csv_out, "output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_demos(args, dataset_out);
        if (pre->parsed()) return cmd_pretrain_bc(args, dataset_path);
        if (train->parsed()) return cmd_train(args, dataset_path);
        if (eval->parsed()) return cmd_eval(args);
        if (grad->parsed()) return cmd_gradcheck();
        if (marg->parsed()) return cmd_marginal_check(args);
        if (chi2->parsed()) return cmd_chi2_check(args);
        if (td->parsed()) return cmd_td_check();
        if (exp->parsed()) return cmd_export_actions(args, states_path, csv_out, export_n);
        if (curve->parsed()) return cmd_export_curve(metrics_path, csv_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
