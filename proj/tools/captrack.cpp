// Command-line entry point: synthetic data generation, training, tracking,
// evaluation, triangulation, and gradient checks, all file based.

#include <CLI11.hpp>
#include <cstdio>

#include "captrack/workflows.hpp"

namespace {

nlohmann::json load_config(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    return captrack::detail::read_json(path);
}

struct CommonFlags {
    std::string config;
    std::string out;
    int64_t seed = -1;
    bool deterministic = false;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config, "JSON config file");
    cmd->add_option("--out", flags.out, "output directory (overrides config)");
    cmd->add_option("--seed", flags.seed, "random seed (overrides config)");
    cmd->add_flag("--deterministic", flags.deterministic, "record deterministic mode");
    cmd->add_flag("--verbose", flags.verbose, "verbose diagnostics");
}

nlohmann::json resolve(const CommonFlags& flags) {
    nlohmann::json cfg = load_config(flags.config);
    if (!flags.out.empty()) cfg["out"] = flags.out;
    if (flags.seed >= 0) cfg["seed"] = static_cast<uint64_t>(flags.seed);
    if (flags.deterministic) cfg["deterministic"] = true;
    if (flags.verbose) cfg["verbose"] = true;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    captrack::tune_malloc_for_tensors();
    CLI::App app{"capacitive hand tracking toolkit"};
    app.require_subcommand(1);

    CommonFlags synth_flags, train_flags, track_flags, eval_flags, tri_flags, grad_flags;
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(synth, synth_flags);
    auto* train = app.add_subcommand("train", "train the joint estimator");
    add_common(train, train_flags);
    auto* track = app.add_subcommand("track", "run estimator + IK over a .capv sequence");
    add_common(track, track_flags);
    std::string track_capv, track_ckpt;
    track->add_option("--capv", track_capv, "capacitive sequence file");
    track->add_option("--checkpoint", track_ckpt, "trained checkpoint manifest");
    auto* eval = app.add_subcommand("eval", "compare a pose stream against ground truth");
    add_common(eval, eval_flags);
    std::string eval_pred, eval_gt;
    eval->add_option("--pred", eval_pred, "predicted pose stream");
    eval->add_option("--gt", eval_gt, "ground-truth pose stream");
    auto* tri = app.add_subcommand("triangulate", "triangulate 2d observations into 3d poses");
    add_common(tri, tri_flags);
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient table");
    add_common(grad, grad_flags);

    CLI11_PARSE(app, argc, argv);

    try {
        nlohmann::json result;
        if (synth->parsed()) {
            result = captrack::run_synth(resolve(synth_flags));
        } else if (train->parsed()) {
            result = captrack::run_train(resolve(train_flags));
        } else if (track->parsed()) {
            nlohmann::json cfg = resolve(track_flags);
            if (!track_capv.empty()) cfg["capv"] = track_capv;
            if (!track_ckpt.empty()) cfg["checkpoint"] = track_ckpt;
            result = captrack::run_track(cfg);
        } else if (eval->parsed()) {
            nlohmann::json cfg = resolve(eval_flags);
            if (!eval_pred.empty()) cfg["pred"] = eval_pred;
            if (!eval_gt.empty()) cfg["gt"] = eval_gt;
            result = captrack::run_eval(cfg);
        } else if (tri->parsed()) {
            result = captrack::run_triangulate(resolve(tri_flags));
        } else if (grad->parsed()) {
            result = captrack::run_gradcheck(resolve(grad_flags));
            if (!result.value("pass", false)) return 1;
        }
        std::printf("%s\n", result.dump(1).c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
