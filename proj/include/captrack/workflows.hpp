#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "captrack/evalkit.hpp"
#include "captrack/gradcheck.hpp"
#include "captrack/ik_solver.hpp"
#include "captrack/synth.hpp"
#include "captrack/training.hpp"

// File-based workflows behind the CLI subcommands. Every run writes a
// resolved-config snapshot next to its outputs and is reproducible from
// config + seed.

namespace captrack {

namespace detail {

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write " + path);
    out << j.dump(1) << "\n";
}

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

inline std::string prepare_out_dir(const nlohmann::json& cfg, const std::string& snapshot_name) {
    std::string out = cfg.value("out", ".");
    std::error_code ec;
    std::filesystem::create_directories(out, ec);
    require(std::filesystem::is_directory(out), "output directory not writable: " + out);
    write_json((std::filesystem::path(out) / snapshot_name).string(), cfg);
    return out;
}

inline std::string resolve_relative(const std::string& base_file, const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_absolute()) return path;
    return (std::filesystem::path(base_file).parent_path() / p).string();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth: scenario sequences -> .capv + ground truth + observations + index
// ---------------------------------------------------------------------------

inline nlohmann::json run_synth(nlohmann::json cfg) {
    const uint64_t seed = cfg.value("seed", 0ull);
    const int sequences = cfg.value("sequences", 16);
    const double duration_s = cfg.value("duration_s", 30.0);
    const double fps = cfg.value("fps", 15.0);
    const int participants = cfg.value("participants", 4);
    const int sessions = cfg.value("sessions", 4);
    const bool cameras = cfg.value("cameras", true);
    const std::string out = detail::prepare_out_dir(cfg, "synth_config.json");

    HandTemplate tmpl = default_hand_template();
    save_template((std::filesystem::path(out) / "hand_template.json").string(), tmpl);
    CameraRig rig = default_rig();
    save_rig((std::filesystem::path(out) / "rig.json").string(), rig);

    ScreenGeometry geom;
    std::vector<DatasetEntry> index;
    const char* hand_cycle[4] = {"right", "right", "left", "both"};
    for (int i = 0; i < sequences; ++i) {
        SynthScenario sc;
        sc.seed = seed * 1000003ull + static_cast<uint64_t>(i);
        sc.gesture = kAllGestures[static_cast<size_t>(i % 5)];
        sc.frames = std::max(1, static_cast<int>(std::lround(duration_s * fps)));
        sc.fps = fps;
        sc.cap_noise_sigma = cfg.value("cap_noise_sigma", 2.0);
        sc.px_noise_sigma = cfg.value("px_noise_sigma", 0.5);
        sc.keyframe_interval = cfg.value("keyframe_interval", 15);
        sc.beta_scale = cfg.value("beta_scale", 0.5);
        std::string hands = hand_cycle[i % 4];
        sc.hands = {hands != "right", hands != "left"};

        // The trajectory runs at twice the capacitive rate: cameras observe
        // every sample, the touch sensor every second one.
        SynthScenario sc30 = sc;
        sc30.frames = 2 * sc.frames;
        sc30.fps = 2.0 * fps;
        sc30.keyframe_interval = 2 * sc.keyframe_interval;
        auto frames30 = generate_trajectory(sc30, tmpl, geom);
        std::vector<SynthFrame> frames;
        for (int f = 0; f < sc.frames; ++f) frames.push_back(frames30[static_cast<size_t>(2 * f)]);

        Rng noise_rng(sc.seed ^ 0xc0ffee);
        CapSequence cap;
        cap.fps = static_cast<float>(fps);
        std::vector<ObservationFrame> obs;
        for (size_t f = 0; f < frames.size(); ++f)
            cap.frames.push_back(
                simulate_capacitance_for(frames[f], tmpl, geom, sc.cap_noise_sigma, noise_rng));
        if (cameras) {
            for (size_t f = 0; f < frames30.size(); ++f) {
                ObservationFrame of;
                of.frame = static_cast<int>(f);
                of.t_ms = frames30[f].t_ms;
                of.hands = simulate_cameras(frames30[f].gt, rig, sc.px_noise_sigma, noise_rng);
                obs.push_back(std::move(of));
            }
        }

        char name[32];
        std::snprintf(name, sizeof(name), "seq_%03d", i);
        DatasetEntry entry;
        entry.meta.id = name;
        entry.meta.participant = i % participants;
        entry.meta.session = (i / participants) % sessions;
        entry.meta.gesture = sc.gesture;
        entry.meta.hands = hands;
        entry.capv = std::string(name) + ".capv";
        entry.gt = std::string(name) + "_gt.jsonl";
        entry.obs = cameras ? std::string(name) + "_obs.jsonl" : "";
        entry.frames = sc.frames;
        entry.fps = fps;
        write_capv((std::filesystem::path(out) / entry.capv).string(), cap);
        write_gt_stream((std::filesystem::path(out) / entry.gt).string(), frames);
        if (cameras)
            write_observations((std::filesystem::path(out) / entry.obs).string(), obs);
        index.push_back(entry);
    }
    save_index((std::filesystem::path(out) / "index.json").string(), index);
    nlohmann::json result;
    result["sequences"] = sequences;
    result["index"] = (std::filesystem::path(out) / "index.json").string();
    return result;
}

// ---------------------------------------------------------------------------
// train: dataset index -> checkpoint + loss curve
// ---------------------------------------------------------------------------

inline std::vector<TrainSequence> load_train_dataset(const std::string& index_path,
                                                     const EstimatorConfig& cfg,
                                                     const std::vector<DatasetEntry>& entries) {
    ScreenGeometry geom;
    std::vector<TrainSequence> dataset;
    for (const auto& e : entries) {
        CapSequence cap = read_capv(detail::resolve_relative(index_path, e.capv));
        auto gts = read_jointset_stream(detail::resolve_relative(index_path, e.gt));
        require(cap.frames.size() == gts.size(),
                "dataset sequence " + e.meta.id + ": capv and gt frame counts differ");
        TrainSequence seq;
        for (size_t f = 0; f < cap.frames.size(); ++f) {
            GroundTruthFrame gt;
            gt.present = gts[f].js.present;
            gt.joints = gts[f].js.joints;
            seq.push_back(make_train_frame(preprocess(cap.frames[f], geom), gt, cfg, geom));
        }
        dataset.push_back(std::move(seq));
    }
    return dataset;
}

inline nlohmann::json run_train(nlohmann::json cfg) {
    const std::string out = detail::prepare_out_dir(cfg, "train_config.json");
    const std::string index_path = cfg.at("index");
    auto entries = load_index(index_path);
    if (cfg.contains("filter")) {
        const auto& f = cfg["filter"];
        Split split = build_protocol_splits(entries, protocol_from_name(f.at("protocol")),
                                            f.at("fold"));
        entries = f.value("part", "train") == std::string("train") ? split.train : split.test;
    }
    require(!entries.empty(), "train: no sequences selected");

    EstimatorConfig ecfg = cfg.value("scale", "desk") == std::string("full")
                               ? EstimatorConfig()
                               : EstimatorConfig::desk_scale();
    if (cfg.contains("estimator")) ecfg = estimator_config_from_json(cfg["estimator"]);

    TrainConfig tc;
    tc.seed = cfg.value("seed", 0ull);
    tc.epochs = cfg.value("epochs", 1000);
    tc.batch_size = cfg.value("batch_size", 8);
    tc.threads = cfg.value("threads", 2);
    tc.fixed_n = cfg.value("fixed_n", 0);
    tc.max_steps = cfg.value("max_steps", 0);
    tc.lr0 = cfg.value("lr0", 1e-3);
    tc.lr_decay = cfg.value("lr_decay", 0.999);
    tc.flip_prob = cfg.value("flip_prob", 0.5);

    auto dataset = load_train_dataset(index_path, ecfg, entries);
    const bool verbose = cfg.value("verbose", false);
    TrainResult result = train(dataset, ecfg, tc, ScreenGeometry{},
                               [&](int epoch, const LossBreakdown& loss) {
                                   if (verbose && epoch % 10 == 0)
                                       std::fprintf(stderr, "epoch %d loss %.4f\n", epoch,
                                                    loss.total);
                               });
    require(std::isfinite(result.curve.back().loss.total),
            "train: loss became non-finite, aborting");

    std::vector<std::pair<Tensor*, AdamState>>* opt = nullptr;
    save_checkpoint((std::filesystem::path(out) / "checkpoint.json").string(),
                    (std::filesystem::path(out) / "model.bin").string(), result.params,
                    static_cast<int>(result.curve.size()), result.steps, opt);
    write_loss_curve_csv((std::filesystem::path(out) / "loss.csv").string(), result.curve);

    nlohmann::json res;
    res["checkpoint"] = (std::filesystem::path(out) / "checkpoint.json").string();
    res["steps"] = result.steps;
    res["initial_loss"] = result.curve.front().loss.total;
    res["final_loss"] = result.curve.back().loss.total;
    return res;
}

// ---------------------------------------------------------------------------
// track: capv + checkpoint -> pose stream + timing report
// ---------------------------------------------------------------------------

inline std::string track_line(const TimedJointSet& decoded, const TrackFrameResult& ik,
                              const std::array<std::array<Vec3, kNumJoints>, 2>& tracked,
                              bool verbose) {
    std::string out = "{\"t\":" + std::to_string(decoded.t_ms) + ",\"hands\":[";
    char buf[48];
    for (int hd = 0; hd < 2; ++hd) {
        if (hd) out += ",";
        bool present = decoded.js.present[static_cast<size_t>(hd)] &&
                       ik.solutions[static_cast<size_t>(hd)].has_value();
        out += std::string("{\"present\":") + (present ? "true" : "false");
        out += ",\"joints\":";
        if (present) {
            detail::append_joint_array(out, tracked[static_cast<size_t>(hd)]);
        } else {
            std::array<Vec3, kNumJoints> zeros;
            zeros.fill(Vec3::Zero());
            detail::append_joint_array(out, zeros);
        }
        out += ",\"conf\":[";
        for (int j = 0; j < kNumJoints; ++j) {
            if (j) out += ",";
            detail::append_f6(out, decoded.js.confidence[static_cast<size_t>(hd)][static_cast<size_t>(j)]);
        }
        out += "]";
        if (present && verbose) {
            const IkSolution& sol = *ik.solutions[static_cast<size_t>(hd)];
            out += ",\"decoded\":";
            detail::append_joint_array(out, decoded.js.joints[static_cast<size_t>(hd)]);
            out += ",\"ik\":{\"theta\":[";
            for (int i = 0; i < kThetaDim; ++i) {
                if (i) out += ",";
                std::snprintf(buf, sizeof(buf), "%.9g", sol.pose.theta[static_cast<size_t>(i)]);
                out += buf;
            }
            out += "],\"beta\":[";
            for (int i = 0; i < kBetaDim; ++i) {
                if (i) out += ",";
                std::snprintf(buf, sizeof(buf), "%.9g", sol.pose.beta[static_cast<size_t>(i)]);
                out += buf;
            }
            std::snprintf(buf, sizeof(buf), "],\"residual_mm\":%.6f,", sol.residual_rms_mm);
            out += buf;
            out += "\"iterations\":" + std::to_string(sol.iterations) + ",\"converged\":";
            out += sol.converged ? "true" : "false";
            out += ",\"active\":" + std::to_string(sol.active.size()) + "}";
        }
        out += "}";
    }
    out += "]}";
    return out;
}

inline nlohmann::json run_track(nlohmann::json cfg) {
    const std::string out = detail::prepare_out_dir(cfg, "track_config.json");
    const std::string capv_path = cfg.at("capv");
    Checkpoint ck = load_checkpoint(cfg.at("checkpoint"));
    HandTemplate tmpl = cfg.contains("template") && !cfg["template"].get<std::string>().empty()
                            ? load_template(cfg["template"])
                            : default_hand_template();
    const bool tta = cfg.value("tta", true);
    const bool verbose = cfg.value("verbose", false);
    ScreenGeometry geom;
    tune_malloc_for_tensors();

    CapSequence cap = read_capv(capv_path);
    require(!cap.frames.empty(), "track: empty capacitive sequence " + capv_path);

    std::string stream_path = cfg.value("stream_out", "");
    if (stream_path.empty())
        stream_path = (std::filesystem::path(out) / "track.jsonl").string();
    std::ofstream stream(stream_path, std::ios::trunc);
    if (!stream) fail("cannot write track stream: " + stream_path);

    TtaState tta_state = make_tta_state(ck.params.cfg);
    RecurrentState state = make_state(ck.params.cfg);
    TrackerSession session;
    double est_ms = 0.0, ik_ms = 0.0;
    using Clock = std::chrono::steady_clock;
    for (const CapFrame& frame : cap.frames) {
        NormFrame norm = preprocess(frame, geom);
        Tensor input = norm_to_tensor(norm);
        auto t0 = Clock::now();
        EstimatorOutput outp;
        if (tta) {
            outp = infer_tta(input, tta_state, ck.params);
        } else {
            RecurrentState next = make_state(ck.params.cfg);
            outp = estimator_forward(input, state, ck.params, next);
            state = std::move(next);
        }
        JointSet js = decode(outp, geom, ck.params.cfg);
        auto t1 = Clock::now();
        auto touching = touching_fingertips(js, norm, geom);
        TrackFrameResult ik = track_frame(session, js, touching, tmpl);
        auto t2 = Clock::now();
        est_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        ik_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();

        std::array<std::array<Vec3, kNumJoints>, 2> tracked;
        for (auto& hand : tracked) hand.fill(Vec3::Zero());
        for (int hd = 0; hd < 2; ++hd)
            if (ik.solutions[static_cast<size_t>(hd)])
                tracked[static_cast<size_t>(hd)] =
                    fk(ik.solutions[static_cast<size_t>(hd)]->pose, tmpl);
        TimedJointSet rec{frame.timestamp_ms, js};
        stream << track_line(rec, ik, tracked, verbose) << "\n";
    }

    nlohmann::json report;
    report["frames"] = cap.frames.size();
    report["estimator_ms_mean"] = est_ms / static_cast<double>(cap.frames.size());
    report["ik_ms_mean"] = ik_ms / static_cast<double>(cap.frames.size());
    report["tta"] = tta;
    report["reference"] = reference_metrics();
    detail::write_json((std::filesystem::path(out) / "track_report.json").string(), report);
    report["stream"] = stream_path;
    return report;
}

// ---------------------------------------------------------------------------
// eval: pose streams -> metrics report
// ---------------------------------------------------------------------------

inline nlohmann::json run_eval(nlohmann::json cfg) {
    const std::string out = detail::prepare_out_dir(cfg, "eval_config.json");
    std::vector<EvalSequencePair> pairs;
    if (cfg.contains("pairs")) {
        for (const auto& jp : cfg["pairs"]) {
            EvalSequencePair pair;
            pair.pred = read_jointset_stream(jp.at("pred"));
            pair.gt = read_jointset_stream(jp.at("gt"));
            pair.meta.id = jp.value("id", std::string("seq") + std::to_string(pairs.size()));
            pair.meta.gesture = gesture_from_name(jp.value("gesture", "free"));
            pair.meta.hands = jp.value("hand", "right");
            pairs.push_back(std::move(pair));
        }
    } else {
        EvalSequencePair pair;
        pair.pred = read_jointset_stream(cfg.at("pred"));
        pair.gt = read_jointset_stream(cfg.at("gt"));
        pair.meta.id = "seq0";
        pairs.push_back(std::move(pair));
    }
    MetricsReport rep = compute_metrics(pairs, ScreenGeometry{});
    nlohmann::json j = report_to_json(rep);
    detail::write_json((std::filesystem::path(out) / "report.json").string(), j);
    write_report_csv((std::filesystem::path(out) / "report.csv").string(), rep);
    if (cfg.contains("dump_joints")) {
        std::ofstream dump(cfg["dump_joints"].get<std::string>(), std::ios::trunc);
        if (!dump) fail("cannot write joint dump");
        dump << "seq,frame,hand,joint,ex,ey,ez\n";
        char buf[128];
        for (const auto& pair : pairs)
            for (size_t f = 0; f < pair.pred.size(); ++f)
                for (int hd = 0; hd < 2; ++hd) {
                    if (!(pair.pred[f].js.present[static_cast<size_t>(hd)] &&
                          pair.gt[f].js.present[static_cast<size_t>(hd)]))
                        continue;
                    for (int jj = 0; jj < kNumJoints; ++jj) {
                        Vec3 d = pair.pred[f].js.joints[static_cast<size_t>(hd)][static_cast<size_t>(jj)] -
                                 pair.gt[f].js.joints[static_cast<size_t>(hd)][static_cast<size_t>(jj)];
                        std::snprintf(buf, sizeof(buf), "%s,%zu,%d,%d,%.4f,%.4f,%.4f\n",
                                      pair.meta.id.c_str(), f, hd, jj, d.x(), d.y(), d.z());
                        dump << buf;
                    }
                }
    }
    return j;
}

// ---------------------------------------------------------------------------
// triangulate: observations + rig -> 3d ground-truth stream
// ---------------------------------------------------------------------------

inline nlohmann::json run_triangulate(nlohmann::json cfg) {
    const std::string out = detail::prepare_out_dir(cfg, "triangulate_config.json");
    CameraRig rig = load_rig(cfg.at("rig"));
    auto obs_frames = read_observations(cfg.at("obs"));
    const double threshold = cfg.value("threshold_mm", 10.0);
    const int min_consistent = cfg.value("min_consistent", 3);

    // Per-hand triangulated tracks at the observation rate.
    std::array<std::vector<Timed<std::vector<Vec3>>>, 2> tracks;
    int filtered_out = 0;
    for (const auto& of : obs_frames) {
        auto kept = filter_hands(rig, of.hands, threshold, min_consistent);
        filtered_out += static_cast<int>(of.hands.size() - kept.size());
        for (int hd = 0; hd < 2; ++hd) {
            std::vector<const ObservedHand2D*> views;
            for (const auto& h : kept)
                if (hand_index(h.handedness) == hd) views.push_back(&h);
            if (views.size() < 2) continue;
            Timed<std::vector<Vec3>> rec;
            rec.t_ms = of.t_ms;
            rec.value.resize(kNumJoints);
            for (int j = 0; j < kNumJoints; ++j) {
                std::vector<Ray> rays;
                for (const auto* v : views) {
                    const Camera* cam = nullptr;
                    for (const Camera& c : rig.cameras)
                        if (c.id == v->camera_id) cam = &c;
                    rays.push_back(unproject(*cam, v->joints[static_cast<size_t>(j)]));
                }
                rec.value[static_cast<size_t>(j)] = triangulate(rays).point;
            }
            tracks[static_cast<size_t>(hd)].push_back(std::move(rec));
        }
    }

    // Target timestamps: the capacitive stream when given, else the
    // observation timestamps themselves.
    std::vector<uint64_t> targets;
    if (cfg.contains("capv")) {
        CapSequence cap = read_capv(cfg["capv"]);
        for (const auto& f : cap.frames) targets.push_back(f.timestamp_ms);
    } else {
        for (const auto& of : obs_frames) targets.push_back(of.t_ms);
    }

    std::vector<TimedJointSet> stream;
    std::array<std::vector<AlignedFrame>, 2> aligned;
    for (int hd = 0; hd < 2; ++hd)
        if (!tracks[static_cast<size_t>(hd)].empty())
            aligned[static_cast<size_t>(hd)] =
                align_streams(tracks[static_cast<size_t>(hd)], targets);
    for (size_t i = 0; i < targets.size(); ++i) {
        TimedJointSet rec;
        rec.t_ms = targets[i];
        for (int hd = 0; hd < 2; ++hd) {
            const auto& al = aligned[static_cast<size_t>(hd)];
            if (al.empty() || !al[i].valid) continue;
            rec.js.present[static_cast<size_t>(hd)] = true;
            for (int j = 0; j < kNumJoints; ++j)
                rec.js.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)] = al[i].joints[static_cast<size_t>(j)];
        }
        stream.push_back(std::move(rec));
    }
    std::string stream_path = cfg.value("stream_out", "");
    if (stream_path.empty())
        stream_path = (std::filesystem::path(out) / "triangulated.jsonl").string();
    write_jointset_stream(stream_path, stream);

    nlohmann::json res;
    res["frames"] = stream.size();
    res["observations_filtered"] = filtered_out;
    res["stream"] = stream_path;
    return res;
}

// ---------------------------------------------------------------------------
// gradcheck: analytic vs finite-difference table
// ---------------------------------------------------------------------------

inline nlohmann::json run_gradcheck(nlohmann::json cfg) {
    const int seeds = cfg.value("seeds", 100);
    const double tol = cfg.value("tol", 1e-4);
    auto results = run_gradcheck_suite(seeds, tol);
    nlohmann::json table = nlohmann::json::array();
    bool all_pass = true;
    for (const auto& r : results) {
        table.push_back({{"op", r.name}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}});
        all_pass = all_pass && r.pass;
        std::printf("%-18s %.3e %s\n", r.name.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
    }
    nlohmann::json res;
    res["ops"] = table;
    res["pass"] = all_pass;
    if (cfg.contains("out")) {
        detail::prepare_out_dir(cfg, "gradcheck_config.json");
        detail::write_json((std::filesystem::path(cfg["out"].get<std::string>()) /
                            "gradcheck.json")
                               .string(),
                           res);
    }
    return res;
}

}  // namespace captrack
