#pragma once

#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "captrack/decode.hpp"
#include "captrack/synth.hpp"

// Error metrics over tracked-vs-ground-truth pose streams: EPE with xy/z
// splits, the visible-finger variants, hand-existence accuracy, and the
// cross-validation protocol splits.

namespace captrack {

struct SequenceMeta {
    std::string id;
    int participant = 0;
    int session = 0;
    GestureClass gesture = GestureClass::kFree;
    std::string hands = "right";
};

struct EvalSequencePair {
    std::vector<TimedJointSet> pred, gt;
    SequenceMeta meta;
};

struct MetricsBlock {
    double epe = 0, epe_xy = 0, epe_z = 0;
    double epe_v = 0, epe_v_xy = 0, epe_v_z = 0;
    double epe_std = 0;  // over per-sequence means
    double hea = 0;
    int64_t matched_hand_frames = 0;
    int64_t frames = 0;
};

struct MetricsReport {
    MetricsBlock overall;
    std::map<std::string, MetricsBlock> per_gesture;
    std::map<std::string, MetricsBlock> per_hand;  // "left" / "right"
};

/// Published full-model reference figures, echoed into reports for context.
inline nlohmann::json reference_metrics() {
    return {{"avg_epe_mm", 11.8}, {"hea_percent", 99.7},
            {"estimator_ms", 13.0}, {"ik_ms", 18.0}};
}

namespace detail {

/// A joint is screen-visible when its ground-truth height is at most the
/// touch height and its xy projection lies on the panel.
inline bool joint_visible(const Vec3& gt, const ScreenGeometry& geom) {
    return gt.z() <= kTouchHeightMm && gt.x() >= 0.0 && gt.x() <= geom.width_mm &&
           gt.y() >= 0.0 && gt.y() <= geom.height_mm;
}

struct MetricAccum {
    double epe = 0, epe_xy = 0, epe_z = 0;
    int64_t joints = 0;
    double epe_v = 0, epe_v_xy = 0, epe_v_z = 0;
    int64_t joints_v = 0;
    int64_t hea_correct = 0, hea_total = 0;
    int64_t matched_hand_frames = 0;
    int64_t frames = 0;
    std::vector<double> seq_means;

    void merge(const MetricAccum& o) {
        epe += o.epe;
        epe_xy += o.epe_xy;
        epe_z += o.epe_z;
        joints += o.joints;
        epe_v += o.epe_v;
        epe_v_xy += o.epe_v_xy;
        epe_v_z += o.epe_v_z;
        joints_v += o.joints_v;
        hea_correct += o.hea_correct;
        hea_total += o.hea_total;
        matched_hand_frames += o.matched_hand_frames;
        frames += o.frames;
        seq_means.insert(seq_means.end(), o.seq_means.begin(), o.seq_means.end());
    }

    MetricsBlock finalize() const {
        MetricsBlock b;
        if (joints > 0) {
            b.epe = epe / joints;
            b.epe_xy = epe_xy / joints;
            b.epe_z = epe_z / joints;
        }
        if (joints_v > 0) {
            b.epe_v = epe_v / joints_v;
            b.epe_v_xy = epe_v_xy / joints_v;
            b.epe_v_z = epe_v_z / joints_v;
        }
        if (hea_total > 0) b.hea = static_cast<double>(hea_correct) / hea_total;
        if (seq_means.size() > 1) {
            double mean = 0;
            for (double m : seq_means) mean += m;
            mean /= static_cast<double>(seq_means.size());
            double var = 0;
            for (double m : seq_means) var += (m - mean) * (m - mean);
            b.epe_std = std::sqrt(var / static_cast<double>(seq_means.size()));
        }
        b.matched_hand_frames = matched_hand_frames;
        b.frames = frames;
        return b;
    }
};

/// Accumulates one sequence pair into per-hand accumulators (index 0 left,
/// 1 right) and returns the sequence-level epe mean.
inline void accumulate_pair(const EvalSequencePair& pair, const ScreenGeometry& geom,
                            std::array<MetricAccum, 2>& hand_acc) {
    require(pair.pred.size() == pair.gt.size(),
            "compute_metrics: prediction and ground truth streams differ in length (" +
                pair.meta.id + ")");
    for (size_t f = 0; f < pair.pred.size(); ++f) {
        const JointSet& pr = pair.pred[f].js;
        const JointSet& gt = pair.gt[f].js;
        for (int hd = 0; hd < 2; ++hd) {
            MetricAccum& acc = hand_acc[static_cast<size_t>(hd)];
            ++acc.hea_total;
            if (pr.present[static_cast<size_t>(hd)] == gt.present[static_cast<size_t>(hd)])
                ++acc.hea_correct;
            if (!(pr.present[static_cast<size_t>(hd)] && gt.present[static_cast<size_t>(hd)])) continue;
            ++acc.matched_hand_frames;
            std::array<bool, kNumFingers> finger_visible{};
            for (int j = 1; j < kNumJoints; ++j)
                if (joint_visible(gt.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)], geom))
                    finger_visible[static_cast<size_t>(kFingerOfJoint[static_cast<size_t>(j)])] = true;
            for (int j = 0; j < kNumJoints; ++j) {
                Vec3 d = pr.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)] -
                         gt.joints[static_cast<size_t>(hd)][static_cast<size_t>(j)];
                double exy = std::sqrt(d.x() * d.x() + d.y() * d.y());
                double ez = std::fabs(d.z());
                double e = d.norm();
                acc.epe += e;
                acc.epe_xy += exy;
                acc.epe_z += ez;
                ++acc.joints;
                int finger = kFingerOfJoint[static_cast<size_t>(j)];
                if (finger >= 0 && finger_visible[static_cast<size_t>(finger)]) {
                    acc.epe_v += e;
                    acc.epe_v_xy += exy;
                    acc.epe_v_z += ez;
                    ++acc.joints_v;
                }
            }
        }
    }
}

}  // namespace detail

/// Metrics over a set of sequence pairs with per-gesture and per-hand
/// breakdowns. Standard deviations are over per-sequence EPE means.
inline MetricsReport compute_metrics(const std::vector<EvalSequencePair>& pairs,
                                     const ScreenGeometry& geom = {}) {
    require(!pairs.empty(), "compute_metrics: no sequence pairs");
    detail::MetricAccum overall;
    std::map<std::string, detail::MetricAccum> per_gesture;
    std::array<detail::MetricAccum, 2> per_hand;
    for (const auto& pair : pairs) {
        std::array<detail::MetricAccum, 2> acc;
        detail::accumulate_pair(pair, geom, acc);
        detail::MetricAccum seq;
        seq.merge(acc[0]);
        seq.merge(acc[1]);
        seq.frames = static_cast<int64_t>(pair.pred.size());
        if (seq.joints > 0) seq.seq_means.push_back(seq.epe / seq.joints);
        overall.merge(seq);
        per_gesture[gesture_name(pair.meta.gesture)].merge(seq);
        per_hand[0].merge(acc[0]);
        per_hand[1].merge(acc[1]);
    }
    MetricsReport rep;
    rep.overall = overall.finalize();
    for (auto& [name, acc] : per_gesture) rep.per_gesture[name] = acc.finalize();
    rep.per_hand["left"] = per_hand[0].finalize();
    rep.per_hand["right"] = per_hand[1].finalize();
    return rep;
}

/// Single-pair convenience overload.
inline MetricsReport compute_metrics(const std::vector<TimedJointSet>& pred,
                                     const std::vector<TimedJointSet>& gt,
                                     const ScreenGeometry& geom = {}) {
    EvalSequencePair pair;
    pair.pred = pred;
    pair.gt = gt;
    return compute_metrics(std::vector<EvalSequencePair>{pair}, geom);
}

// ---------------------------------------------------------------------------
// Dataset index and protocol splits
// ---------------------------------------------------------------------------

struct DatasetEntry {
    SequenceMeta meta;
    std::string capv, gt, obs;  // file paths relative to the index
    int frames = 0;
    double fps = 15.0;
};

inline nlohmann::json index_to_json(const std::vector<DatasetEntry>& entries) {
    nlohmann::json j;
    for (const auto& e : entries) {
        nlohmann::json je;
        je["id"] = e.meta.id;
        je["participant"] = e.meta.participant;
        je["session"] = e.meta.session;
        je["gesture"] = gesture_name(e.meta.gesture);
        je["hands"] = e.meta.hands;
        je["files"] = {{"capv", e.capv}, {"gt", e.gt}, {"obs", e.obs}};
        je["frames"] = e.frames;
        je["fps"] = e.fps;
        j["sequences"].push_back(je);
    }
    return j;
}

inline std::vector<DatasetEntry> index_from_json(const nlohmann::json& j) {
    std::vector<DatasetEntry> entries;
    for (const auto& je : j.at("sequences")) {
        DatasetEntry e;
        e.meta.id = je.at("id");
        e.meta.participant = je.at("participant");
        e.meta.session = je.at("session");
        e.meta.gesture = gesture_from_name(je.at("gesture"));
        e.meta.hands = je.value("hands", "right");
        e.capv = je.at("files").at("capv");
        e.gt = je.at("files").at("gt");
        e.obs = je.at("files").value("obs", "");
        e.frames = je.value("frames", 0);
        e.fps = je.value("fps", 15.0);
        entries.push_back(e);
    }
    return entries;
}

inline void save_index(const std::string& path, const std::vector<DatasetEntry>& entries) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write dataset index: " + path);
    out << index_to_json(entries).dump(1) << "\n";
}

inline std::vector<DatasetEntry> load_index(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open dataset index: " + path);
    nlohmann::json j;
    in >> j;
    return index_from_json(j);
}

enum class Protocol { kP1, kP2, kP3 };

inline Protocol protocol_from_name(const std::string& s) {
    if (s == "P1" || s == "p1") return Protocol::kP1;
    if (s == "P2" || s == "p2") return Protocol::kP2;
    if (s == "P3" || s == "p3") return Protocol::kP3;
    fail("unknown protocol: " + s);
}

struct Split {
    std::vector<DatasetEntry> train, test;
};

/// P1: leave one session out (4-fold). P2: leave one participant group out
/// (3-fold, participants assigned round-robin to groups). P3: leave one
/// gesture class out (5-fold). Deterministic given the fold id.
inline Split build_protocol_splits(const std::vector<DatasetEntry>& entries, Protocol protocol,
                                   int fold) {
    auto distinct_sorted = [](std::vector<int> v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    Split split;
    auto assign = [&](auto&& is_test) {
        for (const auto& e : entries)
            (is_test(e) ? split.test : split.train).push_back(e);
    };
    switch (protocol) {
        case Protocol::kP1: {
            std::vector<int> sessions;
            for (const auto& e : entries) sessions.push_back(e.meta.session);
            sessions = distinct_sorted(sessions);
            require(fold >= 0 && fold < static_cast<int>(sessions.size()),
                    "P1 split: fold out of range");
            int held = sessions[static_cast<size_t>(fold)];
            assign([&](const DatasetEntry& e) { return e.meta.session == held; });
            break;
        }
        case Protocol::kP2: {
            std::vector<int> participants;
            for (const auto& e : entries) participants.push_back(e.meta.participant);
            participants = distinct_sorted(participants);
            const int groups = 3;
            require(fold >= 0 && fold < groups, "P2 split: fold out of range");
            std::map<int, int> group_of;
            for (size_t i = 0; i < participants.size(); ++i)
                group_of[participants[i]] = static_cast<int>(i) % groups;
            assign([&](const DatasetEntry& e) { return group_of[e.meta.participant] == fold; });
            break;
        }
        case Protocol::kP3: {
            require(fold >= 0 && fold < 5, "P3 split: fold out of range");
            GestureClass held = kAllGestures[static_cast<size_t>(fold)];
            assign([&](const DatasetEntry& e) { return e.meta.gesture == held; });
            break;
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

inline nlohmann::json block_to_json(const MetricsBlock& b) {
    return {{"epe_mm", b.epe},       {"epe_xy_mm", b.epe_xy}, {"epe_z_mm", b.epe_z},
            {"epe_v_mm", b.epe_v},   {"epe_v_xy_mm", b.epe_v_xy}, {"epe_v_z_mm", b.epe_v_z},
            {"epe_std_mm", b.epe_std}, {"hea", b.hea},
            {"matched_hand_frames", b.matched_hand_frames}, {"frames", b.frames}};
}

inline nlohmann::json report_to_json(const MetricsReport& rep) {
    nlohmann::json j;
    j["overall"] = block_to_json(rep.overall);
    for (const auto& [name, b] : rep.per_gesture) j["per_gesture"][name] = block_to_json(b);
    for (const auto& [name, b] : rep.per_hand) j["per_hand"][name] = block_to_json(b);
    j["reference"] = reference_metrics();
    return j;
}

inline void write_report_csv(const std::string& path, const MetricsReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail("cannot write report: " + path);
    out << "block,epe_mm,epe_xy_mm,epe_z_mm,epe_v_mm,epe_v_xy_mm,epe_v_z_mm,epe_std_mm,hea,"
           "matched_hand_frames,frames\n";
    char buf[256];
    auto row = [&](const std::string& name, const MetricsBlock& b) {
        std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.6f,%lld,%lld\n",
                      name.c_str(), b.epe, b.epe_xy, b.epe_z, b.epe_v, b.epe_v_xy, b.epe_v_z,
                      b.epe_std, b.hea, static_cast<long long>(b.matched_hand_frames),
                      static_cast<long long>(b.frames));
        out << buf;
    };
    row("overall", rep.overall);
    for (const auto& [name, b] : rep.per_gesture) row("gesture:" + name, b);
    for (const auto& [name, b] : rep.per_hand) row("hand:" + name, b);
}

}  // namespace captrack
