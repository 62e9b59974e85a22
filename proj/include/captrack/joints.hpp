#pragma once

#include <array>

namespace captrack {

// 21-joint hand layout, matching the usual 2D detector convention:
// 0 wrist; 1-4 thumb (CMC, MCP, IP, tip); then per finger MCP, PIP, DIP, tip
// for index (5-8), middle (9-12), ring (13-16), pinky (17-20).
inline constexpr int kNumJoints = 21;
inline constexpr int kNumBones = 20;
inline constexpr int kNumFingers = 5;

/// Parent joint of each joint; -1 for the wrist. Bone b connects joint b+1
/// to kJointParent[b+1].
inline constexpr std::array<int, kNumJoints> kJointParent = {
    -1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19};

/// Finger index per joint (thumb=0 .. pinky=4); -1 for the wrist.
inline constexpr std::array<int, kNumJoints> kFingerOfJoint = {
    -1, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4};

inline constexpr std::array<int, kNumFingers> kFingertips = {4, 8, 12, 16, 20};

inline constexpr int bone_child(int bone) { return bone + 1; }
inline constexpr int bone_parent(int bone) { return kJointParent[bone + 1]; }

enum class Hand : int { kLeft = 0, kRight = 1 };

inline constexpr int hand_index(Hand h) { return static_cast<int>(h); }
inline constexpr Hand other_hand(Hand h) {
    return h == Hand::kLeft ? Hand::kRight : Hand::kLeft;
}

}  // namespace captrack
