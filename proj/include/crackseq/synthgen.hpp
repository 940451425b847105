#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "crackseq/common.hpp"
#include "json.hpp"

namespace crackseq::synthgen {

// Procedural concrete texture knobs. base_gray is the mean background intensity,
// contrast the amplitude of the multi-octave value noise.
struct TextureParams {
    int octaves = 4;
    double contrast = 14.0;
    double base_gray = 168.0;
    double sensor_noise_sigma = 2.0;
};

struct SceneSpec {
    int width_px = 512;
    int height_px = 512;
    int n_epochs = 25;  // load stages; the real slab sequence has 25 frames
    int n_crack_seeds = 3;
    std::map<std::string, int> distractor_counts = {
        {"pencil_digit", 2}, {"sensor", 1}, {"cable", 1}, {"cavity", 6}};
    TextureParams texture;
    // Crack pixel ratio of the final frame is steered towards this value.
    double target_crack_pixel_ratio = 0.012;
    // Global per-frame brightness offset bound, in 8-bit intensity levels.
    int jitter_levels = 5;
    std::uint64_t rng_seed = 0;

    void validate() const;  // throws DataError on violated invariants
};

struct GrowthStage {
    double length_fraction = 0.0;  // of the full polyline arc length
    double width_px = 0.0;
};

struct CrackSkeleton {
    std::vector<cv::Point2d> vertices;
    std::vector<CrackSkeleton> branches;
    int birth_epoch = 0;
    // One entry per load epoch; length_fraction and width_px are non-decreasing.
    std::vector<GrowthStage> growth;
    double contrast = 60.0;  // rendering darkness relative to background
};

struct PencilDigit {
    int glyph = 0;  // 0..9
    cv::Point pos;
    double scale = 1.0;
    int thickness = 1;
};
struct SensorPatch {
    cv::Rect rect;
};
struct Cable {
    std::vector<cv::Point> points;
    int thickness = 1;
};
struct Cavity {
    cv::Point center;
    cv::Size axes;
    double angle_deg = 0.0;
};

// Static through time by construction; only cracks evolve.
struct DistractorSet {
    std::vector<PencilDigit> pencil_digits;
    std::vector<SensorPatch> sensors;
    std::vector<Cable> cables;
    std::vector<Cavity> cavities;

    bool empty() const {
        return pencil_digits.empty() && sensors.empty() && cables.empty() && cavities.empty();
    }
};

struct DistractorInstance {
    std::string type;  // pencil_digit | sensor | cable | cavity
    cv::Mat footprint;  // CV_8UC1 {0,1}
};

struct FrameSequence {
    std::vector<cv::Mat> frames;  // CV_8UC3
    std::vector<cv::Mat> masks;   // CV_8UC1 with values {0,1}
    DistractorSet distractors;
    nlohmann::json provenance;

    int n_frames() const { return static_cast<int>(frames.size()); }
    cv::Size size() const { return frames.empty() ? cv::Size() : frames.front().size(); }
};

DistractorSet place_distractors(const SceneSpec& spec, std::mt19937_64& rng);

std::vector<CrackSkeleton> sample_skeletons(const SceneSpec& spec, std::mt19937_64& rng);

// Cumulative rasterization of all skeletons up to `epoch`: the result is a
// pixel-wise superset of every earlier epoch.
cv::Mat grow_cracks(const std::vector<CrackSkeleton>& skeletons, int epoch, cv::Size size);

// Darkness overlay contributed by the distractors (0 where none). Pure in its inputs.
cv::Mat render_distractors(const DistractorSet& set, cv::Size size);

// Per-instance binary footprints, used by the distractor error report.
std::vector<DistractorInstance> rasterize_instances(const DistractorSet& set, cv::Size size);

// Composites texture, crack darkness and distractors into an 8-bit RGB frame.
// Identical rng state gives an identical image; jitter_offset is the per-frame
// global brightness shift drawn by the caller.
cv::Mat render_frame(const cv::Mat& mask, const DistractorSet& distractors,
                     const TextureParams& texture, std::mt19937_64& rng,
                     int jitter_offset = 0);

FrameSequence generate_scene(const SceneSpec& spec);

// Disk layout: <dir>/frame_<tt>.png, mask_<tt>.png (mask values {0,255}),
// distractors.json, spec.json.
void write_scene(const FrameSequence& seq, const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);
void to_json(nlohmann::json& j, const DistractorSet& s);
void from_json(const nlohmann::json& j, DistractorSet& s);

}  // namespace crackseq::synthgen
