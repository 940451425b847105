#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "crackseq/common.hpp"
#include "crackseq/synthgen.hpp"
#include "json.hpp"

namespace crackseq::datapipe {

using synthgen::FrameSequence;

// One multi-temporal training unit: co-located patch across all load epochs.
// Patches are ROI views into the parent scene (no copies).
struct SequenceSample {
    std::vector<cv::Mat> images;  // CV_8UC3
    std::vector<cv::Mat> masks;   // CV_8UC1 {0,1}
    int scene_id = 0;
    int row = 0;
    int col = 0;
    bool has_crack = false;

    std::string id() const;
    int n_frames() const { return static_cast<int>(images.size()); }
};

struct MonoSample {
    cv::Mat image;
    cv::Mat mask;
    int scene_id = 0, row = 0, col = 0, t = 0;
    std::string parent_id;

    std::string id() const;
};

struct SplitStats {
    long long n_samples = 0;
    double crack_image_ratio = 0.0;  // fraction of samples with any crack pixel
    double crack_pixel_ratio = 0.0;  // crack pixels / total pixels
};

struct DatasetManifest {
    int schema_version = 1;
    std::map<std::string, std::string> split_of;  // sample id -> train|val|test
    std::map<std::string, SplitStats> multi_stats;  // keys: all|train|val|test
    std::map<std::string, SplitStats> mono_stats;
    std::uint64_t balance_seed = 0;
    std::uint64_t split_seed = 0;
    int sequence_length = 32;
    int patch_size = 128;
    std::optional<cv::Rect> crop_region;  // largest aligned crop when unset
    std::map<std::string, std::uint64_t> source_checksums;  // scene name -> fnv1a

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

// Removes 8-connected components smaller than 5 pixels, then closes with a
// 3x3 all-ones kernel. Idempotent. Input/output are {0,1} CV_8UC1.
cv::Mat clean_mask(const cv::Mat& mask);

// Output index -> input index map realizing the even-duplication rule:
// deficit d duplicates sources round(k*(n-1)/(d-1)), k=0..d-1 (midpoint for
// d=1), each inserted right after its original. Sources may repeat when the
// deficit exceeds the input length.
std::vector<int> pad_index_map(int n_frames, int target_len);

FrameSequence pad_sequence(const FrameSequence& seq, int target_len = 32);

// Non-overlapping grid anchored top-left; the partial border strip is
// discarded (or `crop` applied first when given).
std::vector<SequenceSample> extract_patches(const FrameSequence& seq, int scene_id,
                                            int patch = 128,
                                            std::optional<cv::Rect> crop = std::nullopt);

// Keeps every crack sample, subsamples crack-free ones to floor(n_crack/ratio)
// and shuffles, all driven by `seed`. Sets *kept_all_free when there were too
// few crack-free samples to subsample.
std::vector<SequenceSample> balance(std::vector<SequenceSample> samples, double ratio,
                                    std::uint64_t seed, bool* kept_all_free = nullptr);

// Deterministic 60/20/20-style split; train gets floor(f0*n), val floor(f1*n),
// test the remainder.
DatasetManifest split(const std::vector<SequenceSample>& samples,
                      std::array<double, 3> fractions, std::uint64_t seed);

std::vector<MonoSample> deserialize(const DatasetManifest& manifest,
                                    const std::vector<SequenceSample>& samples);

SplitStats compute_statistics(const std::vector<SequenceSample>& samples);
SplitStats compute_statistics_mono(const std::vector<MonoSample>& samples);

// Reads one scene directory (frame_*.png / mask_*.png pairs plus optional
// distractors.json and spec.json). Masks are binarized at 128.
FrameSequence read_scene(const std::filesystem::path& dir);

// Reads scene_* directories written by synthgen (or the published dataset
// arranged the same way).
std::vector<FrameSequence> ingest_real_dataset(const std::filesystem::path& root);

std::uint64_t scene_checksum(const FrameSequence& seq);

struct BuildParams {
    int target_len = 32;
    int patch = 128;
    double balance_ratio = 2.0;
    std::array<double, 3> fractions = {0.6, 0.2, 0.2};
    std::uint64_t seed = 0;  // fanned out into balance/split sub-seeds
    std::optional<cv::Rect> crop;
    bool apply_clean_mask = false;  // synthetic masks are already clean
};

struct BuiltDataset {
    std::vector<FrameSequence> scenes;  // padded; owns the pixel data
    std::vector<SequenceSample> samples;
    DatasetManifest manifest;

    std::vector<const SequenceSample*> split_samples(const std::string& split) const;
};

// Full aggregation pipeline: clean -> pad -> patch -> balance -> split -> stats.
BuiltDataset build_dataset(std::vector<FrameSequence> scenes, const BuildParams& params);

}  // namespace crackseq::datapipe
