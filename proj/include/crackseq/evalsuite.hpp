#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "crackseq/datapipe.hpp"
#include "crackseq/synthgen.hpp"
#include "json.hpp"

namespace crackseq::evalsuite {

struct ConfusionCounts {
    long long tp = 0, fp = 0, fn = 0, tn = 0;

    long long total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o);
};

// Crack is the positive class. Inputs are CV_8UC1 with values {0,1}.
ConfusionCounts confusion(const cv::Mat& pred, const cv::Mat& target);

// Percent metrics, micro-aggregated (counts pooled before division).
// All-zero denominators give 100 when FP=FN=0, else 0.
struct Metrics {
    double iou = 0, precision = 0, recall = 0, f1 = 0;
};
Metrics metrics(const ConfusionCounts& counts);

// 1 - mean over t of the fraction of prediction flips between consecutive
// frames, restricted to pixels where the target is stable. 1 = perfectly
// stable predictions wherever ground truth is stable.
double temporal_consistency(const std::vector<cv::Mat>& preds,
                            const std::vector<cv::Mat>& targets);

// Maps the frames of one tile to binary masks (one per frame).
using TileModel = std::function<std::vector<cv::Mat>(const std::vector<cv::Mat>& tile_frames)>;

struct TileInferResult {
    std::vector<cv::Mat> masks;  // full resolution, {0,1}
    cv::Rect covered;            // aligned grid region; outside is zero-filled
    bool border_zero_filled = false;
};

TileInferResult tile_infer(const TileModel& model, const synthgen::FrameSequence& scene,
                           int patch = 128);

struct DistractorTally {
    int hit = 0;
    int total = 0;
};

// A distractor is hit when >= hit_threshold of its 2-px-dilated footprint is
// predicted crack.
std::map<std::string, DistractorTally> distractor_report(
    const cv::Mat& pred, const synthgen::DistractorSet& distractors, cv::Size size,
    int dilation = 2, double hit_threshold = 0.10);

struct MetricsReport {
    ConfusionCounts counts;
    Metrics derived;
    double temporal_consistency_score = -1;  // -1 when not applicable
    std::map<std::string, DistractorTally> distractors;
    nlohmann::json provenance;

    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

// Per-sequence prediction hook: given the frames of a (patch-sized) sequence,
// return one binary mask per frame.
using SequenceModel = std::function<std::vector<cv::Mat>(const std::vector<cv::Mat>& frames)>;

// Micro-aggregated metrics plus mean temporal consistency over test sequences.
MetricsReport evaluate_sequences(const SequenceModel& model,
                                 const std::vector<const datapipe::SequenceSample*>& samples);

}  // namespace crackseq::evalsuite

namespace crackseq::report {

struct RunSummary {
    std::string tag;
    std::string model;
    bool downsampled = false, augmented = false;
    evalsuite::Metrics metrics;
    double temporal_consistency = -1;
    std::filesystem::path run_dir;
};

// Writes table.csv and table.txt (Exp/Model/DS/DA/IoU/P/R/F1), training curve
// plots and sequence strips into out_dir. Deterministic outputs for fixed input.
void render_report(const std::vector<RunSummary>& runs, const std::filesystem::path& out_dir);

RunSummary load_run_summary(const std::filesystem::path& run_dir);

void write_curves_png(const std::vector<std::array<double, 2>>& xy_series_minmax,
                      const std::vector<std::vector<double>>& series,
                      const std::vector<std::string>& labels, const std::filesystem::path& file);

// Side-by-side strip: input frame, target, prediction per time step.
void write_sequence_strip(const std::vector<cv::Mat>& frames, const std::vector<cv::Mat>& targets,
                          const std::vector<std::vector<cv::Mat>>& predictions,
                          const std::filesystem::path& file, int max_steps = 8);

}  // namespace crackseq::report
