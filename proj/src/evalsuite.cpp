#include "crackseq/evalsuite.hpp"

#include <opencv2/imgproc.hpp>

namespace crackseq::evalsuite {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
}

ConfusionCounts confusion(const cv::Mat& pred, const cv::Mat& target) {
    CV_Assert(pred.type() == CV_8UC1 && target.type() == CV_8UC1);
    if (pred.size() != target.size()) throw DataError("confusion: shape mismatch");
    ConfusionCounts c;
    c.tp = cv::countNonZero(pred & target);
    c.fp = cv::countNonZero(pred & ~(target * 255));
    c.fn = cv::countNonZero(target & ~(pred * 255));
    c.tn = (long long)pred.total() - c.tp - c.fp - c.fn;
    return c;
}

namespace {
double safe_ratio(double num, double den, long long fp, long long fn) {
    if (den > 0) return 100.0 * num / den;
    return (fp == 0 && fn == 0) ? 100.0 : 0.0;
}
}  // namespace

Metrics metrics(const ConfusionCounts& c) {
    Metrics m;
    m.iou = safe_ratio((double)c.tp, (double)(c.tp + c.fp + c.fn), c.fp, c.fn);
    m.precision = safe_ratio((double)c.tp, (double)(c.tp + c.fp), c.fp, c.fn);
    m.recall = safe_ratio((double)c.tp, (double)(c.tp + c.fn), c.fp, c.fn);
    m.f1 = (m.precision + m.recall) > 0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : ((c.fp == 0 && c.fn == 0) ? 100.0 : 0.0);
    return m;
}

double temporal_consistency(const std::vector<cv::Mat>& preds,
                            const std::vector<cv::Mat>& targets) {
    if (preds.size() != targets.size())
        throw DataError("temporal_consistency: sequence length mismatch");
    if (preds.size() < 2) throw DataError("temporal_consistency: need at least 2 frames");
    double acc = 0;
    int terms = 0;
    for (std::size_t t = 0; t + 1 < preds.size(); ++t) {
        cv::Mat stable = (targets[t] == targets[t + 1]);  // {0,255}
        long long n_stable = cv::countNonZero(stable);
        double frac = 0;
        if (n_stable > 0) {
            cv::Mat flip = (preds[t] != preds[t + 1]) & stable;
            frac = double(cv::countNonZero(flip)) / double(n_stable);
        }
        acc += frac;
        ++terms;
    }
    return 1.0 - acc / terms;
}

TileInferResult tile_infer(const TileModel& model, const synthgen::FrameSequence& scene,
                           int patch) {
    cv::Size size = scene.size();
    if (size.width < patch || size.height < patch)
        throw DataError("tile_infer: scene smaller than one tile");
    int cols = size.width / patch, rows = size.height / patch;

    TileInferResult out;
    out.covered = cv::Rect(0, 0, cols * patch, rows * patch);
    out.border_zero_filled = out.covered.width != size.width || out.covered.height != size.height;
    for (int t = 0; t < scene.n_frames(); ++t)
        out.masks.push_back(cv::Mat::zeros(size, CV_8UC1));

    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            cv::Rect roi(c * patch, r * patch, patch, patch);
            std::vector<cv::Mat> tile;
            for (int t = 0; t < scene.n_frames(); ++t) tile.push_back(scene.frames[t](roi));
            std::vector<cv::Mat> pred = model(tile);
            if ((int)pred.size() != scene.n_frames())
                throw DataError("tile_infer: model returned wrong frame count");
            for (int t = 0; t < scene.n_frames(); ++t) pred[t].copyTo(out.masks[t](roi));
        }
    }
    return out;
}

std::map<std::string, DistractorTally> distractor_report(
    const cv::Mat& pred, const synthgen::DistractorSet& distractors, cv::Size size, int dilation,
    double hit_threshold) {
    if (distractors.empty() && pred.empty())
        throw DataError("distractor_report: missing annotations");
    std::map<std::string, DistractorTally> tallies = {{"pencil_digit", {}},
                                                      {"sensor", {}},
                                                      {"cable", {}},
                                                      {"cavity", {}}};
    cv::Mat kernel = cv::getStructuringElement(
        cv::MORPH_RECT, cv::Size(2 * dilation + 1, 2 * dilation + 1));
    for (const auto& inst : synthgen::rasterize_instances(distractors, size)) {
        cv::Mat dilated;
        cv::dilate(inst.footprint, dilated, kernel);
        long long area = cv::countNonZero(dilated);
        long long hit_px = cv::countNonZero(dilated & pred);
        auto& tally = tallies[inst.type];
        ++tally.total;
        if (area > 0 && double(hit_px) / double(area) >= hit_threshold) ++tally.hit;
    }
    return tallies;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["counts"] = {{"tp", counts.tp}, {"fp", counts.fp}, {"fn", counts.fn}, {"tn", counts.tn}};
    j["metrics"] = {{"iou", derived.iou},
                    {"precision", derived.precision},
                    {"recall", derived.recall},
                    {"f1", derived.f1}};
    j["temporal_consistency"] = temporal_consistency_score;
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [k, v] : distractors) d[k] = {{"hit", v.hit}, {"total", v.total}};
    j["distractors"] = d;
    j["provenance"] = provenance;
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.counts.tp = j.at("counts").at("tp");
    r.counts.fp = j.at("counts").at("fp");
    r.counts.fn = j.at("counts").at("fn");
    r.counts.tn = j.at("counts").at("tn");
    r.derived.iou = j.at("metrics").at("iou");
    r.derived.precision = j.at("metrics").at("precision");
    r.derived.recall = j.at("metrics").at("recall");
    r.derived.f1 = j.at("metrics").at("f1");
    r.temporal_consistency_score = j.at("temporal_consistency");
    for (auto it = j.at("distractors").begin(); it != j.at("distractors").end(); ++it)
        r.distractors[it.key()] = {it.value().at("hit"), it.value().at("total")};
    r.provenance = j.value("provenance", nlohmann::json::object());
    return r;
}

MetricsReport evaluate_sequences(const SequenceModel& model,
                                 const std::vector<const datapipe::SequenceSample*>& samples) {
    MetricsReport report;
    double tc_sum = 0;
    int tc_terms = 0;
    for (const auto* s : samples) {
        std::vector<cv::Mat> preds = model(s->images);
        if (preds.size() != s->masks.size())
            throw DataError("evaluate_sequences: model returned wrong frame count");
        for (std::size_t t = 0; t < preds.size(); ++t)
            report.counts += confusion(preds[t], s->masks[t]);
        if (preds.size() >= 2) {
            tc_sum += temporal_consistency(preds, s->masks);
            ++tc_terms;
        }
    }
    report.derived = metrics(report.counts);
    if (tc_terms > 0) report.temporal_consistency_score = tc_sum / tc_terms;
    return report;
}

}  // namespace crackseq::evalsuite
