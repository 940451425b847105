#include <fstream>
#include <iomanip>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "crackseq/evalsuite.hpp"

namespace crackseq::report {

namespace {

const std::vector<cv::Scalar> kPalette = {
    {180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214}, {189, 103, 148},
};

std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    return os.str();
}

}  // namespace

RunSummary load_run_summary(const std::filesystem::path& run_dir) {
    std::ifstream in(run_dir / "report.json");
    if (!in) throw DataError("load_run_summary: no report.json in " + run_dir.string());
    nlohmann::json j = nlohmann::json::parse(in);
    auto report = evalsuite::MetricsReport::from_json(j);

    RunSummary s;
    s.run_dir = run_dir;
    s.metrics = report.derived;
    s.temporal_consistency = report.temporal_consistency_score;
    s.tag = report.provenance.value("experiment", run_dir.filename().string());
    auto model = report.provenance.value("model", nlohmann::json("?"));
    s.model = model.is_string() ? model.get<std::string>() : model.value("kind", "?");
    s.downsampled = report.provenance.value("downsampled", false);
    s.augmented = report.provenance.value("augmented", false);
    return s;
}

void write_curves_png(const std::vector<std::array<double, 2>>& xy_series_minmax,
                      const std::vector<std::vector<double>>& series,
                      const std::vector<std::string>& labels, const std::filesystem::path& file) {
    if (series.empty() || xy_series_minmax.size() < 2)
        throw DataError("write_curves_png: nothing to plot");
    const int W = 720, H = 480, ml = 60, mr = 20, mt = 20, mb = 40;
    cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));

    double xmin = xy_series_minmax[0][0], xmax = xy_series_minmax[0][1];
    double ymin = xy_series_minmax[1][0], ymax = xy_series_minmax[1][1];
    if (xmax <= xmin) xmax = xmin + 1;
    if (ymax <= ymin) ymax = ymin + 1;
    auto px = [&](double x) { return ml + int((x - xmin) / (xmax - xmin) * (W - ml - mr)); };
    auto py = [&](double y) { return H - mb - int((y - ymin) / (ymax - ymin) * (H - mt - mb)); };

    cv::rectangle(canvas, {ml, mt}, {W - mr, H - mb}, {40, 40, 40});
    for (int g = 0; g <= 4; ++g) {
        double y = ymin + g * (ymax - ymin) / 4;
        cv::line(canvas, {ml, py(y)}, {W - mr, py(y)}, {225, 225, 225});
        cv::putText(canvas, fmt(y), {4, py(y) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {40, 40, 40});
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& ys = series[s];
        cv::Scalar color = kPalette[s % kPalette.size()];
        for (std::size_t i = 0; i + 1 < ys.size(); ++i)
            cv::line(canvas, {px(double(i)), py(ys[i])}, {px(double(i + 1)), py(ys[i + 1])},
                     color, 2, cv::LINE_AA);
        if (s < labels.size())
            cv::putText(canvas, labels[s], {ml + 10, mt + 20 + 18 * int(s)},
                        cv::FONT_HERSHEY_SIMPLEX, 0.5, color, 1, cv::LINE_AA);
    }
    cv::putText(canvas, "epoch", {W / 2 - 20, H - 10}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                {40, 40, 40});
    if (!cv::imwrite(file.string(), canvas))
        throw DataError("write_curves_png: cannot write " + file.string());
}

void write_sequence_strip(const std::vector<cv::Mat>& frames, const std::vector<cv::Mat>& targets,
                          const std::vector<std::vector<cv::Mat>>& predictions,
                          const std::filesystem::path& file, int max_steps) {
    if (frames.empty() || frames.size() != targets.size())
        throw DataError("write_sequence_strip: frame/target mismatch");
    int T = std::min<int>((int)frames.size(), max_steps);
    // Spread the shown steps across the whole sequence.
    std::vector<int> steps;
    for (int k = 0; k < T; ++k)
        steps.push_back(T == 1 ? 0 : (int)std::lround(double(k) * (frames.size() - 1) / (T - 1)));

    int ph = frames[0].rows, pw = frames[0].cols, pad = 2;
    int rows = 2 + (int)predictions.size();
    cv::Mat canvas(rows * (ph + pad) + pad, T * (pw + pad) + pad, CV_8UC3,
                   cv::Scalar(230, 230, 230));

    auto blit = [&](const cv::Mat& img, int r, int c) {
        cv::Mat bgr;
        if (img.channels() == 1)
            cv::cvtColor(img * 255, bgr, cv::COLOR_GRAY2BGR);
        else
            bgr = img;
        bgr.copyTo(canvas(cv::Rect(pad + c * (pw + pad), pad + r * (ph + pad), pw, ph)));
    };

    for (int k = 0; k < T; ++k) {
        int t = steps[k];
        blit(frames[t], 0, k);
        blit(targets[t], 1, k);
        for (std::size_t p = 0; p < predictions.size(); ++p) {
            if (predictions[p].size() != frames.size())
                throw DataError("write_sequence_strip: prediction length mismatch");
            blit(predictions[p][t], 2 + (int)p, k);
        }
    }
    if (!cv::imwrite(file.string(), canvas))
        throw DataError("write_sequence_strip: cannot write " + file.string());
}

void render_report(const std::vector<RunSummary>& runs, const std::filesystem::path& out_dir) {
    if (runs.empty()) throw DataError("render_report: no runs");
    std::filesystem::create_directories(out_dir);

    std::ofstream csv(out_dir / "table.csv");
    std::ofstream txt(out_dir / "table.txt");
    if (!csv || !txt) throw DataError("render_report: cannot write tables");

    csv << "exp,model,downsampled,augmented,iou,precision,recall,f1,temporal_consistency\n";
    txt << std::left << std::setw(10) << "Exp" << std::setw(12) << "Model" << std::setw(4) << "DS"
        << std::setw(4) << "DA" << std::right << std::setw(7) << "IoU" << std::setw(7) << "P"
        << std::setw(7) << "R" << std::setw(7) << "F1" << std::setw(7) << "TC" << "\n";
    for (const auto& r : runs) {
        csv << r.tag << "," << r.model << "," << (r.downsampled ? 1 : 0) << ","
            << (r.augmented ? 1 : 0) << "," << fmt(r.metrics.iou) << ","
            << fmt(r.metrics.precision) << "," << fmt(r.metrics.recall) << ","
            << fmt(r.metrics.f1) << "," << fmt(r.temporal_consistency) << "\n";
        txt << std::left << std::setw(10) << r.tag << std::setw(12) << r.model << std::setw(4)
            << (r.downsampled ? "x" : "") << std::setw(4) << (r.augmented ? "x" : "")
            << std::right << std::setw(7) << fmt(r.metrics.iou) << std::setw(7)
            << fmt(r.metrics.precision) << std::setw(7) << fmt(r.metrics.recall) << std::setw(7)
            << fmt(r.metrics.f1) << std::setw(7) << fmt(r.temporal_consistency) << "\n";
    }

    for (const auto& r : runs) {
        std::ifstream hist(r.run_dir / "history.csv");
        if (!hist) continue;
        std::string line;
        std::getline(hist, line);  // header
        std::vector<double> train_loss, val_loss, val_iou;
        while (std::getline(hist, line)) {
            std::istringstream row(line);
            std::string cell;
            std::vector<double> cells;
            while (std::getline(row, cell, ',')) cells.push_back(std::stod(cell));
            if (cells.size() < 5) continue;
            train_loss.push_back(cells[1]);
            val_loss.push_back(cells[2]);
            val_iou.push_back(cells[3]);
        }
        if (train_loss.empty()) continue;
        double lmax = 0;
        for (double v : train_loss) lmax = std::max(lmax, v);
        for (double v : val_loss) lmax = std::max(lmax, v);
        write_curves_png({{0.0, double(train_loss.size() - 1)}, {0.0, lmax * 1.05}},
                         {train_loss, val_loss}, {"train loss", "val crack loss"},
                         out_dir / ("curves_loss_" + r.tag + ".png"));
        write_curves_png({{0.0, double(val_iou.size() - 1)}, {0.0, 100.0}}, {val_iou},
                         {"val crack IoU"}, out_dir / ("curves_iou_" + r.tag + ".png"));
    }
}

}  // namespace crackseq::report
