#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "crackseq/evalsuite.hpp"
#include "crackseq/nets/swin_unetr.hpp"
#include "crackseq/nets/unet.hpp"
#include "crackseq/trainer.hpp"

namespace py = pybind11;
using namespace crackseq;

namespace {

cv::Mat mask_from_numpy(const py::array_t<std::uint8_t>& a) {
    if (a.ndim() != 2) throw DataError("expected a 2-d uint8 array");
    cv::Mat m((int)a.shape(0), (int)a.shape(1), CV_8UC1);
    auto r = a.unchecked<2>();
    for (py::ssize_t y = 0; y < a.shape(0); ++y)
        for (py::ssize_t x = 0; x < a.shape(1); ++x) m.at<std::uint8_t>((int)y, (int)x) = r(y, x);
    return m;
}

py::array_t<std::uint8_t> mask_to_numpy(const cv::Mat& m) {
    py::array_t<std::uint8_t> a({m.rows, m.cols});
    auto w = a.mutable_unchecked<2>();
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) w(y, x) = m.at<std::uint8_t>(y, x);
    return a;
}

py::array_t<std::uint8_t> rgb_to_numpy(const cv::Mat& m) {
    py::array_t<std::uint8_t> a({m.rows, m.cols, 3});
    auto w = a.mutable_unchecked<3>();
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            auto px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) w(y, x, c) = px[c];
        }
    return a;
}

py::dict scene_to_dict(const synthgen::FrameSequence& seq) {
    py::list frames, masks;
    for (const auto& f : seq.frames) frames.append(rgb_to_numpy(f));
    for (const auto& m : seq.masks) masks.append(mask_to_numpy(m));
    py::dict d;
    d["frames"] = frames;
    d["masks"] = masks;
    nlohmann::json dj;
    synthgen::to_json(dj, seq.distractors);
    d["distractors"] = dj.dump();
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Crack propagation segmentation pipeline core";

    py::register_exception<DataError>(m, "DataError");
    py::register_exception<UsageError>(m, "UsageError");

    m.def(
        "generate_scene",
        [](int width, int height, int epochs, std::uint64_t seed, int crack_seeds,
           double target_crack_ratio) {
            synthgen::SceneSpec spec;
            spec.width_px = width;
            spec.height_px = height;
            spec.n_epochs = epochs;
            spec.n_crack_seeds = crack_seeds;
            spec.target_crack_pixel_ratio = target_crack_ratio;
            spec.rng_seed = seed;
            spec.validate();
            return scene_to_dict(synthgen::generate_scene(spec));
        },
        py::arg("width") = 512, py::arg("height") = 512, py::arg("epochs") = 25,
        py::arg("seed") = 0, py::arg("crack_seeds") = 3,
        py::arg("target_crack_ratio") = 0.012);

    m.def(
        "write_scene",
        [](const std::string& dir, int width, int height, int epochs, std::uint64_t seed) {
            synthgen::SceneSpec spec;
            spec.width_px = width;
            spec.height_px = height;
            spec.n_epochs = epochs;
            spec.rng_seed = seed;
            spec.validate();
            synthgen::write_scene(synthgen::generate_scene(spec), dir);
        },
        py::arg("dir"), py::arg("width") = 512, py::arg("height") = 512, py::arg("epochs") = 25,
        py::arg("seed") = 0, "Generate one synthetic scene and write it as a scene directory");

    m.def("clean_mask",
          [](const py::array_t<std::uint8_t>& mask) {
              return mask_to_numpy(datapipe::clean_mask(mask_from_numpy(mask)));
          },
          py::arg("mask"), "Drop components under 5 px, then 3x3 morphological closing");

    m.def("pad_index_map", &datapipe::pad_index_map, py::arg("n_frames"), py::arg("target_len"),
          "Frame duplication map used to pad a sequence to target_len");

    m.def(
        "build_dataset_stats",
        [](const std::string& scenes_root, int target_len, int patch, double ratio,
           std::uint64_t seed) {
            datapipe::BuildParams params;
            params.target_len = target_len;
            params.patch = patch;
            params.balance_ratio = ratio;
            params.seed = seed;
            auto ds =
                datapipe::build_dataset(datapipe::ingest_real_dataset(scenes_root), params);
            return py::module_::import("json").attr("loads")(ds.manifest.to_json().dump());
        },
        py::arg("scenes_root"), py::arg("target_len") = 32, py::arg("patch") = 128,
        py::arg("ratio") = 2.0, py::arg("seed") = 0,
        "Run the aggregation pipeline and return the manifest as a dict");

    m.def(
        "confusion_metrics",
        [](const py::array_t<std::uint8_t>& pred, const py::array_t<std::uint8_t>& target) {
            auto c = evalsuite::confusion(mask_from_numpy(pred), mask_from_numpy(target));
            auto d = evalsuite::metrics(c);
            py::dict out;
            out["tp"] = c.tp;
            out["fp"] = c.fp;
            out["fn"] = c.fn;
            out["tn"] = c.tn;
            out["iou"] = d.iou;
            out["precision"] = d.precision;
            out["recall"] = d.recall;
            out["f1"] = d.f1;
            return out;
        },
        py::arg("pred"), py::arg("target"));

    m.def(
        "temporal_consistency",
        [](const std::vector<py::array_t<std::uint8_t>>& preds,
           const std::vector<py::array_t<std::uint8_t>>& targets) {
            std::vector<cv::Mat> p, t;
            for (const auto& a : preds) p.push_back(mask_from_numpy(a));
            for (const auto& a : targets) t.push_back(mask_from_numpy(a));
            return evalsuite::temporal_consistency(p, t);
        },
        py::arg("preds"), py::arg("targets"));

    m.def(
        "seg_loss",
        [](const py::array_t<float>& logits, const py::array_t<float>& target) {
            if (logits.ndim() != target.ndim()) throw DataError("seg_loss: rank mismatch");
            std::vector<std::int64_t> shape(logits.shape(), logits.shape() + logits.ndim());
            auto lt = torch::from_blob(const_cast<float*>(logits.data()), shape, torch::kFloat);
            auto tt = torch::from_blob(const_cast<float*>(target.data()), shape, torch::kFloat);
            auto parts = trainer::seg_loss(lt.clone(), tt.clone());
            py::dict out;
            out["total"] = parts.total.item<double>();
            out["bce"] = parts.bce.item<double>();
            out["dice"] = parts.dice.item<double>();
            return out;
        },
        py::arg("logits"), py::arg("target"));

    m.def("swin_param_count", [](int feature_size) {
        nets::SwinSpec spec;
        spec.feature_size = feature_size;
        spec.validate();
        nets::SwinUNETR net(spec);
        return nets::count_parameters(*net);
    },
          py::arg("feature_size") = 24);

    m.def("unet_param_count", [](const std::vector<int>& widths) {
        nets::UNetSpec spec;
        if (!widths.empty()) spec.widths = widths;
        spec.validate();
        nets::UNet net(spec);
        return nets::count_parameters(*net);
    },
          py::arg("widths") = std::vector<int>{});
}
