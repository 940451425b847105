#include <algorithm>
#include <fstream>

#include "crackseq/evalsuite.hpp"
#include "crackseq/nets/checkpoint.hpp"
#include "crackseq/trainer.hpp"

namespace crackseq::trainer {

ExperimentPlan parse_experiment_tag(const std::string& tag) {
    ExperimentPlan p;
    p.tag = tag;
    if (tag == "BL-multi") {
        p.multi_temporal = true;
    } else if (tag == "BL-mono") {
    } else if (tag == "1") {
        p.downsampled = true;
    } else if (tag == "2") {
        p.multi_temporal = true;
        p.augmented = true;
    } else if (tag == "3") {
        p.augmented = true;
    } else {
        throw UsageError("unknown experiment tag: " + tag +
                         " (expected BL-mono, BL-multi, 1, 2 or 3)");
    }
    return p;
}

namespace {

std::vector<datapipe::MonoSample> mono_split(const datapipe::BuiltDataset& dataset,
                                             const std::string& split) {
    auto all = datapipe::deserialize(dataset.manifest, dataset.samples);
    std::vector<datapipe::MonoSample> out;
    for (auto& s : all)
        if (dataset.manifest.split_of.at(s.parent_id) == split) out.push_back(std::move(s));
    return out;
}

// Experiment 1 levels the playing field: the mono pool shrinks to as many
// frames as there are sequences in the corresponding multi-temporal split.
std::vector<datapipe::MonoSample> downsample_to(std::vector<datapipe::MonoSample> samples,
                                                std::size_t target, std::uint64_t seed) {
    if (samples.size() <= target) return samples;
    auto rng = make_rng(seed);
    std::shuffle(samples.begin(), samples.end(), rng);
    samples.resize(target);
    std::sort(samples.begin(), samples.end(),
              [](const auto& a, const auto& b) { return a.id() < b.id(); });
    return samples;
}

}  // namespace

std::function<std::vector<cv::Mat>(const std::vector<cv::Mat>&)> sequence_predictor(
    std::shared_ptr<Segmenter> model) {
    return [model](const std::vector<cv::Mat>& frames) {
        torch::NoGradGuard g;
        std::vector<cv::Mat> out;
        if (model->temporal()) {
            std::vector<torch::Tensor> per_frame;
            for (const auto& f : frames) per_frame.push_back(image_to_tensor(f));
            auto x = torch::stack(per_frame, 1).unsqueeze(0);  // (1,3,T,H,W)
            auto probs = torch::sigmoid(model->forward(x)).squeeze(0).squeeze(0);  // (T,H,W)
            for (std::int64_t t = 0; t < probs.size(0); ++t)
                out.push_back(tensor_to_mask(probs[t]));
        } else {
            for (const auto& f : frames) {
                auto x = image_to_tensor(f).unsqueeze(0);  // (1,3,H,W)
                auto probs = torch::sigmoid(model->forward(x)).squeeze(0).squeeze(0);
                out.push_back(tensor_to_mask(probs));
            }
        }
        return out;
    };
}

ExperimentResult run_experiment(const std::string& tag, const datapipe::BuiltDataset& dataset,
                                TrainConfig config, const nets::SwinSpec& swin_spec,
                                const nets::UNetSpec& unet_spec,
                                const std::filesystem::path& run_dir) {
    ExperimentResult result;
    result.plan = parse_experiment_tag(tag);
    config.experiment = tag;
    config.augmentation = result.plan.augmented;
    config.validate();

    auto train_seqs = dataset.split_samples("train");
    auto val_seqs = dataset.split_samples("val");
    auto test_seqs = dataset.split_samples("test");
    if (train_seqs.empty() || val_seqs.empty() || test_seqs.empty())
        throw DataError("run_experiment: dataset has an empty split");

    std::shared_ptr<Segmenter> model;
    TensorDataset train_ds, val_ds;
    if (result.plan.multi_temporal) {
        model = make_swin_segmenter(swin_spec);
        train_ds = make_multi_dataset(train_seqs);
        val_ds = make_multi_dataset(val_seqs);
    } else {
        model = make_unet_segmenter(unet_spec);
        auto train_mono = mono_split(dataset, "train");
        auto val_mono = mono_split(dataset, "val");
        if (result.plan.downsampled) {
            train_mono = downsample_to(std::move(train_mono), train_seqs.size(),
                                       sub_seed(config.seed, "downsample", 0));
            val_mono = downsample_to(std::move(val_mono), val_seqs.size(),
                                     sub_seed(config.seed, "downsample", 1));
        }
        train_ds = make_mono_dataset(train_mono);
        val_ds = make_mono_dataset(val_mono);
    }

    result.training = train(*model, train_ds, val_ds, config, run_dir);

    // Test metrics come from the best validation checkpoint, not the last epoch.
    nets::load_checkpoint(model->module(), result.training.best_ckpt);
    model->train_mode(false);

    auto report = evalsuite::evaluate_sequences(sequence_predictor(model), test_seqs);
    report.provenance = {{"experiment", tag},
                         {"model", result.plan.multi_temporal ? "swin_unetr" : "unet"},
                         {"downsampled", result.plan.downsampled},
                         {"augmented", result.plan.augmented},
                         {"best_epoch", result.training.best_epoch},
                         {"best_val_iou", result.training.best_iou},
                         {"n_test_sequences", test_seqs.size()}};
    result.report = report.to_json();

    std::ofstream out(run_dir / "report.json");
    if (!out) throw DataError("run_experiment: cannot write report.json");
    out << result.report.dump(2) << "\n";
    return result;
}

}  // namespace crackseq::trainer
