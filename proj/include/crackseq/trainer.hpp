#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "crackseq/datapipe.hpp"
#include "crackseq/nets/swin_unetr.hpp"
#include "crackseq/nets/unet.hpp"
#include "json.hpp"

namespace crackseq::trainer {

struct TrainConfig {
    int batch_size = 4;
    int early_stop_patience = 20;  // epochs without validation crack-IoU improvement
    int lr_patience = 10;          // epochs without validation crack-loss decrease
    double lr_factor = 0.1;
    double initial_lr = 1e-4;
    int max_epochs = 500;
    bool augmentation = false;
    std::string experiment = "BL-multi";
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

struct LossParts {
    torch::Tensor total;  // mean BCE-with-logits + soft Dice, equally weighted
    torch::Tensor bce;
    torch::Tensor dice;  // reported as the crack-class loss
};

// Throws DataError on non-finite logits. The Dice term is 0 when the target
// has no crack pixels (the BCE term alone drives those batches).
LossParts seg_loss(const torch::Tensor& logits, const torch::Tensor& target);

// Stops after `patience` consecutive epochs without a new best (maximized metric).
struct EarlyStopper {
    explicit EarlyStopper(int patience) : patience_(patience) {}
    // Returns true when `value` is a new best.
    bool observe(double value, int epoch);
    bool should_stop() const { return stale_ >= patience_; }
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

  private:
    int patience_;
    double best_ = -std::numeric_limits<double>::infinity();
    int best_epoch_ = 0;
    int stale_ = 0;
};

// Multiplies the learning rate by `factor` after `patience` consecutive
// epochs without a decrease of the monitored loss.
struct PlateauScheduler {
    PlateauScheduler(int patience, double factor) : patience_(patience), factor_(factor) {}
    // Returns true when the learning rate should be reduced this epoch.
    bool observe(double loss);
    double factor() const { return factor_; }

  private:
    int patience_;
    double factor_;
    double best_ = std::numeric_limits<double>::infinity();
    int stale_ = 0;
};

// Five transforms, each drawn independently with probability 0.5. One draw is
// shared by all frames of a sequence sample; masks see the flips only.
struct AugmentPolicy {
    double prob = 0.5;
    double brightness_max = 0.1;          // additive, images in [0,1]
    double contrast_lo = 0.75, contrast_hi = 1.33;
    double blur_sigma_lo = 0.5, blur_sigma_hi = 1.5;
};

// image: (3,H,W) or (3,T,H,W) float in [0,1]; mask: (1,...) float {0,1}.
void augment(torch::Tensor& image, torch::Tensor& mask, const AugmentPolicy& policy,
             std::mt19937_64& rng);

// In-memory dataset: uint8 images (N,3,[T,]H,W) and masks (N,1,[T,]H,W).
struct TensorDataset {
    torch::Tensor images;
    torch::Tensor masks;
    std::vector<std::string> ids;

    bool temporal() const { return images.dim() == 5; }
    std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

TensorDataset make_multi_dataset(const std::vector<const datapipe::SequenceSample*>& samples);
TensorDataset make_mono_dataset(const std::vector<datapipe::MonoSample>& samples);

cv::Mat tensor_to_mask(const torch::Tensor& probs_or_binary);  // (H,W) float -> 8U {0,1}
torch::Tensor image_to_tensor(const cv::Mat& rgb);              // 8UC3 -> (3,H,W) float [0,1]
torch::Tensor mask_to_tensor(const cv::Mat& mask);              // 8UC1 {0,1} -> (1,H,W) float

// Minimal segmentation-model interface shared by both architectures.
struct Segmenter {
    virtual ~Segmenter() = default;
    virtual torch::Tensor forward(const torch::Tensor& x) = 0;
    virtual torch::nn::Module& module() = 0;
    virtual nlohmann::json describe() const = 0;  // {"kind":..., "spec":...}
    virtual bool temporal() const = 0;
    void train_mode(bool on) { module().train(on); }
};

std::shared_ptr<Segmenter> make_swin_segmenter(const nets::SwinSpec& spec);
std::shared_ptr<Segmenter> make_unet_segmenter(const nets::UNetSpec& spec);
std::shared_ptr<Segmenter> load_segmenter(const std::filesystem::path& ckpt);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0, val_loss_crack = 0, val_iou = 0, lr = 0;
};

struct ValMetrics {
    double crack_iou = 0;   // micro over the split, threshold 0.5
    double crack_loss = 0;  // Dice component
};

struct TrainResult {
    std::vector<EpochStats> history;
    int best_epoch = 0;
    double best_iou = 0;
    std::filesystem::path best_ckpt, final_ckpt;
};

ValMetrics evaluate(Segmenter& model, const TensorDataset& data, int batch_size = 4);

// Full protocol: shuffled mini-batches, per-epoch validation, best-IoU
// checkpointing, plateau LR decay and early stopping. `val_override` replaces
// the measured validation metrics (used to script trainer-semantics tests).
TrainResult train(Segmenter& model, const TensorDataset& train_data, const TensorDataset& val_data,
                  const TrainConfig& config, const std::filesystem::path& run_dir,
                  std::function<ValMetrics(int)> val_override = nullptr);

// Per-sequence predictor over a loaded model: frames in, one binary mask per
// frame out. Mono models run frame by frame; temporal models see the stack.
std::function<std::vector<cv::Mat>(const std::vector<cv::Mat>&)> sequence_predictor(
    std::shared_ptr<Segmenter> model);

// Experiment wiring per tag: BL-mono, BL-multi, 1 (downsampled mono),
// 2 (augmented multi), 3 (augmented mono).
struct ExperimentPlan {
    std::string tag;
    bool multi_temporal = false;
    bool augmented = false;
    bool downsampled = false;
};
ExperimentPlan parse_experiment_tag(const std::string& tag);

struct ExperimentResult {
    ExperimentPlan plan;
    TrainResult training;
    nlohmann::json report;  // evalsuite MetricsReport on the untouched test split
};

ExperimentResult run_experiment(const std::string& tag, const datapipe::BuiltDataset& dataset,
                                TrainConfig config, const nets::SwinSpec& swin_spec,
                                const nets::UNetSpec& unet_spec,
                                const std::filesystem::path& run_dir);

}  // namespace crackseq::trainer
