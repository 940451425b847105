#include "crackseq/trainer.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

#include "crackseq/nets/checkpoint.hpp"

namespace crackseq::trainer {

namespace F = torch::nn::functional;

void TrainConfig::validate() const {
    if (batch_size < 1) throw DataError("TrainConfig: batch_size must be >= 1");
    if (early_stop_patience < 1 || lr_patience < 1)
        throw DataError("TrainConfig: patience values must be >= 1");
    if (lr_factor <= 0 || lr_factor >= 1) throw DataError("TrainConfig: lr_factor out of (0,1)");
    if (initial_lr <= 0) throw DataError("TrainConfig: initial_lr must be positive");
    if (max_epochs < 1) throw DataError("TrainConfig: max_epochs must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"batch_size", batch_size},
            {"early_stop_patience", early_stop_patience},
            {"lr_patience", lr_patience},
            {"lr_factor", lr_factor},
            {"initial_lr", initial_lr},
            {"max_epochs", max_epochs},
            {"augmentation", augmentation},
            {"experiment", experiment},
            {"seed", seed}};
}

LossParts seg_loss(const torch::Tensor& logits, const torch::Tensor& target) {
    TORCH_CHECK(logits.sizes() == target.sizes(), "seg_loss: shape mismatch");
    if (!torch::isfinite(logits).all().item<bool>())
        throw DataError("seg_loss: non-finite logits");

    LossParts parts;
    parts.bce = F::binary_cross_entropy_with_logits(logits, target);
    torch::Tensor p = torch::sigmoid(logits);
    torch::Tensor tsum = target.sum();
    if (tsum.item<double>() > 0) {
        const double smooth = 1.0;
        torch::Tensor inter = (p * target).sum();
        parts.dice = 1.0 - (2.0 * inter + smooth) / (p.sum() + tsum + smooth);
    } else {
        parts.dice = torch::zeros({}, logits.options());
    }
    parts.total = parts.bce + parts.dice;
    return parts;
}

bool EarlyStopper::observe(double value, int epoch) {
    if (value > best_) {
        best_ = value;
        best_epoch_ = epoch;
        stale_ = 0;
        return true;
    }
    ++stale_;
    return false;
}

bool PlateauScheduler::observe(double loss) {
    if (loss < best_) {
        best_ = loss;
        stale_ = 0;
        return false;
    }
    if (++stale_ >= patience_) {
        stale_ = 0;
        return true;
    }
    return false;
}

namespace {

void gaussian_blur_(torch::Tensor& image, double sigma) {
    const int k = 5;
    torch::Tensor xs = torch::arange(k, torch::kFloat) - (k - 1) / 2.0;
    torch::Tensor kernel = torch::exp(-xs.pow(2) / (2 * sigma * sigma));
    kernel /= kernel.sum();

    auto sizes = image.sizes().vec();
    std::int64_t h = sizes[sizes.size() - 2], w = sizes.back();
    torch::Tensor x = image.reshape({-1, 1, h, w});
    x = F::conv2d(x, kernel.view({1, 1, 1, k}),
                  F::Conv2dFuncOptions().padding({0, (k - 1) / 2}));
    x = F::conv2d(x, kernel.view({1, 1, k, 1}),
                  F::Conv2dFuncOptions().padding({(k - 1) / 2, 0}));
    image = x.reshape(sizes);
}

}  // namespace

void augment(torch::Tensor& image, torch::Tensor& mask, const AugmentPolicy& policy,
             std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    bool hflip = u01(rng) < policy.prob;
    bool vflip = u01(rng) < policy.prob;
    bool brightness = u01(rng) < policy.prob;
    bool contrast = u01(rng) < policy.prob;
    bool blur = u01(rng) < policy.prob;

    std::int64_t wdim = image.dim() - 1, hdim = image.dim() - 2;
    if (hflip) {
        image = image.flip(wdim);
        mask = mask.flip(wdim);
    }
    if (vflip) {
        image = image.flip(hdim);
        mask = mask.flip(hdim);
    }
    if (brightness) {
        std::uniform_real_distribution<double> d(-policy.brightness_max, policy.brightness_max);
        image = (image + d(rng)).clamp(0.0, 1.0);
    }
    if (contrast) {
        std::uniform_real_distribution<double> d(policy.contrast_lo, policy.contrast_hi);
        torch::Tensor mean = image.mean();
        image = ((image - mean) * d(rng) + mean).clamp(0.0, 1.0);
    }
    if (blur) {
        std::uniform_real_distribution<double> d(policy.blur_sigma_lo, policy.blur_sigma_hi);
        gaussian_blur_(image, d(rng));
    }
}

torch::Tensor image_to_tensor(const cv::Mat& rgb) {
    CV_Assert(rgb.type() == CV_8UC3);
    cv::Mat c = rgb.isContinuous() ? rgb : rgb.clone();
    torch::Tensor t = torch::from_blob(c.data, {c.rows, c.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat).div(255.0);
}

torch::Tensor mask_to_tensor(const cv::Mat& mask) {
    CV_Assert(mask.type() == CV_8UC1);
    cv::Mat c = mask.isContinuous() ? mask : mask.clone();
    torch::Tensor t = torch::from_blob(c.data, {c.rows, c.cols}, torch::kUInt8).clone();
    return t.unsqueeze(0).to(torch::kFloat);
}

cv::Mat tensor_to_mask(const torch::Tensor& t) {
    torch::Tensor bin = (t >= 0.5).to(torch::kUInt8).contiguous();
    TORCH_CHECK(bin.dim() == 2, "tensor_to_mask expects (H,W)");
    cv::Mat out(bin.size(0), bin.size(1), CV_8UC1);
    std::memcpy(out.data, bin.data_ptr<std::uint8_t>(), bin.numel());
    return out;
}

namespace {

torch::Tensor uint8_image_block(const cv::Mat& rgb) {
    cv::Mat c = rgb.isContinuous() ? rgb : rgb.clone();
    return torch::from_blob(c.data, {c.rows, c.cols, 3}, torch::kUInt8).clone().permute(
        {2, 0, 1});
}

torch::Tensor uint8_mask_block(const cv::Mat& mask) {
    cv::Mat c = mask.isContinuous() ? mask : mask.clone();
    return torch::from_blob(c.data, {c.rows, c.cols}, torch::kUInt8).clone().unsqueeze(0);
}

}  // namespace

TensorDataset make_multi_dataset(const std::vector<const datapipe::SequenceSample*>& samples) {
    TensorDataset ds;
    if (samples.empty()) return ds;
    std::vector<torch::Tensor> imgs, msks;
    for (const auto* s : samples) {
        std::vector<torch::Tensor> fi, fm;
        for (int t = 0; t < s->n_frames(); ++t) {
            fi.push_back(uint8_image_block(s->images[t]));
            fm.push_back(uint8_mask_block(s->masks[t]));
        }
        imgs.push_back(torch::stack(fi, 1));  // (3,T,H,W)
        msks.push_back(torch::stack(fm, 1));  // (1,T,H,W)
        ds.ids.push_back(s->id());
    }
    ds.images = torch::stack(imgs, 0);
    ds.masks = torch::stack(msks, 0);
    return ds;
}

TensorDataset make_mono_dataset(const std::vector<datapipe::MonoSample>& samples) {
    TensorDataset ds;
    if (samples.empty()) return ds;
    std::vector<torch::Tensor> imgs, msks;
    for (const auto& s : samples) {
        imgs.push_back(uint8_image_block(s.image));
        msks.push_back(uint8_mask_block(s.mask));
        ds.ids.push_back(s.id());
    }
    ds.images = torch::stack(imgs, 0);
    ds.masks = torch::stack(msks, 0);
    return ds;
}

namespace {

struct SwinSegmenter : Segmenter {
    explicit SwinSegmenter(const nets::SwinSpec& spec) : net(spec) {}
    torch::Tensor forward(const torch::Tensor& x) override { return net->forward(x); }
    torch::nn::Module& module() override { return *net; }
    nlohmann::json describe() const override {
        return {{"kind", "swin_unetr"}, {"spec", net->spec.to_json()}};
    }
    bool temporal() const override { return true; }
    nets::SwinUNETR net;
};

struct UNetSegmenter : Segmenter {
    explicit UNetSegmenter(const nets::UNetSpec& spec) : net(spec) {}
    torch::Tensor forward(const torch::Tensor& x) override { return net->forward(x); }
    torch::nn::Module& module() override { return *net; }
    nlohmann::json describe() const override {
        return {{"kind", "unet"}, {"spec", net->spec.to_json()}};
    }
    bool temporal() const override { return false; }
    nets::UNet net;
};

}  // namespace

std::shared_ptr<Segmenter> make_swin_segmenter(const nets::SwinSpec& spec) {
    return std::make_shared<SwinSegmenter>(spec);
}

std::shared_ptr<Segmenter> make_unet_segmenter(const nets::UNetSpec& spec) {
    return std::make_shared<UNetSegmenter>(spec);
}

std::shared_ptr<Segmenter> load_segmenter(const std::filesystem::path& ckpt) {
    nlohmann::json meta = nets::read_checkpoint_meta(ckpt);
    std::string kind = meta.at("model").at("kind");
    std::shared_ptr<Segmenter> model;
    if (kind == "swin_unetr")
        model = make_swin_segmenter(nets::SwinSpec::from_json(meta.at("model").at("spec")));
    else if (kind == "unet")
        model = make_unet_segmenter(nets::UNetSpec::from_json(meta.at("model").at("spec")));
    else
        throw DataError("load_segmenter: unknown model kind " + kind);
    nets::load_checkpoint(model->module(), ckpt);
    return model;
}

namespace {

struct BatchSums {
    double tp = 0, fp = 0, fn = 0;
    double inter2 = 0, denom = 0;  // micro Dice accumulators
};

torch::Tensor fetch_batch(const torch::Tensor& store, const std::vector<std::int64_t>& idx) {
    torch::Tensor ind = torch::tensor(idx, torch::kLong);
    return store.index_select(0, ind).to(torch::kFloat);
}

}  // namespace

ValMetrics evaluate(Segmenter& model, const TensorDataset& data, int batch_size) {
    torch::NoGradGuard g;
    model.train_mode(false);
    BatchSums sums;
    for (std::int64_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < std::min<std::int64_t>(start + batch_size, data.size());
             ++i)
            idx.push_back(i);
        torch::Tensor x = fetch_batch(data.images, idx).div(255.0);
        torch::Tensor y = fetch_batch(data.masks, idx);
        torch::Tensor p = torch::sigmoid(model.forward(x));
        torch::Tensor pred = (p >= 0.5).to(torch::kFloat);
        sums.tp += (pred * y).sum().item<double>();
        sums.fp += (pred * (1 - y)).sum().item<double>();
        sums.fn += ((1 - pred) * y).sum().item<double>();
        sums.inter2 += 2.0 * (p * y).sum().item<double>();
        sums.denom += (p.sum() + y.sum()).item<double>();
    }
    ValMetrics m;
    double d = sums.tp + sums.fp + sums.fn;
    m.crack_iou = d > 0 ? sums.tp / d : 1.0;
    const double smooth = 1.0;
    m.crack_loss = 1.0 - (sums.inter2 + smooth) / (sums.denom + smooth);
    return m;
}

TrainResult train(Segmenter& model, const TensorDataset& train_data,
                  const TensorDataset& val_data, const TrainConfig& config,
                  const std::filesystem::path& run_dir,
                  std::function<ValMetrics(int)> val_override) {
    config.validate();
    if (train_data.size() == 0) throw DataError("train: empty training split");
    std::filesystem::create_directories(run_dir);
    std::ofstream(run_dir / "train_config.json") << config.to_json().dump(2) << "\n";

    torch::optim::Adam opt(model.module().parameters(),
                           torch::optim::AdamOptions(config.initial_lr));
    EarlyStopper stopper(config.early_stop_patience);
    PlateauScheduler scheduler(config.lr_patience, config.lr_factor);
    AugmentPolicy policy;

    TrainResult result;
    result.best_ckpt = run_dir / "best.ckpt";
    result.final_ckpt = run_dir / "final.ckpt";
    double lr = config.initial_lr;

    auto save = [&](const std::filesystem::path& p, int epoch, double iou) {
        nlohmann::json meta;
        meta["model"] = model.describe();
        meta["epoch"] = epoch;
        meta["val_iou"] = iou;
        meta["config"] = config.to_json();
        nets::save_checkpoint(model.module(), meta, p);
    };

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        model.train_mode(true);
        std::vector<std::int64_t> order(train_data.size());
        std::iota(order.begin(), order.end(), 0);
        auto shuffle_rng = make_rng(sub_seed(config.seed, "shuffle", (std::uint64_t)epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0;
        int n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::vector<torch::Tensor> xs, ys;
            for (std::size_t i = start;
                 i < std::min(start + config.batch_size, order.size()); ++i) {
                std::int64_t s = order[i];
                torch::Tensor x = train_data.images[s].to(torch::kFloat).div(255.0);
                torch::Tensor y = train_data.masks[s].to(torch::kFloat);
                if (config.augmentation) {
                    auto rng = make_rng(sub_seed(config.seed, "augment",
                                                 fnv1a(train_data.ids[s].data(),
                                                       train_data.ids[s].size()),
                                                 (std::uint64_t)epoch));
                    augment(x, y, policy, rng);
                }
                xs.push_back(x);
                ys.push_back(y);
            }
            torch::Tensor bx = torch::stack(xs, 0), by = torch::stack(ys, 0);
            opt.zero_grad();
            torch::Tensor logits = model.forward(bx);
            LossParts parts;
            try {
                parts = seg_loss(logits, by);
            } catch (const DataError&) {
                nlohmann::json dump = {{"epoch", epoch},
                                       {"batch_start", start},
                                       {"lr", lr},
                                       {"history_rows", result.history.size()}};
                std::ofstream(run_dir / "divergence_state.json") << dump.dump(2) << "\n";
                throw;
            }
            parts.total.backward();
            opt.step();
            loss_sum += parts.total.item<double>();
            ++n_batches;
        }

        ValMetrics val = val_override ? val_override(epoch)
                                      : evaluate(model, val_data, config.batch_size);
        EpochStats row{epoch, n_batches ? loss_sum / n_batches : 0.0, val.crack_loss,
                       val.crack_iou, lr};
        result.history.push_back(row);
        std::cout << "[train] epoch=" << epoch << " train_loss=" << row.train_loss
                  << " val_loss_crack=" << row.val_loss_crack << " val_iou=" << row.val_iou
                  << " lr=" << lr << "\n";

        if (stopper.observe(val.crack_iou, epoch)) {
            result.best_epoch = epoch;
            result.best_iou = val.crack_iou;
            save(result.best_ckpt, epoch, val.crack_iou);
        }
        if (scheduler.observe(val.crack_loss)) {
            lr *= scheduler.factor();
            for (auto& group : opt.param_groups())
                static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
            std::cout << "[train] lr_reduced epoch=" << epoch << " lr=" << lr << "\n";
        }
        if (stopper.should_stop()) {
            std::cout << "[train] early_stop epoch=" << epoch << "\n";
            break;
        }
    }

    save(result.final_ckpt, result.history.empty() ? 0 : result.history.back().epoch,
         result.history.empty() ? 0.0 : result.history.back().val_iou);

    std::ofstream hist(run_dir / "history.csv");
    hist << "epoch,train_loss,val_loss_crack,val_iou,lr\n";
    for (const auto& r : result.history)
        hist << r.epoch << "," << r.train_loss << "," << r.val_loss_crack << "," << r.val_iou
             << "," << r.lr << "\n";
    return result;
}

}  // namespace crackseq::trainer
