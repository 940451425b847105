#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "CLI11.hpp"
#include "crackseq/evalsuite.hpp"
#include "crackseq/nets/checkpoint.hpp"
#include "crackseq/trainer.hpp"

namespace fs = std::filesystem;
using namespace crackseq;

namespace {

fs::path data_root;

fs::path resolve(const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && !data_root.empty()) return data_root / path;
    return path;
}

std::string two(int i) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "%02d", i);
    return buf;
}

// ---- generate ----

struct GenerateOpts {
    std::string out = "scenes";
    int scenes = 4;
    std::uint64_t seed = 0;
    synthgen::SceneSpec spec;
};

void cmd_generate(const GenerateOpts& o) {
    fs::path out = resolve(o.out);
    fs::create_directories(out);
    for (int i = 0; i < o.scenes; ++i) {
        synthgen::SceneSpec spec = o.spec;
        spec.rng_seed = sub_seed(o.seed, "scene", (std::uint64_t)i);
        spec.validate();
        auto seq = synthgen::generate_scene(spec);
        fs::path dir = out / ("scene_" + two(i));
        synthgen::write_scene(seq, dir);
        std::cout << dir.string() << "  frames=" << seq.n_frames()
                  << "  checksum=" << std::hex << datapipe::scene_checksum(seq) << std::dec
                  << "\n";
    }
}

// ---- ingest ----

void cmd_ingest(const std::string& in) {
    auto scenes = datapipe::ingest_real_dataset(resolve(in));
    std::cout << "scenes: " << scenes.size() << "\n";
    for (const auto& s : scenes) {
        double crack = 0;
        if (!s.masks.empty())
            crack = 100.0 * cv::countNonZero(s.masks.back()) / (double)s.masks.back().total();
        std::cout << "  " << s.provenance.value("source_path", std::string("?")) << "  "
                  << s.size().width << "x" << s.size().height << "  frames=" << s.n_frames()
                  << "  final_crack%=" << std::fixed << std::setprecision(2) << crack
                  << "  checksum=" << std::hex << datapipe::scene_checksum(s) << std::dec << "\n";
    }
}

// ---- build ----

struct BuildOpts {
    std::string in;
    std::string out = "dataset";
    datapipe::BuildParams params;
    std::vector<int> crop;  // x y w h
    std::string expect;
    bool materialize = false;
};

void print_stats(const datapipe::DatasetManifest& m) {
    auto block = [](const char* label, const std::map<std::string, datapipe::SplitStats>& stats) {
        for (const char* split : {"all", "train", "val", "test"}) {
            auto it = stats.find(split);
            if (it == stats.end()) continue;
            std::cout << "  " << std::left << std::setw(6) << label << std::setw(6) << split
                      << std::right << std::setw(8) << it->second.n_samples << "  crack_img% "
                      << std::fixed << std::setprecision(1)
                      << 100.0 * it->second.crack_image_ratio << "  crack_px% "
                      << 100.0 * it->second.crack_pixel_ratio << "\n";
        }
    };
    std::cout << "dataset statistics (sequence length " << m.sequence_length << ", patch "
              << m.patch_size << "):\n";
    block("multi", m.multi_stats);
    block("mono", m.mono_stats);
}

nlohmann::json builtin_table1() {
    return nlohmann::json::parse(R"({
      "multi": {"all": [1356, 66.7, 1.2], "train": [813, null, null],
                "val": [271, null, null], "test": [272, null, null]},
      "mono":  {"all": [43392, 40.1, 1.2], "train": [26016, null, null],
                "val": [8672, null, null], "test": [8704, null, null]}
    })");
}

bool check_expected(const nlohmann::json& expect, const datapipe::DatasetManifest& m) {
    bool ok = true;
    auto check = [&](const char* label, const std::map<std::string, datapipe::SplitStats>& stats,
                     const nlohmann::json& ref) {
        for (auto it = ref.begin(); it != ref.end(); ++it) {
            const auto& row = it.value();
            auto found = stats.find(it.key());
            if (found == stats.end()) {
                std::cout << "expect MISMATCH: no " << label << "/" << it.key() << " split\n";
                ok = false;
                continue;
            }
            const auto& st = found->second;
            if (!row.at(0).is_null() && st.n_samples != row.at(0).get<long long>()) {
                std::cout << "expect MISMATCH: " << label << "/" << it.key() << " count "
                          << st.n_samples << " != " << row.at(0) << "\n";
                ok = false;
            }
            auto near = [](double a, double b) { return std::abs(a - b) <= 0.5; };
            if (row.size() > 1 && !row.at(1).is_null() &&
                !near(100.0 * st.crack_image_ratio, row.at(1).get<double>())) {
                std::cout << "expect MISMATCH: " << label << "/" << it.key() << " crack_img% "
                          << 100.0 * st.crack_image_ratio << " !~ " << row.at(1) << "\n";
                ok = false;
            }
            if (row.size() > 2 && !row.at(2).is_null() &&
                !near(100.0 * st.crack_pixel_ratio, row.at(2).get<double>())) {
                std::cout << "expect MISMATCH: " << label << "/" << it.key() << " crack_px% "
                          << 100.0 * st.crack_pixel_ratio << " !~ " << row.at(2) << "\n";
                ok = false;
            }
        }
    };
    check("multi", m.multi_stats, expect.at("multi"));
    check("mono", m.mono_stats, expect.at("mono"));
    return ok;
}

datapipe::BuiltDataset load_built_dataset(const std::string& data_arg) {
    fs::path p = resolve(data_arg);
    if (fs::is_directory(p)) p /= "dataset.json";
    std::ifstream in(p);
    if (!in) throw DataError("cannot open dataset description " + p.string());
    nlohmann::json j = nlohmann::json::parse(in);

    datapipe::BuildParams params;
    const auto& pj = j.at("params");
    params.target_len = pj.at("target_len");
    params.patch = pj.at("patch");
    params.balance_ratio = pj.at("balance_ratio");
    params.fractions = pj.at("fractions");
    params.seed = pj.at("seed");
    params.apply_clean_mask = pj.at("apply_clean_mask");
    if (pj.contains("crop")) {
        auto c = pj.at("crop");
        params.crop = cv::Rect(c.at(0), c.at(1), c.at(2), c.at(3));
    }

    auto scenes = datapipe::ingest_real_dataset(j.at("scenes_root").get<std::string>());
    auto ds = datapipe::build_dataset(std::move(scenes), params);

    // The dataset is rebuilt from the scenes; the stored manifest pins what the
    // result must look like.
    auto stored = datapipe::DatasetManifest::from_json(j.at("manifest"));
    if (stored.split_of != ds.manifest.split_of ||
        stored.source_checksums != ds.manifest.source_checksums)
        throw DataError("dataset drifted since build: " + p.string() +
                        " no longer matches its scenes (rerun build)");
    return ds;
}

void cmd_build(const BuildOpts& o) {
    datapipe::BuildParams params = o.params;
    if (!o.crop.empty()) {
        if (o.crop.size() != 4) throw UsageError("--crop needs x y w h");
        params.crop = cv::Rect(o.crop[0], o.crop[1], o.crop[2], o.crop[3]);
    }
    fs::path scenes_root = resolve(o.in);
    auto scenes = datapipe::ingest_real_dataset(scenes_root);
    auto ds = datapipe::build_dataset(std::move(scenes), params);
    print_stats(ds.manifest);

    fs::path out = resolve(o.out);
    fs::create_directories(out);
    nlohmann::json desc;
    desc["scenes_root"] = fs::absolute(scenes_root).string();
    desc["params"] = {{"target_len", params.target_len},
                      {"patch", params.patch},
                      {"balance_ratio", params.balance_ratio},
                      {"fractions", params.fractions},
                      {"seed", params.seed},
                      {"apply_clean_mask", params.apply_clean_mask}};
    if (params.crop)
        desc["params"]["crop"] = {params.crop->x, params.crop->y, params.crop->width,
                                  params.crop->height};
    desc["manifest"] = ds.manifest.to_json();
    std::ofstream(out / "dataset.json") << desc.dump(2) << "\n";
    std::cout << "wrote " << (out / "dataset.json").string() << "\n";

    if (o.materialize) {
        for (const auto& s : ds.samples) {
            fs::path dir = out / "patches" / ds.manifest.split_of.at(s.id()) / s.id();
            fs::create_directories(dir);
            for (int t = 0; t < s.n_frames(); ++t) {
                cv::Mat bgr;
                cv::cvtColor(s.images[t], bgr, cv::COLOR_RGB2BGR);
                cv::imwrite((dir / ("frame_" + two(t) + ".png")).string(), bgr);
                cv::imwrite((dir / ("mask_" + two(t) + ".png")).string(), s.masks[t] * 255);
            }
        }
        std::cout << "materialized " << ds.samples.size() << " patch sequences\n";
    }

    if (!o.expect.empty()) {
        nlohmann::json ref;
        if (o.expect == "table1") {
            ref = builtin_table1();
        } else {
            std::ifstream ein(resolve(o.expect));
            if (!ein) throw UsageError("--expect: no such reference " + o.expect);
            ref = nlohmann::json::parse(ein);
        }
        if (!check_expected(ref, ds.manifest))
            throw DataError("statistics do not match the --expect reference");
        std::cout << "expect: OK\n";
    }
}

// ---- train ----

struct TrainOpts {
    std::string data = "dataset";
    std::string run_dir = "runs/run";
    trainer::TrainConfig config;
    nets::SwinSpec swin;
    nets::UNetSpec unet;
    int swin_window = 7;
};

void cmd_train(TrainOpts o, const std::string& merged_config) {
    o.swin.window = {o.swin_window, o.swin_window, o.swin_window};
    o.swin.validate();
    o.unet.validate();
    trainer::parse_experiment_tag(o.config.experiment);  // fail early on bad tags

    auto ds = load_built_dataset(o.data);
    fs::path run_dir = resolve(o.run_dir);
    fs::create_directories(run_dir);

    nlohmann::json cfg;
    cfg["train"] = o.config.to_json();
    cfg["swin"] = o.swin.to_json();
    cfg["unet"] = o.unet.to_json();
    cfg["data"] = fs::absolute(resolve(o.data)).string();
    std::ofstream(run_dir / "config.json") << cfg.dump(2) << "\n";
    std::ofstream(run_dir / "resolved.ini") << merged_config;

    auto result =
        trainer::run_experiment(o.config.experiment, ds, o.config, o.swin, o.unet, run_dir);
    const auto& m = result.report.at("metrics");
    std::cout << "experiment " << o.config.experiment << ": best epoch "
              << result.training.best_epoch << ", test IoU " << m.at("iou") << ", P "
              << m.at("precision") << ", R " << m.at("recall") << ", F1 " << m.at("f1") << "\n";
}

// ---- eval ----

void cmd_eval(const std::string& data, const std::string& run_dir_s, std::string ckpt_s,
              std::string out_s) {
    fs::path run_dir = resolve(run_dir_s);
    fs::path ckpt = ckpt_s.empty() ? run_dir / "best.ckpt" : resolve(ckpt_s);
    if (!fs::exists(ckpt))
        throw DataError("no checkpoint at " + ckpt.string() + " (train first or pass --ckpt)");

    auto ds = load_built_dataset(data);
    auto model = trainer::load_segmenter(ckpt);
    model->train_mode(false);

    auto test_seqs = ds.split_samples("test");
    if (test_seqs.empty()) throw DataError("dataset has no test split");
    auto report = evalsuite::evaluate_sequences(trainer::sequence_predictor(model), test_seqs);
    nlohmann::json meta = nets::read_checkpoint_meta(ckpt);
    std::string tag = meta.value("config", nlohmann::json::object())
                          .value("experiment", std::string("?"));
    auto plan = trainer::parse_experiment_tag(tag == "?" ? "BL-multi" : tag);
    report.provenance = {{"experiment", tag},
                         {"model", meta.at("model").value("kind", std::string("?"))},
                         {"downsampled", plan.downsampled},
                         {"augmented", plan.augmented},
                         {"checkpoint", fs::absolute(ckpt).string()},
                         {"checkpoint_meta", meta},
                         {"n_test_sequences", test_seqs.size()}};

    fs::path out = out_s.empty() ? run_dir / "report.json" : resolve(out_s);
    fs::create_directories(out.parent_path());
    std::ofstream(out) << report.to_json().dump(2) << "\n";
    std::cout << "IoU " << std::fixed << std::setprecision(1) << report.derived.iou << "  P "
              << report.derived.precision << "  R " << report.derived.recall << "  F1 "
              << report.derived.f1 << "  TC " << std::setprecision(3)
              << report.temporal_consistency_score << "\n";
    std::cout << "wrote " << out.string() << "\n";
}

// ---- infer ----

void cmd_infer(const std::string& ckpt_s, const std::string& scene_s, const std::string& out_s,
               int patch) {
    auto model = trainer::load_segmenter(resolve(ckpt_s));
    model->train_mode(false);
    auto scene = datapipe::read_scene(resolve(scene_s));
    auto predict = trainer::sequence_predictor(model);

    std::int64_t stride = 1;
    if (model->temporal()) {
        auto meta = nets::read_checkpoint_meta(resolve(ckpt_s));
        stride = nets::SwinSpec::from_json(meta.at("model").at("spec")).downsample_factor();
    }

    // Temporal models need the time axis padded up to their stride multiple;
    // duplicated frames are dropped again after prediction.
    evalsuite::TileModel tile_model = [&](const std::vector<cv::Mat>& tile) {
        if (!model->temporal()) return predict(tile);
        int T = (int)tile.size();
        int target = (int)((T + stride - 1) / stride * stride);
        auto idx = datapipe::pad_index_map(T, target);
        std::vector<cv::Mat> padded;
        for (int k : idx) padded.push_back(tile[k]);
        auto preds = predict(padded);
        std::vector<cv::Mat> out(T);
        for (int k = 0; k < (int)idx.size(); ++k)
            if (out[idx[k]].empty()) out[idx[k]] = preds[k];
        return out;
    };

    auto result = evalsuite::tile_infer(tile_model, scene, patch);
    fs::path out = resolve(out_s);
    fs::create_directories(out);
    for (int t = 0; t < (int)result.masks.size(); ++t)
        cv::imwrite((out / ("pred_" + two(t) + ".png")).string(), result.masks[t] * 255);

    evalsuite::MetricsReport report;
    for (std::size_t t = 0; t < result.masks.size(); ++t)
        report.counts += evalsuite::confusion(result.masks[t], scene.masks[t]);
    report.derived = evalsuite::metrics(report.counts);
    if (result.masks.size() >= 2)
        report.temporal_consistency_score =
            evalsuite::temporal_consistency(result.masks, scene.masks);
    if (!scene.distractors.empty())
        report.distractors =
            evalsuite::distractor_report(result.masks.back(), scene.distractors, scene.size());
    report.provenance = {{"scene", fs::absolute(resolve(scene_s)).string()},
                         {"patch", patch},
                         {"border_zero_filled", result.border_zero_filled}};
    std::ofstream(out / "infer_report.json") << report.to_json().dump(2) << "\n";

    report::write_sequence_strip(scene.frames, scene.masks, {result.masks},
                                 out / "strip.png");
    std::cout << "IoU " << std::fixed << std::setprecision(1) << report.derived.iou
              << "  wrote " << out.string() << "\n";
}

// ---- report ----

void cmd_report(std::vector<std::string> run_dirs, const std::string& out_s) {
    std::vector<report::RunSummary> runs;
    for (const auto& d : run_dirs) runs.push_back(report::load_run_summary(resolve(d)));
    std::sort(runs.begin(), runs.end(),
              [](const auto& a, const auto& b) { return a.tag < b.tag; });
    fs::path out = resolve(out_s);
    report::render_report(runs, out);
    std::ifstream table(out / "table.txt");
    std::cout << table.rdbuf();
    std::cout << "wrote " << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Crack propagation segmentation pipeline: synthetic scene generation, dataset "
                 "aggregation, training and evaluation of mono- and multi-temporal models"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Structured config file; flags override file values");
    app.allow_config_extras(true);

    if (const char* env = std::getenv("CRACKSEQ_DATA_ROOT")) data_root = env;
    int workers = 1;
    app.add_option("--workers", workers, "Worker threads for tensor ops")->capture_default_str();

    GenerateOpts gen;
    auto* g = app.add_subcommand("generate", "Write synthetic crack propagation scenes");
    g->add_option("--out", gen.out, "Output directory")->capture_default_str();
    g->add_option("--scenes", gen.scenes, "Number of scenes")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    g->add_option("--seed", gen.seed, "Root seed")->capture_default_str();
    g->add_option("--width", gen.spec.width_px)->check(CLI::PositiveNumber)->capture_default_str();
    g->add_option("--height", gen.spec.height_px)
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    g->add_option("--epochs", gen.spec.n_epochs, "Load epochs (frames per scene)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    g->add_option("--crack-seeds", gen.spec.n_crack_seeds)
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    g->add_option("--target-crack-ratio", gen.spec.target_crack_pixel_ratio)
        ->capture_default_str();
    g->add_option("--jitter", gen.spec.jitter_levels, "Brightness jitter bound")
        ->capture_default_str();
    g->add_option("--digits", gen.spec.distractor_counts["pencil_digit"])->capture_default_str();
    g->add_option("--sensors", gen.spec.distractor_counts["sensor"])->capture_default_str();
    g->add_option("--cables", gen.spec.distractor_counts["cable"])->capture_default_str();
    g->add_option("--cavities", gen.spec.distractor_counts["cavity"])->capture_default_str();

    std::string ingest_in;
    auto* ing = app.add_subcommand("ingest", "Validate and summarize a scene dataset");
    ing->add_option("--in", ingest_in, "Dataset root with scene_* directories")->required();

    BuildOpts bld;
    auto* b = app.add_subcommand("build", "Aggregate scenes into a patch dataset");
    b->add_option("--in", bld.in, "Scene root")->required();
    b->add_option("--out", bld.out, "Dataset output directory")->capture_default_str();
    b->add_option("--target-len", bld.params.target_len, "Padded sequence length")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    b->add_option("--patch", bld.params.patch)->check(CLI::PositiveNumber)->capture_default_str();
    b->add_option("--ratio", bld.params.balance_ratio, "crack : crack-free balance ratio")
        ->capture_default_str();
    b->add_option("--fractions", bld.params.fractions, "train/val/test fractions")
        ->expected(3)
        ->capture_default_str();
    b->add_option("--seed", bld.params.seed)->capture_default_str();
    b->add_option("--crop", bld.crop, "Crop region x y w h before patching")->expected(4);
    b->add_flag("--clean-masks", bld.params.apply_clean_mask,
                "Run mask cleanup (for hand-labeled inputs)");
    b->add_option("--expect", bld.expect, "'table1' or a JSON file with reference statistics");
    b->add_flag("--materialize", bld.materialize, "Write every patch sequence as PNGs");

    TrainOpts trn;
    auto* t = app.add_subcommand("train", "Train one experiment on a built dataset");
    t->add_option("--data", trn.data, "Dataset directory (from build)")->capture_default_str();
    t->add_option("--run-dir", trn.run_dir)->capture_default_str();
    t->add_option("--exp", trn.config.experiment, "BL-mono | BL-multi | 1 | 2 | 3")
        ->capture_default_str();
    t->add_option("--seed", trn.config.seed)->capture_default_str();
    t->add_option("--batch", trn.config.batch_size)
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    t->add_option("--max-epochs", trn.config.max_epochs)
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    t->add_option("--lr", trn.config.initial_lr)->capture_default_str();
    t->add_option("--es-patience", trn.config.early_stop_patience)->capture_default_str();
    t->add_option("--lr-patience", trn.config.lr_patience)->capture_default_str();
    t->add_option("--lr-factor", trn.config.lr_factor)->capture_default_str();
    t->add_option("--swin-features", trn.swin.feature_size)->capture_default_str();
    t->add_option("--swin-window", trn.swin_window)->capture_default_str();
    t->add_option("--swin-depths", trn.swin.depths)->capture_default_str();
    t->add_option("--swin-heads", trn.swin.num_heads)->capture_default_str();
    t->add_option("--unet-widths", trn.unet.widths)->capture_default_str();

    std::string eval_data = "dataset", eval_run = "runs/run", eval_ckpt, eval_out;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    e->add_option("--data", eval_data)->capture_default_str();
    e->add_option("--run-dir", eval_run)->capture_default_str();
    e->add_option("--ckpt", eval_ckpt, "Checkpoint path (default <run-dir>/best.ckpt)");
    e->add_option("--out", eval_out, "Report path (default <run-dir>/report.json)");

    std::string inf_ckpt, inf_scene, inf_out = "infer";
    int inf_patch = 128;
    auto* i = app.add_subcommand("infer", "Tile a full scene through a checkpoint");
    i->add_option("--ckpt", inf_ckpt)->required();
    i->add_option("--scene", inf_scene, "One scene directory")->required();
    i->add_option("--out", inf_out)->capture_default_str();
    i->add_option("--patch", inf_patch)->check(CLI::PositiveNumber)->capture_default_str();

    std::vector<std::string> rep_dirs;
    std::string rep_out = "report";
    auto* r = app.add_subcommand("report", "Aggregate run reports into a comparison table");
    r->add_option("runs", rep_dirs, "Run directories")->required()->expected(-1);
    r->add_option("--out", rep_out)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return 2;
    }

    try {
        torch::set_num_threads(std::max(1, workers));
        if (g->parsed()) cmd_generate(gen);
        if (ing->parsed()) cmd_ingest(ingest_in);
        if (b->parsed()) cmd_build(bld);
        if (t->parsed()) cmd_train(trn, app.config_to_str(true, false));
        if (e->parsed()) cmd_eval(eval_data, eval_run, eval_ckpt, eval_out);
        if (i->parsed()) cmd_infer(inf_ckpt, inf_scene, inf_out, inf_patch);
        if (r->parsed()) cmd_report(rep_dirs, rep_out);
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n";
        return 2;
    } catch (const DataError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 4;
    }
    return 0;
}
