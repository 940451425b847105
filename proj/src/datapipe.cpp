#include "crackseq/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace crackseq::datapipe {

namespace {

bool any_crack(const std::vector<cv::Mat>& masks) {
    for (const auto& m : masks)
        if (cv::countNonZero(m) > 0) return true;
    return false;
}

long long crack_pixels(const cv::Mat& m) { return cv::countNonZero(m); }

const std::array<std::string, 3> kSplitNames = {"train", "val", "test"};

}  // namespace

std::string SequenceSample::id() const {
    return "scene" + std::to_string(scene_id) + "_r" + std::to_string(row) + "_c" +
           std::to_string(col);
}

std::string MonoSample::id() const { return parent_id + "_t" + std::to_string(t); }

cv::Mat clean_mask(const cv::Mat& mask) {
    CV_Assert(mask.type() == CV_8UC1);
    cv::Mat bin = mask > 0;  // {0,255}
    cv::Mat labels, stats, centroids;
    int n = cv::connectedComponentsWithStats(bin, labels, stats, centroids, 8);
    cv::Mat kept = cv::Mat::zeros(mask.size(), CV_8UC1);
    for (int i = 1; i < n; ++i) {
        if (stats.at<int>(i, cv::CC_STAT_AREA) >= 5) kept |= (labels == i);
    }
    cv::Mat kernel = cv::Mat::ones(3, 3, CV_8UC1);
    cv::Mat closed;
    cv::morphologyEx(kept, closed, cv::MORPH_CLOSE, kernel);
    return closed / 255;
}

std::vector<int> pad_index_map(int n_frames, int target_len) {
    if (n_frames < 1) throw DataError("pad_sequence: empty input");
    if (n_frames > target_len) throw DataError("pad_sequence: input longer than target length");
    int deficit = target_len - n_frames;
    std::vector<int> extra(n_frames, 0);
    if (deficit == 1) {
        extra[(n_frames - 1) / 2 + ((n_frames - 1) % 2)] += 1;  // round((n-1)/2)
    } else if (deficit > 1) {
        for (int k = 0; k < deficit; ++k) {
            int idx = (int)std::lround(double(k) * (n_frames - 1) / (deficit - 1));
            extra[idx] += 1;
        }
    }
    std::vector<int> map;
    map.reserve(target_len);
    for (int i = 0; i < n_frames; ++i)
        for (int r = 0; r <= extra[i]; ++r) map.push_back(i);
    return map;
}

FrameSequence pad_sequence(const FrameSequence& seq, int target_len) {
    auto map = pad_index_map(seq.n_frames(), target_len);
    FrameSequence out;
    out.distractors = seq.distractors;
    out.provenance = seq.provenance;
    for (int src : map) {
        out.frames.push_back(seq.frames[src]);
        out.masks.push_back(seq.masks[src]);
    }
    return out;
}

std::vector<SequenceSample> extract_patches(const FrameSequence& seq, int scene_id, int patch,
                                            std::optional<cv::Rect> crop) {
    if (seq.n_frames() == 0) throw DataError("extract_patches: empty sequence");
    cv::Rect region = crop.value_or(cv::Rect(0, 0, seq.size().width, seq.size().height));
    if (region.width < patch || region.height < patch)
        throw DataError("extract_patches: image smaller than one patch");
    int cols = region.width / patch, rows = region.height / patch;
    std::vector<SequenceSample> out;
    out.reserve(rows * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            cv::Rect roi(region.x + c * patch, region.y + r * patch, patch, patch);
            SequenceSample s;
            s.scene_id = scene_id;
            s.row = r;
            s.col = c;
            for (int t = 0; t < seq.n_frames(); ++t) {
                s.images.push_back(seq.frames[t](roi));
                s.masks.push_back(seq.masks[t](roi));
            }
            s.has_crack = any_crack(s.masks);
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::vector<SequenceSample> balance(std::vector<SequenceSample> samples, double ratio,
                                    std::uint64_t seed, bool* kept_all_free) {
    if (ratio <= 0) throw DataError("balance: ratio must be positive");
    std::vector<SequenceSample> crack, free;
    for (auto& s : samples) (s.has_crack ? crack : free).push_back(std::move(s));
    auto rng = make_rng(seed);
    std::shuffle(free.begin(), free.end(), rng);
    std::size_t want = (std::size_t)(crack.size() / ratio);
    if (kept_all_free) *kept_all_free = free.size() < want;
    if (free.size() > want) free.resize(want);
    crack.insert(crack.end(), std::make_move_iterator(free.begin()),
                 std::make_move_iterator(free.end()));
    std::shuffle(crack.begin(), crack.end(), rng);
    return crack;
}

DatasetManifest split(const std::vector<SequenceSample>& samples, std::array<double, 3> fractions,
                      std::uint64_t seed) {
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw DataError("split: fractions must sum to 1");
    std::size_t n = samples.size();
    if (n < 3) throw DataError("split: need at least 3 samples");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::size_t n_train = (std::size_t)(fractions[0] * n);
    std::size_t n_val = (std::size_t)(fractions[1] * n);

    DatasetManifest m;
    m.split_seed = seed;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string& name =
            i < n_train ? kSplitNames[0] : (i < n_train + n_val ? kSplitNames[1] : kSplitNames[2]);
        m.split_of[samples[order[i]].id()] = name;
    }
    return m;
}

std::vector<MonoSample> deserialize(const DatasetManifest& manifest,
                                    const std::vector<SequenceSample>& samples) {
    std::vector<MonoSample> out;
    for (const auto& s : samples) {
        if (!manifest.split_of.count(s.id()))
            throw DataError("deserialize: manifest does not cover sample " + s.id());
        for (int t = 0; t < s.n_frames(); ++t) {
            MonoSample mono;
            mono.image = s.images[t];
            mono.mask = s.masks[t];
            mono.scene_id = s.scene_id;
            mono.row = s.row;
            mono.col = s.col;
            mono.t = t;
            mono.parent_id = s.id();
            out.push_back(std::move(mono));
        }
    }
    return out;
}

SplitStats compute_statistics(const std::vector<SequenceSample>& samples) {
    if (samples.empty()) throw DataError("compute_statistics: empty split");
    SplitStats st;
    st.n_samples = (long long)samples.size();
    long long with_crack = 0, crack_px = 0, total_px = 0;
    for (const auto& s : samples) {
        with_crack += s.has_crack ? 1 : 0;
        for (const auto& m : s.masks) {
            crack_px += crack_pixels(m);
            total_px += (long long)m.total();
        }
    }
    st.crack_image_ratio = double(with_crack) / double(st.n_samples);
    st.crack_pixel_ratio = double(crack_px) / double(total_px);
    return st;
}

SplitStats compute_statistics_mono(const std::vector<MonoSample>& samples) {
    if (samples.empty()) throw DataError("compute_statistics: empty split");
    SplitStats st;
    st.n_samples = (long long)samples.size();
    long long with_crack = 0, crack_px = 0, total_px = 0;
    for (const auto& s : samples) {
        long long px = crack_pixels(s.mask);
        with_crack += px > 0 ? 1 : 0;
        crack_px += px;
        total_px += (long long)s.mask.total();
    }
    st.crack_image_ratio = double(with_crack) / double(st.n_samples);
    st.crack_pixel_ratio = double(crack_px) / double(total_px);
    return st;
}

std::uint64_t scene_checksum(const FrameSequence& seq) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& f : seq.frames) {
        cv::Mat c = f.isContinuous() ? f : f.clone();
        h = fnv1a(c.data, c.total() * c.elemSize(), h);
    }
    for (const auto& m : seq.masks) {
        cv::Mat c = m.isContinuous() ? m : m.clone();
        h = fnv1a(c.data, c.total() * c.elemSize(), h);
    }
    return h;
}

FrameSequence read_scene(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError("ingest: no such directory: " + dir.string());
    std::vector<fs::path> frame_files;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto name = e.path().filename().string();
        if (name.rfind("frame_", 0) == 0 && e.path().extension() == ".png")
            frame_files.push_back(e.path());
    }
    std::sort(frame_files.begin(), frame_files.end());
    if (frame_files.empty()) throw DataError("ingest: no frames in " + dir.string());

    FrameSequence seq;
    for (const auto& ff : frame_files) {
        auto mf = ff.parent_path() / ("mask_" + ff.filename().string().substr(6));
        if (!fs::exists(mf)) throw DataError("ingest: missing mask file " + mf.string());
        cv::Mat bgr = cv::imread(ff.string(), cv::IMREAD_COLOR);
        cv::Mat mask8 = cv::imread(mf.string(), cv::IMREAD_GRAYSCALE);
        if (bgr.empty()) throw DataError("ingest: unreadable image " + ff.string());
        if (mask8.empty()) throw DataError("ingest: unreadable mask " + mf.string());
        if (bgr.size() != mask8.size())
            throw DataError("ingest: image/mask dimension mismatch at " + ff.string());
        if (!seq.frames.empty() && bgr.size() != seq.size())
            throw DataError("ingest: inconsistent frame dimensions in " + dir.string());
        cv::Mat rgb;
        cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
        cv::Mat mask = (mask8 >= 128) / 255;
        seq.frames.push_back(rgb);
        seq.masks.push_back(mask);
    }
    auto dj = dir / "distractors.json";
    if (fs::exists(dj)) {
        nlohmann::json j;
        std::ifstream(dj) >> j;
        synthgen::from_json(j, seq.distractors);
    }
    auto sj = dir / "spec.json";
    if (fs::exists(sj)) std::ifstream(sj) >> seq.provenance;
    seq.provenance["source_path"] = dir.string();
    return seq;
}

std::vector<FrameSequence> ingest_real_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw DataError("ingest: no such directory: " + root.string());
    std::vector<fs::path> scene_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && e.path().filename().string().rfind("scene_", 0) == 0)
            scene_dirs.push_back(e.path());
    std::sort(scene_dirs.begin(), scene_dirs.end());
    if (scene_dirs.empty()) throw DataError("ingest: no scene_* directories under " + root.string());

    std::vector<FrameSequence> out;
    for (const auto& dir : scene_dirs) out.push_back(read_scene(dir));
    return out;
}

std::vector<const SequenceSample*> BuiltDataset::split_samples(const std::string& split) const {
    std::vector<const SequenceSample*> out;
    for (const auto& s : samples) {
        auto it = manifest.split_of.find(s.id());
        if (it != manifest.split_of.end() && it->second == split) out.push_back(&s);
    }
    return out;
}

BuiltDataset build_dataset(std::vector<FrameSequence> scenes, const BuildParams& params) {
    if (scenes.empty()) throw DataError("build_dataset: no scenes");
    BuiltDataset ds;
    for (auto& scene : scenes) {
        if (params.apply_clean_mask)
            for (auto& m : scene.masks) m = clean_mask(m);
        ds.scenes.push_back(pad_sequence(scene, params.target_len));
    }

    std::vector<SequenceSample> all;
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        auto patches = extract_patches(ds.scenes[i], (int)i, params.patch, params.crop);
        all.insert(all.end(), std::make_move_iterator(patches.begin()),
                   std::make_move_iterator(patches.end()));
    }

    std::uint64_t balance_seed = sub_seed(params.seed, "balance");
    std::uint64_t split_seed = sub_seed(params.seed, "split");
    ds.samples = balance(std::move(all), params.balance_ratio, balance_seed);
    ds.manifest = split(ds.samples, params.fractions, split_seed);
    ds.manifest.balance_seed = balance_seed;
    ds.manifest.sequence_length = params.target_len;
    ds.manifest.patch_size = params.patch;
    ds.manifest.crop_region = params.crop;
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
        std::string name = "scene_" + std::to_string(i);
        if (ds.scenes[i].provenance.contains("source_path"))
            name = std::filesystem::path(ds.scenes[i].provenance["source_path"].get<std::string>())
                       .filename()
                       .string();
        ds.manifest.source_checksums[name] = scene_checksum(ds.scenes[i]);
    }

    // Per-split and whole-dataset statistics, multi plus deserialized mono.
    auto monos = deserialize(ds.manifest, ds.samples);
    auto split_name = [&](const std::string& parent) { return ds.manifest.split_of.at(parent); };
    std::map<std::string, std::vector<SequenceSample>> multi_of;
    std::map<std::string, std::vector<MonoSample>> mono_of;
    for (const auto& s : ds.samples) {
        multi_of["all"].push_back(s);
        multi_of[split_name(s.id())].push_back(s);
    }
    for (const auto& s : monos) {
        mono_of["all"].push_back(s);
        mono_of[split_name(s.parent_id)].push_back(s);
    }
    for (const auto& [k, v] : multi_of) ds.manifest.multi_stats[k] = compute_statistics(v);
    for (const auto& [k, v] : mono_of) ds.manifest.mono_stats[k] = compute_statistics_mono(v);
    return ds;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json j;
    j["schema_version"] = schema_version;
    j["split_of"] = split_of;
    j["balance_seed"] = balance_seed;
    j["split_seed"] = split_seed;
    j["sequence_length"] = sequence_length;
    j["patch_size"] = patch_size;
    if (crop_region)
        j["crop_region"] = {crop_region->x, crop_region->y, crop_region->width,
                            crop_region->height};
    j["source_checksums"] = source_checksums;
    auto stats_json = [](const std::map<std::string, SplitStats>& stats) {
        nlohmann::json out;
        for (const auto& [k, v] : stats)
            out[k] = {{"n_samples", v.n_samples},
                      {"crack_image_ratio", v.crack_image_ratio},
                      {"crack_pixel_ratio", v.crack_pixel_ratio}};
        return out;
    };
    j["multi_stats"] = stats_json(multi_stats);
    j["mono_stats"] = stats_json(mono_stats);
    return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.schema_version = j.at("schema_version");
    m.split_of = j.at("split_of").get<std::map<std::string, std::string>>();
    m.balance_seed = j.at("balance_seed");
    m.split_seed = j.at("split_seed");
    m.sequence_length = j.at("sequence_length");
    m.patch_size = j.at("patch_size");
    if (j.contains("crop_region")) {
        const auto& c = j["crop_region"];
        m.crop_region = cv::Rect(c[0], c[1], c[2], c[3]);
    }
    m.source_checksums = j.at("source_checksums").get<std::map<std::string, std::uint64_t>>();
    auto stats_from = [](const nlohmann::json& in) {
        std::map<std::string, SplitStats> out;
        for (auto it = in.begin(); it != in.end(); ++it) {
            SplitStats s;
            s.n_samples = it.value().at("n_samples");
            s.crack_image_ratio = it.value().at("crack_image_ratio");
            s.crack_pixel_ratio = it.value().at("crack_pixel_ratio");
            out[it.key()] = s;
        }
        return out;
    };
    m.multi_stats = stats_from(j.at("multi_stats"));
    m.mono_stats = stats_from(j.at("mono_stats"));
    return m;
}

}  // namespace crackseq::datapipe
