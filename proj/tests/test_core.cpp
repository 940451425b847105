#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <random>
#include <set>

#include <opencv2/imgproc.hpp>

#include "crackseq/datapipe.hpp"
#include "crackseq/evalsuite.hpp"
#include "crackseq/synthgen.hpp"
#include "doctest.h"

using namespace crackseq;
namespace fs = std::filesystem;

namespace {

synthgen::SceneSpec small_spec(std::uint64_t seed) {
    synthgen::SceneSpec spec;
    spec.width_px = 160;
    spec.height_px = 160;
    spec.n_epochs = 6;
    spec.n_crack_seeds = 2;
    spec.rng_seed = seed;
    return spec;
}

cv::Mat random_mask(std::mt19937_64& rng, int size = 16, double density = 0.3) {
    cv::Mat m(size, size, CV_8UC1);
    std::bernoulli_distribution bern(density);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m.at<std::uint8_t>(y, x) = bern(rng) ? 1 : 0;
    return m;
}

bool mats_equal(const cv::Mat& a, const cv::Mat& b) {
    return a.size() == b.size() && a.type() == b.type() &&
           cv::countNonZero(a.reshape(1) != b.reshape(1)) == 0;
}

}  // namespace

TEST_CASE("sub_seed separates named streams deterministically") {
    CHECK(sub_seed(1, "a") == sub_seed(1, "a"));
    CHECK(sub_seed(1, "a") != sub_seed(1, "b"));
    CHECK(sub_seed(1, "a") != sub_seed(2, "a"));
    CHECK(sub_seed(1, "a", 0, 1) != sub_seed(1, "a", 1, 0));
}

TEST_CASE("generate_scene is deterministic in the seed") {
    auto a = synthgen::generate_scene(small_spec(5));
    auto b = synthgen::generate_scene(small_spec(5));
    auto c = synthgen::generate_scene(small_spec(6));
    CHECK(datapipe::scene_checksum(a) == datapipe::scene_checksum(b));
    CHECK(datapipe::scene_checksum(a) != datapipe::scene_checksum(c));
}

TEST_CASE("scene masks grow monotonically") {
    for (std::uint64_t seed : {1, 2, 3}) {
        auto seq = synthgen::generate_scene(small_spec(seed));
        for (int t = 1; t < seq.n_frames(); ++t) {
            cv::Mat shrunk = seq.masks[t - 1] & ~(seq.masks[t] * 255);
            CHECK(cv::countNonZero(shrunk) == 0);
        }
        CHECK(cv::countNonZero(seq.masks.back()) > 0);
    }
}

TEST_CASE("distractor pixels never carry a crack label") {
    auto seq = synthgen::generate_scene(small_spec(11));
    cv::Mat footprint = cv::Mat::zeros(seq.size(), CV_8UC1);
    for (const auto& inst : synthgen::rasterize_instances(seq.distractors, seq.size()))
        footprint |= inst.footprint;
    CHECK(cv::countNonZero(footprint) > 0);
    for (const auto& m : seq.masks) CHECK(cv::countNonZero(m & footprint) == 0);
}

TEST_CASE("final-frame crack ratio lands near the target") {
    synthgen::SceneSpec spec;
    spec.width_px = 256;
    spec.height_px = 256;
    spec.n_epochs = 10;
    spec.rng_seed = 77;
    auto seq = synthgen::generate_scene(spec);
    double ratio = double(cv::countNonZero(seq.masks.back())) / seq.size().area();
    CHECK(ratio > 0.002);
    CHECK(ratio < 0.035);
}

TEST_CASE("pathological distractor density is rejected") {
    synthgen::SceneSpec spec;
    spec.width_px = 48;
    spec.height_px = 48;
    spec.distractor_counts = {{"sensor", 200}};
    auto rng = make_rng(1);
    CHECK_THROWS_AS(synthgen::place_distractors(spec, rng), DataError);
}

TEST_CASE("scene spec validation") {
    synthgen::SceneSpec spec;
    spec.n_epochs = 0;
    CHECK_THROWS_AS(spec.validate(), DataError);
    spec = synthgen::SceneSpec{};
    spec.target_crack_pixel_ratio = 1.5;
    CHECK_THROWS_AS(spec.validate(), DataError);
}

TEST_CASE("write_scene / read_scene round-trip") {
    auto seq = synthgen::generate_scene(small_spec(21));
    fs::path dir = fs::temp_directory_path() / "crackseq_test_scene";
    fs::remove_all(dir);
    synthgen::write_scene(seq, dir);
    auto back = datapipe::read_scene(dir);
    REQUIRE(back.n_frames() == seq.n_frames());
    for (int t = 0; t < seq.n_frames(); ++t) {
        CHECK(mats_equal(back.frames[t], seq.frames[t]));
        CHECK(mats_equal(back.masks[t], seq.masks[t]));
    }
    CHECK(back.distractors.pencil_digits.size() == seq.distractors.pencil_digits.size());
    CHECK(back.distractors.cavities.size() == seq.distractors.cavities.size());
    fs::remove_all(dir);
}

TEST_CASE("clean_mask removes specks, keeps real components, idempotent") {
    cv::Mat m = cv::Mat::zeros(32, 32, CV_8UC1);
    m.at<std::uint8_t>(2, 2) = 1;  // 1 px speck
    m.at<std::uint8_t>(10, 10) = m.at<std::uint8_t>(10, 11) = 1;  // 2 px speck
    cv::line(m, {20, 5}, {20, 25}, cv::Scalar(1), 1);             // 21 px line
    cv::Mat cleaned = datapipe::clean_mask(m);
    CHECK(cleaned.at<std::uint8_t>(2, 2) == 0);
    CHECK(cleaned.at<std::uint8_t>(10, 10) == 0);
    CHECK(cv::countNonZero(cleaned) >= 21);

    auto rng = make_rng(9);
    for (int i = 0; i < 50; ++i) {
        cv::Mat r = random_mask(rng, 24, 0.25);
        cv::Mat once = datapipe::clean_mask(r);
        cv::Mat twice = datapipe::clean_mask(once);
        CHECK(mats_equal(once, twice));
    }
}

TEST_CASE("pad_index_map follows the even-duplication rule") {
    auto dup_positions = [](const std::vector<int>& m) {
        std::set<int> d;
        for (std::size_t i = 1; i < m.size(); ++i)
            if (m[i] == m[i - 1]) d.insert(m[i]);
        return d;
    };

    SUBCASE("25 -> 32 duplicates seven evenly spaced frames") {
        auto m = datapipe::pad_index_map(25, 32);
        REQUIRE(m.size() == 32);
        CHECK(dup_positions(m) == std::set<int>{0, 4, 8, 12, 16, 20, 24});
    }
    SUBCASE("no deficit is the identity") {
        auto m = datapipe::pad_index_map(32, 32);
        for (int i = 0; i < 32; ++i) CHECK(m[i] == i);
    }
    SUBCASE("deficit of one duplicates the midpoint") {
        auto m = datapipe::pad_index_map(5, 6);
        CHECK(m == std::vector<int>{0, 1, 2, 2, 3, 4});
    }
    SUBCASE("deficit larger than the input repeats sources") {
        // round(k*7/23) for k=0..23 lands 2..4 duplicates on each source.
        auto m = datapipe::pad_index_map(8, 32);
        REQUIRE(m.size() == 32);
        std::vector<long> want = {3, 4, 5, 4, 4, 5, 4, 3};
        for (int src = 0; src < 8; ++src)
            CHECK(std::count(m.begin(), m.end(), src) == want[src]);
    }
    SUBCASE("maps are sorted and cover every source") {
        for (int n : {2, 5, 11, 25, 31}) {
            auto m = datapipe::pad_index_map(n, 32);
            CHECK(std::is_sorted(m.begin(), m.end()));
            std::set<int> used(m.begin(), m.end());
            CHECK((int)used.size() == n);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(datapipe::pad_index_map(0, 32), DataError);
        CHECK_THROWS_AS(datapipe::pad_index_map(40, 32), DataError);
    }
}

TEST_CASE("pad_sequence duplicates whole frames") {
    auto seq = synthgen::generate_scene(small_spec(31));
    auto padded = datapipe::pad_sequence(seq, 8);
    REQUIRE(padded.n_frames() == 8);
    auto map = datapipe::pad_index_map(seq.n_frames(), 8);
    for (int i = 0; i < 8; ++i) {
        CHECK(mats_equal(padded.frames[i], seq.frames[map[i]]));
        CHECK(mats_equal(padded.masks[i], seq.masks[map[i]]));
    }
}

TEST_CASE("extract_patches uses a top-left grid and drops the border strip") {
    synthgen::FrameSequence seq;
    seq.frames.push_back(cv::Mat::zeros(200, 300, CV_8UC3));
    seq.masks.push_back(cv::Mat::zeros(200, 300, CV_8UC1));
    auto patches = datapipe::extract_patches(seq, 0, 128);
    CHECK(patches.size() == 2);  // 2 cols x 1 row
    CHECK(patches[0].id() == "scene0_r0_c0");
    CHECK(patches[1].id() == "scene0_r0_c1");

    auto cropped = datapipe::extract_patches(seq, 0, 128, cv::Rect(10, 10, 128, 128));
    CHECK(cropped.size() == 1);

    synthgen::FrameSequence tiny;
    tiny.frames.push_back(cv::Mat::zeros(64, 64, CV_8UC3));
    tiny.masks.push_back(cv::Mat::zeros(64, 64, CV_8UC1));
    CHECK_THROWS_AS(datapipe::extract_patches(tiny, 0, 128), DataError);
}

namespace {
std::vector<datapipe::SequenceSample> toy_samples(int n_crack, int n_free) {
    std::vector<datapipe::SequenceSample> out;
    int id = 0;
    for (int i = 0; i < n_crack + n_free; ++i, ++id) {
        datapipe::SequenceSample s;
        s.scene_id = id;
        cv::Mat m = cv::Mat::zeros(8, 8, CV_8UC1);
        if (i < n_crack) m.at<std::uint8_t>(1, 1) = 1;
        s.images.push_back(cv::Mat::zeros(8, 8, CV_8UC3));
        s.masks.push_back(m);
        s.has_crack = i < n_crack;
        out.push_back(std::move(s));
    }
    return out;
}
}  // namespace

TEST_CASE("balance keeps all crack samples and floor(n/ratio) crack-free ones") {
    auto balanced = datapipe::balance(toy_samples(10, 30), 2.0, 7);
    int crack = 0, free_ = 0;
    for (const auto& s : balanced) (s.has_crack ? crack : free_)++;
    CHECK(crack == 10);
    CHECK(free_ == 5);

    bool kept_all = false;
    auto scarce = datapipe::balance(toy_samples(10, 2), 2.0, 7, &kept_all);
    CHECK(scarce.size() == 12);
    CHECK(kept_all);

    auto again = datapipe::balance(toy_samples(10, 30), 2.0, 7);
    REQUIRE(again.size() == balanced.size());
    for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].id() == balanced[i].id());
}

TEST_CASE("split applies the floor rule and partitions cleanly") {
    auto samples = toy_samples(12, 10);  // n = 22
    auto manifest = datapipe::split(samples, {0.6, 0.2, 0.2}, 3);
    std::map<std::string, int> counts;
    for (const auto& [id, split] : manifest.split_of) counts[split]++;
    CHECK(counts["train"] == 13);  // floor(0.6*22)
    CHECK(counts["val"] == 4);     // floor(0.2*22)
    CHECK(counts["test"] == 5);    // remainder
    CHECK(manifest.split_of.size() == 22);

    auto again = datapipe::split(samples, {0.6, 0.2, 0.2}, 3);
    CHECK(again.split_of == manifest.split_of);
    auto other = datapipe::split(samples, {0.6, 0.2, 0.2}, 4);
    CHECK(other.split_of != manifest.split_of);

    CHECK_THROWS_AS(datapipe::split(samples, {0.5, 0.2, 0.2}, 3), DataError);
    CHECK_THROWS_AS(datapipe::split(toy_samples(1, 1), {0.6, 0.2, 0.2}, 3), DataError);
}

TEST_CASE("deserialize unrolls every frame: |mono| = T * |multi|") {
    auto seq = synthgen::generate_scene(small_spec(41));
    auto padded = datapipe::pad_sequence(seq, 8);
    auto patches = datapipe::extract_patches(padded, 0, 32);
    auto manifest = datapipe::split(patches, {0.6, 0.2, 0.2}, 1);
    auto mono = datapipe::deserialize(manifest, patches);
    CHECK(mono.size() == patches.size() * 8);
    CHECK(mono[0].id() == patches[0].id() + "_t0");
}

TEST_CASE("manifest JSON round-trip") {
    datapipe::DatasetManifest m;
    m.split_of = {{"a", "train"}, {"b", "test"}};
    m.multi_stats["all"] = {4, 0.5, 0.01};
    m.mono_stats["all"] = {128, 0.4, 0.01};
    m.balance_seed = 11;
    m.split_seed = 22;
    m.sequence_length = 32;
    m.patch_size = 128;
    m.crop_region = cv::Rect(1, 2, 256, 128);
    m.source_checksums = {{"scene_00", 0xdeadbeefULL}};

    auto back = datapipe::DatasetManifest::from_json(m.to_json());
    CHECK(back.split_of == m.split_of);
    CHECK(back.balance_seed == 11);
    CHECK(back.split_seed == 22);
    CHECK(back.source_checksums == m.source_checksums);
    REQUIRE(back.crop_region.has_value());
    CHECK(back.crop_region->x == 1);
    CHECK(back.multi_stats["all"].n_samples == 4);
    CHECK(back.mono_stats["all"].crack_image_ratio == doctest::Approx(0.4));
}

TEST_CASE("build_dataset is deterministic and self-consistent") {
    std::vector<synthgen::FrameSequence> scenes;
    for (std::uint64_t s : {51, 52, 53}) scenes.push_back(synthgen::generate_scene(small_spec(s)));

    datapipe::BuildParams params;
    params.target_len = 8;
    params.patch = 64;
    params.seed = 9;
    auto a = datapipe::build_dataset(scenes, params);
    auto b = datapipe::build_dataset(scenes, params);
    CHECK(a.manifest.to_json() == b.manifest.to_json());

    // mono count algebra against the padded length
    CHECK(a.manifest.mono_stats["all"].n_samples ==
          a.manifest.multi_stats["all"].n_samples * params.target_len);
    // splits partition the sample set
    long long total = a.manifest.multi_stats["train"].n_samples +
                      a.manifest.multi_stats["val"].n_samples +
                      a.manifest.multi_stats["test"].n_samples;
    CHECK(total == a.manifest.multi_stats["all"].n_samples);
    // balancing keeps crack ratio at or above the 2:1 target
    CHECK(a.manifest.multi_stats["all"].crack_image_ratio >= doctest::Approx(2.0 / 3).epsilon(0.01));
}

TEST_CASE("confusion equals brute force on random masks") {
    auto rng = make_rng(13);
    for (int i = 0; i < 100; ++i) {
        cv::Mat pred = random_mask(rng), target = random_mask(rng);
        auto c = evalsuite::confusion(pred, target);
        long long tp = 0, fp = 0, fn = 0, tn = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                int p = pred.at<std::uint8_t>(y, x), t = target.at<std::uint8_t>(y, x);
                tp += p && t;
                fp += p && !t;
                fn += !p && t;
                tn += !p && !t;
            }
        CHECK(c.tp == tp);
        CHECK(c.fp == fp);
        CHECK(c.fn == fn);
        CHECK(c.tn == tn);
    }
}

TEST_CASE("metrics hand cases and zero-denominator conventions") {
    evalsuite::ConfusionCounts c{2, 1, 1, 10};
    auto m = evalsuite::metrics(c);
    CHECK(m.iou == doctest::Approx(50.0));
    CHECK(m.precision == doctest::Approx(100.0 * 2 / 3));
    CHECK(m.recall == doctest::Approx(100.0 * 2 / 3));
    CHECK(m.f1 == doctest::Approx(100.0 * 2 / 3));

    auto perfect_bg = evalsuite::metrics({0, 0, 0, 100});
    CHECK(perfect_bg.iou == 100.0);
    CHECK(perfect_bg.precision == 100.0);
    CHECK(perfect_bg.f1 == 100.0);

    auto all_missed = evalsuite::metrics({0, 0, 5, 95});
    CHECK(all_missed.iou == 0.0);
    CHECK(all_missed.precision == 0.0);  // tp+fp = 0 but fn > 0
}

TEST_CASE("temporal consistency counts flips only where targets are stable") {
    cv::Mat z = cv::Mat::zeros(2, 2, CV_8UC1);
    cv::Mat o = cv::Mat::ones(2, 2, CV_8UC1);
    // stable target, stable prediction -> 1
    CHECK(evalsuite::temporal_consistency({z, z}, {o, o}) == doctest::Approx(1.0));
    // stable target, fully flipping prediction -> 0
    CHECK(evalsuite::temporal_consistency({z, o}, {o, o}) == doctest::Approx(0.0));
    // target flips everywhere -> no stable pixels, no penalty
    CHECK(evalsuite::temporal_consistency({z, o}, {z, o}) == doctest::Approx(1.0));

    // hand case: one of four pixels flips while stable
    cv::Mat p2 = z.clone();
    p2.at<std::uint8_t>(0, 0) = 1;
    CHECK(evalsuite::temporal_consistency({z, p2}, {o, o}) == doctest::Approx(0.75));

    CHECK_THROWS_AS(evalsuite::temporal_consistency({z}, {z}), DataError);
}

TEST_CASE("tile_infer stitches exactly and zero-fills the border") {
    auto seq = synthgen::generate_scene(small_spec(61));  // 160x160, 6 frames
    // deterministic per-pixel model: threshold the red channel
    evalsuite::TileModel model = [](const std::vector<cv::Mat>& tile) {
        std::vector<cv::Mat> out;
        for (const auto& f : tile) {
            std::vector<cv::Mat> ch;
            cv::split(f, ch);
            out.push_back((ch[0] < 120) / 255);
        }
        return out;
    };
    auto result = evalsuite::tile_infer(model, seq, 64);
    CHECK(result.covered == cv::Rect(0, 0, 128, 128));
    CHECK(result.border_zero_filled);

    for (int t = 0; t < seq.n_frames(); ++t) {
        std::vector<cv::Mat> ch;
        cv::split(seq.frames[t], ch);
        cv::Mat direct = (ch[0] < 120) / 255;
        cv::Mat expected = cv::Mat::zeros(seq.size(), CV_8UC1);
        direct(result.covered).copyTo(expected(result.covered));
        CHECK(mats_equal(result.masks[t], expected));
    }
}

TEST_CASE("distractor_report flags instances overlapped by predictions") {
    synthgen::DistractorSet set;
    set.sensors.push_back({cv::Rect(10, 10, 8, 8)});
    set.cavities.push_back({cv::Point(40, 40), cv::Size(3, 2), 0.0});

    cv::Size size(64, 64);
    cv::Mat pred = cv::Mat::zeros(size, CV_8UC1);
    pred(cv::Rect(10, 10, 8, 8)).setTo(1);  // fully covers the sensor

    auto report = evalsuite::distractor_report(pred, set, size);
    CHECK(report["sensor"].total == 1);
    CHECK(report["sensor"].hit == 1);
    CHECK(report["cavity"].total == 1);
    CHECK(report["cavity"].hit == 0);
    CHECK(report["pencil_digit"].total == 0);
}
