#include "crackseq/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace crackseq::synthgen {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

// Multi-octave value noise in [0,1]: random lattices bilinearly upsampled and
// summed with halving amplitudes.
cv::Mat value_noise(cv::Size size, int octaves, std::mt19937_64& rng) {
    cv::Mat acc = cv::Mat::zeros(size, CV_32F);
    std::uniform_real_distribution<float> uni(0.f, 1.f);
    double amp = 1.0, amp_sum = 0.0;
    for (int o = 0; o < std::max(1, octaves); ++o) {
        int cells = std::min(6 << o, std::max(2, std::min(size.width, size.height) / 2));
        cv::Mat lattice(cells + 1, cells + 1, CV_32F);
        for (int y = 0; y < lattice.rows; ++y)
            for (int x = 0; x < lattice.cols; ++x) lattice.at<float>(y, x) = uni(rng);
        cv::Mat up;
        cv::resize(lattice, up, size, 0, 0, cv::INTER_LINEAR);
        acc += static_cast<float>(amp) * up;
        amp_sum += amp;
        amp *= 0.5;
    }
    acc /= static_cast<float>(amp_sum);
    return acc;
}

double polyline_length(const std::vector<cv::Point2d>& pts) {
    double len = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) len += cv::norm(pts[i] - pts[i - 1]);
    return len;
}

// Random walk with bounded curvature, reflected off the image border.
std::vector<cv::Point2d> walk_polyline(cv::Point2d start, double heading, double target_len,
                                       cv::Size size, std::mt19937_64& rng) {
    std::normal_distribution<double> turn(0.0, 0.22);
    std::vector<cv::Point2d> pts{start};
    const double step = 3.0;
    double len = 0.0;
    cv::Point2d p = start;
    while (len < target_len) {
        heading += turn(rng);
        cv::Point2d q = p + step * cv::Point2d(std::cos(heading), std::sin(heading));
        if (q.x < 2 || q.x > size.width - 3) {
            heading = std::numbers::pi - heading;
            q = p + step * cv::Point2d(std::cos(heading), std::sin(heading));
        }
        if (q.y < 2 || q.y > size.height - 3) {
            heading = -heading;
            q = p + step * cv::Point2d(std::cos(heading), std::sin(heading));
        }
        q.x = std::clamp(q.x, 0.0, size.width - 1.0);
        q.y = std::clamp(q.y, 0.0, size.height - 1.0);
        pts.push_back(q);
        len += step;
        p = q;
    }
    return pts;
}

// Monotone growth schedule: zero before birth, randomized non-decreasing
// length fractions reaching 1 at the final epoch, width 1 px -> w_max linearly.
std::vector<GrowthStage> growth_schedule(int birth, int n_epochs, double w_max,
                                         std::mt19937_64& rng) {
    std::vector<GrowthStage> g(n_epochs);
    int live = n_epochs - birth;
    std::uniform_real_distribution<double> inc(0.4, 1.6);
    std::vector<double> cum(live, 1.0);
    double total = 0.0;
    for (int i = 0; i < live; ++i) total += (cum[i] = inc(rng));
    double run = 0.0;
    for (int e = 0; e < n_epochs; ++e) {
        if (e < birth) continue;
        run += cum[e - birth];
        double t = live > 1 ? double(e - birth) / double(live - 1) : 1.0;
        g[e].length_fraction = 0.15 + 0.85 * (run / total);
        g[e].width_px = 1.0 + (w_max - 1.0) * t;
    }
    g[n_epochs - 1].length_fraction = 1.0;
    return g;
}

void raster_at(const CrackSkeleton& s, int epoch, cv::Mat& canvas) {
    if (epoch < s.birth_epoch || s.growth.empty()) return;
    const GrowthStage& st = s.growth[std::min<std::size_t>(epoch, s.growth.size() - 1)];
    if (st.length_fraction <= 0.0 || s.vertices.size() < 2) return;
    double target = st.length_fraction * polyline_length(s.vertices);
    int thick = std::max(1, (int)std::lround(st.width_px));
    double run = 0.0;
    for (std::size_t i = 1; i < s.vertices.size() && run < target; ++i) {
        cv::Point2d a = s.vertices[i - 1], b = s.vertices[i];
        double seg = cv::norm(b - a);
        if (run + seg > target && seg > 0) b = a + (target - run) / seg * (b - a);
        cv::line(canvas, cv::Point(cvRound(a.x), cvRound(a.y)),
                 cv::Point(cvRound(b.x), cvRound(b.y)), cv::Scalar(1), thick, cv::LINE_8);
        run += seg;
    }
    for (const auto& br : s.branches) raster_at(br, epoch, canvas);
}

cv::Mat raster_epoch(const std::vector<CrackSkeleton>& skeletons, int epoch, cv::Size size) {
    cv::Mat m = cv::Mat::zeros(size, CV_8UC1);
    for (const auto& s : skeletons) raster_at(s, epoch, m);
    return m;
}

void rasterize_digit(const PencilDigit& d, cv::Mat& canvas, int value) {
    cv::putText(canvas, std::to_string(d.glyph), d.pos, cv::FONT_HERSHEY_SIMPLEX, d.scale,
                cv::Scalar(value), d.thickness, cv::LINE_8);
}

}  // namespace

void SceneSpec::validate() const {
    if (width_px <= 0 || height_px <= 0) throw DataError("SceneSpec: zero-area image");
    if (n_epochs < 1) throw DataError("SceneSpec: n_epochs must be >= 1");
    if (n_crack_seeds < 0) throw DataError("SceneSpec: n_crack_seeds must be >= 0");
    for (const auto& [k, v] : distractor_counts)
        if (v < 0) throw DataError("SceneSpec: negative distractor count for " + k);
    if (target_crack_pixel_ratio < 0 || target_crack_pixel_ratio >= 1)
        throw DataError("SceneSpec: target_crack_pixel_ratio out of [0,1)");
}

DistractorSet place_distractors(const SceneSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    cv::Size size(spec.width_px, spec.height_px);
    int min_dim = std::min(size.width, size.height);
    auto count = [&](const char* k) {
        auto it = spec.distractor_counts.find(k);
        return it == spec.distractor_counts.end() ? 0 : it->second;
    };
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto upt = [&](int margin) {
        return cv::Point(margin + int(u01(rng) * std::max(1, size.width - 2 * margin)),
                         margin + int(u01(rng) * std::max(1, size.height - 2 * margin)));
    };

    DistractorSet set;
    for (int i = 0; i < count("pencil_digit"); ++i) {
        PencilDigit d;
        d.glyph = int(u01(rng) * 10) % 10;
        d.scale = 0.6 + 1.0 * u01(rng);
        d.thickness = 1 + (u01(rng) < 0.3 ? 1 : 0);
        d.pos = upt(std::max(8, int(24 * d.scale)));
        set.pencil_digits.push_back(d);
    }
    for (int i = 0; i < count("sensor"); ++i) {
        int w = int((0.03 + 0.04 * u01(rng)) * min_dim);
        int h = int((0.03 + 0.04 * u01(rng)) * min_dim);
        w = std::max(3, w), h = std::max(3, h);
        cv::Point p = upt(std::max(w, h) + 2);
        set.sensors.push_back({cv::Rect(p.x, p.y, w, h)});
    }
    for (int i = 0; i < count("cable"); ++i) {
        Cable c;
        cv::Point2d start;
        if (!set.sensors.empty()) {
            const cv::Rect& r = set.sensors[i % set.sensors.size()].rect;
            start = cv::Point2d(r.x + r.width / 2.0, r.y + r.height);
        } else {
            start = upt(6);
        }
        double len = (0.25 + 0.35 * u01(rng)) * min_dim;
        auto pts = walk_polyline(start, u01(rng) * kTau, len, size, rng);
        for (auto& p : pts) c.points.emplace_back(cvRound(p.x), cvRound(p.y));
        c.thickness = 1 + (u01(rng) < 0.4 ? 1 : 0);
        set.cables.push_back(c);
    }
    for (int i = 0; i < count("cavity"); ++i) {
        Cavity cv_;
        cv_.center = upt(6);
        cv_.axes = cv::Size(1 + int(3 * u01(rng)), 1 + int(3 * u01(rng)));
        cv_.angle_deg = 180.0 * u01(rng);
        set.cavities.push_back(cv_);
    }

    // Reject pathological densities: total footprint above 20% of the image.
    double area = 0;
    for (const auto& inst : rasterize_instances(set, size)) area += cv::countNonZero(inst.footprint);
    if (area > 0.2 * size.area())
        throw DataError("place_distractors: footprint exceeds 20% of image area");
    return set;
}

std::vector<CrackSkeleton> sample_skeletons(const SceneSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    cv::Size size(spec.width_px, spec.height_px);
    std::vector<CrackSkeleton> out;
    if (spec.n_crack_seeds == 0 || spec.target_crack_pixel_ratio <= 0) return out;

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double budget = spec.target_crack_pixel_ratio * size.area() / spec.n_crack_seeds;
    int margin_x = std::max(2, size.width / 10), margin_y = std::max(2, size.height / 10);

    for (int i = 0; i < spec.n_crack_seeds; ++i) {
        CrackSkeleton s;
        double w_max = 2.0 + 6.0 * u01(rng);
        int n_branches = int(u01(rng) * 3) % 3;
        double main_share = 1.0 - 0.25 * n_branches;

        cv::Point2d start(margin_x + u01(rng) * (size.width - 2 * margin_x),
                          margin_y + u01(rng) * (size.height - 2 * margin_y));
        double heading = u01(rng) * kTau;
        double main_len = std::max(6.0, budget * main_share / w_max);
        s.vertices = walk_polyline(start, heading, main_len, size, rng);
        s.birth_epoch = std::min(spec.n_epochs - 1, int(u01(rng) * (spec.n_epochs / 5 + 1)));
        s.growth = growth_schedule(s.birth_epoch, spec.n_epochs, w_max, rng);

        double arc = polyline_length(s.vertices);
        for (int b = 0; b < n_branches && s.vertices.size() > 4; ++b) {
            CrackSkeleton br;
            std::size_t idx = s.vertices.size() * (3 + int(u01(rng) * 5)) / 10;
            idx = std::min(idx, s.vertices.size() - 2);
            cv::Point2d anchor = s.vertices[idx];
            cv::Point2d dir = s.vertices[idx + 1] - s.vertices[idx];
            double base_heading = std::atan2(dir.y, dir.x);
            double side = u01(rng) < 0.5 ? 1.0 : -1.0;
            double w_br = std::max(1.5, 0.6 * w_max);
            double br_len = std::max(6.0, budget * 0.25 / w_br);
            br.vertices =
                walk_polyline(anchor, base_heading + side * (0.5 + 0.7 * u01(rng)), br_len, size, rng);
            // A branch appears only once its parent has grown past the anchor.
            double anchor_arc = polyline_length({s.vertices.begin(), s.vertices.begin() + idx + 1});
            br.birth_epoch = spec.n_epochs - 1;
            for (int e = s.birth_epoch; e < spec.n_epochs; ++e)
                if (s.growth[e].length_fraction * arc >= anchor_arc) {
                    br.birth_epoch = e;
                    break;
                }
            br.growth = growth_schedule(br.birth_epoch, spec.n_epochs, w_br, rng);
            s.branches.push_back(std::move(br));
        }
        out.push_back(std::move(s));
    }
    return out;
}

cv::Mat grow_cracks(const std::vector<CrackSkeleton>& skeletons, int epoch, cv::Size size) {
    cv::Mat acc = cv::Mat::zeros(size, CV_8UC1);
    for (int e = 0; e <= epoch; ++e) acc |= raster_epoch(skeletons, e, size);
    return acc;
}

std::vector<DistractorInstance> rasterize_instances(const DistractorSet& set, cv::Size size) {
    std::vector<DistractorInstance> out;
    auto blank = [&] { return cv::Mat(cv::Mat::zeros(size, CV_8UC1)); };
    for (const auto& d : set.pencil_digits) {
        cv::Mat m = blank();
        rasterize_digit(d, m, 1);
        out.push_back({"pencil_digit", m});
    }
    for (const auto& s : set.sensors) {
        cv::Mat m = blank();
        cv::rectangle(m, s.rect, cv::Scalar(1), cv::FILLED);
        out.push_back({"sensor", m});
    }
    for (const auto& c : set.cables) {
        cv::Mat m = blank();
        cv::polylines(m, c.points, false, cv::Scalar(1), c.thickness, cv::LINE_8);
        out.push_back({"cable", m});
    }
    for (const auto& c : set.cavities) {
        cv::Mat m = blank();
        cv::ellipse(m, c.center, c.axes, c.angle_deg, 0, 360, cv::Scalar(1), cv::FILLED);
        out.push_back({"cavity", m});
    }
    return out;
}

cv::Mat render_distractors(const DistractorSet& set, cv::Size size) {
    cv::Mat dark = cv::Mat::zeros(size, CV_32F);
    for (const auto& d : set.pencil_digits) {
        cv::Mat m = cv::Mat::zeros(size, CV_8UC1);
        rasterize_digit(d, m, 1);
        dark.setTo(58.0, m);
    }
    for (const auto& s : set.sensors) {
        cv::rectangle(dark, s.rect, cv::Scalar(92.0), cv::FILLED);
        cv::rectangle(dark, s.rect, cv::Scalar(115.0), 2);  // dark rim, a crack lookalike
    }
    for (const auto& c : set.cables) {
        cv::Mat m = cv::Mat::zeros(size, CV_8UC1);
        cv::polylines(m, c.points, false, cv::Scalar(1), c.thickness, cv::LINE_8);
        dark.setTo(62.0, m);
    }
    for (const auto& c : set.cavities) {
        cv::ellipse(dark, c.center, c.axes, c.angle_deg, 0, 360, cv::Scalar(55.0), cv::FILLED);
    }
    return dark;
}

cv::Mat render_frame(const cv::Mat& mask, const DistractorSet& distractors,
                     const TextureParams& texture, std::mt19937_64& rng, int jitter_offset) {
    CV_Assert(mask.type() == CV_8UC1);
    cv::Size size = mask.size();

    cv::Mat noise = value_noise(size, texture.octaves, rng);
    cv::Mat crack_field = value_noise(size, 2, rng);  // spatial crack contrast, static per scene

    cv::Mat img(size, CV_32F, cv::Scalar(texture.base_gray));
    img += texture.contrast * (2.0 * noise - 1.0);

    cv::Mat contrast = 22.0 + 68.0 * crack_field;
    cv::Mat crack_dark;
    cv::Mat maskf;
    mask.convertTo(maskf, CV_32F);
    cv::multiply(contrast, maskf, crack_dark);
    img -= crack_dark;

    if (!distractors.empty()) img -= render_distractors(distractors, size);

    img += static_cast<float>(jitter_offset);

    if (texture.sensor_noise_sigma > 0) {
        cv::Mat grain(size, CV_32F);
        cv::RNG cvrng(static_cast<std::uint64_t>(rng()));
        cvrng.fill(grain, cv::RNG::NORMAL, 0.0, texture.sensor_noise_sigma);
        img += grain;
    }

    cv::Mat gray8;
    img.convertTo(gray8, CV_8U);  // saturating cast clamps to [0,255]
    std::uniform_int_distribution<int> tint(-2, 2);
    int tb = tint(rng), tg = tint(rng), tr = tint(rng);
    std::vector<cv::Mat> ch(3);
    cv::add(gray8, tb, ch[0]);
    cv::add(gray8, tg, ch[1]);
    cv::add(gray8, tr, ch[2]);
    cv::Mat rgb;
    cv::merge(ch, rgb);
    return rgb;
}

FrameSequence generate_scene(const SceneSpec& spec) {
    spec.validate();
    cv::Size size(spec.width_px, spec.height_px);

    auto rng_place = make_rng(sub_seed(spec.rng_seed, "distractors"));
    auto rng_cracks = make_rng(sub_seed(spec.rng_seed, "cracks"));
    auto rng_jitter = make_rng(sub_seed(spec.rng_seed, "jitter"));
    std::uint64_t render_seed = sub_seed(spec.rng_seed, "render");

    FrameSequence seq;
    seq.distractors = place_distractors(spec, rng_place);
    auto skeletons = sample_skeletons(spec, rng_cracks);

    // Ground-truth purity: distractor pixels are never labeled crack.
    cv::Mat forbidden = cv::Mat::zeros(size, CV_8UC1);
    for (const auto& inst : rasterize_instances(seq.distractors, size)) forbidden |= inst.footprint;

    std::uniform_int_distribution<int> jit(-spec.jitter_levels, spec.jitter_levels);
    cv::Mat acc = cv::Mat::zeros(size, CV_8UC1);
    for (int e = 0; e < spec.n_epochs; ++e) {
        acc |= raster_epoch(skeletons, e, size);
        cv::Mat mask = acc.clone();
        mask.setTo(0, forbidden);
        auto rng_render = make_rng(render_seed);  // identical texture in every frame
        seq.frames.push_back(render_frame(mask, seq.distractors, spec.texture, rng_render,
                                          spec.n_epochs > 1 ? jit(rng_jitter) : 0));
        seq.masks.push_back(mask);
    }
    to_json(seq.provenance, spec);
    return seq;
}

void write_scene(const FrameSequence& seq, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    char name[32];
    for (int t = 0; t < seq.n_frames(); ++t) {
        std::snprintf(name, sizeof name, "frame_%02d.png", t);
        cv::Mat bgr;
        cv::cvtColor(seq.frames[t], bgr, cv::COLOR_RGB2BGR);
        cv::imwrite((dir / name).string(), bgr);
        std::snprintf(name, sizeof name, "mask_%02d.png", t);
        cv::imwrite((dir / name).string(), seq.masks[t] * 255);
    }
    nlohmann::json dj;
    to_json(dj, seq.distractors);
    std::ofstream(dir / "distractors.json") << dj.dump(2) << "\n";
    std::ofstream(dir / "spec.json") << seq.provenance.dump(2) << "\n";
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = {{"width_px", s.width_px},
         {"height_px", s.height_px},
         {"n_epochs", s.n_epochs},
         {"n_crack_seeds", s.n_crack_seeds},
         {"distractor_counts", s.distractor_counts},
         {"texture",
          {{"octaves", s.texture.octaves},
           {"contrast", s.texture.contrast},
           {"base_gray", s.texture.base_gray},
           {"sensor_noise_sigma", s.texture.sensor_noise_sigma}}},
         {"target_crack_pixel_ratio", s.target_crack_pixel_ratio},
         {"jitter_levels", s.jitter_levels},
         {"rng_seed", s.rng_seed}};
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
    s.width_px = j.at("width_px");
    s.height_px = j.at("height_px");
    s.n_epochs = j.at("n_epochs");
    s.n_crack_seeds = j.at("n_crack_seeds");
    s.distractor_counts = j.at("distractor_counts").get<std::map<std::string, int>>();
    const auto& t = j.at("texture");
    s.texture.octaves = t.at("octaves");
    s.texture.contrast = t.at("contrast");
    s.texture.base_gray = t.at("base_gray");
    s.texture.sensor_noise_sigma = t.at("sensor_noise_sigma");
    s.target_crack_pixel_ratio = j.at("target_crack_pixel_ratio");
    s.jitter_levels = j.at("jitter_levels");
    s.rng_seed = j.at("rng_seed");
}

void to_json(nlohmann::json& j, const DistractorSet& s) {
    j = nlohmann::json::object();
    auto& digits = j["pencil_digits"] = nlohmann::json::array();
    for (const auto& d : s.pencil_digits)
        digits.push_back({{"glyph", d.glyph},
                          {"pos", {d.pos.x, d.pos.y}},
                          {"scale", d.scale},
                          {"thickness", d.thickness}});
    auto& sensors = j["sensors"] = nlohmann::json::array();
    for (const auto& r : s.sensors)
        sensors.push_back({{"rect", {r.rect.x, r.rect.y, r.rect.width, r.rect.height}}});
    auto& cables = j["cables"] = nlohmann::json::array();
    for (const auto& c : s.cables) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : c.points) pts.push_back({p.x, p.y});
        cables.push_back({{"points", pts}, {"thickness", c.thickness}});
    }
    auto& cavities = j["cavities"] = nlohmann::json::array();
    for (const auto& c : s.cavities)
        cavities.push_back({{"center", {c.center.x, c.center.y}},
                            {"axes", {c.axes.width, c.axes.height}},
                            {"angle_deg", c.angle_deg}});
}

void from_json(const nlohmann::json& j, DistractorSet& s) {
    s = DistractorSet{};
    for (const auto& d : j.at("pencil_digits")) {
        PencilDigit p;
        p.glyph = d.at("glyph");
        p.pos = cv::Point(d.at("pos")[0], d.at("pos")[1]);
        p.scale = d.at("scale");
        p.thickness = d.at("thickness");
        s.pencil_digits.push_back(p);
    }
    for (const auto& d : j.at("sensors")) {
        const auto& r = d.at("rect");
        s.sensors.push_back({cv::Rect(r[0], r[1], r[2], r[3])});
    }
    for (const auto& d : j.at("cables")) {
        Cable c;
        for (const auto& p : d.at("points")) c.points.emplace_back(p[0], p[1]);
        c.thickness = d.at("thickness");
        s.cables.push_back(c);
    }
    for (const auto& d : j.at("cavities")) {
        Cavity c;
        c.center = cv::Point(d.at("center")[0], d.at("center")[1]);
        c.axes = cv::Size(d.at("axes")[0], d.at("axes")[1]);
        c.angle_deg = d.at("angle_deg");
        s.cavities.push_back(c);
    }
}

}  // namespace crackseq::synthgen
