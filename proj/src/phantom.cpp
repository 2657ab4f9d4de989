#include "confseg/phantom.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "confseg/random.hpp"

namespace confseg {

namespace {

constexpr std::array<int, 5> kFalloffLevels = {100, 80, 60, 40, 20};
/// Vertical artefacts are faint: about twice the tissue level below the pleura.
constexpr double kStreakLevel = 50.0;

struct Scene {
    int width = 0;
    int height = 0;
    int pleura_depth = 0;
    double curve_amp = 0.0;
    double curve_phase = 0.0;
    int fuzzy_begin = 0;  // [fuzzy_begin, fuzzy_end) columns of fuzzy pleura
    int fuzzy_end = 0;
    int fascia_offset = 0;
    std::vector<int> a_line_depths;
    std::vector<int> sub_a_depths;
    std::vector<int> b_line_x;
    /// Short unlabelled comet tails: x, top row, length.
    std::vector<std::array<int, 3>> z_lines;
    double gain = 1.0;
    // Annotator wobble of each labelled core inside its visible band, in
    // {-1, 0, 1}: per column for horizontal structures, per row for streaks.
    std::vector<int> pleura_wobble;
    std::vector<int> fascia_wobble;
    std::vector<std::vector<int>> a_line_wobble;
    std::vector<std::vector<int>> sub_a_wobble;
    std::vector<std::vector<int>> b_line_wobble;

    int curve(int x) const {
        return static_cast<int>(std::lround(curve_amp * std::sin(2.0 * std::numbers::pi * x / width + curve_phase)));
    }
    int pleura_y(int x) const { return pleura_depth + curve(x); }
    bool fuzzy(int x) const { return x >= fuzzy_begin && x < fuzzy_end; }
    bool in_b_line(int x, int margin) const {
        for (int bx : b_line_x) {
            if (x >= bx - margin && x <= bx + 2 + margin) return true;
        }
        return false;
    }
};

/// Piecewise-constant offsets in {-1, 0, 1} with runs of 4 to 12 samples.
std::vector<int> wobble(Rng& rng, int length) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(length));
    while (static_cast<int>(out.size()) < length) {
        const int run = uniform_int(rng, 4, 12);
        const int value = uniform_int(rng, -1, 1);
        for (int i = 0; i < run && static_cast<int>(out.size()) < length; ++i) out.push_back(value);
    }
    return out;
}

Scene make_scene(Rng& rng, const PhantomSpec& spec, int b_lines) {
    Scene s;
    s.width = static_cast<int>(spec.width);
    s.height = static_cast<int>(spec.height);
    s.pleura_depth = static_cast<int>(std::lround(uniform(rng, spec.pleura_depth_min, spec.pleura_depth_max) * s.height));
    s.curve_amp = uniform(rng, 0.0, 2.0);
    s.curve_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    if (bernoulli(rng, 0.8)) {
        const int len = uniform_int(rng, s.width * 3 / 10, s.width / 2);
        s.fuzzy_begin = uniform_int(rng, 2, s.width - len - 2);
        s.fuzzy_end = s.fuzzy_begin + len;
    }
    s.fascia_offset = uniform_int(rng, 6, 8);

    const int n_a = uniform_int(rng, spec.a_lines_min, spec.a_lines_max);
    for (int m = 2; m <= n_a + 1; ++m) {
        const int sub = static_cast<int>(std::lround((m - 0.5) * s.pleura_depth));
        if (sub + 3 < s.height) s.sub_a_depths.push_back(sub);
        if (m * s.pleura_depth + 3 < s.height) s.a_line_depths.push_back(m * s.pleura_depth);
    }

    // Rejection-sample streak positions at least 5 px apart.
    for (int tries = 0; static_cast<int>(s.b_line_x.size()) < b_lines && tries < 10000; ++tries) {
        const int x = uniform_int(rng, 3, s.width - 6);
        const bool clear = std::all_of(s.b_line_x.begin(), s.b_line_x.end(), [&](int o) { return std::abs(o - x) >= 5; });
        if (clear) s.b_line_x.push_back(x);
    }
    if (static_cast<int>(s.b_line_x.size()) != b_lines) {
        // Greedy placement boxed itself in; draw sorted offsets with the gaps
        // removed instead, which always succeeds when validate() passed.
        const int slack = (s.width - 9) - 5 * (b_lines - 1);
        if (slack < 1) throw std::invalid_argument("phantom: cannot place vertical lines");
        std::vector<int> offsets;
        for (int i = 0; i < b_lines; ++i) offsets.push_back(uniform_int(rng, 0, slack - 1));
        std::sort(offsets.begin(), offsets.end());
        s.b_line_x.clear();
        for (int i = 0; i < b_lines; ++i) s.b_line_x.push_back(3 + offsets[static_cast<std::size_t>(i)] + 5 * i);
    }
    std::sort(s.b_line_x.begin(), s.b_line_x.end());
    s.gain = uniform(rng, 0.8, 1.2);

    const int n_z = uniform_int(rng, 0, 12);
    for (int i = 0; i < n_z; ++i) {
        const int x = uniform_int(rng, 1, s.width - 4);
        const int len = uniform_int(rng, 6, 28);
        const int top = s.pleura_y(x) + 2 + uniform_int(rng, 0, 4);
        s.z_lines.push_back({x, top, len});
    }

    s.pleura_wobble = wobble(rng, s.width);
    s.fascia_wobble = wobble(rng, s.width);
    for (std::size_t i = 0; i < s.a_line_depths.size(); ++i) s.a_line_wobble.push_back(wobble(rng, s.width));
    for (std::size_t i = 0; i < s.sub_a_depths.size(); ++i) s.sub_a_wobble.push_back(wobble(rng, s.width));
    for (std::size_t i = 0; i < s.b_line_x.size(); ++i) s.b_line_wobble.push_back(wobble(rng, s.height));
    return s;
}

/// Noise-free intensity of the scene at (x, y).  Every structure is drawn one
/// pixel wider on each side than its labelled core, at 80% brightness there.
double scene_intensity(const Scene& s, int x, int y) {
    const int py = s.pleura_y(x);
    double v = y < py ? 30.0 : 22.0;
    auto band = [&](int top, int bottom, double level) {
        if (y >= top && y <= bottom) v = std::max(v, level);
        else if (y == top - 1 || y == bottom + 1) v = std::max(v, 0.8 * level);
    };
    const int fy = py - s.fascia_offset;
    band(fy, fy + 2, 115.0);
    if (s.fuzzy(x)) {
        band(py - 1, py + 2, 130.0);
        band(py, py + 1, 170.0);
    } else {
        band(py, py + 1, 235.0);
    }
    const int c = s.curve(x);
    for (int d : s.sub_a_depths) band(d + c, d + c + 1, 70.0);
    if (!s.in_b_line(x, 2)) {
        for (std::size_t m = 0; m < s.a_line_depths.size(); ++m) {
            const int d = s.a_line_depths[m] + c;
            band(d, d + 1, 150.0 / std::sqrt(static_cast<double>(m + 1)));
        }
    }
    if (y >= py + 2) {
        const double level = kStreakLevel;
        if (s.in_b_line(x, 0)) v = std::max(v, level);
        else if (s.in_b_line(x, 1)) v = std::max(v, 0.8 * level);
    }
    for (const auto& [zx, top, len] : s.z_lines) {
        if (x >= zx && x <= zx + 2 && y >= top && y < top + len) {
            v = std::max(v, kStreakLevel * (1.0 - 0.4 * (y - top) / len));
        }
    }
    return v;
}

GrayImage render(const Scene& s, int dx, int dy, Rng& rng, double speckle) {
    GrayImage img(static_cast<std::size_t>(s.width), static_cast<std::size_t>(s.height));
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            const int sx = std::clamp(x - dx, 0, s.width - 1);
            const int sy = std::clamp(y - dy, 0, s.height - 1);
            const double base = scene_intensity(s, sx, sy) * s.gain;
            const double v = base * std::max(0.0, 1.0 + speckle * normal(rng));
            img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
    return img;
}

ConfidenceMap label_scene(const Scene& s, int falloff) {
    const auto W = static_cast<std::size_t>(s.width);
    const auto H = static_cast<std::size_t>(s.height);
    std::vector<std::uint8_t> core(kChannels * W * H, 0);
    auto mark = [&](Channel ch, int x, int y) {
        if (x < 0 || y < 0 || x >= s.width || y >= s.height) return;
        core[static_cast<std::size_t>(ch) * W * H + static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = 1;
    };
    for (int x = 0; x < s.width; ++x) {
        const auto ux = static_cast<std::size_t>(x);
        const int py = s.pleura_y(x) + s.pleura_wobble[ux];
        const int c = s.curve(x);
        if (s.fuzzy(x)) {
            for (int y = py - 1; y <= py + 2; ++y) mark(Channel::FuzzyPleura, x, y);
        } else {
            mark(Channel::SharpPleura, x, py);
            mark(Channel::SharpPleura, x, py + 1);
        }
        const int fy = s.pleura_y(x) - s.fascia_offset + s.fascia_wobble[ux];
        for (int y = fy; y <= fy + 2; ++y) mark(Channel::FasciaBand, x, y);
        for (std::size_t i = 0; i < s.sub_a_depths.size(); ++i) {
            const int d = s.sub_a_depths[i] + c + s.sub_a_wobble[i][ux];
            mark(Channel::SubALine, x, d);
            mark(Channel::SubALine, x, d + 1);
        }
        if (!s.in_b_line(x, 2)) {
            for (std::size_t i = 0; i < s.a_line_depths.size(); ++i) {
                const int d = s.a_line_depths[i] + c + s.a_line_wobble[i][ux];
                mark(Channel::ALine, x, d);
                mark(Channel::ALine, x, d + 1);
            }
        }
    }
    for (std::size_t i = 0; i < s.b_line_x.size(); ++i) {
        for (int y = 0; y < s.height; ++y) {
            const int x0 = s.b_line_x[i] + s.b_line_wobble[i][static_cast<std::size_t>(y)];
            for (int x = x0; x <= x0 + 2; ++x) {
                if (x >= 0 && x < s.width && y >= s.pleura_y(x) + 2) mark(Channel::VerticalLine, x, y);
            }
        }
    }

    ConfidenceMap cmap(W, H);
    const int reach = falloff * static_cast<int>(kFalloffLevels.size() - 1);
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
        const auto* plane = core.data() + ch * W * H;
        for (int y = 0; y < s.height; ++y) {
            for (int x = 0; x < s.width; ++x) {
                if (!plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)]) continue;
                for (int yy = std::max(0, y - reach); yy <= std::min(s.height - 1, y + reach); ++yy) {
                    for (int xx = std::max(0, x - reach); xx <= std::min(s.width - 1, x + reach); ++xx) {
                        const int dist = std::max(std::abs(xx - x), std::abs(yy - y));
                        const int step = (dist + falloff - 1) / falloff;
                        const int level = kFalloffLevels[static_cast<std::size_t>(step)];
                        const auto ux = static_cast<std::size_t>(xx);
                        const auto uy = static_cast<std::size_t>(yy);
                        if (cmap.at(ch, uy, ux) < level) cmap.set(ch, uy, ux, level);
                    }
                }
            }
        }
    }
    return cmap;
}

void check_b_lines(int b_lines) {
    if (b_lines < 0 || b_lines > 6) throw std::invalid_argument("phantom: vertical line count must be in [0, 6]");
}

std::string patient_id(std::size_t i, std::size_t n) {
    const std::size_t digits = std::max<std::size_t>(3, std::to_string(n > 0 ? n - 1 : 0).size());
    std::string num = std::to_string(i);
    return "P" + std::string(digits - std::min(digits, num.size()), '0') + num;
}

}  // namespace

void validate(const PhantomSpec& spec) {
    if (spec.width < 32 || spec.height < 32) throw std::invalid_argument("phantom: image dimensions too small for structures");
    if (spec.frames < 1) throw std::invalid_argument("phantom: frames must be >= 1");
    if (!(spec.pleura_depth_min > 0.0 && spec.pleura_depth_min <= spec.pleura_depth_max && spec.pleura_depth_max < 0.5)) {
        throw std::invalid_argument("phantom: pleural depth range must satisfy 0 < min <= max < 0.5");
    }
    if (spec.pleura_depth_min * static_cast<double>(spec.height) < 10.0) {
        throw std::invalid_argument("phantom: pleura too shallow for the fascia band");
    }
    if (spec.a_lines_min < 0 || spec.a_lines_min > spec.a_lines_max) throw std::invalid_argument("phantom: bad A-line range");
    if (spec.b_lines_min < 0 || spec.b_lines_min > spec.b_lines_max || spec.b_lines_max > 6) {
        throw std::invalid_argument("phantom: vertical line range must lie in [0, 6]");
    }
    if (static_cast<std::size_t>(spec.b_lines_max) * 5 + 10 > spec.width) {
        throw std::invalid_argument("phantom: image too narrow for the vertical line count");
    }
    if (!(spec.speckle >= 0.0)) throw std::invalid_argument("phantom: speckle must be >= 0");
    if (spec.falloff < 1) throw std::invalid_argument("phantom: falloff must be >= 1");
}

PhantomImage gen_image(std::uint64_t seed, const PhantomSpec& spec) {
    validate(spec);
    Rng rng(derive_seed(seed, 0));
    const int k = uniform_int(rng, spec.b_lines_min, spec.b_lines_max);
    return gen_image(seed, spec, k);
}

PhantomImage gen_image(std::uint64_t seed, const PhantomSpec& spec, int b_lines) {
    validate(spec);
    check_b_lines(b_lines);
    Rng rng(seed);
    const Scene scene = make_scene(rng, spec, b_lines);
    return {render(scene, 0, 0, rng, spec.speckle), label_scene(scene, spec.falloff)};
}

PhantomVideo gen_video(std::uint64_t seed, const PhantomSpec& spec, int b_lines) {
    validate(spec);
    check_b_lines(b_lines);
    Rng rng(seed);
    const Scene scene = make_scene(rng, spec, b_lines);
    PhantomVideo video{{}, label_scene(scene, spec.falloff)};
    for (std::size_t t = 0; t < spec.frames; ++t) {
        const int dx = t == 0 ? 0 : uniform_int(rng, -1, 1);
        const int dy = t == 0 ? 0 : uniform_int(rng, -1, 1);
        video.frames.push_back(render(scene, dx, dy, rng, spec.speckle));
    }
    return video;
}

std::uint64_t video_seed(std::uint64_t cohort_seed, std::size_t patient_index, std::size_t day, std::size_t view) {
    return derive_seed(derive_seed(cohort_seed, patient_index + 1), 1000 + day * kViews.size() + view);
}

CohortManifest plan_cohort(std::uint64_t seed, std::size_t n_patients, const PhantomSpec& spec,
                           const PlantedLinkParams& link) {
    validate(spec);
    if (n_patients < 6) throw std::invalid_argument("phantom: cohort needs at least 6 patients");
    CohortManifest m;
    m.width = spec.width;
    m.height = spec.height;
    m.frames = spec.frames;
    m.seed = seed;
    m.link = link;
    for (std::size_t i = 0; i < n_patients; ++i) {
        Rng rng(derive_seed(seed, i + 1));
        PatientRecord p;
        p.patient_id = patient_id(i, n_patients);
        for (int day = 1; day <= 2; ++day) {
            DayRecord d;
            d.day_index = day;
            d.b_line_burden = uniform_int(rng, spec.b_lines_min, spec.b_lines_max);
            d.eta = normal(rng, 0.0, link.eta_std);
            d.sf_ratio_normalized = link.sf_from(d.b_line_burden, d.eta);
            for (View v : kViews) {
                VideoRecord rec;
                rec.view = v;
                rec.zone = zone_of(v);
                rec.b_lines = std::clamp(d.b_line_burden + uniform_int(rng, -1, 1), spec.b_lines_min, spec.b_lines_max);
                const std::string dir = p.patient_id + "/d" + std::to_string(day) + "_" + std::string(view_name(v));
                rec.video_id = p.patient_id + "_d" + std::to_string(day) + "_" + std::string(view_name(v));
                rec.frame_count = spec.frames;
                for (std::size_t t = 0; t < spec.frames; ++t) {
                    char name[32];
                    std::snprintf(name, sizeof name, "/f%02zu.pgm", t);
                    rec.image_refs.push_back(dir + name);
                }
                rec.label_ref = dir + "/label.cmap";
                d.videos.push_back(std::move(rec));
            }
            p.days.push_back(std::move(d));
        }
        p.readmission_flag = bernoulli(rng, link.readmit_probability(p.days.back().b_line_burden));
        m.patients.push_back(std::move(p));
    }
    validate(m);
    return m;
}

CohortManifest gen_cohort(std::uint64_t seed, std::size_t n_patients, const PhantomSpec& spec,
                          const std::filesystem::path& out_dir, const PlantedLinkParams& link, unsigned threads) {
    CohortManifest m = plan_cohort(seed, n_patients, spec, link);
    std::filesystem::create_directories(out_dir);

    auto write_patient = [&](std::size_t i) {
        const auto& p = m.patients[i];
        for (std::size_t d = 0; d < p.days.size(); ++d) {
            for (std::size_t v = 0; v < p.days[d].videos.size(); ++v) {
                const auto& rec = p.days[d].videos[v];
                const auto video = gen_video(video_seed(seed, i, d, v), spec, rec.b_lines);
                std::filesystem::create_directories((out_dir / rec.label_ref).parent_path());
                for (std::size_t t = 0; t < video.frames.size(); ++t) save_pgm(out_dir / rec.image_refs[t], video.frames[t]);
                save_cmap(out_dir / rec.label_ref, video.label);
            }
        }
    };

    threads = std::max(1u, threads);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < m.patients.size(); i = next++) {
            try {
                write_patient(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    save_manifest(out_dir / "cohort.json", m);
    return m;
}

}  // namespace confseg
