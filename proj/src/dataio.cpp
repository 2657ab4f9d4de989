#include "confseg/dataio.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "confseg/random.hpp"

namespace confseg {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
    return v;
}

std::vector<std::uint8_t> slurp(std::istream& source) {
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(source), std::istreambuf_iterator<char>());
}

void emit(std::ostream& sink, std::span<const std::uint8_t> bytes) {
    sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!sink) throw std::runtime_error("write failed");
}

}  // namespace

std::vector<std::uint8_t> encode_cmap(const ConfidenceMap& cmap) {
    std::vector<std::uint8_t> out;
    out.reserve(kCmapHeaderSize + cmap.values().size());
    out.insert(out.end(), {'C', 'M', 'A', 'P'});
    out.push_back(kCmapVersion);
    put_u32(out, static_cast<std::uint32_t>(cmap.width()));
    put_u32(out, static_cast<std::uint32_t>(cmap.height()));
    put_u32(out, static_cast<std::uint32_t>(kChannels));
    const auto values = cmap.values();
    out.insert(out.end(), values.begin(), values.end());
    return out;
}

ConfidenceMap decode_cmap(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw FormatError(FormatErrorCode::Truncated, "truncated stream: missing magic");
    if (std::memcmp(bytes.data(), "CMAP", 4) != 0) throw FormatError(FormatErrorCode::BadMagic, "bad magic");
    if (bytes.size() < 5) throw FormatError(FormatErrorCode::Truncated, "truncated stream: missing version");
    if (bytes[4] != kCmapVersion) {
        throw FormatError(FormatErrorCode::VersionMismatch,
                          "version mismatch: expected 1, got " + std::to_string(bytes[4]));
    }
    if (bytes.size() < kCmapHeaderSize) throw FormatError(FormatErrorCode::Truncated, "truncated stream: header");
    const std::uint32_t width = get_u32(bytes, 5);
    const std::uint32_t height = get_u32(bytes, 9);
    const std::uint32_t channels = get_u32(bytes, 13);
    if (channels != kChannels) {
        throw FormatError(FormatErrorCode::BadHeader, "channel count must be 6, got " + std::to_string(channels));
    }
    if (width == 0 || height == 0) throw FormatError(FormatErrorCode::BadHeader, "zero width or height");
    const std::uint64_t payload = std::uint64_t{channels} * width * height;
    const std::uint64_t available = bytes.size() - kCmapHeaderSize;
    if (available < payload) throw FormatError(FormatErrorCode::Truncated, "truncated stream: payload");
    if (available > payload) throw FormatError(FormatErrorCode::TrailingBytes, "trailing bytes after payload");
    auto body = bytes.subspan(kCmapHeaderSize);
    if (std::any_of(body.begin(), body.end(), [](std::uint8_t v) { return v > 100; })) {
        throw FormatError(FormatErrorCode::ValueOutOfRange, "value out of range");
    }
    return ConfidenceMap(width, height, std::vector<std::uint8_t>(body.begin(), body.end()));
}

void write_cmap(const ConfidenceMap& cmap, std::ostream& sink) {
    emit(sink, encode_cmap(cmap));
}

ConfidenceMap read_cmap(std::istream& source) {
    return decode_cmap(slurp(source));
}

std::vector<std::uint8_t> encode_pgm(const GrayImage& img) {
    const std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

GrayImage decode_pgm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos]) != 0) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_number = [&](const char* what) -> std::uint64_t {
        skip_space_and_comments();
        if (pos >= bytes.size()) throw FormatError(FormatErrorCode::Truncated, std::string("truncated header: ") + what);
        if (std::isdigit(bytes[pos]) == 0) throw FormatError(FormatErrorCode::BadHeader, std::string("bad ") + what);
        std::uint64_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos]) != 0) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 0xffffffffULL) throw FormatError(FormatErrorCode::BadHeader, std::string("oversized ") + what);
            ++pos;
        }
        return v;
    };

    if (bytes.size() < 2) throw FormatError(FormatErrorCode::Truncated, "truncated: missing magic");
    if (bytes[0] != 'P' || bytes[1] != '5') throw FormatError(FormatErrorCode::BadMagic, "not a binary greyscale PGM");
    pos = 2;
    const auto width = read_number("width");
    const auto height = read_number("height");
    const auto maxval = read_number("maxval");
    if (width == 0 || height == 0) throw FormatError(FormatErrorCode::BadHeader, "zero width or height");
    if (maxval != 255) {
        throw FormatError(FormatErrorCode::UnsupportedDepth, "unsupported depth: maxval " + std::to_string(maxval));
    }
    if (pos >= bytes.size() || std::isspace(bytes[pos]) == 0) {
        throw FormatError(FormatErrorCode::Truncated, "truncated: missing raster");
    }
    ++pos;
    const std::uint64_t payload = width * height;
    if (bytes.size() - pos < payload) throw FormatError(FormatErrorCode::Truncated, "truncated raster");
    if (bytes.size() - pos > payload) throw FormatError(FormatErrorCode::TrailingBytes, "trailing bytes after raster");
    GrayImage img(width, height);
    std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), img.pixels.begin());
    return img;
}

void write_pgm(const GrayImage& img, std::ostream& sink) {
    emit(sink, encode_pgm(img));
}

GrayImage read_pgm(std::istream& source) {
    return decode_pgm(slurp(source));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return slurp(in);
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    static std::atomic<std::uint64_t> counter{0};
    auto tmp = path;
    tmp += ".tmp" + std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string());
        emit(out, bytes);
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ConfidenceMap load_cmap(const std::filesystem::path& path) {
    return decode_cmap(read_file_bytes(path));
}

void save_cmap(const std::filesystem::path& path, const ConfidenceMap& cmap) {
    write_file_atomic(path, encode_cmap(cmap));
}

GrayImage load_pgm(const std::filesystem::path& path) {
    return decode_pgm(read_file_bytes(path));
}

void save_pgm(const std::filesystem::path& path, const GrayImage& img) {
    write_file_atomic(path, encode_pgm(img));
}

// ---------------------------------------------------------------------------

std::string_view view_name(View v) noexcept {
    switch (v) {
        case View::R1: return "R1";
        case View::L1: return "L1";
        case View::R2: return "R2";
        case View::L2: return "L2";
        case View::R3: return "R3";
        case View::L3: return "L3";
    }
    return "?";
}

View parse_view(std::string_view name) {
    for (View v : kViews) {
        if (view_name(v) == name) return v;
    }
    throw FormatError(FormatErrorCode::InvalidManifest, "unknown view '" + std::string(name) + "'");
}

int zone_of(View v) noexcept {
    return static_cast<int>(static_cast<std::uint8_t>(v) / 2) + 1;
}

std::size_t view_index(View v) noexcept {
    return static_cast<std::size_t>(v);
}

double PlantedLinkParams::sf_from(int burden, double eta) const {
    return std::clamp(intercept + slope * burden + eta, sf_min, sf_max);
}

double PlantedLinkParams::readmit_probability(int burden_day2) const {
    return std::clamp(readmit_base + readmit_slope * burden_day2, 0.0, 1.0);
}

const PatientRecord& CohortManifest::patient(const std::string& id) const {
    for (const auto& p : patients) {
        if (p.patient_id == id) return p;
    }
    throw std::out_of_range("unknown patient " + id);
}

std::size_t CohortManifest::video_count() const {
    std::size_t n = 0;
    for (const auto& p : patients) {
        for (const auto& d : p.days) n += d.videos.size();
    }
    return n;
}

void validate(const CohortManifest& manifest) {
    auto fail = [](const std::string& why) { throw FormatError(FormatErrorCode::InvalidManifest, why); };
    std::unordered_set<std::string> seen;
    for (const auto& p : manifest.patients) {
        if (!seen.insert(p.patient_id).second) fail("duplicate patient " + p.patient_id);
        if (p.days.size() < 2) fail("patient " + p.patient_id + " has fewer than 2 recorded days");
        for (const auto& d : p.days) {
            if (!(d.sf_ratio_normalized >= 0.0 && d.sf_ratio_normalized <= 1.0)) {
                fail("sf_ratio_normalized out of [0,1] for " + p.patient_id);
            }
            for (const auto& v : d.videos) {
                if (v.zone != zone_of(v.view)) fail("zone does not match view for " + v.video_id);
                if (v.image_refs.size() != v.frame_count) fail("frame_count mismatch for " + v.video_id);
            }
        }
    }
}

nlohmann::json to_json(const CohortManifest& m) {
    using nlohmann::json;
    json patients = json::array();
    for (const auto& p : m.patients) {
        json days = json::array();
        for (const auto& d : p.days) {
            json videos = json::array();
            for (const auto& v : d.videos) {
                videos.push_back({{"video_id", v.video_id},
                                  {"view", std::string(view_name(v.view))},
                                  {"zone", v.zone},
                                  {"frame_count", v.frame_count},
                                  {"image_refs", v.image_refs},
                                  {"label_ref", v.label_ref},
                                  {"b_lines", v.b_lines}});
            }
            days.push_back({{"day_index", d.day_index},
                            {"sf_ratio_normalized", d.sf_ratio_normalized},
                            {"b_line_burden", d.b_line_burden},
                            {"eta", d.eta},
                            {"videos", std::move(videos)}});
        }
        patients.push_back(
            {{"patient_id", p.patient_id}, {"readmission_flag", p.readmission_flag}, {"days", std::move(days)}});
    }
    return {{"format", "confseg-cohort"},
            {"version", 1},
            {"width", m.width},
            {"height", m.height},
            {"frames", m.frames},
            {"seed", m.seed},
            {"planted_link",
             {{"intercept", m.link.intercept},
              {"slope", m.link.slope},
              {"eta_std", m.link.eta_std},
              {"sf_min", m.link.sf_min},
              {"sf_max", m.link.sf_max},
              {"readmit_base", m.link.readmit_base},
              {"readmit_slope", m.link.readmit_slope}}},
            {"patients", std::move(patients)}};
}

CohortManifest manifest_from_json(const nlohmann::json& doc) {
    CohortManifest m;
    try {
        m.width = doc.at("width").get<std::size_t>();
        m.height = doc.at("height").get<std::size_t>();
        m.frames = doc.at("frames").get<std::size_t>();
        m.seed = doc.value("seed", std::uint64_t{0});
        if (doc.contains("planted_link")) {
            const auto& l = doc.at("planted_link");
            m.link.intercept = l.at("intercept").get<double>();
            m.link.slope = l.at("slope").get<double>();
            m.link.eta_std = l.at("eta_std").get<double>();
            m.link.sf_min = l.at("sf_min").get<double>();
            m.link.sf_max = l.at("sf_max").get<double>();
            m.link.readmit_base = l.at("readmit_base").get<double>();
            m.link.readmit_slope = l.at("readmit_slope").get<double>();
        }
        for (const auto& pj : doc.at("patients")) {
            PatientRecord p;
            p.patient_id = pj.at("patient_id").get<std::string>();
            p.readmission_flag = pj.at("readmission_flag").get<bool>();
            for (const auto& dj : pj.at("days")) {
                DayRecord d;
                d.day_index = dj.at("day_index").get<int>();
                d.sf_ratio_normalized = dj.at("sf_ratio_normalized").get<double>();
                d.b_line_burden = dj.value("b_line_burden", 0);
                d.eta = dj.value("eta", 0.0);
                for (const auto& vj : dj.at("videos")) {
                    VideoRecord v;
                    v.video_id = vj.at("video_id").get<std::string>();
                    v.view = parse_view(vj.at("view").get<std::string>());
                    v.zone = vj.at("zone").get<int>();
                    v.frame_count = vj.at("frame_count").get<std::size_t>();
                    v.image_refs = vj.at("image_refs").get<std::vector<std::string>>();
                    v.label_ref = vj.at("label_ref").get<std::string>();
                    v.b_lines = vj.value("b_lines", 0);
                    d.videos.push_back(std::move(v));
                }
                p.days.push_back(std::move(d));
            }
            m.patients.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorCode::InvalidManifest, std::string("malformed manifest: ") + e.what());
    }
    validate(m);
    return m;
}

CohortManifest load_manifest(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorCode::InvalidManifest, path.string() + ": " + e.what());
    }
    return manifest_from_json(doc);
}

void save_manifest(const std::filesystem::path& path, const CohortManifest& manifest) {
    validate(manifest);
    write_text_file(path, to_json(manifest).dump(1) + "\n");
}

// ---------------------------------------------------------------------------

std::vector<std::string> FoldSplit::train_patients(std::size_t val_fold) const {
    if (val_fold >= folds.size()) throw std::out_of_range("fold index");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < folds.size(); ++i) {
        if (i != val_fold) out.insert(out.end(), folds[i].begin(), folds[i].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

const std::vector<std::string>& FoldSplit::val_patients(std::size_t val_fold) const {
    if (val_fold >= folds.size()) throw std::out_of_range("fold index");
    return folds[val_fold];
}

FoldSplit split_folds(const CohortManifest& manifest, std::size_t fold_count, std::size_t test_patient_count,
                      std::uint64_t seed) {
    if (fold_count < 2) throw std::invalid_argument("fold_count must be at least 2");
    const std::size_t n = manifest.patients.size();
    if (n < fold_count + test_patient_count) {
        throw std::invalid_argument("too few patients: " + std::to_string(n) + " < " +
                                    std::to_string(fold_count + test_patient_count));
    }
    std::vector<std::string> ids;
    ids.reserve(n);
    for (const auto& p : manifest.patients) ids.push_back(p.patient_id);
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    shuffle(ids, rng);

    FoldSplit split;
    split.fold_count = fold_count;
    split.seed = seed;
    split.held_out_test.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(test_patient_count));
    split.folds.resize(fold_count - 1);
    for (std::size_t i = test_patient_count; i < n; ++i) {
        split.folds[(i - test_patient_count) % split.folds.size()].push_back(ids[i]);
    }
    std::sort(split.held_out_test.begin(), split.held_out_test.end());
    for (auto& f : split.folds) std::sort(f.begin(), f.end());
    validate(split);
    return split;
}

void validate(const FoldSplit& split) {
    std::unordered_set<std::string> seen;
    auto claim = [&](const std::string& id) {
        if (!seen.insert(id).second) {
            throw FormatError(FormatErrorCode::InvalidManifest, "patient " + id + " appears in two folds");
        }
    };
    for (const auto& id : split.held_out_test) claim(id);
    for (const auto& f : split.folds) {
        for (const auto& id : f) claim(id);
    }
}

nlohmann::json to_json(const FoldSplit& split) {
    return {{"fold_count", split.fold_count},
            {"seed", split.seed},
            {"held_out_test", split.held_out_test},
            {"folds", split.folds}};
}

FoldSplit fold_split_from_json(const nlohmann::json& doc) {
    FoldSplit split;
    try {
        split.fold_count = doc.at("fold_count").get<std::size_t>();
        split.seed = doc.value("seed", std::uint64_t{0});
        split.held_out_test = doc.at("held_out_test").get<std::vector<std::string>>();
        split.folds = doc.at("folds").get<std::vector<std::vector<std::string>>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorCode::InvalidManifest, std::string("malformed folds: ") + e.what());
    }
    validate(split);
    return split;
}

FoldSplit load_folds(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return fold_split_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(FormatErrorCode::InvalidManifest, path.string() + ": " + e.what());
    }
}

void save_folds(const std::filesystem::path& path, const FoldSplit& split) {
    write_text_file(path, to_json(split).dump(1) + "\n");
}

}  // namespace confseg
