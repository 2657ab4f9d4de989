#pragma once

// Persistence: .cmap confidence rasters, binary PGM frames, the cohort
// manifest (cohort.json) and patient-wise fold splits (folds.json).
//
// .cmap layout, little endian:
//   "CMAP" | u8 version = 1 | u32 width | u32 height | u32 channels = 6 |
//   channels*height*width bytes, each in [0, 100], channel-major.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "confseg/label.hpp"

namespace confseg {

inline constexpr std::size_t kCmapHeaderSize = 17;
inline constexpr std::uint8_t kCmapVersion = 1;

enum class FormatErrorCode {
    BadMagic,
    VersionMismatch,
    ValueOutOfRange,
    Truncated,
    BadHeader,
    UnsupportedDepth,
    TrailingBytes,
    DimensionMismatch,
    InvalidManifest,
};

class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    FormatErrorCode code() const noexcept { return code_; }

private:
    FormatErrorCode code_;
};

struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h, 0) {}

    std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::uint8_t& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

std::vector<std::uint8_t> encode_cmap(const ConfidenceMap& cmap);
/// Throws FormatError; the code distinguishes magic, version, range, truncation.
ConfidenceMap decode_cmap(std::span<const std::uint8_t> bytes);

void write_cmap(const ConfidenceMap& cmap, std::ostream& sink);
ConfidenceMap read_cmap(std::istream& source);

std::vector<std::uint8_t> encode_pgm(const GrayImage& img);
GrayImage decode_pgm(std::span<const std::uint8_t> bytes);

void write_pgm(const GrayImage& img, std::ostream& sink);
GrayImage read_pgm(std::istream& source);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames over `path`, so readers see
/// either the old or the new contents.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

ConfidenceMap load_cmap(const std::filesystem::path& path);
void save_cmap(const std::filesystem::path& path, const ConfidenceMap& cmap);
GrayImage load_pgm(const std::filesystem::path& path);
void save_pgm(const std::filesystem::path& path, const GrayImage& img);

// ---------------------------------------------------------------------------
// Cohort manifest

enum class View : std::uint8_t { R1, L1, R2, L2, R3, L3 };
inline constexpr std::array<View, 6> kViews = {View::R1, View::L1, View::R2, View::L2, View::R3, View::L3};

std::string_view view_name(View v) noexcept;
View parse_view(std::string_view name);
/// R1/L1 -> 1, R2/L2 -> 2, R3/L3 -> 3.
int zone_of(View v) noexcept;
std::size_t view_index(View v) noexcept;

struct VideoRecord {
    std::string video_id;
    View view = View::R1;
    int zone = 1;
    std::size_t frame_count = 0;
    std::vector<std::string> image_refs;
    std::string label_ref;
    /// Number of vertical lines rendered in this view (phantom metadata).
    int b_lines = 0;
};

struct DayRecord {
    int day_index = 0;
    double sf_ratio_normalized = 0.0;
    /// Planted-link inputs for this day (phantom metadata).
    int b_line_burden = 0;
    double eta = 0.0;
    std::vector<VideoRecord> videos;
};

struct PatientRecord {
    std::string patient_id;
    bool readmission_flag = false;
    std::vector<DayRecord> days;
};

struct PlantedLinkParams {
    double intercept = 0.95;
    double slope = -0.10;
    double eta_std = 0.03;
    double sf_min = 0.05;
    double sf_max = 1.0;
    double readmit_base = 0.15;
    double readmit_slope = 0.10;

    double sf_from(int burden, double eta) const;
    double readmit_probability(int burden_day2) const;
};

struct CohortManifest {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t frames = 0;
    std::uint64_t seed = 0;
    PlantedLinkParams link;
    std::vector<PatientRecord> patients;

    const PatientRecord& patient(const std::string& id) const;
    std::size_t video_count() const;
};

/// Throws FormatError(InvalidManifest) on any invariant violation.
void validate(const CohortManifest& manifest);

nlohmann::json to_json(const CohortManifest& manifest);
CohortManifest manifest_from_json(const nlohmann::json& doc);

CohortManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const CohortManifest& manifest);

// ---------------------------------------------------------------------------
// Patient-wise folds

struct FoldSplit {
    /// Total number of folds including the held-out test fold.
    std::size_t fold_count = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> held_out_test;
    /// fold_count - 1 cross-validation folds.
    std::vector<std::vector<std::string>> folds;

    /// Patients of every CV fold except `val_fold`.
    std::vector<std::string> train_patients(std::size_t val_fold) const;
    const std::vector<std::string>& val_patients(std::size_t val_fold) const;
};

/// Seeded shuffle of patient ids; the first `test_patient_count` become the
/// held-out test set, the rest are dealt round-robin into fold_count - 1 folds.
/// Throws std::invalid_argument when patients < fold_count + test_patient_count.
FoldSplit split_folds(const CohortManifest& manifest, std::size_t fold_count, std::size_t test_patient_count,
                      std::uint64_t seed);

/// Throws FormatError(InvalidManifest) if any patient appears twice.
void validate(const FoldSplit& split);

nlohmann::json to_json(const FoldSplit& split);
FoldSplit fold_split_from_json(const nlohmann::json& doc);
FoldSplit load_folds(const std::filesystem::path& path);
void save_folds(const std::filesystem::path& path, const FoldSplit& split);

}  // namespace confseg
