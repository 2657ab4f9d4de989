#pragma once

// Deterministic synthetic lung-ultrasound phantoms with graded confidence
// labels, and cohort generation with a planted B-line -> S/F / readmission link.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "confseg/dataio.hpp"
#include "confseg/label.hpp"

namespace confseg {

struct PhantomSpec {
    std::size_t width = 64;
    std::size_t height = 64;
    std::size_t frames = 8;
    /// Pleural line depth as a fraction of image height.
    double pleura_depth_min = 0.22;
    double pleura_depth_max = 0.30;
    int a_lines_min = 1;
    int a_lines_max = 3;
    int b_lines_min = 0;
    int b_lines_max = 6;
    /// Standard deviation of the multiplicative speckle.
    double speckle = 0.25;
    /// Pixels per confidence step (100 -> 80 -> 60 -> 40 -> 20 -> 0).
    int falloff = 1;
};

/// Throws std::invalid_argument for empty ranges or images too small to
/// hold the structures (width or height < 32).
void validate(const PhantomSpec& spec);

struct PhantomImage {
    GrayImage image;
    ConfidenceMap label;
};

struct PhantomVideo {
    std::vector<GrayImage> frames;
    /// Label of frame 0; later frames are jittered by at most one pixel.
    ConfidenceMap label;
};

/// One frame with a B-line count drawn from the spec's range.
PhantomImage gen_image(std::uint64_t seed, const PhantomSpec& spec);
/// One frame with exactly `b_lines` vertical lines.
PhantomImage gen_image(std::uint64_t seed, const PhantomSpec& spec, int b_lines);

PhantomVideo gen_video(std::uint64_t seed, const PhantomSpec& spec, int b_lines);

/// Writes <out_dir>/cohort.json plus per-video PGM frames and .cmap labels.
/// Two days per patient, six views per day, one video per view.  Throws
/// std::invalid_argument for n_patients < 6.
CohortManifest gen_cohort(std::uint64_t seed, std::size_t n_patients, const PhantomSpec& spec,
                          const std::filesystem::path& out_dir, const PlantedLinkParams& link = {},
                          unsigned threads = 1);

/// Same cohort as gen_cohort, manifest only (no files).
CohortManifest plan_cohort(std::uint64_t seed, std::size_t n_patients, const PhantomSpec& spec,
                           const PlantedLinkParams& link = {});

/// Seed used to render a given video of a planned cohort.
std::uint64_t video_seed(std::uint64_t cohort_seed, std::size_t patient_index, std::size_t day, std::size_t view);

}  // namespace confseg
