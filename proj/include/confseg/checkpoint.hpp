#pragma once

// Checkpoint files.
//
// Layout, little endian:
//   "CKPT" | u8 version = 1 | u32 param_count |
//   per param: u32 name_len | name bytes | u32 ndim | u32 dims[ndim] | f32 values[numel] |
//   u8 has_optimizer |
//   if has_optimizer: f64 lr | f64 beta1 | f64 beta2 | f64 eps | u64 step |
//                     per param: f32 first_moment[numel] | f32 second_moment[numel]

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "confseg/optim.hpp"

namespace confseg::nn {

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<float> values;

    friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct OptimizerSnapshot {
    AdamConfig config;
    double lr = 0.0;
    std::uint64_t step = 0;
    std::vector<std::vector<float>> first_moments;
    std::vector<std::vector<float>> second_moments;
};

struct Checkpoint {
    std::vector<CheckpointEntry> params;
    std::optional<OptimizerSnapshot> optimizer;

    const CheckpointEntry* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws std::runtime_error on malformed input.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename Real>
Checkpoint snapshot(const ParamList<Real>& params);

template <typename Real>
Checkpoint snapshot(const ParamList<Real>& params, const Adam<Real>& optimizer);

/// Copies values into every parameter whose name starts with `prefix`.  Each
/// such parameter must exist in the checkpoint with the same shape.
template <typename Real>
void restore(const Checkpoint& ckpt, const ParamList<Real>& params, const std::string& prefix = "");

/// Restores moments and step count for an optimizer over the same parameters.
template <typename Real>
void restore_optimizer(const Checkpoint& ckpt, Adam<Real>& optimizer);

}  // namespace confseg::nn
