#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "m3dnca/checkpoint.hpp"
#include "m3dnca/pipeline.hpp"
#include "m3dnca/synth.hpp"

namespace m3dnca::io {

enum class ElementType { f32, u8 };

ElementType parse_element_type(const std::string& name);
const char* to_string(ElementType t);

struct VolumeInfo {
    ElementType element_type = ElementType::f32;
    std::optional<std::array<double, 3>> spacing_mm;  // z, y, x
    /// Intensity range of the source before it was normalized, if known.
    std::optional<std::array<double, 2>> source_range;
    /// Stored value times scale gives the returned value (1/255 for u8).
    double scale = 1.0;
};

struct Volume {
    Tensor data;  // [1, 1, z, y, x]
    VolumeInfo info;
};

/// JSON manifest at `manifest_path` plus a raw little-endian data file next
/// to it (same stem, ".raw"). u8 stores round(255 v) of values clamped to
/// [0, 1].
void write_volume(const std::string& manifest_path, const Tensor& data, const VolumeInfo& info = {});
Volume read_volume(const std::string& manifest_path);

/// Uncompressed single-file NIfTI-1 with uint8, int16 or float32 voxels.
/// Intensities are scaled by scl_slope/scl_inter when the slope is non-zero,
/// then min-max normalized; the original range is kept in the info.
Volume read_nifti1(const std::string& path);
/// A manifest (".json") or a NIfTI-1 file (".nii"), by extension.
Volume read_any(const std::string& path);

/// Checkpoint container: 8-byte magic ("M3DNCA", version, reserved), u64
/// manifest length, JSON manifest, then little-endian binary32 blobs.
inline constexpr std::uint8_t kCheckpointVersion = 1;
std::string checkpoint_bytes(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Dataset directory: dataset.json listing each case's image and label
/// manifests, stored relative to the directory.
struct DatasetCase {
    std::string id;
    Sample sample;
};
void write_dataset(const std::string& dir, const std::vector<Sample>& samples);
std::vector<DatasetCase> read_dataset(const std::string& dir);
std::vector<Sample> samples_of(const std::vector<DatasetCase>& cases);

/// Configuration documents. Absent keys keep their defaults; unknown keys are
/// config errors.
std::string model_config_json(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& json, ModelConfig base = {});
TrainConfig parse_train_config(const std::string& json, TrainConfig base = {});
SyntheticSpec parse_synthetic_spec(const std::string& json, SyntheticSpec base = {});
/// Splits a combined document {"model": ..., "train": ..., "synth": ...}
/// into its sections (each "{}" when absent).
struct ConfigSections {
    std::string model = "{}";
    std::string train = "{}";
    std::string synth = "{}";
};
ConfigSections split_config(const std::string& json);

std::string read_text(const std::string& path);
/// Writes through a temporary file and renames it into place.
void write_text(const std::string& path, const std::string& content);

}  // namespace m3dnca::io
