#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "deformpic/point_cloud.hpp"
#include "deformpic/rng.hpp"
#include "deformpic/sample.hpp"

namespace deformpic::dataset {

inline constexpr int kFormatVersion = 1;
inline constexpr int kMinPoints = 32;

// --- procedural shapes -----------------------------------------------------

/// Draws a shape kind and its parameters from `seed`.
ShapeSpec random_shape_spec(std::uint64_t seed, int n_points);
void validate(const ShapeSpec& spec);

/// Area-uniform surface samples of the shape, normalized to the unit sphere.
PointCloud generate_shape(const ShapeSpec& spec);

// --- task pairs --------------------------------------------------------------

struct TaskPair {
  PointCloud input;
  PointCloud target;
  PairProvenance provenance;
};

/// ceil(n / 2^level): 512, 256, 128, 64, 32 at n = 1024.
std::size_t reconstruction_input_size(std::size_t n_points, int level);
/// ceil(n * level * 100 / 1024): 100 .. 500 at n = 1024.
std::size_t denoising_replaced_count(std::size_t n_points, int level);
/// 20 * level degrees.
double registration_max_angle(int level);

TaskPair make_reconstruction_pair(const PointCloud& cloud, int level, Rng& rng);
TaskPair make_denoising_pair(const PointCloud& cloud, int level, Rng& rng);
TaskPair make_registration_pair(const PointCloud& cloud, int level, Rng& rng);
TaskPair make_pair(Task task, const PointCloud& cloud, int level, Rng& rng);

/// Rebuilds the input of a pair from its clean target and provenance.
PointCloud regenerate_input(Task task, const PointCloud& target, int level, const PairProvenance& provenance);

// --- datasets ----------------------------------------------------------------

struct DatasetConfig {
  int samples_per_cell = 2;
  int n_points = 1024;
  int patches = 16;     // m, recorded for downstream consumers
  int patch_size = 8;   // k
  std::uint64_t seed = 0;
  std::vector<Task> tasks{kAllTasks.begin(), kAllTasks.end()};
  std::vector<int> levels{1, 2, 3, 4, 5};

  std::size_t record_count() const { return static_cast<std::size_t>(samples_per_cell) * tasks.size() * levels.size(); }
  void validate() const;
};

struct RecordEntry {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t crc32 = 0;
  Task task = Task::reconstruction;
  int level = 1;
  Provenance provenance;
};

struct DatasetManifest {
  int version = kFormatVersion;
  int n_points = 0;
  std::vector<Task> tasks;
  std::vector<int> levels;
  std::map<std::string, std::vector<int>> counts;  // task name -> records per level
  std::uint64_t seed = 0;
  int patches = 0;
  int patch_size = 0;
  std::vector<RecordEntry> records;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<InContextSample> records;
};

/// Deterministic record `index` of the dataset described by `config`.
InContextSample generate_record(const DatasetConfig& config, std::size_t index);

/// Generates every record (in parallel) in index order, with the manifest
/// filled in as save_dataset would write it.
Dataset generate_dataset(const DatasetConfig& config, int threads = 1);

/// Writes records.bin and manifest.json into `dir`, filling offsets/CRCs.
DatasetManifest save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// generate_dataset + save_dataset.
DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& dir, int threads = 1);

/// Reads and verifies a dataset directory.
Dataset load_dataset(const std::filesystem::path& dir);

/// Byte encoding of one record: four clouds, each u32 count + count*3 LE f32.
std::vector<std::uint8_t> encode_record(const InContextSample& sample);
void decode_record(const std::uint8_t* data, std::size_t length, InContextSample& out);

std::uint32_t crc32(const std::uint8_t* data, std::size_t length);

/// Stable identifier of a dataset (CRC32 of its canonical manifest), hex.
std::string fingerprint(const DatasetManifest& manifest);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);

/// Deterministic ~10% held-out split keyed on the record index.
bool is_heldout(std::size_t record_index);

}  // namespace deformpic::dataset
