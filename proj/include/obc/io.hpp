#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "obc/data.hpp"
#include "obc/dependency.hpp"
#include "obc/model.hpp"
#include "obc/pruning.hpp"
#include "obc/training.hpp"

namespace obc {

// Unreadable or malformed files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or usage.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::json;

// IDX image/label pair (MNIST layout). Images become {n, 1, h, w} in [0, 1].
Dataset read_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct DatasetSplits {
  std::string name;
  Dataset train;
  Dataset test;
};

struct SyntheticSpec {
  std::size_t classes = 10;
  Shape sample_shape{1, 8, 8};
  std::size_t train_size = 1000;
  std::size_t test_size = 300;
  double spread = 1.0;  // noise standard deviation around each class mean
  std::uint64_t seed = 0;
};

// Seeded Gaussian blobs: one random mean image per class plus isotropic noise.
DatasetSplits synthetic_blobs(const SyntheticSpec& spec);

// $OBC_DATA_DIR when set, otherwise "data".
std::filesystem::path default_data_root();

// "synthetic" generates blobs; any other name is a directory (absolute or
// under data_root) holding train-/t10k- IDX files.
DatasetSplits load_dataset(const std::string& name, const std::filesystem::path& data_root,
                           std::uint64_t synthetic_seed = 0);

inline constexpr std::uint32_t kContainerVersion = 1;

Json model_header(const Model& model);
void write_model(std::ostream& out, const Model& model);
Model read_model(std::istream& in);
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

// FNV-1a 64-bit hash, as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

Json plan_to_json(const PruningPlan& plan, const GroupPartition& partition, const ObcConfig& config);
// Rebuilds the plan against the partition it was made for; throws IoError on
// any mismatch (group count, class names, extents, plan_id).
PruningPlan plan_from_json(const Json& j, const GroupPartition& partition);

struct RunConfig {
  std::string arch = "vggtiny";
  ModelConfig model;
  std::string data = "digits";
  std::filesystem::path data_root;  // empty: default_data_root()
  std::filesystem::path out_dir = "runs/default";
  std::uint64_t seed = 0;
  ObcConfig obc;
  TrainConfig train = TrainConfig::preset("desk");
  TrainConfig finetune = TrainConfig::preset("desk-finetune");
  std::string ep_family = "vgg";

  void validate() const;
};

Json to_json(const RunConfig& config);
// Unknown keys at any level are rejected with ConfigError.
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace obc
