#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sgdph/nn.hpp"
#include "sgdph/optim.hpp"
#include "sgdph/tensor.hpp"

namespace sgdph::harness {

struct Dataset {
  Tensor<double> inputs;             // [n, ...sample]
  std::vector<std::int32_t> labels;  // n entries in [0, classes)
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
};

struct Split {
  Dataset train;
  Dataset test;
};

// IDX files: big-endian header (magic 0x00000803 images / 0x00000801
// labels, then extents) followed by raw bytes. Images come back scaled to
// [0, 1] with shape [n, 1, rows, cols]; subset_n > 0 keeps the first
// subset_n examples. Errors are IdxError carrying the byte offset.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t subset_n = 0);

struct BlobsSpec {
  std::size_t n = 1000;
  std::size_t dims = 8;
  std::size_t classes = 2;
  double noise = 0.5;
  std::uint64_t seed = 1;
};

// Gaussian clusters around centers drawn N(0, I) and kept at pairwise
// distance >= 3. Sample i belongs to class i % classes; every fifth sample
// (i % 5 == 4) goes to the test split.
Split gen_blobs(const BlobsSpec& spec);

enum class OptimizerKind { kSgdPh, kSgdm };
enum class DType { kF32, kF64 };

struct RunConfig {
  std::string model = "mlp-bn";
  nn::ModelOptions model_options;

  std::string dataset = "blobs";  // blobs | idx
  BlobsSpec blobs;
  std::string idx_train_images = "data/mnist-subset/train-images-idx3-ubyte";
  std::string idx_train_labels = "data/mnist-subset/train-labels-idx1-ubyte";
  std::string idx_test_images = "data/mnist-subset/t10k-images-idx3-ubyte";
  std::string idx_test_labels = "data/mnist-subset/t10k-labels-idx1-ubyte";
  std::size_t idx_subset_n = 0;

  OptimizerKind optimizer = OptimizerKind::kSgdPh;
  optim::SgdPhConfig sgdph;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double lr_decay_factor = 0.1;
  std::size_t lr_decay_every = 0;  // 0: max(1, 3 * epochs / 10)
  std::uint64_t seed = 1;
  DType dtype = DType::kF32;

  std::string metrics_path = "metrics.jsonl";  // empty: no metrics file
  std::string checkpoint_path;                 // empty: no checkpoint
  bool log_wall_clock = false;                 // wall_ms is 0 unless set

  // Throws ConfigError.
  void validate() const;
  std::size_t decay_interval() const;
};

// Flat key = value lines, '#' starts a comment. Unknown keys, malformed
// lines and unparsable values throw ConfigError naming the line.
RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
// "key=value", same keys and rules as the file format.
void apply_override(RunConfig& cfg, std::string_view assignment);
std::vector<std::string> config_keys();
std::string to_string(OptimizerKind kind);
std::string to_string(DType dtype);

Split load_dataset(const RunConfig& cfg);

struct EpochSummary {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double test_loss = 0;
  double test_accuracy = 0;
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::size_t steps = 0;
  std::size_t hessian_calls = 0;
  std::size_t channelwise_parameters = 0;
  // Smallest M_H entry seen after any step; nullopt when no Hessian momentum exists.
  std::optional<double> min_hessian_momentum;
};

// Runs the configured optimizer, appending one JSON record per line to
// `metrics`: a "train" record per step, then "train_eval" and "test"
// records after each epoch. Throws TrainingDiverged on a non-finite loss,
// after writing an "abort" record.
TrainResult train(const RunConfig& cfg, const Split& data, std::ostream& metrics);
// Loads the dataset, writes metrics_path and checkpoint_path if set.
TrainResult run(const RunConfig& cfg);

// Checkpoint layout, all integers little-endian:
//   "SGDPHCK1"                         8 bytes
//   u32 version (1), u32 scalar bytes (4 or 8), u32 entry count
//   per entry: u32 name length, name bytes, u32 rank, rank x u64 extents
//   then every entry's values in table order, IEEE-754 little-endian.
// Entries are the parameters in model order, then the BN running statistics.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

template <class T>
void write_checkpoint(const std::filesystem::path& path, nn::Model<T>& model);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path,
                                             std::size_t* scalar_bytes = nullptr);

struct CompareRow {
  std::size_t epoch = 0;
  double acc_a = 0;
  double acc_b = 0;
};

struct CompareResult {
  std::vector<CompareRow> rows;
  double final_delta = 0;  // acc_a - acc_b in the last row
};

// Trains both configs (which must share model and dataset) and writes CSV:
// "epoch,acc_a,acc_b", one row per epoch of test accuracy, then
// "delta,<acc_a - acc_b>".
CompareResult compare(const RunConfig& a, const RunConfig& b, std::ostream& csv);

}  // namespace sgdph::harness
