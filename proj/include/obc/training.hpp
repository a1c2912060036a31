#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "obc/data.hpp"
#include "obc/model.hpp"

namespace obc {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Schedule { constant, step, cosine };

std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // compressor/decompressor parameters
  double ep_lr = 0.002;
  double ep_weight_decay = 5e-4;
  Schedule schedule = Schedule::step;
  std::vector<std::size_t> milestones{6, 8};
  double gamma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(std::size_t epoch, double base) const;

  // desk: 10 epochs baseline / 5 fine-tune; cifar: the 100-epoch step schedule.
  static TrainConfig preset(const std::string& name);
  // C/D rates by family: "vgg" (lr 0.002, wd 5e-4) or "resnet" (lr 0.02, wd 0).
  void apply_ep_preset(const std::string& family);
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct TrainResult {
  Model model;
  std::vector<EpochRecord> history;
};

// SGD with momentum; BN in train mode with running-stat updates. `eval` may
// be empty, in which case only the train split is recorded.
TrainResult train(Model model, const Dataset& data, const Dataset& eval, const TrainConfig& config);

// Top-1 accuracy and mean cross-entropy with BN in eval mode.
Evaluation evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 256);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

}  // namespace obc
