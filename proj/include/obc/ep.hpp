#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "obc/pruning.hpp"

namespace obc {

class EpError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpInsertResult {
  Model model;
  // Channel classes that could not host a compressor pair and were cut naively.
  std::vector<std::string> fallback_classes;
};

// For every pruned channel class: a compressor after each producer (before
// its BN, which is cut to the kept channels) and a decompressor in front of
// each consumer, ahead of any flatten. C = D = select_rows(O, keep).
EpInsertResult insert_ep(const Model& model, const GroupPartition& partition, const PruningPlan& plan);

// Folds C into every producer (W x_1 C, b <- C b) and D into every consumer
// (W x_2 D), then deletes the compressor layers and their parameters.
Model merge_ep(const Model& ep_model);

struct ParameterGroups {
  std::vector<std::size_t> ep;    // C and D of every site
  std::vector<std::size_t> rest;  // every other trainable parameter
};

ParameterGroups ep_parameter_registry(const Model& ep_model);

}  // namespace obc
