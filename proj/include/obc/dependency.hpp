#pragma once

#include <cstddef>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "obc/model.hpp"

namespace obc {

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AxisRole { output_channel, bias, bn_pair, input_channel };

std::string to_string(AxisRole role);

// One scored slice of a parameter tensor. For bn_pair the slice is
// [gamma_c, beta_c] and `param` names gamma. Input-channel slices of a linear
// layer that follows a flatten cover `span` consecutive columns.
struct MemberSlice {
  std::size_t layer = 0;
  int param = kNoParam;
  AxisRole role = AxisRole::output_channel;
  std::size_t index = 0;
  std::size_t span = 1;

  bool operator==(const MemberSlice&) const = default;
};

struct ParamElement {
  std::size_t param = 0;
  std::size_t index = 0;  // flat row-major index into the parameter tensor

  bool operator==(const ParamElement&) const = default;
};

std::vector<ParamElement> member_elements(const Model& model, const MemberSlice& member);
std::string describe(const Model& model, const MemberSlice& member);

struct ConsumerRef {
  std::size_t layer = 0;
  std::size_t span = 1;  // spatial positions per channel after a flatten
};

// Channels tied together: every producer writes them, every BN normalizes
// them, every consumer reads them. Residual adds merge classes.
struct ChannelClass {
  std::string name;
  std::size_t extent = 0;
  std::vector<std::size_t> producers;
  std::vector<std::size_t> bn_layers;
  std::vector<ConsumerRef> consumers;
  bool is_protected = false;
  bool residual = false;
};

struct StructuralGroup {
  std::size_t id = 0;
  std::size_t channel_class = 0;
  std::size_t channel = 0;
  std::vector<std::size_t> members;  // indices into GroupPartition::members
};

struct GroupPartition {
  std::vector<ChannelClass> classes;
  std::vector<StructuralGroup> groups;
  std::vector<MemberSlice> members;
  std::vector<std::size_t> member_group;

  std::size_t group_count() const { return groups.size(); }
  std::size_t member_count() const { return members.size(); }
  const std::string& group_layer(const Model& model, std::size_t group) const;
};

struct PartitionOptions {
  // false mirrors "shortcuts are not pruned": classes joined at an add are protected.
  bool prune_residual = true;
};

// Channel classes in order of first appearance; layer_class, when given,
// receives the class of every layer's output.
std::vector<ChannelClass> trace_channel_classes(const Model& model, std::vector<std::size_t>* layer_class = nullptr);

GroupPartition build_partition(const Model& model, const PartitionOptions& options = {});

struct PartitionViolation {
  enum class Kind { uncovered, duplicated, foreign } kind;
  MemberSlice member;
  std::string message;
};

// Enumerates every channel slice of every conv, linear and BN layer and
// checks that prunable ones appear exactly once and protected ones never.
std::vector<PartitionViolation> validate_partition(const GroupPartition& partition, const Model& model);

void write_partition_report(std::ostream& out, const GroupPartition& partition, const Model& model);

}  // namespace obc
