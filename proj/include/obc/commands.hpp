#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "obc/io.hpp"

namespace obc {

// A computed result contradicts an equivalence the pipeline relies on.
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_runtime = 3, exit_invariant = 4 };

// Writes model.obcm, history.csv, config.json and metrics.json to config.out_dir.
void cmd_train(const RunConfig& config, std::ostream& log);

// Writes plan.json, model.obcm (surgered, or with compressor sites when
// config.obc.ep), scores.csv, steps.csv, partition.txt, config.json and
// metrics.json. With `fidelity`, the first-step scores are compared with the
// brute-force oracle and the result is added to metrics.json.
void cmd_prune(const RunConfig& config, const std::filesystem::path& baseline, bool fidelity, std::ostream& log);

// Fine-tunes a pruned model. Models with compressor sites are merged after
// training and the merge is checked on the test split before saving. When a
// plan is available its predicted MACs must match the final model.
void cmd_finetune(const RunConfig& config, const std::filesystem::path& pruned, const std::filesystem::path& plan,
                  std::ostream& log);

Evaluation cmd_eval(const RunConfig& config, const std::filesystem::path& model, bool partition, std::ostream& log);

// Writes comparison.csv, fidelity.csv and score_summary.csv to `out`.
void cmd_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out, std::ostream& log);

// Full command-line entry point; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace obc
