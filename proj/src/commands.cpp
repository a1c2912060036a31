#include "obc/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "obc/ep.hpp"
#include "obc/oracles.hpp"

namespace obc {

namespace fs = std::filesystem;

namespace {

DatasetSplits load_data(const RunConfig& c) { return load_dataset(c.data, c.data_root, c.seed); }

Model require_model(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("model container '" + path.string() + "' does not exist");
  return load_model(path);
}

void check_data_matches(const Model& m, const Dataset& d) {
  if (d.sample_shape() != m.input_shape) throw ConfigError("dataset sample shape does not match the model input");
  if (d.num_classes > m.num_classes) throw ConfigError("dataset has more classes than the model outputs");
}

void write_json(const fs::path& path, const Json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream s;
  write_history_csv(s, history);
  return s.str();
}

Json read_json(const fs::path& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace

void cmd_train(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto data = load_data(config);
  ModelConfig mc = config.model;
  mc.input_shape = data.train.sample_shape();
  mc.num_classes = data.train.num_classes;
  mc.seed = config.seed;
  auto model = build_model(config.arch, mc);
  auto tc = config.train;
  tc.seed = config.seed;
  const auto result = train(std::move(model), data.train, data.test, tc);
  const auto e = evaluate(result.model, data.test);

  save_model(config.out_dir / "model.obcm", result.model);
  write_file_atomic(config.out_dir / "history.csv", history_csv(result.history));
  write_json(config.out_dir / "config.json", to_json(config));
  write_json(config.out_dir / "metrics.json", {{"command", "train"},
                                               {"arch", config.arch},
                                               {"data", config.data},
                                               {"seed", config.seed},
                                               {"accuracy", e.accuracy},
                                               {"loss", e.loss},
                                               {"macs", macs_count(result.model)},
                                               {"params", result.model.trainable_count()}});
  log << "trained " << config.arch << " on " << data.name << " for " << tc.epochs << " epochs\n";
  log << "eval accuracy: " << fixed(e.accuracy, 4) << " loss: " << fixed(e.loss, 4) << "\n";
}

void cmd_prune(const RunConfig& config, const fs::path& baseline, bool fidelity, std::ostream& log) {
  config.validate();
  const auto model = require_model(baseline);
  if (!model.ep_sites.empty()) throw ConfigError("the baseline model already carries compressor sites");
  const auto data = load_data(config);
  check_data_matches(model, data.train);
  auto obc_cfg = config.obc;
  obc_cfg.seed = config.seed;
  obc_cfg.saliency.seed = config.seed;
  const auto partition = build_partition(model, obc_cfg.partition);

  std::ostringstream scores;
  write_score_header(scores);
  std::vector<double> first_scores;
  const auto observer = [&](std::size_t step, const std::vector<GroupScore>& s) {
    write_score_rows(scores, step, s, partition, model, obc_cfg.saliency.criterion);
    if (step == 0) {
      first_scores.assign(partition.group_count(), 0.0);
      for (const auto& g : s) first_scores[g.group] = g.score;
    }
  };
  PruningPlan plan;
  try {
    plan = run_ranking(model, data.train, obc_cfg, observer);
  } catch (const PruningError& e) {
    throw PruningError("tau " + std::to_string(obc_cfg.tau) + " is unreachable for this model: " + e.what());
  }

  Model pruned;
  std::vector<std::string> fallback;
  if (obc_cfg.ep) {
    auto r = insert_ep(model, partition, plan);
    pruned = std::move(r.model);
    fallback = std::move(r.fallback_classes);
  } else {
    pruned = apply_surgery(model, partition, plan);
  }
  const auto before = evaluate(model, data.test);
  const auto after = evaluate(pruned, data.test);
  const auto plan_json = plan_to_json(plan, partition, obc_cfg);
  const double speedup = static_cast<double>(plan.macs_original) / static_cast<double>(plan.macs_final);

  Json metrics = {{"command", "prune"},
                  {"arch", model.arch},
                  {"data", config.data},
                  {"seed", config.seed},
                  {"criterion", to_string(obc_cfg.saliency.criterion)},
                  {"tau", obc_cfg.tau},
                  {"ep", obc_cfg.ep},
                  {"plan_id", plan_json["plan_id"]},
                  {"group_count", plan.group_count},
                  {"pruned_groups", plan.pruned.size()},
                  {"pruned_fraction", static_cast<double>(plan.pruned.size()) / static_cast<double>(plan.group_count)},
                  {"macs_original", plan.macs_original},
                  {"macs_final", plan.macs_final},
                  {"speedup", speedup},
                  {"accuracy_baseline", before.accuracy},
                  {"accuracy_pruned", after.accuracy},
                  {"loss_pruned", after.loss},
                  {"fallback_classes", fallback}};
  if (fidelity) {
    auto probe = model;
    const auto batches = sample_batches(data.train, obc_cfg.samples, obc_cfg.batch_size, obc_cfg.seed);
    const auto brute = brute_force_all(probe, partition, batches);
    const auto f = ranking_fidelity(first_scores, brute);
    Json topk = Json::object();
    for (const auto& t : f.top_k) topk[t.label] = t.overlap;
    metrics["fidelity"] = {{"spearman", f.spearman}, {"top_k", topk}};
    log << "ranking fidelity vs brute force: spearman " << fixed(f.spearman, 4) << "\n";
  }

  std::ostringstream steps;
  steps << "step,macs_before,macs_after,groups\n";
  for (const auto& s : plan.steps) steps << s.step << "," << s.macs_before << "," << s.macs_after << "," << s.groups.size() << "\n";
  std::ostringstream report;
  write_partition_report(report, partition, model);

  write_json(config.out_dir / "plan.json", plan_json);
  save_model(config.out_dir / "model.obcm", pruned);
  write_file_atomic(config.out_dir / "scores.csv", scores.str());
  write_file_atomic(config.out_dir / "steps.csv", steps.str());
  write_file_atomic(config.out_dir / "partition.txt", report.str());
  write_json(config.out_dir / "config.json", to_json(config));
  write_json(config.out_dir / "metrics.json", metrics);

  log << "criterion " << to_string(obc_cfg.saliency.criterion) << ": pruned " << plan.pruned.size() << " of "
      << plan.group_count << " groups in " << plan.steps.size() << " steps\n";
  log << "MACs before: " << plan.macs_original << " after: " << plan.macs_final << " (" << fixed(speedup, 3)
      << "x)\n";
  log << "accuracy before: " << fixed(before.accuracy, 4) << " after (no fine-tuning): " << fixed(after.accuracy, 4)
      << "\n";
  log << "plan " << plan_json["plan_id"].get<std::string>() << "\n";
}

void cmd_finetune(const RunConfig& config, const fs::path& pruned_path, const fs::path& plan_path, std::ostream& log) {
  config.validate();
  auto model = require_model(pruned_path);
  const auto data = load_data(config);
  check_data_matches(model, data.train);
  auto tc = config.finetune;
  tc.seed = config.seed;
  tc.apply_ep_preset(config.ep_family);
  const bool ep = !model.ep_sites.empty();
  auto result = train(std::move(model), data.train, data.test, tc);

  Model final_model = std::move(result.model);
  double merge_dev = 0.0;
  if (ep) {
    const auto merged = merge_ep(final_model);
    const auto n = std::min<std::size_t>(data.test.size(), 256);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const auto probe = make_batch(data.test, idx);
    const auto a = forward(final_model, probe.inputs);
    const auto b = forward(merged, probe.inputs);
    double scale = 1.0;
    for (double v : a.data()) scale = std::max(scale, std::abs(v));
    merge_dev = max_abs_diff(a, b);
    if (!(merge_dev <= 1e-9 * scale)) {
      throw InvariantError("merge changed the network output by " + std::to_string(merge_dev) + "; model not saved");
    }
    final_model = merged;
  }
  const auto macs = macs_count(final_model);
  const auto plan_file = plan_path.empty() ? pruned_path.parent_path() / "plan.json" : plan_path;
  Json metrics = {{"command", "finetune"},
                  {"arch", final_model.arch},
                  {"data", config.data},
                  {"seed", config.seed},
                  {"ep", ep},
                  {"macs", macs},
                  {"merge_max_abs", merge_dev}};
  if (fs::exists(plan_file)) {
    const auto plan = read_json(plan_file);
    const auto predicted = plan.at("macs_final").get<std::uint64_t>();
    if (macs != predicted) {
      throw InvariantError("fine-tuned model has " + std::to_string(macs) + " MACs, the plan predicted " +
                           std::to_string(predicted));
    }
    metrics["plan_id"] = plan.at("plan_id");
  } else if (!plan_path.empty()) {
    throw ConfigError("plan file '" + plan_path.string() + "' does not exist");
  }
  if (const auto prune_metrics = pruned_path.parent_path() / "metrics.json"; fs::exists(prune_metrics)) {
    const auto pm = read_json(prune_metrics);
    for (const char* key : {"criterion", "tau", "speedup", "macs_original", "pruned_fraction", "accuracy_pruned"}) {
      if (pm.contains(key)) metrics[key] = pm[key];
    }
  }
  const auto e = evaluate(final_model, data.test);
  metrics["accuracy"] = e.accuracy;
  metrics["accuracy_finetuned"] = e.accuracy;
  metrics["loss"] = e.loss;

  save_model(config.out_dir / "model.obcm", final_model);
  write_file_atomic(config.out_dir / "history.csv", history_csv(result.history));
  write_json(config.out_dir / "config.json", to_json(config));
  write_json(config.out_dir / "metrics.json", metrics);
  if (ep) log << "merged " << final_model.layers.size() << "-layer model, max output change " << merge_dev << "\n";
  log << "fine-tuned accuracy: " << fixed(e.accuracy, 4) << " MACs: " << macs << "\n";
}

Evaluation cmd_eval(const RunConfig& config, const fs::path& path, bool partition, std::ostream& log) {
  const auto model = require_model(path);
  const auto data = load_data(config);
  check_data_matches(model, data.test);
  const auto e = evaluate(model, data.test);
  log << "accuracy " << fixed(e.accuracy, 4) << " loss " << fixed(e.loss, 6) << " macs " << macs_count(model)
      << " params " << model.trainable_count() << " compressor_sites " << model.ep_sites.size() << "\n";
  if (partition) {
    if (!model.ep_sites.empty()) throw ConfigError("partition reports need a model without compressor sites");
    write_partition_report(log, build_partition(model, config.obc.partition), model);
  }
  return e;
}

namespace {

struct ScoreRow {
  std::size_t step;
  double score;
};

std::vector<ScoreRow> read_scores(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "step,group,layer,score,criterion") throw IoError(path.string() + ": unexpected score header");
  std::vector<ScoreRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw IoError(path.string() + ": malformed score row '" + line + "'");
    rows.push_back({std::stoul(f[0]), std::stod(f[3])});
  }
  return rows;
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::string cell(const Json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return "";
  std::ostringstream s;
  s << std::setprecision(17);
  if (j[key].is_string()) {
    s << j[key].get<std::string>();
  } else if (j[key].is_boolean()) {
    s << (j[key].get<bool>() ? "true" : "false");
  } else if (j[key].is_number_unsigned()) {
    s << j[key].get<std::uint64_t>();
  } else {
    s << j[key].get<double>();
  }
  return s.str();
}

}  // namespace

void cmd_report(const std::vector<fs::path>& runs, const fs::path& out, std::ostream& log) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  struct Entry {
    std::string criterion;
    double speedup;
    std::string run;
    Json metrics;
  };
  std::vector<Entry> entries;
  for (const auto& r : runs) {
    const auto m = r / "metrics.json";
    if (!fs::exists(m)) throw ConfigError("run directory '" + r.string() + "' has no metrics.json");
    auto j = read_json(m);
    entries.push_back({j.value("criterion", std::string{}), j.value("speedup", 1.0), r.string(), j});
  }
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return std::tie(a.criterion, a.speedup) < std::tie(b.criterion, b.speedup);
  });

  std::ostringstream cmp;
  cmp << "criterion,speedup,macs,macs_fraction,pruned_fraction,accuracy_pruned,accuracy_finetuned,ep,command,run\n";
  for (const auto& e : entries) {
    const auto& j = e.metrics;
    std::string macs = cell(j, "macs_final");
    if (macs.empty()) macs = cell(j, "macs");
    std::string fraction;
    if (j.contains("speedup")) fraction = fixed(1.0 / j["speedup"].get<double>(), 6);
    cmp << e.criterion << "," << (j.contains("speedup") ? fixed(e.speedup, 4) : "") << "," << macs << "," << fraction
        << "," << cell(j, "pruned_fraction") << "," << cell(j, "accuracy_pruned") << ","
        << cell(j, "accuracy_finetuned") << "," << cell(j, "ep") << "," << cell(j, "command") << "," << e.run << "\n";
  }

  std::ostringstream fid;
  fid << "criterion,spearman,top_5,top_10,top_25pct,run\n";
  for (const auto& e : entries) {
    if (!e.metrics.contains("fidelity")) continue;
    const auto& f = e.metrics["fidelity"];
    fid << e.criterion << "," << cell(f, "spearman") << "," << cell(f["top_k"], "5") << "," << cell(f["top_k"], "10")
        << "," << cell(f["top_k"], "25%") << "," << e.run << "\n";
  }

  std::ostringstream summary;
  summary << std::setprecision(17);
  summary << "run,step,count,min,q25,median,q75,max,mean\n";
  for (const auto& e : entries) {
    const auto path = fs::path(e.run) / "scores.csv";
    if (!fs::exists(path)) continue;
    std::map<std::size_t, std::vector<double>> by_step;
    for (const auto& row : read_scores(path)) by_step[row.step].push_back(row.score);
    for (auto& [step, v] : by_step) {
      std::sort(v.begin(), v.end());
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      summary << e.run << "," << step << "," << v.size() << "," << v.front() << "," << quantile(v, 0.25) << ","
              << quantile(v, 0.5) << "," << quantile(v, 0.75) << "," << v.back() << "," << mean << "\n";
    }
  }

  write_file_atomic(out / "comparison.csv", cmp.str());
  write_file_atomic(out / "fidelity.csv", fid.str());
  write_file_atomic(out / "score_summary.csv", summary.str());
  log << "report over " << entries.size() << " run(s) written to " << out.string() << "\n";
}

namespace {

struct CommonFlags {
  std::string config;
  std::string data, data_root, out;
  std::uint64_t seed = 0;
  CLI::Option* data_opt = nullptr;
  CLI::Option* root_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config, "RunConfig JSON file")->check(CLI::ExistingFile);
    data_opt = app->add_option("--data", data, "dataset: 'synthetic' or an IDX directory name/path");
    root_opt = app->add_option("--data-root", data_root, "directory holding named datasets (default $OBC_DATA_DIR or ./data)");
    out_opt = app->add_option("--out", out, "output directory");
    seed_opt = app->add_option("--seed", seed, "seed for initialisation, sampling and shuffling");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
    if (data_opt->count()) c.data = data;
    if (root_opt->count()) c.data_root = data_root;
    if (out_opt->count()) c.out_dir = out;
    if (seed_opt->count()) c.seed = seed;
    return c;
  }
};

template <typename T, typename U>
void apply(const CLI::Option* opt, const T& value, U& target) {
  if (opt->count()) target = value;
}

void add_train_flags(CLI::App* app, TrainConfig& t, std::vector<CLI::Option*>& opts) {
  opts.push_back(app->add_option("--epochs", t.epochs, "training epochs"));
  opts.push_back(app->add_option("--batch-size", t.batch_size, "mini-batch size"));
  opts.push_back(app->add_option("--lr", t.lr, "base learning rate"));
  opts.push_back(app->add_option("--momentum", t.momentum, "SGD momentum"));
  opts.push_back(app->add_option("--weight-decay", t.weight_decay, "weight decay"));
  opts.push_back(app->add_option("--milestones", t.milestones, "epochs at which the step schedule decays the rate"));
  opts.push_back(app->add_option("--gamma", t.gamma, "step-schedule decay factor"));
}

// Copies the flags that were given on the command line into `target`.
void merge_train_flags(const TrainConfig& flags, const std::vector<CLI::Option*>& opts, TrainConfig& target,
                       const std::string& schedule, const CLI::Option* schedule_opt) {
  apply(opts[0], flags.epochs, target.epochs);
  apply(opts[1], flags.batch_size, target.batch_size);
  apply(opts[2], flags.lr, target.lr);
  apply(opts[3], flags.momentum, target.momentum);
  apply(opts[4], flags.weight_decay, target.weight_decay);
  apply(opts[5], flags.milestones, target.milestones);
  apply(opts[6], flags.gamma, target.gamma);
  if (schedule_opt->count()) {
    try {
      target.schedule = schedule_from_string(schedule);
    } catch (const TrainError& e) {
      throw ConfigError(e.what());
    }
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured pruning with the Jacobian criterion and equivalent pruning"};
  app.require_subcommand(1);

  CommonFlags train_common, prune_common, ft_common, eval_common;

  auto* train_cmd = app.add_subcommand("train", "train a baseline model");
  train_common.add(train_cmd);
  std::string arch;
  std::vector<std::size_t> widths;
  auto* arch_opt = train_cmd->add_option("--arch", arch, "mlp | vggtiny | restiny");
  auto* widths_opt = train_cmd->add_option("--widths", widths, "layer widths");
  TrainConfig train_flags;
  std::vector<CLI::Option*> train_opts;
  add_train_flags(train_cmd, train_flags, train_opts);
  std::string train_schedule;
  auto* train_sched_opt = train_cmd->add_option("--schedule", train_schedule, "constant | step | cosine");

  auto* prune_cmd = app.add_subcommand("prune", "rank and prune structural groups");
  prune_common.add(prune_cmd);
  std::string baseline;
  prune_cmd->add_option("--model", baseline, "baseline model container")->required();
  std::string criterion, aggregator, normalizer, family;
  ObcConfig of;
  auto* crit_opt = prune_cmd->add_option("--criterion", criterion,
                                         "jacobian | taylor | diag-hessian-fisher | l1 | l2 | bn-scale | fpgm | whc | random");
  auto* agg_opt = prune_cmd->add_option("--aggregator", aggregator, "sum | mean | max");
  auto* norm_opt = prune_cmd->add_option("--normalizer", normalizer, "none | layer-mean");
  auto* tau_opt = prune_cmd->add_option("--tau", of.tau, "target MACs fraction");
  auto* p_opt = prune_cmd->add_option("--p,--step", of.step, "fraction of groups pruned per step");
  auto* n_opt = prune_cmd->add_option("--N,--samples", of.samples, "Jacobian batches per step");
  auto* bs_opt = prune_cmd->add_option("--batch-size", of.batch_size, "samples per Jacobian batch");
  auto* frac_opt = prune_cmd->add_option("--groups-fraction", of.target_group_fraction,
                                         "stop after this fraction of groups instead of at tau");
  bool ep_flag = false, bn_diag = false, no_residual = false, reuse = false, fidelity = false;
  auto* ep_opt = prune_cmd->add_flag("--ep", ep_flag, "insert compressor/decompressor pairs instead of cutting");
  auto* diag_opt = prune_cmd->add_flag("--bn-diagonal", bn_diag, "drop the gamma-beta cross term");
  auto* res_opt = prune_cmd->add_flag("--no-residual", no_residual, "protect channel classes joined by additions");
  auto* reuse_opt = prune_cmd->add_flag("--reuse-rows", reuse, "compute Jacobian rows once for all steps");
  prune_cmd->add_flag("--fidelity", fidelity, "compare first-step scores with the brute-force oracle");

  auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a pruned model, merging compressors afterwards");
  ft_common.add(ft_cmd);
  std::string pruned, plan;
  ft_cmd->add_option("--model", pruned, "pruned model container")->required();
  ft_cmd->add_option("--plan", plan, "plan JSON (default: plan.json next to the model)");
  TrainConfig ft_flags;
  std::vector<CLI::Option*> ft_opts;
  add_train_flags(ft_cmd, ft_flags, ft_opts);
  std::string ft_schedule;
  auto* ft_sched_opt = ft_cmd->add_option("--schedule", ft_schedule, "constant | step | cosine");
  auto* fam_opt = ft_cmd->add_option("--ep-family", family, "compressor learning-rate preset: vgg | resnet");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on the test split");
  eval_common.add(eval_cmd);
  std::string eval_model;
  bool show_partition = false;
  eval_cmd->add_option("--model", eval_model, "model container")->required();
  eval_cmd->add_flag("--partition", show_partition, "print the channel classes and structural groups");

  auto* report_cmd = app.add_subcommand("report", "summarise completed runs as CSV tables");
  std::vector<std::string> runs;
  std::string report_out = "report";
  report_cmd->add_option("runs", runs, "run directories")->required();
  report_cmd->add_option("--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (train_cmd->parsed()) {
      auto c = train_common.resolve();
      apply(arch_opt, arch, c.arch);
      apply(widths_opt, widths, c.model.widths);
      merge_train_flags(train_flags, train_opts, c.train, train_schedule, train_sched_opt);
      cmd_train(c, out);
    } else if (prune_cmd->parsed()) {
      auto c = prune_common.resolve();
      apply(tau_opt, of.tau, c.obc.tau);
      apply(p_opt, of.step, c.obc.step);
      apply(n_opt, of.samples, c.obc.samples);
      apply(bs_opt, of.batch_size, c.obc.batch_size);
      apply(frac_opt, of.target_group_fraction, c.obc.target_group_fraction);
      apply(ep_opt, ep_flag, c.obc.ep);
      apply(diag_opt, bn_diag, c.obc.saliency.bn_diagonal);
      apply(reuse_opt, reuse, c.obc.reuse_rows);
      if (res_opt->count()) c.obc.partition.prune_residual = false;
      try {
        if (crit_opt->count()) c.obc.saliency.criterion = criterion_from_string(criterion);
        if (agg_opt->count()) c.obc.saliency.aggregator = aggregator_from_string(aggregator);
        if (norm_opt->count()) c.obc.saliency.normalizer = normalizer_from_string(normalizer);
      } catch (const SaliencyError& e) {
        throw ConfigError(e.what());
      }
      cmd_prune(c, baseline, fidelity, out);
    } else if (ft_cmd->parsed()) {
      auto c = ft_common.resolve();
      merge_train_flags(ft_flags, ft_opts, c.finetune, ft_schedule, ft_sched_opt);
      apply(fam_opt, family, c.ep_family);
      cmd_finetune(c, pruned, plan, out);
    } else if (eval_cmd->parsed()) {
      cmd_eval(eval_common.resolve(), eval_model, show_partition, out);
    } else if (report_cmd->parsed()) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      cmd_report(dirs, report_out, out);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  } catch (const InvariantError& e) {
    err << "invariant violated: " << e.what() << "\n";
    return exit_invariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_runtime;
  }
  return exit_ok;
}

}  // namespace obc
