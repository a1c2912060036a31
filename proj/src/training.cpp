#include "obc/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "obc/autodiff.hpp"

namespace obc {

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::constant: return "constant";
    case Schedule::step: return "step";
    case Schedule::cosine: return "cosine";
  }
  return "unknown";
}

Schedule schedule_from_string(const std::string& name) {
  if (name == "constant") return Schedule::constant;
  if (name == "step") return Schedule::step;
  if (name == "cosine") return Schedule::cosine;
  throw TrainError("unknown lr schedule '" + name + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw TrainError("batch size must be positive");
  if (!(lr > 0.0) || !(ep_lr > 0.0)) throw TrainError("learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw TrainError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0 || ep_weight_decay < 0.0) throw TrainError("weight decay must be non-negative");
  if (!std::is_sorted(milestones.begin(), milestones.end()) ||
      std::adjacent_find(milestones.begin(), milestones.end()) != milestones.end()) {
    throw TrainError("lr milestones must be strictly increasing");
  }
}

double TrainConfig::lr_at(std::size_t epoch, double base) const {
  switch (schedule) {
    case Schedule::constant:
      return base;
    case Schedule::step: {
      double r = base;
      for (auto m : milestones)
        if (epoch >= m) r *= gamma;
      return r;
    }
    case Schedule::cosine:
      return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
  }
  return base;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  TrainConfig c;
  if (name == "desk" || name == "desk-baseline") return c;
  if (name == "desk-finetune") {
    c.epochs = 5;
    c.lr = 0.01;
    c.milestones = {3, 4};
    return c;
  }
  if (name == "cifar") {
    c.epochs = 100;
    c.batch_size = 128;
    c.lr = 0.01;
    c.milestones = {60, 80};
    return c;
  }
  throw TrainError("unknown training preset '" + name + "'");
}

void TrainConfig::apply_ep_preset(const std::string& family) {
  if (family == "vgg") {
    ep_lr = 0.002;
    ep_weight_decay = 5e-4;
  } else if (family == "resnet") {
    ep_lr = 0.02;
    ep_weight_decay = 0.0;
  } else {
    throw TrainError("unknown compressor preset '" + family + "' (expected vgg or resnet)");
  }
}

Evaluation evaluate(const Model& model, const Dataset& data, std::size_t batch_size) {
  Evaluation e;
  if (data.empty()) return e;
  double loss_sum = 0.0;
  for (const auto& batch : sequential_batches(data, batch_size)) {
    const auto logits = forward(model, batch.inputs, BnMode::eval);
    const auto k = logits.shape()[1];
    for (std::size_t n = 0; n < batch.size(); ++n) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (logits.at(n, c) > logits.at(n, best)) best = c;
      e.correct += best == batch.labels[n];
    }
    loss_sum += loss_from_logits(LossKind::cross_entropy, logits, batch.labels) * static_cast<double>(batch.size());
    e.total += batch.size();
  }
  e.accuracy = static_cast<double>(e.correct) / static_cast<double>(e.total);
  e.loss = loss_sum / static_cast<double>(e.total);
  return e;
}

TrainResult train(Model model, const Dataset& data, const Dataset& eval, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw TrainError("training set is empty");
  TrainResult result;

  std::set<std::size_t> ep_params;
  for (const auto& s : model.ep_sites) {
    ep_params.insert(s.compressor);
    ep_params.insert(s.decompressor);
  }
  std::vector<Tensor> velocity(model.params.size());
  for (std::size_t p = 0; p < model.params.size(); ++p)
    if (model.params[p].trainable) velocity[p] = Tensor(model.params[p].value.shape());

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = config.lr_at(epoch, config.lr);
    const double ep_lr = config.lr_at(epoch, config.ep_lr);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const auto end = std::min(order.size(), start + config.batch_size);
      if (end - start < 2 && start > 0) break;  // a single sample has no batch statistics
      const auto batch = make_batch(data, std::span<const std::size_t>(order).subspan(start, end - start));
      LossResult fl;
      try {
        fl = forward_loss(model, batch, BnMode::train);
      } catch (const NumericError& e) {
        throw TrainError("training diverged at epoch " + std::to_string(epoch) + ", sample " +
                         std::to_string(start) + ": " + e.what());
      }
      const auto& logits = fl.tape.logits();
      for (std::size_t n = 0; n < batch.size(); ++n) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.shape()[1]; ++c)
          if (logits.at(n, c) > logits.at(n, best)) best = c;
        correct += best == batch.labels[n];
      }
      loss_sum += fl.loss * static_cast<double>(batch.size());
      seen += batch.size();
      update_running_stats(model, fl.tape);
      const auto grads = backward_params(fl.tape);
      for (std::size_t p = 0; p < model.params.size(); ++p) {
        if (!model.params[p].trainable) continue;
        const bool is_ep = ep_params.count(p) > 0;
        const double rate = is_ep ? ep_lr : lr;
        const double wd = is_ep ? config.ep_weight_decay : config.weight_decay;
        auto w = model.params[p].value.data();
        auto v = velocity[p].data();
        const auto g = grads[p].data();
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = config.momentum * v[i] + g[i] + wd * w[i];
          w[i] -= rate * v[i];
        }
      }
    }
    result.history.push_back({epoch, "train", loss_sum / static_cast<double>(seen),
                              static_cast<double>(correct) / static_cast<double>(seen)});
    if (!eval.empty()) {
      const auto e = evaluate(model, eval);
      result.history.push_back({epoch, "eval", e.loss, e.accuracy});
    }
  }
  result.model = std::move(model);
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  const auto old = out.precision(17);
  out << "epoch,split,loss,accuracy\n";
  for (const auto& r : history) out << r.epoch << "," << r.split << "," << r.loss << "," << r.accuracy << "\n";
  out.precision(old);
}

}  // namespace obc
