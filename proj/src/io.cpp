#include "obc/io.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace obc {

namespace fs = std::filesystem;

namespace {

std::uint32_t read_be32(std::istream& in, const fs::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError(path.string() + ": truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::ifstream open_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return in;
}

}  // namespace

Dataset read_idx(const fs::path& images, const fs::path& labels) {
  auto img = open_binary(images);
  if (read_be32(img, images) != 0x00000803) throw IoError(images.string() + ": not an IDX3 unsigned-byte image file");
  const auto n = read_be32(img, images);
  const auto h = read_be32(img, images);
  const auto w = read_be32(img, images);
  auto lab = open_binary(labels);
  if (read_be32(lab, labels) != 0x00000801) throw IoError(labels.string() + ": not an IDX1 unsigned-byte label file");
  if (read_be32(lab, labels) != n) throw IoError(labels.string() + ": label count differs from image count");
  if (n == 0 || h == 0 || w == 0) throw IoError(images.string() + ": empty image set");

  std::vector<unsigned char> pixels(static_cast<std::size_t>(n) * h * w);
  if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()))) {
    throw IoError(images.string() + ": truncated pixel data");
  }
  std::vector<unsigned char> raw(n);
  if (!lab.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw IoError(labels.string() + ": truncated label data");
  }
  Dataset d;
  d.images = Tensor({n, 1, h, w});
  auto data = d.images.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) data[i] = pixels[i] / 255.0;
  d.labels.assign(raw.begin(), raw.end());
  std::size_t top = 0;
  for (auto l : d.labels) top = std::max<std::size_t>(top, l);
  d.num_classes = top + 1;
  return d;
}

DatasetSplits synthetic_blobs(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (spec.train_size == 0 || spec.test_size == 0) throw ConfigError("synthetic split sizes must be positive");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto dim = shape_product(spec.sample_shape);
  std::vector<std::vector<double>> means(spec.classes, std::vector<double>(dim));
  for (auto& m : means)
    for (auto& v : m) v = normal(rng);
  auto make = [&](std::size_t n) {
    Dataset d;
    Shape s = spec.sample_shape;
    s.insert(s.begin(), n);
    d.images = Tensor(s);
    d.num_classes = spec.classes;
    auto data = d.images.data();
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = i % spec.classes;
      for (std::size_t k = 0; k < dim; ++k) data[i * dim + k] = means[y][k] + spec.spread * normal(rng);
      d.labels.push_back(y);
    }
    return d;
  };
  DatasetSplits out;
  out.name = "synthetic";
  out.train = make(spec.train_size);
  out.test = make(spec.test_size);
  return out;
}

fs::path default_data_root() {
  if (const char* env = std::getenv("OBC_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return "data";
}

DatasetSplits load_dataset(const std::string& name, const fs::path& data_root, std::uint64_t synthetic_seed) {
  if (name == "synthetic") {
    SyntheticSpec spec;
    spec.seed = synthetic_seed;
    return synthetic_blobs(spec);
  }
  fs::path dir = name;
  if (!dir.is_absolute() && !fs::is_directory(dir)) dir = (data_root.empty() ? default_data_root() : data_root) / name;
  if (!fs::is_directory(dir)) throw ConfigError("dataset '" + name + "' not found (looked for directory " + dir.string() + ")");
  DatasetSplits out;
  out.name = name;
  out.train = read_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  out.test = read_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  if (out.train.sample_shape() != out.test.sample_shape()) throw IoError(dir.string() + ": train and test image sizes differ");
  const auto k = std::max(out.train.num_classes, out.test.num_classes);
  out.train.num_classes = out.test.num_classes = k;
  return out;
}

Json model_header(const Model& model) {
  Json layers = Json::array();
  for (const auto& l : model.layers) {
    layers.push_back({{"kind", to_string(l.kind)},
                      {"name", l.name},
                      {"inputs", l.inputs},
                      {"weight", l.weight},
                      {"bias", l.bias},
                      {"gamma", l.gamma},
                      {"beta", l.beta},
                      {"running_mean", l.running_mean},
                      {"running_var", l.running_var},
                      {"stride", l.stride},
                      {"padding", l.padding},
                      {"pool", l.pool},
                      {"eps", l.eps},
                      {"momentum", l.momentum},
                      {"ep_site", l.ep_site}});
  }
  Json params = Json::array();
  for (const auto& p : model.params) {
    params.push_back({{"name", p.name}, {"trainable", p.trainable}, {"shape", p.value.shape()}});
  }
  Json sites = Json::array();
  for (const auto& s : model.ep_sites) {
    sites.push_back({{"channel_class", s.channel_class},
                     {"original_extent", s.original_extent},
                     {"keep", s.keep},
                     {"compressor", s.compressor},
                     {"decompressor", s.decompressor},
                     {"compress_layers", s.compress_layers},
                     {"decompress_layers", s.decompress_layers}});
  }
  Json bn = Json::array();
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::batchnorm) continue;
    bn.push_back({{"layer", l.name}, {"running_mean", l.running_mean}, {"running_var", l.running_var}});
  }
  return {{"format", "OBCM"},
          {"version", kContainerVersion},
          {"arch", model.arch},
          {"input_shape", model.input_shape},
          {"num_classes", model.num_classes},
          {"loss", to_string(model.loss)},
          {"layers", layers},
          {"params", params},
          {"ep_sites", sites},
          {"bn_statistics", bn}};
}

namespace {

template <typename T>
void put_le(std::ostream& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw IoError("model container is truncated");
    v |= static_cast<T>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

Model model_from_header(const Json& h) {
  Model m;
  m.arch = h.at("arch").get<std::string>();
  m.input_shape = h.at("input_shape").get<Shape>();
  m.num_classes = h.at("num_classes").get<std::size_t>();
  m.loss = loss_kind_from_string(h.at("loss").get<std::string>());
  for (const auto& j : h.at("layers")) {
    Layer l;
    l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
    l.name = j.at("name").get<std::string>();
    l.inputs = j.at("inputs").get<std::vector<std::size_t>>();
    l.weight = j.at("weight").get<int>();
    l.bias = j.at("bias").get<int>();
    l.gamma = j.at("gamma").get<int>();
    l.beta = j.at("beta").get<int>();
    l.running_mean = j.at("running_mean").get<int>();
    l.running_var = j.at("running_var").get<int>();
    l.stride = j.at("stride").get<std::size_t>();
    l.padding = j.at("padding").get<std::size_t>();
    l.pool = j.at("pool").get<std::size_t>();
    l.eps = j.at("eps").get<double>();
    l.momentum = j.at("momentum").get<double>();
    l.ep_site = j.at("ep_site").get<int>();
    m.layers.push_back(l);
  }
  for (const auto& j : h.at("ep_sites")) {
    EpSite s;
    s.channel_class = j.at("channel_class").get<std::size_t>();
    s.original_extent = j.at("original_extent").get<std::size_t>();
    s.keep = j.at("keep").get<std::vector<std::size_t>>();
    s.compressor = j.at("compressor").get<std::size_t>();
    s.decompressor = j.at("decompressor").get<std::size_t>();
    s.compress_layers = j.at("compress_layers").get<std::vector<std::size_t>>();
    s.decompress_layers = j.at("decompress_layers").get<std::vector<std::size_t>>();
    m.ep_sites.push_back(s);
  }
  return m;
}

}  // namespace

void write_model(std::ostream& out, const Model& model) {
  const auto header = model_header(model).dump();
  out.write("OBCM", 4);
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : model.params) write_tensor(out, p.value);
  if (!out) throw IoError("failed to write model container");
}

Model read_model(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "OBCM") throw IoError("not a model container (bad magic)");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kContainerVersion) {
    throw IoError("unsupported container version " + std::to_string(version) + " (expected " +
                  std::to_string(kContainerVersion) + ")");
  }
  const auto length = get_le<std::uint64_t>(in);
  if (length > (std::uint64_t{1} << 32)) throw IoError("container header length is implausible");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw IoError("model container is truncated");
  Model m;
  try {
    const auto header = Json::parse(text);
    m = model_from_header(header);
    for (const auto& j : header.at("params")) {
      Tensor value;
      try {
        value = read_tensor(in);
      } catch (const std::runtime_error& e) {
        throw IoError(std::string("tensor payload: ") + e.what());
      }
      if (value.shape() != j.at("shape").get<Shape>()) {
        throw IoError("tensor payload for '" + j.at("name").get<std::string>() + "' does not match its header shape");
      }
      m.add_param(j.at("name").get<std::string>(), std::move(value), j.at("trainable").get<bool>());
    }
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed container header: ") + e.what());
  }
  try {
    check_model(m);
  } catch (const ModelError& e) {
    throw IoError(std::string("container holds an invalid model: ") + e.what());
  }
  return m;
}

void save_model(const fs::path& path, const Model& model) {
  std::ostringstream out(std::ios::binary);
  write_model(out, model);
  write_file_atomic(path, out.str());
}

Model load_model(const fs::path& path) {
  auto in = open_binary(path);
  return read_model(in);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

Json plan_to_json(const PruningPlan& plan, const GroupPartition& partition, const ObcConfig& config) {
  Json steps = Json::array();
  for (const auto& s : plan.steps) {
    steps.push_back({{"step", s.step}, {"macs_before", s.macs_before}, {"macs_after", s.macs_after}, {"groups", s.groups}});
  }
  Json classes = Json::array();
  for (std::size_t k = 0; k < plan.classes.size(); ++k) {
    classes.push_back({{"name", plan.classes[k].name},
                       {"extent", partition.classes.at(k).extent},
                       {"kept", plan.classes[k].kept()}});
  }
  Json j = {{"criterion", to_string(config.saliency.criterion)},
            {"aggregator", to_string(config.saliency.aggregator)},
            {"normalizer", to_string(config.saliency.normalizer)},
            {"bn_diagonal", config.saliency.bn_diagonal},
            {"tau", config.tau},
            {"step", config.step},
            {"samples", config.samples},
            {"batch_size", config.batch_size},
            {"seed", config.seed},
            {"ep", config.ep},
            {"group_count", plan.group_count},
            {"macs_original", plan.macs_original},
            {"macs_final", plan.macs_final},
            {"pruned", plan.pruned},
            {"steps", steps},
            {"classes", classes}};
  j["plan_id"] = fnv1a_hex(j.dump());
  return j;
}

PruningPlan plan_from_json(const Json& j, const GroupPartition& partition) {
  try {
    Json body = j;
    const auto id = body.at("plan_id").get<std::string>();
    body.erase("plan_id");
    if (fnv1a_hex(body.dump()) != id) throw IoError("plan_id does not match the plan contents");
    if (j.at("group_count").get<std::size_t>() != partition.group_count()) {
      throw IoError("plan was made for " + std::to_string(j.at("group_count").get<std::size_t>()) +
                    " groups, the model has " + std::to_string(partition.group_count()));
    }
    const auto& classes = j.at("classes");
    if (classes.size() != partition.classes.size()) throw IoError("plan and model disagree on channel classes");
    for (std::size_t k = 0; k < classes.size(); ++k) {
      if (classes[k].at("name").get<std::string>() != partition.classes[k].name ||
          classes[k].at("extent").get<std::size_t>() != partition.classes[k].extent) {
        throw IoError("plan class '" + classes[k].at("name").get<std::string>() + "' does not match the model");
      }
    }
    PruningPlan plan;
    plan.group_count = partition.group_count();
    for (const auto& c : partition.classes) plan.classes.push_back({c.name, std::vector<bool>(c.extent, true)});
    for (auto g : j.at("pruned").get<std::vector<std::size_t>>()) {
      if (g >= partition.group_count()) throw IoError("plan names group " + std::to_string(g) + " which does not exist");
      plan.add_group(partition, g);
    }
    for (std::size_t k = 0; k < classes.size(); ++k) {
      if (plan.classes[k].kept() != classes[k].at("kept").get<std::vector<std::size_t>>()) {
        throw IoError("plan class '" + partition.classes[k].name + "' lists kept channels inconsistent with its groups");
      }
    }
    for (const auto& s : j.at("steps")) {
      plan.steps.push_back({s.at("step").get<std::size_t>(), s.at("macs_before").get<std::uint64_t>(),
                            s.at("macs_after").get<std::uint64_t>(), s.at("groups").get<std::vector<std::size_t>>()});
    }
    plan.macs_original = j.at("macs_original").get<std::uint64_t>();
    plan.macs_final = j.at("macs_final").get<std::uint64_t>();
    return plan;
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed plan: ") + e.what());
  } catch (const PruningError& e) {
    throw IoError(std::string("inconsistent plan: ") + e.what());
  }
}

namespace {

void reject_unknown(const Json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown configuration key '" + where + "." + k + "'");
  }
}

template <typename T>
void take(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("configuration key '" + where + "." + key + "' has the wrong type");
  }
}

Json train_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"ep_lr", t.ep_lr},
          {"ep_weight_decay", t.ep_weight_decay},
          {"schedule", to_string(t.schedule)},
          {"milestones", t.milestones},
          {"gamma", t.gamma}};
}

TrainConfig train_from_json(const Json& j, TrainConfig t, const std::string& where) {
  reject_unknown(j, where,
                 {"epochs", "batch_size", "lr", "momentum", "weight_decay", "ep_lr", "ep_weight_decay", "schedule",
                  "milestones", "gamma"});
  take(j, "epochs", t.epochs, where);
  take(j, "batch_size", t.batch_size, where);
  take(j, "lr", t.lr, where);
  take(j, "momentum", t.momentum, where);
  take(j, "weight_decay", t.weight_decay, where);
  take(j, "ep_lr", t.ep_lr, where);
  take(j, "ep_weight_decay", t.ep_weight_decay, where);
  std::string schedule = to_string(t.schedule);
  take(j, "schedule", schedule, where);
  try {
    t.schedule = schedule_from_string(schedule);
  } catch (const TrainError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  take(j, "milestones", t.milestones, where);
  take(j, "gamma", t.gamma, where);
  return t;
}

}  // namespace

void RunConfig::validate() const {
  try {
    obc.validate();
    train.validate();
    finetune.validate();
    TrainConfig probe;
    probe.apply_ep_preset(ep_family);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  if (arch != "mlp" && arch != "vggtiny" && arch != "restiny") {
    throw ConfigError("unknown architecture '" + arch + "' (expected mlp, vggtiny or restiny)");
  }
  if (data.empty()) throw ConfigError("dataset name is empty");
}

Json to_json(const RunConfig& c) {
  return {{"arch", c.arch},
          {"model",
           {{"widths", c.model.widths},
            {"pool_after", c.model.pool_after},
            {"activation", c.model.activation},
            {"bias", c.model.bias}}},
          {"data", c.data},
          {"data_root", c.data_root.string()},
          {"out_dir", c.out_dir.string()},
          {"seed", c.seed},
          {"obc",
           {{"tau", c.obc.tau},
            {"step", c.obc.step},
            {"samples", c.obc.samples},
            {"batch_size", c.obc.batch_size},
            {"criterion", to_string(c.obc.saliency.criterion)},
            {"aggregator", to_string(c.obc.saliency.aggregator)},
            {"normalizer", to_string(c.obc.saliency.normalizer)},
            {"bn_diagonal", c.obc.saliency.bn_diagonal},
            {"prune_residual", c.obc.partition.prune_residual},
            {"ep", c.obc.ep},
            {"reuse_rows", c.obc.reuse_rows},
            {"target_group_fraction", c.obc.target_group_fraction}}},
          {"train", train_to_json(c.train)},
          {"finetune", train_to_json(c.finetune)},
          {"ep_family", c.ep_family}};
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  reject_unknown(j, "config",
                 {"arch", "model", "data", "data_root", "out_dir", "seed", "obc", "train", "finetune", "ep_family"});
  take(j, "arch", c.arch, "config");
  take(j, "data", c.data, "config");
  std::string path = c.data_root.string();
  take(j, "data_root", path, "config");
  c.data_root = path;
  path = c.out_dir.string();
  take(j, "out_dir", path, "config");
  c.out_dir = path;
  take(j, "seed", c.seed, "config");
  take(j, "ep_family", c.ep_family, "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, "model", {"widths", "pool_after", "activation", "bias"});
    take(m, "widths", c.model.widths, "model");
    take(m, "pool_after", c.model.pool_after, "model");
    take(m, "activation", c.model.activation, "model");
    take(m, "bias", c.model.bias, "model");
  }
  if (j.contains("obc")) {
    const auto& o = j["obc"];
    reject_unknown(o, "obc",
                   {"tau", "step", "samples", "batch_size", "criterion", "aggregator", "normalizer", "bn_diagonal",
                    "prune_residual", "ep", "reuse_rows", "target_group_fraction"});
    take(o, "tau", c.obc.tau, "obc");
    take(o, "step", c.obc.step, "obc");
    take(o, "samples", c.obc.samples, "obc");
    take(o, "batch_size", c.obc.batch_size, "obc");
    std::string criterion = to_string(c.obc.saliency.criterion);
    std::string aggregator = to_string(c.obc.saliency.aggregator);
    std::string normalizer = to_string(c.obc.saliency.normalizer);
    take(o, "criterion", criterion, "obc");
    take(o, "aggregator", aggregator, "obc");
    take(o, "normalizer", normalizer, "obc");
    try {
      c.obc.saliency.criterion = criterion_from_string(criterion);
      c.obc.saliency.aggregator = aggregator_from_string(aggregator);
      c.obc.saliency.normalizer = normalizer_from_string(normalizer);
    } catch (const SaliencyError& e) {
      throw ConfigError(std::string("obc: ") + e.what());
    }
    take(o, "bn_diagonal", c.obc.saliency.bn_diagonal, "obc");
    take(o, "prune_residual", c.obc.partition.prune_residual, "obc");
    take(o, "ep", c.obc.ep, "obc");
    take(o, "reuse_rows", c.obc.reuse_rows, "obc");
    take(o, "target_group_fraction", c.obc.target_group_fraction, "obc");
  }
  if (j.contains("train")) c.train = train_from_json(j["train"], c.train, "train");
  if (j.contains("finetune")) c.finetune = train_from_json(j["finetune"], c.finetune, "finetune");
  c.obc.seed = c.seed;
  c.obc.saliency.seed = c.seed;
  c.train.seed = c.seed;
  c.finetune.seed = c.seed;
  c.model.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j);
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace obc
