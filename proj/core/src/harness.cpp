#include "sgdph/harness.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sgdph/autodiff.hpp"
#include "sgdph/errors.hpp"
#include "sgdph/rng.hpp"

namespace sgdph::harness {

Shape Dataset::sample_shape() const {
  const Shape& s = inputs.shape();
  return Shape(s.begin() + 1, s.end());
}

// ---- IDX ------------------------------------------------------------------

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(path.string(), 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class IdxReader {
 public:
  IdxReader(std::string path, std::vector<std::uint8_t> bytes)
      : path_(std::move(path)), bytes_(std::move(bytes)) {}

  std::uint32_t u32(const char* field) {
    if (bytes_.size() - pos_ < 4) {
      throw IdxError(path_, pos_, std::string("truncated header while reading ") + field);
    }
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v = (v << 8) | bytes_[pos_ + k];
    pos_ += 4;
    return v;
  }

  std::span<const std::uint8_t> payload(std::uint64_t count) {
    const std::uint64_t available = bytes_.size() - pos_;
    if (available < count) {
      throw IdxError(path_, bytes_.size(),
                     "truncated payload: expected " + std::to_string(count) + " bytes after the header, found " +
                         std::to_string(available));
    }
    if (available > count) {
      throw IdxError(path_, pos_ + count, std::to_string(available - count) + " trailing bytes after payload");
    }
    std::span<const std::uint8_t> out(bytes_.data() + pos_, count);
    pos_ += count;
    return out;
  }

  std::uint64_t pos() const { return pos_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t subset_n) {
  IdxReader img(images.string(), read_file(images));
  if (const auto magic = img.u32("magic"); magic != kIdxImagesMagic) {
    throw IdxError(img.path(), 0, "bad magic " + std::to_string(magic) + ", expected 2051 (0x00000803)");
  }
  const std::uint32_t n = img.u32("image count");
  const std::uint32_t rows = img.u32("row count");
  const std::uint32_t cols = img.u32("column count");
  const std::uint64_t pixels = std::uint64_t{rows} * cols;
  const auto raw_images = img.payload(std::uint64_t{n} * pixels);

  IdxReader lab(labels.string(), read_file(labels));
  if (const auto magic = lab.u32("magic"); magic != kIdxLabelsMagic) {
    throw IdxError(lab.path(), 0, "bad magic " + std::to_string(magic) + ", expected 2049 (0x00000801)");
  }
  const std::uint32_t n_labels = lab.u32("label count");
  if (n_labels != n) {
    throw IdxError(lab.path(), 4, "count mismatch: " + std::to_string(n_labels) + " labels for " +
                                      std::to_string(n) + " images in " + img.path());
  }
  const auto raw_labels = lab.payload(n_labels);

  std::size_t keep = n;
  if (subset_n > 0) {
    if (subset_n > n) {
      throw IdxError(img.path(), 4, "subset of " + std::to_string(subset_n) + " requested, file holds " +
                                        std::to_string(n));
    }
    keep = subset_n;
  }

  Dataset d;
  d.inputs = Tensor<double>({keep, 1, rows, cols});
  auto x = d.inputs.data();
  for (std::size_t i = 0; i < keep * pixels; ++i) x[i] = raw_images[i] / 255.0;
  d.labels.resize(keep);
  std::uint8_t max_label = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    d.labels[i] = raw_labels[i];
    max_label = std::max(max_label, raw_labels[i]);
  }
  d.classes = std::size_t{max_label} + 1;
  return d;
}

// ---- blobs ----------------------------------------------------------------

Split gen_blobs(const BlobsSpec& spec) {
  if (spec.classes < 2) throw ConfigError("blobs need at least 2 classes");
  if (!(spec.noise >= 0)) throw ConfigError("blobs noise must be >= 0");
  if (spec.dims == 0) throw ConfigError("blobs need at least 1 dimension");
  constexpr double kMinCenterDistance = 3.0;

  Rng rng(spec.seed);
  std::vector<std::vector<double>> centers;
  while (centers.size() < spec.classes) {
    std::vector<double> c(spec.dims);
    for (double& v : c) v = rng.normal();
    const bool far = std::all_of(centers.begin(), centers.end(), [&](const std::vector<double>& o) {
      double d2 = 0;
      for (std::size_t k = 0; k < spec.dims; ++k) d2 += (c[k] - o[k]) * (c[k] - o[k]);
      return d2 >= kMinCenterDistance * kMinCenterDistance;
    });
    if (far) centers.push_back(std::move(c));
  }

  std::vector<double> train_x, test_x;
  Split s;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t cls = i % spec.classes;
    const bool test = i % 5 == 4;
    auto& xs = test ? test_x : train_x;
    for (std::size_t k = 0; k < spec.dims; ++k) xs.push_back(centers[cls][k] + spec.noise * rng.normal());
    (test ? s.test : s.train).labels.push_back(static_cast<std::int32_t>(cls));
  }
  s.train.inputs = Tensor<double>({s.train.labels.size(), spec.dims}, std::move(train_x));
  s.test.inputs = Tensor<double>({s.test.labels.size(), spec.dims}, std::move(test_x));
  s.train.classes = s.test.classes = spec.classes;
  return s;
}

// ---- configuration ----------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

template <class N>
N parse_number(std::string_view v, const std::string& key) {
  N out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("cannot parse '" + std::string(v) + "' as a number for '" + key + "'");
  }
  if constexpr (std::is_floating_point_v<N>) {
    if (!std::isfinite(out)) throw ConfigError("'" + key + "' must be finite");
  }
  return out;
}

bool parse_bool(std::string_view v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("cannot parse '" + std::string(v) + "' as a boolean for '" + key + "'");
}

using Setter = std::function<void(RunConfig&, std::string_view, const std::string&)>;

template <class N, class Field>
Setter number(Field field) {
  return [field](RunConfig& c, std::string_view v, const std::string& k) { field(c) = parse_number<N>(v, k); };
}

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = [] {
    std::map<std::string, Setter, std::less<>> t;
    auto text = [](std::string RunConfig::*field) {
      return [field](RunConfig& c, std::string_view v, const std::string&) { c.*field = std::string(v); };
    };
    t["model"] = text(&RunConfig::model);
    t["hidden"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.model_options.hidden; });
    t["channels"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.model_options.channels; });
    t["kernel"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.model_options.kernel; });
    t["bias_second_order"] = [](RunConfig& c, std::string_view v, const std::string& k) {
      c.model_options.bias_second_order = parse_bool(v, k);
    };

    t["dataset"] = text(&RunConfig::dataset);
    t["blobs.n"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.blobs.n; });
    t["blobs.dims"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.blobs.dims; });
    t["blobs.classes"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.blobs.classes; });
    t["blobs.noise"] = number<double>([](RunConfig& c) -> auto& { return c.blobs.noise; });
    t["blobs.seed"] = number<std::uint64_t>([](RunConfig& c) -> auto& { return c.blobs.seed; });
    t["idx.train_images"] = text(&RunConfig::idx_train_images);
    t["idx.train_labels"] = text(&RunConfig::idx_train_labels);
    t["idx.test_images"] = text(&RunConfig::idx_test_images);
    t["idx.test_labels"] = text(&RunConfig::idx_test_labels);
    t["idx.subset_n"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.idx_subset_n; });

    t["optimizer"] = [](RunConfig& c, std::string_view v, const std::string& k) {
      if (v == "sgdph") c.optimizer = OptimizerKind::kSgdPh;
      else if (v == "sgdm") c.optimizer = OptimizerKind::kSgdm;
      else throw ConfigError("'" + k + "' must be sgdph or sgdm, got '" + std::string(v) + "'");
    };
    t["tau"] = number<double>([](RunConfig& c) -> auto& { return c.sgdph.tau; });
    t["tau_so"] = number<double>([](RunConfig& c) -> auto& { return c.sgdph.tau_so; });
    t["alpha"] = number<double>([](RunConfig& c) -> auto& { return c.sgdph.alpha; });
    t["beta_m"] = number<double>([](RunConfig& c) -> auto& { return c.sgdph.beta_m; });
    t["eta"] = number<double>([](RunConfig& c) -> auto& { return c.sgdph.eta; });
    t["eps"] = number<double>([](RunConfig& c) -> auto& { return c.sgdph.eps; });
    t["momentum_convention"] = [](RunConfig& c, std::string_view v, const std::string& k) {
      if (v == "ema") c.sgdph.convention = optim::MomentumConvention::kEma;
      else if (v == "classical") c.sgdph.convention = optim::MomentumConvention::kClassical;
      else throw ConfigError("'" + k + "' must be ema or classical, got '" + std::string(v) + "'");
    };

    t["epochs"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.epochs; });
    t["batch_size"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.batch_size; });
    t["lr_decay_factor"] = number<double>([](RunConfig& c) -> auto& { return c.lr_decay_factor; });
    t["lr_decay_every"] = number<std::size_t>([](RunConfig& c) -> auto& { return c.lr_decay_every; });
    t["seed"] = number<std::uint64_t>([](RunConfig& c) -> auto& { return c.seed; });
    t["dtype"] = [](RunConfig& c, std::string_view v, const std::string& k) {
      if (v == "f32") c.dtype = DType::kF32;
      else if (v == "f64") c.dtype = DType::kF64;
      else throw ConfigError("'" + k + "' must be f32 or f64, got '" + std::string(v) + "'");
    };

    t["metrics_path"] = text(&RunConfig::metrics_path);
    t["checkpoint_path"] = text(&RunConfig::checkpoint_path);
    t["log_wall_clock"] = [](RunConfig& c, std::string_view v, const std::string& k) {
      c.log_wall_clock = parse_bool(v, k);
    };
    return t;
  }();
  return table;
}

void assign(RunConfig& cfg, std::string_view key, std::string_view value) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(cfg, value, it->first);
}

std::pair<std::string_view, std::string_view> split_assignment(std::string_view line) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key = value");
  const auto key = trim(line.substr(0, eq));
  if (key.empty()) throw ConfigError("empty key");
  return {key, trim(line.substr(eq + 1))};
}

}  // namespace

void RunConfig::validate() const {
  const auto names = nn::model_names();
  if (std::find(names.begin(), names.end(), model) == names.end()) {
    throw ConfigError("unknown model '" + model + "'");
  }
  if (dataset != "blobs" && dataset != "idx") {
    throw ConfigError("dataset must be blobs or idx, got '" + dataset + "'");
  }
  if (dataset == "blobs") {
    if (blobs.classes < 2) throw ConfigError("blobs.classes must be >= 2");
    if (blobs.n < 5) throw ConfigError("blobs.n must be >= 5");
    if (blobs.dims == 0) throw ConfigError("blobs.dims must be >= 1");
    if (blobs.noise < 0) throw ConfigError("blobs.noise must be >= 0");
  }
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be > 0");
  if (model_options.hidden == 0 || model_options.channels == 0 || model_options.kernel == 0) {
    throw ConfigError("hidden, channels and kernel must be >= 1");
  }
  sgdph.validate();
}

std::size_t RunConfig::decay_interval() const {
  return lr_decay_every > 0 ? lr_decay_every : optim::default_decay_interval(epochs);
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  RunConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      const auto [key, value] = split_assignment(line);
      if (!seen.emplace(key).second) throw ConfigError("duplicate key '" + std::string(key) + "'");
      assign(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  try {
    const auto [key, value] = split_assignment(assignment);
    assign(cfg, key, value);
  } catch (const ConfigError& e) {
    throw ConfigError("--set " + std::string(assignment) + ": " + e.what());
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgdPh ? "sgdph" : "sgdm"; }
std::string to_string(DType dtype) { return dtype == DType::kF32 ? "f32" : "f64"; }

Split load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "blobs") return gen_blobs(cfg.blobs);
  Split s;
  s.train = load_idx(cfg.idx_train_images, cfg.idx_train_labels, cfg.idx_subset_n);
  s.test = load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.idx_subset_n);
  s.train.classes = s.test.classes = std::max(s.train.classes, s.test.classes);
  return s;
}

// ---- training ---------------------------------------------------------------

namespace {

template <class T>
Tensor<T> gather(const Tensor<double>& inputs, std::span<const std::size_t> rows) {
  const Shape& s = inputs.shape();
  const std::size_t stride = inputs.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = rows.size();
  Tensor<T> out(out_shape);
  auto src = inputs.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < stride; ++k) dst[r * stride + k] = static_cast<T>(src[rows[r] * stride + k]);
  }
  return out;
}

template <class T>
std::pair<double, double> evaluate_split(nn::Model<T>& model, const Dataset& d) {
  constexpr std::size_t kChunk = 256;
  double loss_sum = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t begin = 0; begin < d.size(); begin += kChunk) {
    const std::size_t end = std::min(d.size(), begin + kChunk);
    rows.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) rows[i - begin] = i;
    const std::span<const std::int32_t> labels(d.labels.data() + begin, end - begin);
    ad::Graph<T> graph;
    const ad::Var<T> logits = model.forward(graph, gather<T>(d.inputs, rows), nn::Mode::kEval);
    const ad::Var<T> loss = nn::softmax_cross_entropy<T>(logits, labels);
    loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(rows.size());
    correct += nn::count_correct(logits.value(), labels);
  }
  const double n = static_cast<double>(d.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

template <class T>
nlohmann::ordered_json hessian_json(const optim::OptState<T>& state) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : optim::hessian_stats(state)) {
    arr.push_back({{"name", s.name}, {"min", s.min}, {"mean", s.mean}, {"max", s.max}});
  }
  return arr;
}

template <class T>
TrainResult train_impl(const RunConfig& cfg, const Split& data, std::ostream& metrics) {
  cfg.validate();
  if (data.train.size() == 0) throw ConfigError("training split is empty");
  nn::Model<T> model = nn::build_model<T>(cfg.model, data.train.sample_shape(), data.train.classes,
                                          cfg.model_options, cfg.seed);
  const std::vector<Parameter<T>*> params = model.parameters();
  const std::vector<Parameter<T>*> channelwise = model.channelwise_parameters();
  const bool sgdph = cfg.optimizer == OptimizerKind::kSgdPh;
  const bool second_order = sgdph && !channelwise.empty();

  optim::OptState<T> state;
  TrainResult result;
  result.channelwise_parameters = channelwise.size();
  const auto start = std::chrono::steady_clock::now();

  auto record = [&](std::size_t epoch, std::size_t step, const char* split, double loss, double acc,
                    double lr) {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["split"] = split;
    j["loss"] = loss;
    j["accuracy"] = acc;
    j["lr"] = lr;
    j["wall_ms"] = cfg.log_wall_clock
                       ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count()
                       : 0.0;
    if (second_order) j["hessian"] = hessian_json(state);
    metrics << j.dump() << '\n';
  };

  const std::size_t n = data.train.size();
  std::vector<std::size_t> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    optim::SgdPhConfig step_cfg = cfg.sgdph;
    step_cfg.tau = optim::scheduled_lr(cfg.sgdph.tau, cfg.lr_decay_factor, cfg.decay_interval(), epoch - 1);

    Rng shuffle_rng(cfg.seed ^ epoch);
    const std::vector<std::size_t> order = shuffle_rng.permutation(n);
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      // Batch statistics of a single example are degenerate; a lone
      // trailing example sits this epoch out.
      if (end - begin < 2 && n >= 2) break;
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                   order.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<std::int32_t> labels(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) labels[i] = data.train.labels[batch[i]];

      ad::Graph<T> graph;
      const ad::Var<T> logits = model.forward(graph, gather<T>(data.train.inputs, batch), nn::Mode::kTrain);
      const ad::Var<T> loss = nn::softmax_cross_entropy<T>(logits, labels);
      const double loss_value = static_cast<double>(loss.value().item());
      const std::size_t step = result.steps + 1;
      if (!std::isfinite(loss_value)) {
        record(epoch, step, "abort", loss_value, 0.0, step_cfg.tau);
        metrics.flush();
        throw TrainingDiverged(epoch, step);
      }

      graph.backward(loss, second_order);
      const optim::TensorMap<T> grads = graph.parameter_gradients();
      if (second_order) {
        optim::TensorMap<T> hdiags;
        for (Parameter<T>* p : channelwise) hdiags.emplace(p->name(), ad::hessian_diag_1d(loss, *p));
        result.hessian_calls += graph.hessian_extractions();
        optim::step<T>(params, grads, hdiags, step_cfg, state);
        for (const auto& s : optim::hessian_stats(state)) {
          result.min_hessian_momentum = std::min(result.min_hessian_momentum.value_or(s.min), s.min);
        }
      } else if (sgdph) {
        optim::step<T>(params, grads, {}, step_cfg, state);
      } else {
        optim::sgdm_step<T>(params, grads, step_cfg, state);
      }
      result.steps = step;

      const double acc = static_cast<double>(nn::count_correct(logits.value(), labels)) /
                         static_cast<double>(labels.size());
      record(epoch, step, "train", loss_value, acc, step_cfg.tau);
    }

    EpochSummary summary;
    summary.epoch = epoch;
    std::tie(summary.train_loss, summary.train_accuracy) = evaluate_split(model, data.train);
    record(epoch, result.steps, "train_eval", summary.train_loss, summary.train_accuracy, step_cfg.tau);
    if (data.test.size() > 0) {
      std::tie(summary.test_loss, summary.test_accuracy) = evaluate_split(model, data.test);
      record(epoch, result.steps, "test", summary.test_loss, summary.test_accuracy, step_cfg.tau);
    }
    result.epochs.push_back(summary);
  }

  if (!cfg.checkpoint_path.empty()) write_checkpoint(cfg.checkpoint_path, model);
  return result;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Split& data, std::ostream& metrics) {
  return cfg.dtype == DType::kF32 ? train_impl<float>(cfg, data, metrics)
                                  : train_impl<double>(cfg, data, metrics);
}

TrainResult run(const RunConfig& cfg) {
  cfg.validate();
  const Split data = load_dataset(cfg);
  if (cfg.metrics_path.empty()) {
    std::ostream discard(nullptr);
    return train(cfg, data, discard);
  }
  std::ofstream out(cfg.metrics_path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write metrics file '" + cfg.metrics_path + "'");
  return train(cfg, data, out);
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr std::array<char, 8> kCheckpointMagic = {'S', 'G', 'D', 'P', 'H', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t k = 0; k < sizeof(U); ++k) bytes[k] = static_cast<char>((v >> (8 * k)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  }
  U v = 0;
  for (std::size_t k = 0; k < sizeof(U); ++k) v |= static_cast<U>(bytes[k]) << (8 * k);
  return v;
}

}  // namespace

template <class T>
void write_checkpoint(const std::filesystem::path& path, nn::Model<T>& model) {
  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  for (Parameter<T>* p : model.parameters()) entries.emplace_back(p->name(), &p->value());
  for (const auto& [name, t] : model.buffers()) entries.emplace_back(name, t);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, sizeof(T));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t e : t->shape()) put_le<std::uint64_t>(out, e);
  }
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (const auto& [name, t] : entries) {
    for (T v : t->data()) put_le<Bits>(out, std::bit_cast<Bits>(v));
  }
  if (!out) throw std::runtime_error("error writing checkpoint '" + path.string() + "'");
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path, std::size_t* scalar_bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint");
  }
  if (get_le<std::uint32_t>(in, "version") != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  const std::uint32_t width = get_le<std::uint32_t>(in, "scalar width");
  if (width != 4 && width != 8) throw std::runtime_error("bad checkpoint scalar width");
  if (scalar_bytes) *scalar_bytes = width;
  const std::uint32_t count = get_le<std::uint32_t>(in, "entry count");

  std::vector<CheckpointEntry> entries(count);
  for (auto& e : entries) {
    const std::uint32_t len = get_le<std::uint32_t>(in, "name length");
    e.name.resize(len);
    if (!in.read(e.name.data(), len)) throw std::runtime_error("checkpoint truncated while reading a name");
    const std::uint32_t rank = get_le<std::uint32_t>(in, "rank");
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get_le<std::uint64_t>(in, "extent"));
  }
  for (auto& e : entries) {
    e.values.resize(element_count(e.shape));
    for (double& v : e.values) {
      v = width == 4 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(in, "values")))
                     : std::bit_cast<double>(get_le<std::uint64_t>(in, "values"));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error("trailing bytes in checkpoint");
  return entries;
}

template void write_checkpoint(const std::filesystem::path&, nn::Model<float>&);
template void write_checkpoint(const std::filesystem::path&, nn::Model<double>&);

// ---- compare ----------------------------------------------------------------

namespace {

std::string shortest(double v) {
  std::array<char, 32> buf;
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

void require_same(bool same, const std::string& what) {
  if (!same) throw ConfigError("compare needs both runs on the same " + what);
}

}  // namespace

CompareResult compare(const RunConfig& a, const RunConfig& b, std::ostream& csv) {
  require_same(a.model == b.model, "model");
  require_same(a.dataset == b.dataset, "dataset");
  if (a.dataset == "blobs") {
    require_same(a.blobs.n == b.blobs.n && a.blobs.dims == b.blobs.dims && a.blobs.classes == b.blobs.classes &&
                     a.blobs.noise == b.blobs.noise && a.blobs.seed == b.blobs.seed,
                 "blobs dataset");
  } else {
    require_same(a.idx_train_images == b.idx_train_images && a.idx_train_labels == b.idx_train_labels &&
                     a.idx_test_images == b.idx_test_images && a.idx_test_labels == b.idx_test_labels &&
                     a.idx_subset_n == b.idx_subset_n,
                 "IDX dataset");
  }
  a.validate();
  b.validate();

  const Split data = load_dataset(a);
  std::ostream discard(nullptr);
  const TrainResult ra = train(a, data, discard);
  const TrainResult rb = train(b, data, discard);

  CompareResult out;
  const std::size_t rows = std::max(ra.epochs.size(), rb.epochs.size());
  csv << "epoch,acc_a,acc_b\n";
  for (std::size_t i = 0; i < rows; ++i) {
    CompareRow row;
    row.epoch = i + 1;
    row.acc_a = i < ra.epochs.size() ? ra.epochs[i].test_accuracy : std::nan("");
    row.acc_b = i < rb.epochs.size() ? rb.epochs[i].test_accuracy : std::nan("");
    csv << row.epoch << ',' << (i < ra.epochs.size() ? shortest(row.acc_a) : "") << ','
        << (i < rb.epochs.size() ? shortest(row.acc_b) : "") << '\n';
    out.rows.push_back(row);
  }
  out.final_delta = ra.epochs.back().test_accuracy - rb.epochs.back().test_accuracy;
  csv << "delta," << shortest(out.final_delta) << '\n';
  return out;
}

}  // namespace sgdph::harness
