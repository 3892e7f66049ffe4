// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Every check runs at its stated tolerance and runtime budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdph/autodiff.hpp"
#include "sgdph/harness.hpp"
#include "sgdph/nn.hpp"
#include "sgdph/optim.hpp"
#include "sgdph/oracle.hpp"
#include "sgdph/rng.hpp"

namespace {

using namespace sgdph;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

class Runner {
 public:
  void run(int id, const std::string& title, double budget_s, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = secs < budget_s;
    const bool pass = o.pass && in_budget;
    failures_ += pass ? 0 : 1;
    std::ostringstream line;
    line << (pass ? "PASS" : "FAIL") << "  C" << id << "  " << title << ": " << o.detail << " ["
         << sci(secs) << " s, budget " << budget_s << " s" << (in_budget ? "" : ", OVER BUDGET") << "]";
    std::cout << line.str() << std::endl;
  }
  int failures() const { return failures_; }

 private:
  int failures_ = 0;
};

Outcome gradient_correctness() {
  double worst = 0;
  std::string where;
  std::size_t layers = 0;
  for (const auto& type : oracle::gradcheck_layer_types()) {
    ++layers;
    for (const auto& e : oracle::gradcheck_layer(type, 20, 1)) {
      if (e.max_rel_err >= worst) {
        worst = e.max_rel_err;
        where = e.layer + "/" + e.parameter;
      }
    }
  }
  return {worst <= 1e-5, std::to_string(layers) + " layer types x 20 instances, max rel err " + sci(worst) +
                             " (" + where + ") <= 1e-5"};
}

Outcome extraction_identity() {
  double worst = 0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto tp = oracle::make_tiny_problem("mlp-bn", seed, 16);
    const auto loss = tp.loss();
    for (auto* p : tp.model.channelwise_parameters()) {
      const auto block = oracle::fd_hessian_block_1d(loss, *p);
      const auto extracted = oracle::extract_hessian_diag(loss, *p);
      worst = std::max(worst, oracle::max_relative_error(extracted, oracle::row_sums(block)));
      ++checked;
    }
  }
  return {checked == 12 && worst <= 1e-5, "mlp-bn, C = 16, 3 seeds, " + std::to_string(checked) +
                                              " parameters, max rel err vs FD row sums " + sci(worst) +
                                              " <= 1e-5"};
}

// Normalized BN input computed directly from the layers below the terminal BN.
Tensor<double> terminal_xhat(oracle::TinyProblem& tp, nn::BatchNorm<double>& bn) {
  ad::Graph<double> g;
  ad::Var<double> v = g.constant(tp.inputs);
  for (std::size_t i = 0; i + 1 < tp.model.layer_count(); ++i) v = tp.model.layer(i).forward(g, v, nn::Mode::kProbe);
  const Tensor<double>& x = v.value();
  const std::size_t n = x.extent(0), c = x.extent(1);
  Tensor<double> xhat(x.shape());
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += x.at({i, j});
    mean /= double(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (x.at({i, j}) - mean) * (x.at({i, j}) - mean);
    var /= double(n);
    for (std::size_t i = 0; i < n; ++i) xhat.at({i, j}) = (x.at({i, j}) - mean) / std::sqrt(var + bn.eps());
  }
  return xhat;
}

Outcome terminal_diagonality() {
  // The loss is exactly quadratic in the terminal gamma and beta, so a wide
  // stencil step carries no truncation error and far less roundoff.
  oracle::FdSpec spec;
  spec.h_hessian = 1e-2;
  double worst_offdiag = 0, worst_closed = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto tp = oracle::make_tiny_problem("bn-terminal", seed);
    auto& bn = dynamic_cast<nn::BatchNorm<double>&>(tp.model.layer(tp.model.layer_count() - 1));
    const auto loss = tp.loss();
    const Tensor<double> xhat = terminal_xhat(tp, bn);
    const std::size_t n = xhat.extent(0), c = xhat.extent(1);
    for (auto* p : {&bn.gamma(), &bn.beta()}) {
      const auto block = oracle::fd_hessian_block_1d(loss, *p, spec);
      double max_off = 0, max_diag = 0;
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          double& slot = i == j ? max_diag : max_off;
          slot = std::max(slot, std::abs(block.at({i, j})));
        }
      worst_offdiag = std::max(worst_offdiag, max_off / (1e-8 * (1 + max_diag)));
      // d2L/dy2 = 1 for the sum of squares: sum_j xhat^2 for gamma, N for beta.
      const auto extracted = oracle::extract_hessian_diag(loss, *p);
      Tensor<double> closed({c});
      for (std::size_t i = 0; i < c; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) s += p == &bn.gamma() ? xhat.at({k, i}) * xhat.at({k, i}) : 1.0;
        closed[i] = s;
      }
      worst_closed = std::max(worst_closed, oracle::max_relative_error(extracted, closed));
    }
  }
  return {worst_offdiag <= 1 && worst_closed <= 1e-6,
          "bn-terminal, 3 seeds, max|offdiag| / (1e-8 (1 + max|diag|)) = " + sci(worst_offdiag) +
              " <= 1, extracted vs closed form rel err " + sci(worst_closed) + " <= 1e-6"};
}

Outcome newton_closed_form() {
  double worst = 0;
  int passed = 0;
  for (double a : {0.0, 0.5, 4.0}) {
    for (double gamma : {0.0, 1.0, -2.5}) {
      oracle::NewtonCase c;
      c.a = a;
      c.gamma = gamma;
      c.eps = 1e-4;
      c.eta = 0.005;
      const auto r = oracle::newton_step_check(c);
      worst = std::max(worst, r.residual);
      passed += r.pass ? 1 : 0;
    }
  }
  return {passed == 9 && worst <= 1e-10,
          "a in {0, 0.5, 4} x gamma in {0, 1, -2.5}, eps 1e-4, eta 5e-3, max residual " + sci(worst) + " <= 1e-10"};
}

Outcome degeneration() {
  harness::BlobsSpec blobs;
  blobs.n = 400;
  const auto data = harness::gen_blobs(blobs);
  auto a = nn::build_model<double>("mlp", data.train.sample_shape(), data.train.classes, nn::ModelOptions{}, 3);
  auto b = a;
  if (!a.channelwise_parameters().empty()) return {false, "mlp has channel-wise parameters"};
  optim::SgdPhConfig cfg;
  cfg.tau = 0.1;
  cfg.eta = 5e-4;
  optim::OptState<double> sa, sb;
  const std::size_t batch = 32;
  const std::size_t n = data.train.size();
  const std::size_t d = data.train.inputs.extent(1);
  double worst = 0;
  for (std::size_t t = 0; t < 100; ++t) {
    const std::size_t begin = (t * batch) % (n - batch);
    Tensor<double> x({batch, d});
    std::vector<std::int32_t> labels(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t k = 0; k < d; ++k) x.at({i, k}) = data.train.inputs.at({begin + i, k});
      labels[i] = data.train.labels[begin + i];
    }
    auto grads_of = [&](nn::Model<double>& m) {
      ad::Graph<double> g;
      g.backward(nn::softmax_cross_entropy(m.forward(g, x, nn::Mode::kTrain), labels));
      return g.parameter_gradients();
    };
    auto pa = a.parameters();
    auto pb = b.parameters();
    optim::step<double>(pa, grads_of(a), {}, cfg, sa);
    optim::sgdm_step<double>(pb, grads_of(b), cfg, sb);
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::size_t k = 0; k < pa[i]->value().size(); ++k)
        worst = std::max(worst, std::abs(pa[i]->value()[k] - pb[i]->value()[k]));
  }
  return {worst <= 1e-12, "mlp, 100 steps in f64, max per-weight difference " + sci(worst) + " <= 1e-12"};
}

Outcome newton_scaling() {
  // L = sum(0.5 a_i gamma_i^2 + c_i gamma_i) at gamma = 0: g = c and the
  // curvature is a, so doubling a leaves g fixed.
  Rng rng(5);
  const std::size_t channels = 8;
  Tensor<double> a({channels}), c({channels});
  for (std::size_t i = 0; i < channels; ++i) {
    a[i] = (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.1, 10);
    c[i] = rng.normal();
  }
  auto first_direction = [&](const Tensor<double>& curv) {
    Parameter<double> p("gamma", Tensor<double>({channels}), ParamKind::kChannelWise1D);
    ad::Graph<double> g;
    auto v = g.bind(p);
    auto loss = ad::add(ad::scale(ad::sum_all(ad::mul(ad::mul(v, v), curv)), 0.5), ad::sum_all(ad::mul(v, c)));
    g.backward(loss, true);
    const auto h = ad::hessian_diag_1d(loss, p);
    const auto grad = g.parameter_gradients().at("gamma");
    optim::SgdPhConfig cfg;
    cfg.eps = 0;
    optim::OptState<double> state;
    return optim::direction_1d(state.state_for(p), grad, h, cfg);
  };
  const auto d1 = first_direction(a);
  const auto d2 = first_direction(scale(a, 2.0));
  double worst = 0;
  for (std::size_t i = 0; i < channels; ++i) {
    worst = std::max(worst, std::abs(d2[i] - 0.5 * d1[i]) / std::abs(0.5 * d1[i]));
  }
  return {worst <= 1e-12, "8 channels, eps 0, max rel deviation of d(2a) from d(a)/2 " + sci(worst) + " <= 1e-12"};
}

template <class T>
double wn_norm_ulps(std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<T> v({6, 3, 3, 3});
    for (T& x : v.data()) x = static_cast<T>(rng.normal());
    Tensor<T> gamma({6});
    for (T& x : gamma.data()) x = static_cast<T>(rng.normal() * 3);
    nn::WNConv2d<T> wn("wn", v, gamma, std::nullopt, Padding::kSame);
    ad::Graph<T> g;
    const auto w = nn::wn_reparam(wn, g).value();
    for (std::size_t ch = 0; ch < 6; ++ch) {
      long double s = 0;
      for (std::size_t k = 0; k < 27; ++k) s += static_cast<long double>(w[ch * 27 + k]) * w[ch * 27 + k];
      const T norm = static_cast<T>(std::sqrt(s));
      const T target = std::abs(gamma[ch]);
      const double ulp = double(std::nextafter(target, std::numeric_limits<T>::infinity()) - target);
      worst = std::max(worst, std::abs(double(norm) - double(target)) / ulp);
    }
  }
  return worst;
}

Outcome wn_equivalence() {
  Rng rng(9);
  double worst_out = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Padding pad = trial % 2 ? Padding::kSame : Padding::kValid;
    Rng init(100 + trial);
    nn::Conv2d<double> conv("c", 3, 4, 3, pad, true, ParamKind::kChannelWise1D, init);
    for (double& b : conv.bias()->value().data()) b = rng.normal();
    const auto& w = conv.weight().value();
    Tensor<double> norms({4});
    for (std::size_t ch = 0; ch < 4; ++ch) {
      double s = 0;
      for (std::size_t k = 0; k < 27; ++k) s += w[ch * 27 + k] * w[ch * 27 + k];
      norms[ch] = std::sqrt(s);
    }
    nn::WNConv2d<double> wn("wn", w, norms, conv.bias()->value(), pad);
    Tensor<double> x({2, 3, 7, 7});
    for (double& v : x.data()) v = rng.normal();
    ad::Graph<double> g;
    const auto y1 = conv.forward(g, g.constant(x), nn::Mode::kTrain).value();
    const auto y2 = wn.forward(g, g.constant(x), nn::Mode::kTrain).value();
    for (std::size_t i = 0; i < y1.size(); ++i) worst_out = std::max(worst_out, std::abs(y1[i] - y2[i]));
  }
  const double ulps = std::max(wn_norm_ulps<double>(1), wn_norm_ulps<float>(2));
  return {worst_out <= 1e-6 && ulps <= 4, "max |conv - wnconv| " + sci(worst_out) + " <= 1e-6, max | ||W_i|| - |gamma_i| | " +
                                              sci(ulps) + " ulp <= 4 (f32 and f64)"};
}

harness::RunConfig blobs_run(harness::OptimizerKind opt, const fs::path& metrics) {
  harness::RunConfig cfg;
  cfg.model = "mlp-bn";
  cfg.dataset = "blobs";
  cfg.blobs.n = 1000;
  cfg.blobs.noise = 0.5;
  cfg.epochs = 200;
  cfg.batch_size = 64;
  cfg.optimizer = opt;
  if (opt == harness::OptimizerKind::kSgdPh) {
    cfg.sgdph.tau = 0.01;
    cfg.sgdph.eta = 0.005;
  } else {
    cfg.sgdph.tau = 0.1;
    cfg.sgdph.eta = 5e-4;
  }
  cfg.metrics_path = metrics.string();
  return cfg;
}

Outcome training_smoke(const fs::path& dir) {
  const auto ph = harness::run(blobs_run(harness::OptimizerKind::kSgdPh, dir / "blobs_sgdph.jsonl"));
  const auto m = harness::run(blobs_run(harness::OptimizerKind::kSgdm, dir / "blobs_sgdm.jsonl"));
  const double acc_ph = ph.epochs.back().train_accuracy;
  const double acc_m = m.epochs.back().train_accuracy;
  return {acc_ph >= 0.95 && acc_m >= 0.95, "blobs n 1000 noise 0.5, mlp-bn, 200 epochs: train accuracy sgdph " +
                                               sci(acc_ph) + ", sgdm " + sci(acc_m) + " >= 0.95"};
}

Outcome idx_smoke(const fs::path& dir) {
  const fs::path data = fs::path(SGDPH_SOURCE_DIR) / "data/mnist-subset";
  auto base = [&](harness::OptimizerKind opt, const fs::path& metrics) {
    harness::RunConfig cfg;
    cfg.model = "cnn-bn";
    cfg.dataset = "idx";
    cfg.idx_train_images = (data / "train-images-idx3-ubyte").string();
    cfg.idx_train_labels = (data / "train-labels-idx1-ubyte").string();
    cfg.idx_test_images = (data / "t10k-images-idx3-ubyte").string();
    cfg.idx_test_labels = (data / "t10k-labels-idx1-ubyte").string();
    cfg.epochs = 10;
    cfg.batch_size = 32;
    cfg.optimizer = opt;
    if (opt == harness::OptimizerKind::kSgdPh) {
      cfg.sgdph.tau = 0.05;
      cfg.sgdph.eta = 1e-3;
    } else {
      cfg.sgdph.tau = 0.1;
      cfg.sgdph.eta = 5e-4;
    }
    cfg.metrics_path = metrics.string();
    return cfg;
  };
  const auto ph_cfg = base(harness::OptimizerKind::kSgdPh, dir / "idx_sgdph.jsonl");
  const auto ph = harness::run(ph_cfg);
  const auto m = harness::run(base(harness::OptimizerKind::kSgdm, dir / "idx_sgdm.jsonl"));
  const auto split = harness::load_dataset(ph_cfg);

  std::size_t train_records = 0, logged = 0;
  double min_mh = std::numeric_limits<double>::infinity();
  std::ifstream in(ph_cfg.metrics_path);
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j["split"] != "train") continue;
    ++train_records;
    if (!j.contains("hessian") || j["hessian"].empty()) continue;
    ++logged;
    for (const auto& h : j["hessian"]) min_mh = std::min(min_mh, h["min"].get<double>());
  }
  const double acc_ph = ph.epochs.back().test_accuracy;
  const double acc_m = m.epochs.back().test_accuracy;
  const bool pass = split.train.size() == 1000 && split.test.size() == 1000 && acc_ph >= 0.85 && acc_m >= 0.85 &&
                    train_records == ph.steps && logged == ph.steps && min_mh > 0;
  return {pass, "mnist subset 1000/1000, cnn-bn, 10 epochs: test accuracy sgdph " + sci(acc_ph) + ", sgdm " +
                    sci(acc_m) + " >= 0.85; Hessian stats on " + std::to_string(logged) + "/" +
                    std::to_string(ph.steps) + " steps, min m_h " + sci(min_mh) + " > 0"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism(const fs::path& dir) {
  const fs::path first = dir / "blobs_sgdph.jsonl";
  const fs::path second = dir / "blobs_sgdph_repeat.jsonl";
  harness::run(blobs_run(harness::OptimizerKind::kSgdPh, second));
  const std::string a = slurp(first), b = slurp(second);
  return {!a.empty() && a == b, "criterion 8 sgdph run repeated: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + " bytes, " + (a == b ? "identical" : "DIFFERENT")};
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "sgdph_acceptance";
  fs::create_directories(dir);

  Runner r;
  r.run(1, "gradient correctness", 30, gradient_correctness);
  r.run(2, "Hessian extraction equals FD row sums", 60, extraction_identity);
  r.run(3, "terminal-BN Hessian block is diagonal", 30, terminal_diagonality);
  r.run(4, "Newton-step closed form", 1, newton_closed_form);
  r.run(5, "degeneration to SGDM", 10, degeneration);
  r.run(6, "Newton scaling", 1, newton_scaling);
  r.run(7, "weight-norm equivalence", 5, wn_equivalence);
  r.run(8, "blobs training smoke", 60, [&] { return training_smoke(dir); });
  r.run(9, "IDX training smoke", 600, [&] { return idx_smoke(dir); });
  r.run(10, "determinism", 60, [&] { return determinism(dir); });

  std::cout << (r.failures() == 0 ? "all 10 criteria passed" : std::to_string(r.failures()) + " criteria failed")
            << std::endl;
  return r.failures() == 0 ? 0 : 1;
}
