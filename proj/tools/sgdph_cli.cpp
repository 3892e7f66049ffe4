// sgdph: train / verify / compare / gradcheck front end.
//
// Exit codes: 0 success, 1 validation or runtime failure, 2 bad usage
// (unknown flag or subcommand, bad config key or value).

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdph/errors.hpp"
#include "sgdph/harness.hpp"
#include "sgdph/oracle.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

using sgdph::harness::RunConfig;

RunConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : sgdph::harness::load_config(path);
  for (const auto& o : overrides) sgdph::harness::apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

nlohmann::ordered_json to_json(const sgdph::oracle::VerifyResult& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["seed"] = r.seed;
  j["gradient_max_rel_err"] = r.gradient_max_rel_err;
  j["reports"] = nlohmann::ordered_json::array();
  for (const auto& d : r.reports) {
    j["reports"].push_back({{"name", d.name},
                            {"C", d.channels},
                            {"max_abs_offdiag", d.max_abs_offdiag},
                            {"max_abs_diag", d.max_abs_diag},
                            {"offdiag_mass_ratio", d.offdiag_mass_ratio},
                            {"extracted_vs_rowsum_relerr", d.extracted_vs_rowsum_relerr}});
  }
  j["pass"] = r.pass();
  j["failures"] = r.failures;
  return j;
}

int run_train(const std::string& config, const std::vector<std::string>& overrides) {
  const RunConfig cfg = build_config(config, overrides);
  const auto result = sgdph::harness::run(cfg);
  const auto& last = result.epochs.back();
  std::cout << "optimizer " << sgdph::harness::to_string(cfg.optimizer) << ", model " << cfg.model << ", "
            << result.steps << " steps\n"
            << "final train accuracy " << last.train_accuracy << ", test accuracy " << last.test_accuracy
            << "\n";
  if (cfg.optimizer == sgdph::harness::OptimizerKind::kSgdPh) {
    std::cout << "hessian_diag_1d calls " << result.hessian_calls << " (" << result.channelwise_parameters
              << " channel-wise parameters)\n";
  }
  if (!cfg.metrics_path.empty()) std::cout << "metrics written to " << cfg.metrics_path << "\n";
  if (!cfg.checkpoint_path.empty()) std::cout << "checkpoint written to " << cfg.checkpoint_path << "\n";
  return kOk;
}

int run_verify(const std::string& model, std::uint64_t seed, const std::string& out) {
  const auto names = sgdph::nn::model_names();
  if (std::find(names.begin(), names.end(), model) == names.end()) {
    throw sgdph::ConfigError("unknown model '" + model + "'");
  }
  const auto result = sgdph::oracle::verify_model(model, seed);
  const std::string text = to_json(result).dump(2);
  if (out.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write '" + out + "'");
    f << text << "\n";
  }
  for (const auto& f : result.failures) std::cerr << "FAIL " << f << "\n";
  return result.pass() ? kOk : kFailed;
}

int run_compare(const std::string& config_a, const std::string& config_b, const std::vector<std::string>& set_a,
                const std::vector<std::string>& set_b, const std::string& out) {
  const RunConfig a = build_config(config_a, set_a);
  const RunConfig b = build_config(config_b, set_b);
  if (out.empty()) {
    sgdph::harness::compare(a, b, std::cout);
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write '" + out + "'");
    const auto r = sgdph::harness::compare(a, b, f);
    std::cout << "final accuracy delta (a - b) " << r.final_delta << "\n";
  }
  return kOk;
}

int run_gradcheck(std::vector<std::string> layers, std::size_t instances, std::uint64_t seed, double tolerance) {
  if (layers.empty()) layers = sgdph::oracle::gradcheck_layer_types();
  const auto known = sgdph::oracle::gradcheck_layer_types();
  for (const auto& l : layers) {
    if (std::find(known.begin(), known.end(), l) == known.end()) {
      throw sgdph::ConfigError("unknown layer type '" + l + "'");
    }
  }
  bool ok = true;
  std::cout << std::left << std::setw(22) << "layer" << std::setw(14) << "parameter" << "max_rel_err\n";
  for (const auto& l : layers) {
    for (const auto& e : sgdph::oracle::gradcheck_layer(l, instances, seed)) {
      const bool pass = e.max_rel_err <= tolerance;
      ok = ok && pass;
      std::cout << std::setw(22) << e.layer << std::setw(14) << e.parameter << std::scientific
                << std::setprecision(3) << e.max_rel_err << std::defaultfloat << (pass ? "" : "  FAIL") << "\n";
    }
  }
  std::cout << (ok ? "all gradients within " : "gradient check failed, tolerance ") << tolerance << "\n";
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SGD-PH optimizer: training, oracle verification and comparisons"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "Override one config key (key=value); repeatable");

  std::string model;
  std::uint64_t seed = 1;
  std::string out;
  auto* verify = app.add_subcommand("verify", "Run the oracle suite on a tiny model and print the JSON report");
  verify->add_option("--model", model, "Model name")->required();
  verify->add_option("--seed", seed, "Seed for weights and batch");
  verify->add_option("--out", out, "Write the report here instead of stdout");

  std::string config_a, config_b;
  std::vector<std::string> set_a, set_b;
  auto* cmp = app.add_subcommand("compare", "Train two configs and emit their test-accuracy curves as CSV");
  cmp->add_option("--config-a", config_a, "First config")->check(CLI::ExistingFile);
  cmp->add_option("--config-b", config_b, "Second config")->check(CLI::ExistingFile);
  cmp->add_option("--set-a", set_a, "Override for the first config; repeatable");
  cmp->add_option("--set-b", set_b, "Override for the second config; repeatable");
  cmp->add_option("--out", out, "CSV path (default stdout)");

  std::vector<std::string> layers;
  std::size_t instances = 20;
  double tolerance = 1e-5;
  auto* grad = app.add_subcommand("gradcheck", "Compare autodiff gradients with central differences");
  grad->add_option("--layer", layers, "Layer type (default: all); repeatable");
  grad->add_option("--instances", instances, "Random instances per layer type")->check(CLI::PositiveNumber);
  grad->add_option("--seed", seed, "Base seed");
  grad->add_option("--tolerance", tolerance, "Maximum relative error")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return run_train(config, overrides);
    if (*verify) return run_verify(model, seed, out);
    if (*cmp) return run_compare(config_a, config_b, set_a, set_b, out);
    if (*grad) return run_gradcheck(layers, instances, seed, tolerance);
  } catch (const sgdph::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
