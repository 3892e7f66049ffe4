#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sgdph/autodiff.hpp"
#include "sgdph/nn.hpp"
#include "sgdph/parameter.hpp"
#include "sgdph/tensor.hpp"

// Brute-force checks of every differential quantity. Finite differences only
// ever evaluate the forward pass; nothing here reads an adjoint except the
// helpers named autodiff_* / extract_*, which exist to be compared against.
namespace sgdph::oracle {

// kCentral2: (f(x+h) - f(x-h)) / 2h.
// kCentral4: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h.
enum class Stencil { kCentral2, kCentral4 };

struct FdSpec {
  double h = 1e-4;  // gradient step
  Stencil gradient_stencil = Stencil::kCentral2;
  // The block Hessian nests one stencil inside another; the fourth-order
  // stencil keeps truncation small enough to afford a step where roundoff
  // (~ulp(L) / h^2) stays below the row-sum tolerance.
  double h_hessian = 1e-3;
  Stencil hessian_stencil = Stencil::kCentral4;

  void validate() const;
  // Largest coordinate offset any Hessian evaluation applies.
  double hessian_reach() const;
};

// Records a fresh forward pass on the given graph and returns the scalar loss.
// Parameters are bound by the builder, so each call sees their current values.
using LossBuilder = std::function<ad::Var<double>(ad::Graph<double>&)>;
using TensorMap = std::map<std::string, Tensor<double>>;

// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-3);
double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-3);

// Forward only. Throws DomainError on a non-finite loss.
double evaluate(const LossBuilder& loss);

TensorMap fd_gradient(const LossBuilder& loss, std::span<Parameter<double>* const> params,
                      const FdSpec& spec = {});

// Reverse-mode gradients of every parameter bound by the builder.
TensorMap autodiff_gradient(const LossBuilder& loss);

// [C, C] block of second derivatives of a channel-wise parameter: the
// Hessian stencil applied to the stencil gradient, then symmetrized. Throws
// DomainError for C > 64 or non-finite entries, InvariantViolation if the
// unsymmetrized block is asymmetric beyond 1e-6 relative.
Tensor<double> fd_hessian_block_1d(const LossBuilder& loss, Parameter<double>& p,
                                   const FdSpec& spec = {});

Tensor<double> row_sums(const Tensor<double>& block);

// hessian_diag_1d through a retained differentiable backward pass.
Tensor<double> extract_hessian_diag(const LossBuilder& loss, const Parameter<double>& p);

struct DiagonalityReport {
  std::string name;
  std::size_t channels = 0;
  double max_abs_offdiag = 0;
  double max_abs_diag = 0;
  double offdiag_mass_ratio = 0;  // sum|offdiag| / (sum|diag| + tiny)
  double extracted_vs_rowsum_relerr = 0;
};

DiagonalityReport diagonality_report(const LossBuilder& loss, Parameter<double>& p,
                                     const FdSpec& spec = {});

// One SGD-PH step on a single channel-wise parameter with loss a * gamma^2 / 2
// from zero momenta (alpha = beta = momentum), compared with the closed form
// -tau * (tau_so * g / (|a| + eps) + eta * gamma).
struct NewtonCase {
  double a = 4;
  double gamma = 1;
  double tau = 0.01;
  double tau_so = 1e-3;
  double eta = 0;
  double eps = 0;
  double momentum = 0.9;
};

struct NewtonResult {
  double applied = 0;
  double expected = 0;
  double residual = 0;
  bool pass = false;
};

NewtonResult newton_step_check(const NewtonCase& c, double tolerance = 1e-10);

struct GradcheckEntry {
  std::string layer;
  std::string parameter;  // "input" for the gradient with respect to the layer input
  std::size_t instances = 0;
  double max_rel_err = 0;
};

// Layer types covered by gradcheck, including the two losses.
std::vector<std::string> gradcheck_layer_types();

// Builds `instances` seeded random instances of one layer type, contracts the
// output with a random weighting, and compares autodiff against FD for every
// parameter and the input. ReLU inputs are kept at least 0.05 from the kink.
std::vector<GradcheckEntry> gradcheck_layer(const std::string& type, std::size_t instances,
                                            std::uint64_t seed, const FdSpec& spec = {});

std::vector<GradcheckEntry> gradcheck_suite(std::size_t instances, std::uint64_t seed,
                                            const FdSpec& spec = {});

// A tiny seeded model with a fixed batch: the object every model-level oracle
// runs on. bn-terminal uses the sum-of-squares loss, the rest cross entropy.
// Inputs and channel-wise parameters are redrawn until every ReLU input is at
// least relu_margin from zero.
struct TinyProblem {
  nn::Model<double> model;
  Tensor<double> inputs;
  std::vector<std::int32_t> labels;
  bool sum_of_squares = false;

  LossBuilder loss();
};

TinyProblem make_tiny_problem(const std::string& model_name, std::uint64_t seed,
                              std::size_t channels = 8, double relu_margin = 1e-2);

// Smallest |input| over all ReLU layers for the given batch.
double relu_margin(nn::Model<double>& model, const Tensor<double>& inputs);

struct VerifyResult {
  std::string model;
  std::uint64_t seed = 0;
  double gradient_max_rel_err = 0;
  std::vector<DiagonalityReport> reports;
  std::vector<std::string> failures;

  bool pass() const { return failures.empty(); }
};

// Gradient check to 1e-5, row-sum identity to 1e-5 for every channel-wise
// parameter, and off-diagonal mass <= 1e-6 on bn-terminal.
VerifyResult verify_model(const std::string& model_name, std::uint64_t seed, const FdSpec& spec = {});

}  // namespace sgdph::oracle
