#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dipnet/graph.hpp"

namespace dipnet {

// Central-difference gradient verification.  Always runs in double; the float
// path shares every code line through the Graph<T> template, so checking the
// double instantiation validates the math of both.

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t excluded = 0;  // coordinates skipped because a kink flipped between f(x+e) and f(x-e)
};

// Builds the forward pass on the given graph and returns the scalar loss.
// Must bind every parameter in the leaf list via g.param(...).  The harness
// calls the builder many times; it must be deterministic (this is verified by
// evaluating twice and comparing bitwise).
using GraphBuilder = std::function<Graph<double>::Value(Graph<double>&)>;

GradCheckResult grad_check(const GraphBuilder& build, const std::vector<Parameter<double>*>& leaves,
                           double eps = 1e-3);

// Named check evaluated over several seeds; used by the CLI and the
// acceptance harness.  run(seed) performs one grad_check and returns it.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(uint64_t seed)> run;
};

std::vector<GradCheckCase> gradcheck_primitive_cases();
std::vector<GradCheckCase> gradcheck_block_cases();
std::vector<GradCheckCase> gradcheck_end2end_cases();

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  int64_t checked = 0;
  int64_t excluded = 0;
  bool pass = false;
};

constexpr double kGradCheckEps = 1e-3;
constexpr double kGradCheckTol = 1e-4;
constexpr int kGradCheckSeeds = 5;

std::vector<GradCheckReport> run_gradcheck_cases(const std::vector<GradCheckCase>& cases,
                                                 int seeds = kGradCheckSeeds,
                                                 double tol = kGradCheckTol);

}  // namespace dipnet
