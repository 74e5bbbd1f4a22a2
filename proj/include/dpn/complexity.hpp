#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dpn/arch.hpp"

namespace dpn {

// Analytic parameter and multiply-add accounting for an ArchSpec. The walker
// enumerates the same layers the network builder creates, but sums integers
// instead of allocating tensors; the acceptance suite cross-checks the two.
//
// Conventions: conv params = Cout * (Cin/G) * Kh * Kw (convs carry no bias),
// BN = 2C, classifier = K*C + K. One multiply-add is one FLOP unit; conv
// madds = params * H' * W', classifier madds = K*C, BN/ReLU/pool/add/concat
// count zero.

struct LayerRow {
  std::string name;
  std::string type;  // conv, bn, pool, fc
  std::array<int, 3> out_shape;  // C, H, W (H = W = 0 after global pooling)
  std::int64_t params = 0;
  std::int64_t madds = 0;
};

struct ComplexityReport {
  std::string arch;
  int input_hw = 0;
  std::vector<LayerRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_madds = 0;
  std::string convention;
};

ComplexityReport count_params(const ArchSpec& spec);
ComplexityReport count_flops(const ArchSpec& spec, int input_hw = 224);

std::string report_csv(const ComplexityReport& report);
std::string report_table(const ComplexityReport& report);

struct Verdict {
  double deviation = 0.0;  // signed relative deviation
  bool pass = false;
  std::string note;
};

Verdict compare_to_reference(double value, double reference, double tolerance);

struct Table1Reference {
  const char* name;
  double params_ref;
  double params_tol;
  double flops_ref;
  double flops_tol;
};

const std::vector<Table1Reference>& table1_references();

struct Table1Result {
  std::string name;
  std::int64_t params = 0;
  std::int64_t madds = 0;
  Verdict params_verdict;
  Verdict flops_verdict;
};

// Analytic counts for every Table-1 preset against the printed totals.
std::vector<Table1Result> run_table1_check();

// Candidate initial dense widths are factor * k with factor in {0, 1, 2};
// returns the factor whose total parameter count lands closest to the
// reference. The builder's choice (kInitialDenseFactor) is validated against
// this selection.
int select_initial_dense_factor(const ArchSpec& spec, double params_reference);

}  // namespace dpn
