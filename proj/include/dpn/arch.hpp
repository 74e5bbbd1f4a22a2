#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dpn {

// Declarative network description, parsed from the line-oriented spec grammar:
//
//   name <id>
//   conv1 <kernel> <out> <stride>
//   stempool <kernel> <stride>          # kernel 1 stride 1 means no pool
//   stage <blocks> <bottleneck> <groups> <R> <k> <stride> <family>
//   classifier <classes> <avg|meanmax>
//   # comment
//
// Families: residual (add only, k = 0), dense (concat only, R = 0),
// dualpath (split into an R-wide residual update plus a k-wide dense append).

enum class Family { residual, dense, dualpath };

const char* family_name(Family f);

struct StageSpec {
  int block_count = 0;
  int bottleneck_width = 0;  // channels of the 1x1 -> 3x3 pair
  int groups = 1;
  int residual_width = 0;    // R
  int dense_increment = 0;   // k, the "(+k)" increment
  int entry_stride = 1;
  Family family = Family::dualpath;
};

struct Conv1Spec {
  int kernel = 7;
  int out_channels = 64;
  int stride = 2;
};

struct StemPoolSpec {
  int kernel = 3;
  int stride = 2;
  bool is_identity() const { return kernel == 1 && stride == 1; }
};

enum class PoolingKind { avg, meanmax };

struct ClassifierSpec {
  int classes = 1000;
  PoolingKind pooling = PoolingKind::avg;
};

// Entry blocks project the incoming joint state to a fresh residual baseline
// plus an initial dense state of width kInitialDenseFactor * k. The factor is
// shared by the builder and the analytic complexity walker.
inline constexpr int kInitialDenseFactor = 2;

struct ArchSpec {
  std::string name;
  Conv1Spec conv1;
  StemPoolSpec stem_pool;
  std::vector<StageSpec> stages;
  ClassifierSpec classifier;

  void validate() const;  // throws SpecError naming the offending field

  // Joint-state width entering stage `i` (stem width for i == 0).
  int stage_input_width(int i) const;
  // Joint-state width leaving stage `i`.
  int stage_output_width(int i) const;
  // Dense-path width after `blocks_done` blocks of stage `i`.
  int dense_width_after(int i, int blocks_done) const;
  int final_width() const { return stage_output_width(static_cast<int>(stages.size()) - 1); }
};

struct SpecError : std::runtime_error {
  SpecError(int line, const std::string& field, const std::string& message)
      : std::runtime_error(format(line, field, message)), line(line), field(field) {}
  int line;
  std::string field;
  static std::string format(int line, const std::string& field, const std::string& message);
};

ArchSpec parse_spec(const std::string& text);

// Embedded presets: densenet161, resnext101-32x4d, resnext101-64x4d, dpn92,
// dpn98, dpn131 (the Table-1 set) plus the desk-scale dpn-toy.
bool is_preset(const std::string& name);
const char* preset_text(const std::string& name);
ArchSpec preset(const std::string& name);
std::vector<std::string> preset_names();

// Resolves a preset name or a spec-file path.
ArchSpec load_arch(const std::string& name_or_path);

}  // namespace dpn
