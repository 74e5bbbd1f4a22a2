#include "dpn/arch.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace dpn {

const char* family_name(Family f) {
  switch (f) {
    case Family::residual: return "residual";
    case Family::dense: return "dense";
    case Family::dualpath: return "dualpath";
  }
  return "?";
}

std::string SpecError::format(int line, const std::string& field,
                              const std::string& message) {
  std::ostringstream os;
  os << "spec error";
  if (line > 0) os << " at line " << line;
  if (!field.empty()) os << " (" << field << ")";
  os << ": " << message;
  return os.str();
}

int ArchSpec::stage_input_width(int i) const {
  return i == 0 ? conv1.out_channels : stage_output_width(i - 1);
}

int ArchSpec::stage_output_width(int i) const {
  const StageSpec& s = stages.at(static_cast<std::size_t>(i));
  switch (s.family) {
    case Family::residual:
      return s.residual_width;
    case Family::dense:
      // Transition halves the accumulated width before stages 2..N.
      return (i == 0 ? stage_input_width(i) : stage_input_width(i) / 2) +
             s.block_count * s.dense_increment;
    case Family::dualpath:
      return s.residual_width + dense_width_after(i, s.block_count);
  }
  return 0;
}

int ArchSpec::dense_width_after(int i, int blocks_done) const {
  const StageSpec& s = stages.at(static_cast<std::size_t>(i));
  return (kInitialDenseFactor + blocks_done) * s.dense_increment;
}

void ArchSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw SpecError(0, field, msg);
  };
  if (name.empty()) fail("name", "missing name");
  if (conv1.kernel < 1 || conv1.out_channels < 1 || conv1.stride < 1) {
    fail("conv1", "kernel, out-channels and stride must be positive");
  }
  if (stem_pool.kernel < 1 || stem_pool.stride < 1) {
    fail("stempool", "kernel and stride must be positive");
  }
  if (stages.empty()) fail("stage", "at least one stage required");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& s = stages[i];
    const std::string where = "stage " + std::to_string(i + 1);
    if (s.block_count < 1) fail(where, "block count must be >= 1");
    if (s.entry_stride != 1 && s.entry_stride != 2) fail(where, "stride must be 1 or 2");
    if (s.groups < 1) fail(where, "groups must be >= 1");
    if (s.dense_increment < 0) fail(where, "dense increment k must be >= 0");
    switch (s.family) {
      case Family::residual:
        if (s.dense_increment != 0) fail(where, "residual family requires k = 0");
        if (s.residual_width < 1) fail(where, "residual width R must be >= 1");
        break;
      case Family::dense:
        if (s.residual_width != 0) fail(where, "dense family requires R = 0");
        if (s.dense_increment < 1) fail(where, "dense family requires k >= 1");
        break;
      case Family::dualpath:
        if (s.residual_width < 1) fail(where, "residual width R must be >= 1");
        if (s.dense_increment < 1) fail(where, "dualpath family requires k >= 1 (use the residual family for k = 0)");
        break;
    }
    if (s.bottleneck_width < 1) fail(where, "bottleneck width must be >= 1");
    if (s.bottleneck_width % s.groups != 0) fail(where, "groups must divide width");
  }
  if (classifier.classes < 2) fail("classifier", "need at least two classes");
}

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    if (tok[0] == '#') break;
    out.push_back(tok);
  }
  return out;
}

int parse_int(const std::string& tok, int line, const std::string& field) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw SpecError(line, field, "expected an integer, got '" + tok + "'");
  }
}

}  // namespace

ArchSpec parse_spec(const std::string& text) {
  ArchSpec spec;
  bool saw_name = false, saw_conv1 = false, saw_pool = false, saw_classifier = false;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto tok = tokenize(line);
    if (tok.empty()) continue;
    const std::string& key = tok[0];
    auto expect = [&](std::size_t n) {
      if (tok.size() != n + 1) {
        throw SpecError(lineno, key, "expected " + std::to_string(n) + " fields, got " +
                                         std::to_string(tok.size() - 1));
      }
    };
    if (key == "name") {
      expect(1);
      spec.name = tok[1];
      saw_name = true;
    } else if (key == "conv1") {
      expect(3);
      spec.conv1 = {parse_int(tok[1], lineno, "conv1 kernel"),
                    parse_int(tok[2], lineno, "conv1 out"),
                    parse_int(tok[3], lineno, "conv1 stride")};
      saw_conv1 = true;
    } else if (key == "stempool") {
      expect(2);
      spec.stem_pool = {parse_int(tok[1], lineno, "stempool kernel"),
                        parse_int(tok[2], lineno, "stempool stride")};
      saw_pool = true;
    } else if (key == "stage") {
      expect(7);
      StageSpec s;
      s.block_count = parse_int(tok[1], lineno, "stage blocks");
      s.bottleneck_width = parse_int(tok[2], lineno, "stage bottleneck");
      s.groups = parse_int(tok[3], lineno, "stage groups");
      s.residual_width = parse_int(tok[4], lineno, "stage R");
      s.dense_increment = parse_int(tok[5], lineno, "stage k");
      s.entry_stride = parse_int(tok[6], lineno, "stage stride");
      if (tok[7] == "residual") s.family = Family::residual;
      else if (tok[7] == "dense") s.family = Family::dense;
      else if (tok[7] == "dualpath") s.family = Family::dualpath;
      else throw SpecError(lineno, "stage family", "unknown family '" + tok[7] + "'");
      if (s.groups >= 1 && s.bottleneck_width >= 1 && s.bottleneck_width % s.groups != 0) {
        throw SpecError(lineno, "stage", "groups must divide width");
      }
      spec.stages.push_back(s);
    } else if (key == "classifier") {
      expect(2);
      spec.classifier.classes = parse_int(tok[1], lineno, "classifier classes");
      if (tok[2] == "avg") spec.classifier.pooling = PoolingKind::avg;
      else if (tok[2] == "meanmax") spec.classifier.pooling = PoolingKind::meanmax;
      else throw SpecError(lineno, "classifier pooling", "expected avg or meanmax, got '" + tok[2] + "'");
      saw_classifier = true;
    } else {
      throw SpecError(lineno, key, "unknown directive");
    }
  }
  if (!saw_name) throw SpecError(0, "name", "missing name line");
  if (!saw_conv1) throw SpecError(0, "conv1", "missing conv1 line");
  if (!saw_pool) throw SpecError(0, "stempool", "missing stempool line");
  if (!saw_classifier) throw SpecError(0, "classifier", "missing classifier line");
  spec.validate();
  return spec;
}

namespace {

// Table-1 presets, one line per stage, field-for-field.
const std::map<std::string, const char*>& preset_table() {
  static const std::map<std::string, const char*> table = {
      {"densenet161", R"(# DenseNet-161 (k=48)
name densenet161
conv1 7 96 2
stempool 3 2
stage  6 192 1 0 48 1 dense
stage 12 192 1 0 48 2 dense
stage 36 192 1 0 48 2 dense
stage 24 192 1 0 48 2 dense
classifier 1000 avg
)"},
      {"resnext101-32x4d", R"(# ResNeXt-101 (32x4d)
name resnext101-32x4d
conv1 7 64 2
stempool 3 2
stage  3  128 32  256 0 1 residual
stage  4  256 32  512 0 2 residual
stage 23  512 32 1024 0 2 residual
stage  3 1024 32 2048 0 2 residual
classifier 1000 avg
)"},
      {"resnext101-64x4d", R"(# ResNeXt-101 (64x4d)
name resnext101-64x4d
conv1 7 64 2
stempool 3 2
stage  3  256 64  256 0 1 residual
stage  4  512 64  512 0 2 residual
stage 23 1024 64 1024 0 2 residual
stage  3 2048 64 2048 0 2 residual
classifier 1000 avg
)"},
      {"dpn92", R"(# DPN-92 (32x3d)
name dpn92
conv1 7 64 2
stempool 3 2
stage  3  96 32  256  16 1 dualpath
stage  4 192 32  512  32 2 dualpath
stage 20 384 32 1024  24 2 dualpath
stage  3 768 32 2048 128 2 dualpath
classifier 1000 avg
)"},
      {"dpn98", R"(# DPN-98 (40x4d)
name dpn98
conv1 7 96 2
stempool 3 2
stage  3  160 40  256  16 1 dualpath
stage  6  320 40  512  32 2 dualpath
stage 20  640 40 1024  32 2 dualpath
stage  3 1280 40 2048 128 2 dualpath
classifier 1000 avg
)"},
      {"dpn131", R"(# DPN-131 (40x4d): 128-wide stem, 4/8/28/3 blocks
name dpn131
conv1 7 128 2
stempool 3 2
stage  4  160 40  256  16 1 dualpath
stage  8  320 40  512  32 2 dualpath
stage 28  640 40 1024  32 2 dualpath
stage  3 1280 40 2048 128 2 dualpath
classifier 1000 avg
)"},
      {"dpn-toy", R"(# Desk-scale dual path network for 32x32 inputs
name dpn-toy
conv1 3 16 1
stempool 1 1
stage 2 32 4 16 4 1 dualpath
stage 2 64 4 32 4 2 dualpath
classifier 4 avg
)"},
  };
  return table;
}

}  // namespace

bool is_preset(const std::string& name) {
  return preset_table().count(name) != 0;
}

const char* preset_text(const std::string& name) {
  auto it = preset_table().find(name);
  if (it == preset_table().end()) {
    throw std::invalid_argument("unknown preset '" + name + "'");
  }
  return it->second;
}

ArchSpec preset(const std::string& name) { return parse_spec(preset_text(name)); }

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& [k, v] : preset_table()) names.push_back(k);
  return names;
}

ArchSpec load_arch(const std::string& name_or_path) {
  if (is_preset(name_or_path)) return preset(name_or_path);
  std::ifstream in(name_or_path);
  if (!in) {
    throw std::runtime_error("no preset or readable spec file named '" + name_or_path + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_spec(ss.str());
}

}  // namespace dpn
