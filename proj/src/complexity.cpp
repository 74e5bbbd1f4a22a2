#include "dpn/complexity.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace dpn {

namespace {

int conv_extent(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

class Walker {
 public:
  Walker(const ArchSpec& spec, int input_hw, int init_dense_factor)
      : spec_(spec), factor_(init_dense_factor) {
    report_.arch = spec.name;
    report_.input_hw = input_hw;
    hw_ = input_hw;
    run();
  }

  ComplexityReport take() && { return std::move(report_); }

 private:
  void conv(const std::string& name, int cin, int cout, int k, int g, int stride,
            int pad) {
    const int out_hw = conv_extent(hw_, k, stride, pad);
    const std::int64_t params = std::int64_t(cout) * (cin / g) * k * k;
    add(name, "conv", {cout, out_hw, out_hw}, params,
        params * std::int64_t(out_hw) * out_hw);
    hw_ = out_hw;
  }

  void bn(const std::string& name, int c) {
    add(name, "bn", {c, hw_, hw_}, 2 * std::int64_t(c), 0);
  }

  void pool(const std::string& name, int c, int k, int stride, int pad) {
    hw_ = conv_extent(hw_, k, stride, pad);
    add(name, "pool", {c, hw_, hw_}, 0, 0);
  }

  void add(const std::string& name, const std::string& type,
           std::array<int, 3> shape, std::int64_t params, std::int64_t madds) {
    report_.rows.push_back({name, type, shape, params, madds});
    report_.total_params += params;
    report_.total_madds += madds;
  }

  void run() {
    const Conv1Spec& c1 = spec_.conv1;
    conv("conv1", 3, c1.out_channels, c1.kernel, 1, c1.stride, (c1.kernel - 1) / 2);
    bn("conv1.bn", c1.out_channels);
    if (!spec_.stem_pool.is_identity()) {
      pool("conv2.pool", c1.out_channels, spec_.stem_pool.kernel,
           spec_.stem_pool.stride, (spec_.stem_pool.kernel - 1) / 2);
    }

    int in_w = c1.out_channels;
    for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
      const StageSpec& st = spec_.stages[i];
      const std::string stage_name = "conv" + std::to_string(i + 2);
      if (st.family == Family::dense) {
        if (i > 0) {
          bn(stage_name + "_trans.bn", in_w);
          conv(stage_name + "_trans.conv", in_w, in_w / 2, 1, 1, 1, 0);
          in_w /= 2;
          if (st.entry_stride > 1) {
            pool(stage_name + "_trans.pool", in_w, 2, st.entry_stride, 0);
          }
        }
        for (int b = 0; b < st.block_count; ++b) {
          const std::string pre = stage_name + "_" + std::to_string(b + 1);
          bn(pre + ".bn_in", in_w);
          conv(pre + ".a", in_w, st.bottleneck_width, 1, 1, 1, 0);
          bn(pre + ".bn_a", st.bottleneck_width);
          conv(pre + ".b", st.bottleneck_width, st.dense_increment, 3, st.groups, 1, 1);
          in_w += st.dense_increment;
        }
        continue;
      }
      for (int b = 0; b < st.block_count; ++b) {
        const std::string pre = stage_name + "_" + std::to_string(b + 1);
        const bool entry = b == 0;
        const int stride = entry ? st.entry_stride : 1;
        const int proj_out = st.residual_width + factor_ * st.dense_increment;
        bn(pre + ".bn_in", in_w);
        // conv_a runs at the incoming resolution; the 3x3 (and the entry
        // projection) carry the stride.
        conv(pre + ".a", in_w, st.bottleneck_width, 1, 1, 1, 0);
        bn(pre + ".bn_a", st.bottleneck_width);
        conv(pre + ".b", st.bottleneck_width, st.bottleneck_width, 3, st.groups,
             stride, 1);
        bn(pre + ".bn_b", st.bottleneck_width);
        conv(pre + ".c", st.bottleneck_width,
             st.residual_width + st.dense_increment, 1, 1, 1, 0);
        if (entry) {
          // Projection consumes the shared activation at the incoming
          // resolution; its stride matched the 3x3, so the walker's spatial
          // state is already correct.
          add(pre + ".proj", "conv", {proj_out, hw_, hw_},
              std::int64_t(proj_out) * in_w,
              std::int64_t(proj_out) * in_w * hw_ * hw_);
        }
        in_w = entry ? st.residual_width + (factor_ + 1) * st.dense_increment
                     : in_w + st.dense_increment;
      }
    }

    bn("final.bn", in_w);
    add("avgpool", "pool", {in_w, 0, 0}, 0, 0);
    const int classes = spec_.classifier.classes;
    add("fc", "fc", {classes, 0, 0}, std::int64_t(classes) * in_w + classes,
        std::int64_t(classes) * in_w);

    std::ostringstream conv;
    conv << "params: conv Cout*(Cin/G)*Kh*Kw (no bias), bn 2C, fc K*C+K; "
         << "madds: conv params*H'*W', fc K*C, bn/relu/pool/add/concat 0; "
         << "entry projection R+" << factor_ << "k wide (initial dense width "
         << factor_ << "k)";
    report_.convention = conv.str();
  }

  const ArchSpec& spec_;
  int factor_;
  int hw_;
  ComplexityReport report_;
};

}  // namespace

ComplexityReport count_params(const ArchSpec& spec) {
  spec.validate();
  return Walker(spec, 224, kInitialDenseFactor).take();
}

ComplexityReport count_flops(const ArchSpec& spec, int input_hw) {
  spec.validate();
  if (input_hw < 1) throw std::invalid_argument("count_flops: input size must be positive");
  return Walker(spec, input_hw, kInitialDenseFactor).take();
}

std::string report_csv(const ComplexityReport& report) {
  std::ostringstream os;
  os << "layer,type,out_shape,params,madds\n";
  for (const auto& r : report.rows) {
    os << r.name << ',' << r.type << ',' << r.out_shape[0];
    if (r.out_shape[1] > 0) os << 'x' << r.out_shape[1] << 'x' << r.out_shape[2];
    os << ',' << r.params << ',' << r.madds << '\n';
  }
  os << "total,,," << report.total_params << ',' << report.total_madds << '\n';
  return os.str();
}

std::string report_table(const ComplexityReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "layer" << std::setw(6) << "type"
     << std::setw(14) << "out_shape" << std::right << std::setw(14) << "params"
     << std::setw(16) << "madds" << '\n';
  for (const auto& r : report.rows) {
    std::ostringstream shape;
    shape << r.out_shape[0];
    if (r.out_shape[1] > 0) shape << 'x' << r.out_shape[1] << 'x' << r.out_shape[2];
    os << std::left << std::setw(20) << r.name << std::setw(6) << r.type
       << std::setw(14) << shape.str() << std::right << std::setw(14) << r.params
       << std::setw(16) << r.madds << '\n';
  }
  os << std::left << std::setw(40) << "total" << std::right << std::setw(14)
     << report.total_params << std::setw(16) << report.total_madds << '\n';
  return os.str();
}

Verdict compare_to_reference(double value, double reference, double tolerance) {
  if (reference <= 0.0) {
    throw std::invalid_argument("compare_to_reference: reference must be positive");
  }
  Verdict v;
  v.deviation = (value - reference) / reference;
  if (value == 0.0) {
    v.pass = false;
    v.note = "empty model";
    return v;
  }
  v.pass = std::abs(v.deviation) <= tolerance;
  return v;
}

const std::vector<Table1Reference>& table1_references() {
  static const std::vector<Table1Reference> refs = {
      {"densenet161", 28.9e6, 0.02, 7.7e9, 0.03},
      {"resnext101-32x4d", 44.3e6, 0.02, 8.0e9, 0.03},
      {"resnext101-64x4d", 83.7e6, 0.02, 15.5e9, 0.03},
      {"dpn92", 37.8e6, 0.02, 6.5e9, 0.03},
      {"dpn98", 61.7e6, 0.02, 11.7e9, 0.03},
      {"dpn131", 79.5e6, 0.03, 16.0e9, 0.03},
  };
  return refs;
}

std::vector<Table1Result> run_table1_check() {
  std::vector<Table1Result> out;
  for (const auto& ref : table1_references()) {
    const ComplexityReport rep = count_flops(preset(ref.name), 224);
    Table1Result r;
    r.name = ref.name;
    r.params = rep.total_params;
    r.madds = rep.total_madds;
    r.params_verdict = compare_to_reference(static_cast<double>(rep.total_params),
                                            ref.params_ref, ref.params_tol);
    r.flops_verdict = compare_to_reference(static_cast<double>(rep.total_madds),
                                           ref.flops_ref, ref.flops_tol);
    out.push_back(std::move(r));
  }
  return out;
}

int select_initial_dense_factor(const ArchSpec& spec, double params_reference) {
  if (params_reference <= 0.0) {
    throw std::invalid_argument("select_initial_dense_factor: reference must be positive");
  }
  int best = 0;
  double best_abs = -1.0;
  for (int factor : {0, 1, 2}) {
    const ComplexityReport rep = Walker(spec, 224, factor).take();
    const double dev = std::abs(static_cast<double>(rep.total_params) - params_reference);
    if (best_abs < 0.0 || dev < best_abs) {
      best_abs = dev;
      best = factor;
    }
  }
  return best;
}

}  // namespace dpn
