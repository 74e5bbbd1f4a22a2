#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpn/arch.hpp"
#include "dpn/ops.hpp"
#include "dpn/rng.hpp"
#include "dpn/tensor.hpp"

namespace dpn {

struct ConvLayer {
  Tensor weight;  // Cout x Cin/G x Kh x Kw
  int stride = 1;
  int padding = 0;
  int groups = 1;

  Tensor forward(const Tensor& x) const {
    return conv2d(x, weight, {stride, stride}, {padding, padding}, groups);
  }
};

struct BnLayer {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  float epsilon = 1e-5f;
  float momentum = 0.9f;

  explicit BnLayer(int channels = 0);
  Tensor forward(const Tensor& x, bool training);
};

// The residual-path state y (fixed width R) and the dense-path accumulation x
// (width grows by k per block). Either side may be undefined: residual-family
// stages carry only y, dense-family stages only x, and the raw stem output
// enters the first stage as a plain y.
struct DualPathState {
  Tensor y;
  Tensor x;

  Tensor joint() const {  // concat(y, x) with undefined sides skipped
    if (!x.defined()) return y;
    if (!y.defined()) return x;
    return concat_channels(y, x);
  }
  int width() const {
    return (y.defined() ? y.dim(1) : 0) + (x.defined() ? x.dim(1) : 0);
  }
};

// Bottleneck micro-block: shared BN+ReLU on the joint input, 1x1 -> grouped
// 3x3 -> 1x1, final output split into an R-wide residual add and a k-wide
// dense append. Entry blocks additionally project the incoming joint state
// (from the same shared activation) to a fresh y plus the initial dense state;
// their 3x3 and projection carry the stage's entry stride.
// Dense-family blocks use only conv_a (1x1 bottleneck) and conv_b (3x3 -> k).
struct MicroBlock {
  Family family = Family::dualpath;
  bool entry = false;
  int in_width = 0;
  int bottleneck = 0;
  int groups = 1;
  int residual_width = 0;   // R
  int dense_increment = 0;  // k
  int stride = 1;

  BnLayer bn_in;
  ConvLayer proj;  // entry blocks of residual/dualpath stages
  ConvLayer conv_a;
  BnLayer bn_a;
  ConvLayer conv_b;
  BnLayer bn_b;
  ConvLayer conv_c;
};

MicroBlock make_micro_block(Family family, bool entry, int in_width,
                            const StageSpec& stage, Rng& rng);

// One micro-block update: y' = y + first-R-channels(out),
// x' = concat(x, last-k-channels(out)). Entry blocks derive the baseline
// (y, x) from their projection instead of the incoming state.
DualPathState micro_block_forward(MicroBlock& block, const DualPathState& in,
                                  bool training);

// Fig. 2(d) realization of the same block: y and x are kept apart and every
// projection of the joint state is computed as the sum of per-path partial
// products (channel aggregation replaced by feature-space addition). Shares
// the block's weight tensors, so parameter gradients land in the same place.
// Normalization uses batch statistics; running buffers are not touched.
DualPathState micro_block_forward_dual(MicroBlock& block, const DualPathState& in);

// Dense-family stage transition: BN+ReLU, 1x1 compression to half width, then
// 2x2 average pooling when the stage enters at stride 2.
struct DenseTransition {
  BnLayer bn;
  ConvLayer conv;
  int pool_stride = 1;

  Tensor forward(const Tensor& x, bool training);
};

// Projection applied at a residual/dualpath stage entry: 1x1 conv with the
// entry stride mapping the activated joint state to a fresh y of width R plus
// an initial dense state of width kInitialDenseFactor * k.
ConvLayer build_transition(int in_width, const StageSpec& next, Rng& rng);

struct StageModule {
  StageSpec spec;
  std::optional<DenseTransition> transition;  // dense family, stages 2..N
  std::vector<MicroBlock> blocks;
};

class Network {
 public:
  Network(const ArchSpec& spec, std::uint64_t seed);

  // N x 3 x H x W -> N x classes logits. Applies the classifier pooling from
  // the spec (see classify_features for overriding it at test time).
  Tensor forward(const Tensor& input, bool training);

  // Trunk only: stem, stages and the final BN+ReLU. Fully convolutional, so
  // inputs larger than the training crop yield larger final maps.
  Tensor forward_features(const Tensor& input, bool training);

  // Global pooling (avg or mean-max) followed by the fc classifier.
  Tensor classify_features(const Tensor& features, PoolingKind pooling);

  // Whole-net Fig. 2(d) form; defined for dualpath-family networks.
  Tensor forward_dual(const Tensor& input);

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  std::vector<std::pair<std::string, Tensor>>& buffers() { return buffers_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

  // Every BN layer in registration order (training and BN refinement walk
  // these to adjust momenta).
  const std::vector<BnLayer*>& bn_layers() { return bns_; }

  std::int64_t parameter_count() const;
  void zero_grads();

  const ArchSpec& spec() const { return spec_; }
  ConvLayer& stem_conv() { return stem_conv_; }
  BnLayer& stem_bn() { return stem_bn_; }
  std::vector<StageModule>& stages() { return stages_; }

  // C,H,W of each stage's joint output, captured by the latest forward.
  const std::vector<std::array<int, 3>>& last_stage_shapes() const {
    return stage_shapes_;
  }

 private:
  void register_all();

  ArchSpec spec_;
  ConvLayer stem_conv_;
  BnLayer stem_bn_;
  std::vector<StageModule> stages_;
  BnLayer final_bn_;
  Tensor fc_weight_, fc_bias_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::vector<std::array<int, 3>> stage_shapes_;
};

Network build_network(const ArchSpec& spec, std::uint64_t seed = 1);

// Forward/gradient agreement between the split form and the dual form, for
// whole networks (toy scale) and for block samples drawn from presets.
struct DualSplitCase {
  std::string name;
  double forward_dev = 0.0;
  double grad_dev = 0.0;
  bool pass = false;
};

struct DualSplitReport {
  std::vector<DualSplitCase> cases;
  double max_forward_dev = 0.0;
  double max_grad_dev = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Compares both realizations of every distinct block shape of `spec` (entry
// and normal, per stage) on random inputs at a small spatial size.
DualSplitReport check_dual_split_blocks(const ArchSpec& spec, int seeds,
                                        double tol, int spatial = 7);

// Compares whole-network logits and parameter gradients on random inputs.
DualSplitReport check_dual_split_network(const ArchSpec& spec, int seeds,
                                         double tol, int input_hw, int batch = 2);

}  // namespace dpn
