#include "dpn/network.hpp"

#include <cmath>
#include <sstream>

namespace dpn {

namespace {

Tensor conv_weight(int cout, int cin_per_group, int kh, int kw, Rng& rng) {
  Tensor w({cout, cin_per_group, kh, kw});
  const double stddev = std::sqrt(2.0 / (static_cast<double>(cout) * kh * kw));
  for (auto& v : w.values()) v = static_cast<float>(rng.normal(0.0, stddev));
  return w;
}

[[noreturn]] void width_error(const char* where, int got, int want) {
  std::ostringstream os;
  os << where << ": input width " << got << " does not match block width " << want;
  throw std::invalid_argument(os.str());
}

double norm_max_dev(std::span<const float> a, std::span<const float> b) {
  double scale = 1.0, dev = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(double(a[i])), std::abs(double(b[i]))});
    dev = std::max(dev, std::abs(double(a[i]) - double(b[i])));
  }
  return dev / scale;
}

}  // namespace

BnLayer::BnLayer(int channels) {
  if (channels > 0) {
    gamma = Tensor::full({channels}, 1.0f);
    beta = Tensor::zeros({channels});
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0f);
  }
}

Tensor BnLayer::forward(const Tensor& x, bool training) {
  return batch_norm(x, gamma, beta, running_mean, running_var, training, epsilon,
                    momentum);
}

ConvLayer build_transition(int in_width, const StageSpec& next, Rng& rng) {
  const int out = next.residual_width + kInitialDenseFactor * next.dense_increment;
  return ConvLayer{conv_weight(out, in_width, 1, 1, rng), next.entry_stride, 0, 1};
}

MicroBlock make_micro_block(Family family, bool entry, int in_width,
                            const StageSpec& stage, Rng& rng) {
  MicroBlock b;
  b.family = family;
  b.entry = entry;
  b.in_width = in_width;
  b.bottleneck = stage.bottleneck_width;
  b.groups = stage.groups;
  b.residual_width = stage.residual_width;
  b.dense_increment = stage.dense_increment;
  b.stride = entry ? stage.entry_stride : 1;
  b.bn_in = BnLayer(in_width);
  if (family == Family::dense) {
    b.conv_a = ConvLayer{conv_weight(stage.bottleneck_width, in_width, 1, 1, rng), 1, 0, 1};
    b.bn_a = BnLayer(stage.bottleneck_width);
    b.conv_b = ConvLayer{conv_weight(stage.dense_increment,
                                     stage.bottleneck_width / stage.groups, 3, 3, rng),
                         1, 1, stage.groups};
    return b;
  }
  if (entry) b.proj = build_transition(in_width, stage, rng);
  b.conv_a = ConvLayer{conv_weight(stage.bottleneck_width, in_width, 1, 1, rng), 1, 0, 1};
  b.bn_a = BnLayer(stage.bottleneck_width);
  b.conv_b = ConvLayer{conv_weight(stage.bottleneck_width,
                                   stage.bottleneck_width / stage.groups, 3, 3, rng),
                       b.stride, 1, stage.groups};
  b.bn_b = BnLayer(stage.bottleneck_width);
  b.conv_c = ConvLayer{conv_weight(stage.residual_width + stage.dense_increment,
                                   stage.bottleneck_width, 1, 1, rng),
                       1, 0, 1};
  return b;
}

DualPathState micro_block_forward(MicroBlock& blk, const DualPathState& in,
                                  bool training) {
  const int R = blk.residual_width, k = blk.dense_increment;
  if (blk.family == Family::dense) {
    Tensor x = in.x.defined() ? in.x : in.y;
    if (x.dim(1) != blk.in_width) width_error("micro_block_forward", x.dim(1), blk.in_width);
    Tensor act = relu(blk.bn_in.forward(x, training));
    Tensor t = blk.conv_a.forward(act);
    t = relu(blk.bn_a.forward(t, training));
    t = blk.conv_b.forward(t);
    return DualPathState{Tensor{}, concat_channels(x, t)};
  }

  Tensor joint = in.joint();
  if (joint.dim(1) != blk.in_width) width_error("micro_block_forward", joint.dim(1), blk.in_width);
  Tensor act = relu(blk.bn_in.forward(joint, training));
  Tensor t = blk.conv_a.forward(act);
  t = relu(blk.bn_a.forward(t, training));
  t = blk.conv_b.forward(t);
  t = relu(blk.bn_b.forward(t, training));
  t = blk.conv_c.forward(t);

  Tensor y0 = in.y, x0 = in.x;
  if (blk.entry) {
    Tensor p = blk.proj.forward(act);
    if (k > 0) {
      y0 = slice_channels(p, 0, R);
      x0 = slice_channels(p, R, R + kInitialDenseFactor * k);
    } else {
      y0 = p;
      x0 = Tensor{};
    }
  }

  DualPathState out;
  if (k > 0) {
    out.y = add(y0, slice_channels(t, 0, R));
    Tensor appended = slice_channels(t, R, R + k);
    out.x = x0.defined() ? concat_channels(x0, appended) : appended;
  } else {
    out.y = add(y0, t);
  }
  return out;
}

DualPathState micro_block_forward_dual(MicroBlock& blk, const DualPathState& in) {
  if (blk.family != Family::dualpath) {
    throw std::logic_error("micro_block_forward_dual: block is not dualpath");
  }
  const int R = blk.residual_width, k = blk.dense_increment;
  const float eps = blk.bn_in.epsilon;
  if (in.width() != blk.in_width) width_error("micro_block_forward_dual", in.width(), blk.in_width);

  Tensor act_y, act_x;
  int y_w = 0;
  if (in.y.defined()) {
    y_w = in.y.dim(1);
    act_y = relu(batch_norm_channels(in.y, blk.bn_in.gamma, blk.bn_in.beta, 0, eps));
  }
  if (in.x.defined()) {
    act_x = relu(batch_norm_channels(in.x, blk.bn_in.gamma, blk.bn_in.beta, y_w, eps));
  }
  auto partial = [&](const ConvLayer& conv) {
    Tensor s;
    if (act_y.defined()) s = conv2d_input_slice(act_y, conv.weight, 0, conv.stride);
    if (act_x.defined()) {
      Tensor sx = conv2d_input_slice(act_x, conv.weight, y_w, conv.stride);
      s = s.defined() ? add(s, sx) : sx;
    }
    return s;
  };

  Tensor t = partial(blk.conv_a);
  t = relu(batch_norm_batch_stats(t, blk.bn_a.gamma, blk.bn_a.beta, eps));
  t = blk.conv_b.forward(t);
  t = relu(batch_norm_batch_stats(t, blk.bn_b.gamma, blk.bn_b.beta, eps));
  t = blk.conv_c.forward(t);

  Tensor y0 = in.y, x0 = in.x;
  if (blk.entry) {
    Tensor p = partial(blk.proj);
    y0 = slice_channels(p, 0, R);
    x0 = slice_channels(p, R, R + kInitialDenseFactor * k);
  }
  DualPathState out;
  out.y = add(y0, slice_channels(t, 0, R));
  Tensor appended = slice_channels(t, R, R + k);
  out.x = x0.defined() ? concat_channels(x0, appended) : appended;
  return out;
}

Tensor DenseTransition::forward(const Tensor& x, bool training) {
  Tensor t = relu(bn.forward(x, training));
  t = conv.forward(t);
  if (pool_stride > 1) t = avg_pool2d(t, 2, pool_stride, 0);
  return t;
}

Network::Network(const ArchSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  const int k1 = spec_.conv1.kernel;
  stem_conv_ = ConvLayer{conv_weight(spec_.conv1.out_channels, 3, k1, k1, rng),
                         spec_.conv1.stride, (k1 - 1) / 2, 1};
  stem_bn_ = BnLayer(spec_.conv1.out_channels);

  int in_w = spec_.conv1.out_channels;
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const StageSpec& st = spec_.stages[i];
    StageModule mod;
    mod.spec = st;
    if (st.family == Family::dense && i > 0) {
      DenseTransition tr;
      tr.bn = BnLayer(in_w);
      tr.conv = ConvLayer{conv_weight(in_w / 2, in_w, 1, 1, rng), 1, 0, 1};
      tr.pool_stride = st.entry_stride;
      mod.transition = std::move(tr);
      in_w /= 2;
    }
    for (int b = 0; b < st.block_count; ++b) {
      const bool entry = (b == 0) && st.family != Family::dense;
      mod.blocks.push_back(make_micro_block(st.family, entry, in_w, st, rng));
      switch (st.family) {
        case Family::dense:
          in_w += st.dense_increment;
          break;
        case Family::residual:
          in_w = st.residual_width;
          break;
        case Family::dualpath:
          in_w = entry ? st.residual_width + (kInitialDenseFactor + 1) * st.dense_increment
                       : in_w + st.dense_increment;
          break;
      }
    }
    stages_.push_back(std::move(mod));
  }

  final_bn_ = BnLayer(in_w);
  fc_weight_ = Tensor({spec_.classifier.classes, in_w});
  for (auto& v : fc_weight_.values()) v = static_cast<float>(rng.normal(0.0, 0.01));
  fc_bias_ = Tensor::zeros({spec_.classifier.classes});
  register_all();
}

void Network::register_all() {
  auto param = [this](std::string name, const Tensor& t) {
    params_.emplace_back(std::move(name), t);
  };
  auto bn = [this, &param](const std::string& prefix, BnLayer& layer) {
    param(prefix + ".gamma", layer.gamma);
    param(prefix + ".beta", layer.beta);
    buffers_.emplace_back(prefix + ".running_mean", layer.running_mean);
    buffers_.emplace_back(prefix + ".running_var", layer.running_var);
  };
  param("conv1.weight", stem_conv_.weight);
  bn("conv1.bn", stem_bn_);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string stage_name = "conv" + std::to_string(i + 2);
    StageModule& mod = stages_[i];
    if (mod.transition) {
      bn(stage_name + "_trans.bn", mod.transition->bn);
      param(stage_name + "_trans.conv.weight", mod.transition->conv.weight);
    }
    for (std::size_t b = 0; b < mod.blocks.size(); ++b) {
      const std::string pre = stage_name + "_" + std::to_string(b + 1);
      MicroBlock& blk = mod.blocks[b];
      bn(pre + ".bn_in", blk.bn_in);
      if (blk.entry) param(pre + ".proj.weight", blk.proj.weight);
      param(pre + ".a.weight", blk.conv_a.weight);
      bn(pre + ".bn_a", blk.bn_a);
      param(pre + ".b.weight", blk.conv_b.weight);
      if (blk.family != Family::dense) {
        bn(pre + ".bn_b", blk.bn_b);
        param(pre + ".c.weight", blk.conv_c.weight);
      }
    }
  }
  bn("final.bn", final_bn_);
  param("fc.weight", fc_weight_);
  param("fc.bias", fc_bias_);
}

std::int64_t Network::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void Network::zero_grads() {
  for (auto& [name, t] : params_) t.clear_grad();
}

namespace {

DualPathState run_stages(Network& net, const Tensor& input, bool training, bool dual,
                         std::vector<std::array<int, 3>>& shapes) {
  const ArchSpec& spec = net.spec();
  Tensor t = net.stem_conv().forward(input);
  BnLayer& sbn = net.stem_bn();
  t = dual ? batch_norm_batch_stats(t, sbn.gamma, sbn.beta, sbn.epsilon)
           : sbn.forward(t, training);
  t = relu(t);
  if (!spec.stem_pool.is_identity()) {
    t = max_pool2d(t, spec.stem_pool.kernel, spec.stem_pool.stride);
  }
  DualPathState state{t, Tensor{}};
  shapes.clear();
  for (auto& stage : net.stages()) {
    if (stage.spec.family == Family::dense) {
      Tensor x = state.joint();
      if (stage.transition) x = stage.transition->forward(x, training);
      state = DualPathState{Tensor{}, x};
    }
    for (auto& blk : stage.blocks) {
      state = dual ? micro_block_forward_dual(blk, state)
                   : micro_block_forward(blk, state, training);
    }
    const Tensor& ref = state.y.defined() ? state.y : state.x;
    shapes.push_back({state.width(), ref.dim(2), ref.dim(3)});
  }
  return state;
}

Tensor pool_features(const Tensor& f, PoolingKind kind) {
  return kind == PoolingKind::avg ? global_avg_pool(f) : mean_max_pool(f);
}

}  // namespace

Tensor Network::forward_features(const Tensor& input, bool training) {
  DualPathState s = run_stages(*this, input, training, false, stage_shapes_);
  return relu(final_bn_.forward(s.joint(), training));
}

Tensor Network::classify_features(const Tensor& features, PoolingKind pooling) {
  return linear(pool_features(features, pooling), fc_weight_, fc_bias_);
}

Tensor Network::forward(const Tensor& input, bool training) {
  return classify_features(forward_features(input, training), spec_.classifier.pooling);
}

Tensor Network::forward_dual(const Tensor& input) {
  for (const auto& stage : stages_) {
    if (stage.spec.family != Family::dualpath) {
      throw std::logic_error("forward_dual: all stages must be dualpath");
    }
  }
  DualPathState s = run_stages(*this, input, true, true, stage_shapes_);
  const int R = s.y.dim(1);
  Tensor ay = relu(batch_norm_channels(s.y, final_bn_.gamma, final_bn_.beta, 0,
                                       final_bn_.epsilon));
  Tensor ax = relu(batch_norm_channels(s.x, final_bn_.gamma, final_bn_.beta, R,
                                       final_bn_.epsilon));
  Tensor py = pool_features(ay, spec_.classifier.pooling);
  Tensor px = pool_features(ax, spec_.classifier.pooling);
  return add(linear_input_slice(py, fc_weight_, 0, fc_bias_),
             linear_input_slice(px, fc_weight_, R, Tensor{}));
}

Network build_network(const ArchSpec& spec, std::uint64_t seed) {
  return Network(spec, seed);
}

namespace {

std::vector<Tensor> block_params(MicroBlock& blk) {
  std::vector<Tensor> out = {blk.bn_in.gamma, blk.bn_in.beta, blk.conv_a.weight,
                             blk.bn_a.gamma, blk.bn_a.beta, blk.conv_b.weight,
                             blk.bn_b.gamma, blk.bn_b.beta, blk.conv_c.weight};
  if (blk.entry) out.push_back(blk.proj.weight);
  return out;
}

Tensor random_map(int n, int c, int hw, Rng& rng) {
  Tensor t({n, c, hw, hw});
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

DualSplitReport check_dual_split_blocks(const ArchSpec& spec, int seeds, double tol,
                                        int spatial) {
  DualSplitReport rep;
  rep.tolerance = tol;
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const StageSpec& st = spec.stages[i];
    if (st.family != Family::dualpath) continue;
    for (int kind = 0; kind < 2; ++kind) {
      const bool entry = kind == 0;
      if (!entry && st.block_count < 2) continue;
      const int in_w = entry ? spec.stage_input_width(static_cast<int>(i))
                             : st.residual_width + spec.dense_width_after(static_cast<int>(i), 1);
      for (int s = 0; s < seeds; ++s) {
        Rng rng(9000 + 131 * static_cast<int>(i) + 17 * kind + s);
        MicroBlock blk = make_micro_block(Family::dualpath, entry, in_w, st, rng);
        DualPathState in;
        if (entry) {
          // Entry consumes the previous stage's joint state; split it as the
          // previous (y, x) pair when one exists.
          int prev_r = 0;
          if (i > 0 && spec.stages[i - 1].family == Family::dualpath) {
            prev_r = spec.stages[i - 1].residual_width;
          }
          if (prev_r > 0 && prev_r < in_w) {
            in.y = random_map(2, prev_r, spatial, rng);
            in.x = random_map(2, in_w - prev_r, spatial, rng);
          } else {
            in.y = random_map(2, in_w, spatial, rng);
          }
        } else {
          in.y = random_map(2, st.residual_width, spatial, rng);
          in.x = random_map(2, in_w - st.residual_width, spatial, rng);
        }

        std::vector<float> seed_grad;
        auto run = [&](bool dual) {
          Tape<float> tape;
          TapeScope<float> scope(tape);
          DualPathState out = dual ? micro_block_forward_dual(blk, in)
                                   : micro_block_forward(blk, in, true);
          Tensor joint = out.joint();
          if (seed_grad.empty()) {
            Rng srng(555 + s);
            seed_grad.resize(static_cast<std::size_t>(joint.numel()));
            for (auto& v : seed_grad) v = static_cast<float>(srng.normal());
          }
          tape.backward_seeded(joint, seed_grad);
          std::vector<float> vals(joint.values().begin(), joint.values().end());
          std::vector<std::vector<float>> grads;
          for (Tensor p : block_params(blk)) {
            auto g = p.grad();
            grads.emplace_back(g.begin(), g.end());
            p.clear_grad();
          }
          return std::make_pair(vals, grads);
        };
        auto [v1, g1] = run(false);
        auto [v2, g2] = run(true);
        DualSplitCase c;
        c.name = spec.name + " conv" + std::to_string(i + 2) +
                 (entry ? " entry" : " normal") + " seed " + std::to_string(s);
        c.forward_dev = norm_max_dev(v1, v2);
        for (std::size_t p = 0; p < g1.size(); ++p) {
          c.grad_dev = std::max(c.grad_dev, norm_max_dev(g1[p], g2[p]));
        }
        c.pass = c.forward_dev <= tol && c.grad_dev <= tol;
        rep.max_forward_dev = std::max(rep.max_forward_dev, c.forward_dev);
        rep.max_grad_dev = std::max(rep.max_grad_dev, c.grad_dev);
        rep.cases.push_back(std::move(c));
      }
    }
  }
  rep.pass = rep.max_forward_dev <= tol && rep.max_grad_dev <= tol;
  return rep;
}

DualSplitReport check_dual_split_network(const ArchSpec& spec, int seeds, double tol,
                                         int input_hw, int batch) {
  DualSplitReport rep;
  rep.tolerance = tol;
  for (int s = 0; s < seeds; ++s) {
    Network net(spec, 4200 + s);
    Rng rng(77 + s);
    Tensor input = random_map(batch, 3, input_hw, rng);
    std::vector<int> labels(batch);
    for (auto& l : labels) {
      l = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.classifier.classes)));
    }
    auto run = [&](bool dual) {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor logits = dual ? net.forward_dual(input) : net.forward(input, true);
      Tensor loss = softmax_cross_entropy(logits, labels);
      tape.backward(loss);
      std::vector<float> lv(logits.values().begin(), logits.values().end());
      std::vector<std::vector<float>> grads;
      for (auto& [name, p] : net.parameters()) {
        auto g = p.grad();
        grads.emplace_back(g.begin(), g.end());
      }
      net.zero_grads();
      return std::make_pair(lv, grads);
    };
    auto [l1, g1] = run(false);
    auto [l2, g2] = run(true);
    DualSplitCase c;
    c.name = spec.name + " network seed " + std::to_string(s);
    c.forward_dev = norm_max_dev(l1, l2);
    for (std::size_t p = 0; p < g1.size(); ++p) {
      c.grad_dev = std::max(c.grad_dev, norm_max_dev(g1[p], g2[p]));
    }
    c.pass = c.forward_dev <= tol && c.grad_dev <= tol;
    rep.max_forward_dev = std::max(rep.max_forward_dev, c.forward_dev);
    rep.max_grad_dev = std::max(rep.max_grad_dev, c.grad_dev);
    rep.cases.push_back(std::move(c));
  }
  rep.pass = rep.max_forward_dev <= tol && rep.max_grad_dev <= tol;
  return rep;
}

}  // namespace dpn
