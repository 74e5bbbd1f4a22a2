#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dpn/tensor.hpp"

namespace dpn {

class Network;

// Named-tensor container. Wire format, all little-endian:
//   magic "DPNC", version u32, tensor count u32; per tensor: name length u16,
//   UTF-8 name, ndim u8, dims u32 each, dtype u8 (0 = 32-bit float), raw data.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Parameters plus BN running statistics, in registration order.
Checkpoint checkpoint_from(const Network& net);

// Copies matching tensors into the network; every network tensor must be
// present with the right shape.
void apply_checkpoint(Network& net, const Checkpoint& ck);

}  // namespace dpn
