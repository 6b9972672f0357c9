#pragma once

#include <cstdint>

namespace slotmix::kernels {

// Multiply-accumulate counter threaded through the routing loop; used to
// check the advertised linear cost scaling.
struct OpCounter {
    uint64_t macs = 0;
};

}  // namespace slotmix::kernels
