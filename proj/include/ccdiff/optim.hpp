#pragma once
#include <cstdint>
#include <vector>

#include "ccdiff/tensor.hpp"

namespace ccdiff {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments are positional: the params list passed to step() must keep one order
// for the lifetime of the optimizer. Updates replace each tensor with a fresh
// one (buffers are immutable once shared).
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // params absent from the grad map count as zero-gradient
    void step(const std::vector<Tensor*>& params, const GradMap& grads);

    std::int64_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

} // namespace ccdiff
