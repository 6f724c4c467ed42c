// types.hpp - shared dataset carrier types
#pragma once

#include <string>

#include "vqflow/tensor.hpp"

namespace vqflow {

// One multi-scale feature stack. features[i] is [H_i, W_i, D_i] with spatial
// extents halving per scale. The class id is bookkeeping for evaluation only;
// the model never sees it. The mask (finest resolution, one byte per
// position) is present exactly when the sample is anomalous.
struct FeatureSample {
    std::string id;
    int class_id = 0;
    bool anomalous = false;
    std::vector<Tensor> features;
    std::vector<std::uint8_t> mask;

    int scales() const { return static_cast<int>(features.size()); }
};

struct Dataset {
    std::vector<FeatureSample> train;
    std::vector<FeatureSample> test;
};

}  // namespace vqflow
