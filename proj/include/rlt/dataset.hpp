#pragma once

#include "rlt/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>

namespace rlt {

// A labelled image batch. Columns of x are flattened channel-major images
// with values in [0,1].
struct Dataset {
    Mat x;
    IntVec y;
    int channels = 3;
    int height = 8;
    int width = 8;
    int num_classes = 10;

    Index size() const { return x.cols(); }
    Dataset subset(Index begin, Index count) const;
    // content digest over pixels and labels
    std::string digest() const;
};

struct SyntheticSpec {
    int num_classes = 10;
    int channels = 3;
    int height = 8;
    int width = 8;
    Index train_size = 1024;
    Index test_size = 256;
    double noise = 0.25;  // per-pixel uniform noise half-width
    std::uint64_t seed = 1;

    nlohmann::json to_json() const;
    static SyntheticSpec from_json(const nlohmann::json& j);
};

struct SplitDataset {
    Dataset train;
    Dataset test;
};

// Seeded procedural classification set: each class is a smooth low-frequency
// prototype image; samples are prototypes plus clipped uniform noise. Labels
// cycle round-robin so splits stay class-balanced.
SplitDataset make_synthetic(const SyntheticSpec& spec);

}  // namespace rlt
