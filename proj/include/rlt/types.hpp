#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rlt {

using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntVec = Eigen::VectorXi;
using MaskVec = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;
using Index = Eigen::Index;

// Bad registry ids, unresolvable ensemble members, malformed configs.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checksum mismatches, id collisions, corrupted blobs.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Manifest entries inconsistent with rebuilt state.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NotFoundError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runtime failures inside an experiment (non-finite loss, missing artifacts).
struct ExperimentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace rlt
