#include "rlt/dataset.hpp"

#include "rlt/rng.hpp"
#include "rlt/sha256.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace rlt {

Dataset Dataset::subset(Index begin, Index count) const {
    if (begin < 0 || begin + count > size())
        throw std::invalid_argument("subset range out of bounds");
    Dataset out = *this;
    out.x = x.middleCols(begin, count);
    out.y = y.segment(begin, count);
    return out;
}

std::string Dataset::digest() const {
    Sha256 h;
    h.update(x.data(), sizeof(Scalar) * static_cast<std::size_t>(x.size()));
    h.update(y.data(), sizeof(int) * static_cast<std::size_t>(y.size()));
    return Sha256::hex(h.digest());
}

nlohmann::json SyntheticSpec::to_json() const {
    return {{"name", "synthetic"}, {"classes", num_classes}, {"channels", channels},
            {"height", height},   {"width", width},         {"train_size", train_size},
            {"test_size", test_size}, {"noise", noise},     {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
    SyntheticSpec s;
    s.num_classes = j.value("classes", s.num_classes);
    s.channels = j.value("channels", s.channels);
    s.height = j.value("height", s.height);
    s.width = j.value("width", s.width);
    s.train_size = j.value("train_size", s.train_size);
    s.test_size = j.value("test_size", s.test_size);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
    return s;
}

namespace {

// smooth prototype: a few random sinusoidal plane waves per channel,
// squashed into [0.15, 0.85] so noise rarely saturates
Mat make_prototypes(const SyntheticSpec& spec, Rng& rng) {
    const Index dim = static_cast<Index>(spec.channels) * spec.height * spec.width;
    Mat protos(dim, spec.num_classes);
    for (int cls = 0; cls < spec.num_classes; ++cls) {
        for (int c = 0; c < spec.channels; ++c) {
            const double fx = rng.uniform(0.5, 2.0);
            const double fy = rng.uniform(0.5, 2.0);
            const double px = rng.uniform(0.0, 6.283185307179586);
            const double py = rng.uniform(0.0, 6.283185307179586);
            const double amp = rng.uniform(0.6, 1.0);
            for (int iy = 0; iy < spec.height; ++iy) {
                for (int ix = 0; ix < spec.width; ++ix) {
                    const double u =
                        amp * std::sin(fx * ix / spec.width * 6.2831853 + px) *
                        std::cos(fy * iy / spec.height * 6.2831853 + py);
                    const Index idx = (static_cast<Index>(c) * spec.height + iy) * spec.width + ix;
                    protos(idx, cls) = 0.5 + 0.35 * u;
                }
            }
        }
    }
    return protos;
}

Dataset sample_split(const SyntheticSpec& spec, const Mat& protos, Index count, Rng& rng) {
    Dataset d;
    d.channels = spec.channels;
    d.height = spec.height;
    d.width = spec.width;
    d.num_classes = spec.num_classes;
    d.x.resize(protos.rows(), count);
    d.y.resize(count);
    for (Index j = 0; j < count; ++j) {
        const int cls = static_cast<int>(j % spec.num_classes);
        d.y[j] = cls;
        for (Index i = 0; i < protos.rows(); ++i) {
            const double v = protos(i, cls) + rng.uniform(-spec.noise, spec.noise);
            d.x(i, j) = std::clamp(v, 0.0, 1.0);
        }
    }
    return d;
}

}  // namespace

SplitDataset make_synthetic(const SyntheticSpec& spec) {
    Rng proto_rng(derive_seed(spec.seed, 0));
    Mat protos = make_prototypes(spec, proto_rng);
    SplitDataset out;
    Rng train_rng(derive_seed(spec.seed, 1));
    out.train = sample_split(spec, protos, spec.train_size, train_rng);
    Rng test_rng(derive_seed(spec.seed, 2));
    out.test = sample_split(spec, protos, spec.test_size, test_rng);
    return out;
}

}  // namespace rlt
