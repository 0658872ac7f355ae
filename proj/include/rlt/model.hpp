#pragma once

#include "rlt/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace rlt {

enum class LayerKind { conv3x3, dense };

struct LayerDesc {
    LayerKind kind = LayerKind::conv3x3;
    int fan_in = 0;   // input channels (conv) or input features (dense)
    int fan_out = 0;  // output channels / features
    int stride = 1;   // conv only
    bool prunable = true;

    // flattened weight count; all layers are bias-free
    long param_count() const {
        long k = (kind == LayerKind::conv3x3) ? 9 : 1;
        return static_cast<long>(fan_in) * fan_out * k;
    }
};

// A desk-scale classifier family. Conv layers run 3x3/pad-1 with ReLU, a
// global average pool feeds the final dense layer. layer_descriptors fully
// determine the parameter count.
struct ArchitectureSpec {
    std::string arch_id;
    int in_channels = 3;
    int height = 8;
    int width = 8;
    int num_classes = 10;
    std::vector<LayerDesc> layers;

    long param_count() const;
    long prunable_param_count() const;
    nlohmann::json to_json() const;
};

// Registry of the four base structures (two shallower, two wider).
const ArchitectureSpec& find_architecture(const std::string& arch_id);
std::vector<std::string> registered_architectures();

enum class MaskScope { per_layer, global };

// Fraction of weights kept by the mask.
struct RemainingRatio {
    double value = 1.0;

    static const std::vector<double>& library_values();  // the ten registered ratios
    long budget_for(long prunable_params) const;
};

// Top-k binarization by |score|, ties broken toward the lowest flattened
// index (layer-major for global scope). Throws std::invalid_argument when k
// exceeds the entry count in scope.
MaskVec topk_binarize(const Vec& scores, long k);
std::vector<MaskVec> topk_binarize(const std::vector<Vec>& scores, long k, MaskScope scope,
                                   const std::vector<long>& per_layer_budget = {});

struct MaskedLayer {
    LayerDesc desc;
    Vec omega;     // frozen random weights
    Vec scores;    // learnable lambda
    MaskVec mask;  // binary lambda-hat, top-k of |scores|
    long budget = 0;
};

// A classifier whose effective weights are mask .* omega. omega is drawn once
// from the seed and never trained; only scores (and therefore the mask) move.
class MaskedModel {
  public:
    MaskedModel(ArchitectureSpec spec, std::uint64_t seed);

    static MaskedModel build(const std::string& arch_id, std::uint64_t seed);

    const ArchitectureSpec& spec() const { return spec_; }
    std::uint64_t omega_seed() const { return seed_; }

    std::size_t layer_count() const { return layers_.size(); }
    const MaskedLayer& layer(std::size_t i) const { return layers_[i]; }
    MaskedLayer& layer(std::size_t i) { return layers_[i]; }

    MaskScope mask_scope() const { return scope_; }

    // Sets the sparsity budget from a remaining ratio and refreshes the mask.
    void set_sparsity(double remaining_ratio, MaskScope scope = MaskScope::per_layer);
    // Re-binarizes the mask from the current scores at the current budget.
    void refresh_mask();

    void set_mask(const std::vector<MaskVec>& mask);
    std::vector<MaskVec> mask() const;

    long mask_l0() const;
    long sparsity_budget() const;

    // scores proportional to |omega|: the initial top-k keeps the
    // largest-magnitude weights
    void init_scores();

    std::string omega_digest() const;

    // logits, shape (num_classes x batch); x columns are flattened
    // channel-major images with pixel values in [0,1]
    Mat forward(const Mat& x) const;

    struct Backward {
        Scalar loss = 0;                // mean cross-entropy
        Mat logits;                     // num_classes x batch
        std::vector<Vec> weight_grad;   // d loss / d effective weight, per layer
        Mat input_grad;                 // d loss / d x, same shape as x
    };
    Backward forward_backward(const Mat& x, const IntVec& y, bool want_weight_grad,
                              bool want_input_grad) const;

    IntVec predict(const Mat& x) const;

  private:
    void check_input(const Mat& x) const;

    ArchitectureSpec spec_;
    std::uint64_t seed_;
    std::vector<MaskedLayer> layers_;
    MaskScope scope_ = MaskScope::per_layer;
    long global_budget_ = 0;
};

// Mean cross-entropy of logits (classes x batch) against labels.
Scalar cross_entropy(const Mat& logits, const IntVec& y);

IntVec argmax_labels(const Mat& logits);

}  // namespace rlt
