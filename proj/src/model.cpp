#include "rlt/model.hpp"

#include "rlt/rng.hpp"
#include "rlt/sha256.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rlt {

namespace {

using WMap = Eigen::Map<const RowMat>;
using WMapMut = Eigen::Map<RowMat>;

// 3x3, pad 1. Returns output spatial size.
std::pair<int, int> conv_out_size(int h, int w, int stride) {
    return {(h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1};
}

// a: (C x H*W) single sample -> cols: (C*9 x Ho*Wo)
void im2col(const Mat& a, int h, int w, int stride, Mat& cols) {
    const int c = static_cast<int>(a.rows());
    auto [ho, wo] = conv_out_size(h, w, stride);
    cols.setZero(c * 9, ho * wo);
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            const int col = oy * wo + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * stride + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * stride + kx - 1;
                    if (ix < 0 || ix >= w) continue;
                    for (int ch = 0; ch < c; ++ch)
                        cols(ch * 9 + ky * 3 + kx, col) = a(ch, iy * w + ix);
                }
            }
        }
    }
}

// adjoint of im2col: scatter-add dcols back onto the input grid
void col2im(const Mat& dcols, int c, int h, int w, int stride, Mat& da) {
    auto [ho, wo] = conv_out_size(h, w, stride);
    da.setZero(c, h * w);
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            const int col = oy * wo + ox;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * stride + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int ix = ox * stride + kx - 1;
                    if (ix < 0 || ix >= w) continue;
                    for (int ch = 0; ch < c; ++ch)
                        da(ch, iy * w + ix) += dcols(ch * 9 + ky * 3 + kx, col);
                }
            }
        }
    }
}

Vec softmax_col(const Vec& z) {
    Vec s = (z.array() - z.maxCoeff()).exp();
    return s / s.sum();
}

std::vector<ArchitectureSpec> make_registry() {
    auto conv = [](int ci, int co, int s) {
        return LayerDesc{LayerKind::conv3x3, ci, co, s, true};
    };
    auto dense = [](int fi, int fo) { return LayerDesc{LayerKind::dense, fi, fo, 1, true}; };

    std::vector<ArchitectureSpec> regs;
    // two shallower / two wider families over 3x8x8 inputs
    regs.push_back({"slim-8", 3, 8, 8, 10,
                    {conv(3, 16, 1), conv(16, 24, 2), conv(24, 32, 2), dense(32, 10)}});
    regs.push_back({"deep-8", 3, 8, 8, 10,
                    {conv(3, 16, 1), conv(16, 16, 1), conv(16, 24, 2), conv(24, 24, 1),
                     conv(24, 32, 2), conv(32, 32, 1), dense(32, 10)}});
    regs.push_back({"wide-8", 3, 8, 8, 10,
                    {conv(3, 32, 1), conv(32, 48, 2), conv(48, 64, 2), dense(64, 10)}});
    regs.push_back({"deepwide-8", 3, 8, 8, 10,
                    {conv(3, 32, 1), conv(32, 32, 1), conv(32, 48, 2), conv(48, 48, 1),
                     conv(48, 64, 2), conv(64, 64, 1), dense(64, 10)}});
    return regs;
}

const std::vector<ArchitectureSpec>& registry() {
    static const std::vector<ArchitectureSpec> regs = make_registry();
    return regs;
}

}  // namespace

long ArchitectureSpec::param_count() const {
    long n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
}

long ArchitectureSpec::prunable_param_count() const {
    long n = 0;
    for (const auto& l : layers)
        if (l.prunable) n += l.param_count();
    return n;
}

nlohmann::json ArchitectureSpec::to_json() const {
    nlohmann::json jl = nlohmann::json::array();
    for (const auto& l : layers) {
        jl.push_back({{"kind", l.kind == LayerKind::conv3x3 ? "conv3x3" : "dense"},
                      {"fan_in", l.fan_in},
                      {"fan_out", l.fan_out},
                      {"stride", l.stride},
                      {"prunable", l.prunable},
                      {"params", l.param_count()}});
    }
    return {{"arch_id", arch_id},
            {"input_shape", {in_channels, height, width}},
            {"num_classes", num_classes},
            {"layers", jl},
            {"param_count", param_count()},
            {"init", "uniform(-sqrt(6/fan_in_eff), sqrt(6/fan_in_eff)), fan_in_eff = fan_in*9 "
                     "for conv3x3, fan_in for dense"}};
}

const ArchitectureSpec& find_architecture(const std::string& arch_id) {
    for (const auto& a : registry())
        if (a.arch_id == arch_id) return a;
    throw ConfigError("unknown architecture id: " + arch_id);
}

std::vector<std::string> registered_architectures() {
    std::vector<std::string> ids;
    for (const auto& a : registry()) ids.push_back(a.arch_id);
    return ids;
}

const std::vector<double>& RemainingRatio::library_values() {
    static const std::vector<double> v = {0.07, 0.10, 0.12, 0.15, 0.20,
                                          0.30, 0.40, 0.50, 0.60, 0.70};
    return v;
}

long RemainingRatio::budget_for(long prunable_params) const {
    return std::lround(value * static_cast<double>(prunable_params));
}

MaskVec topk_binarize(const Vec& scores, long k) {
    const long n = scores.size();
    if (k < 0 || k > n) throw std::invalid_argument("topk_binarize: k out of range");
    std::vector<long> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0L);
    auto better = [&](long a, long b) {
        const Scalar sa = std::abs(scores[a]), sb = std::abs(scores[b]);
        if (sa != sb) return sa > sb;
        return a < b;  // ties: lowest flattened index wins
    };
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), better);
    MaskVec mask = MaskVec::Zero(n);
    for (long i = 0; i < k; ++i) mask[idx[static_cast<std::size_t>(i)]] = 1;
    return mask;
}

std::vector<MaskVec> topk_binarize(const std::vector<Vec>& scores, long k, MaskScope scope,
                                   const std::vector<long>& per_layer_budget) {
    std::vector<MaskVec> out;
    if (scope == MaskScope::per_layer) {
        if (per_layer_budget.size() != scores.size())
            throw std::invalid_argument("topk_binarize: per-layer budgets required");
        for (std::size_t l = 0; l < scores.size(); ++l)
            out.push_back(topk_binarize(scores[l], per_layer_budget[l]));
        return out;
    }
    long total = 0;
    for (const auto& s : scores) total += s.size();
    Vec flat(total);
    long off = 0;
    for (const auto& s : scores) {
        flat.segment(off, s.size()) = s;
        off += s.size();
    }
    MaskVec fm = topk_binarize(flat, k);
    off = 0;
    for (const auto& s : scores) {
        out.push_back(fm.segment(off, s.size()));
        off += s.size();
    }
    return out;
}

MaskedModel::MaskedModel(ArchitectureSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed) {
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
        const LayerDesc& d = spec_.layers[li];
        MaskedLayer layer;
        layer.desc = d;
        const long n = d.param_count();
        const double fan_in_eff = d.fan_in * (d.kind == LayerKind::conv3x3 ? 9.0 : 1.0);
        const double bound = std::sqrt(6.0 / fan_in_eff);
        Rng rng(derive_seed(seed, li));
        layer.omega.resize(n);
        for (long i = 0; i < n; ++i) layer.omega[i] = rng.uniform(-bound, bound);
        layer.mask = MaskVec::Ones(n);
        layer.budget = n;
        layers_.push_back(std::move(layer));
    }
    init_scores();
}

MaskedModel MaskedModel::build(const std::string& arch_id, std::uint64_t seed) {
    return MaskedModel(find_architecture(arch_id), seed);
}

void MaskedModel::init_scores() {
    for (auto& l : layers_) {
        const Scalar m = l.omega.cwiseAbs().maxCoeff();
        l.scores = l.omega.cwiseAbs() / (m > 0 ? m : 1.0);
    }
}

void MaskedModel::set_sparsity(double remaining_ratio, MaskScope scope) {
    if (remaining_ratio <= 0.0 || remaining_ratio > 1.0)
        throw std::invalid_argument("remaining ratio must lie in (0,1]");
    scope_ = scope;
    if (scope == MaskScope::per_layer) {
        for (auto& l : layers_)
            l.budget = l.desc.prunable ? std::lround(remaining_ratio * l.desc.param_count())
                                       : l.desc.param_count();
    } else {
        global_budget_ = std::lround(remaining_ratio * spec_.prunable_param_count());
    }
    refresh_mask();
}

void MaskedModel::refresh_mask() {
    if (scope_ == MaskScope::per_layer) {
        for (auto& l : layers_) l.mask = topk_binarize(l.scores, l.budget);
    } else {
        std::vector<Vec> scores;
        for (auto& l : layers_) scores.push_back(l.scores);
        auto masks = topk_binarize(scores, global_budget_, MaskScope::global);
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].mask = masks[i];
    }
}

void MaskedModel::set_mask(const std::vector<MaskVec>& mask) {
    if (mask.size() != layers_.size())
        throw std::invalid_argument("mask layer count mismatch");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (mask[i].size() != layers_[i].omega.size())
            throw std::invalid_argument("mask shape mismatch at layer " + std::to_string(i));
        layers_[i].mask = mask[i];
        layers_[i].budget = (mask[i] != 0).count();
    }
}

std::vector<MaskVec> MaskedModel::mask() const {
    std::vector<MaskVec> out;
    for (const auto& l : layers_) out.push_back(l.mask);
    return out;
}

long MaskedModel::mask_l0() const {
    long n = 0;
    for (const auto& l : layers_) n += (l.mask != 0).count();
    return n;
}

long MaskedModel::sparsity_budget() const {
    if (scope_ == MaskScope::global) return global_budget_;
    long n = 0;
    for (const auto& l : layers_) n += l.budget;
    return n;
}

std::string MaskedModel::omega_digest() const {
    Sha256 h;
    for (const auto& l : layers_)
        h.update(l.omega.data(), sizeof(Scalar) * static_cast<std::size_t>(l.omega.size()));
    return Sha256::hex(h.digest());
}

void MaskedModel::check_input(const Mat& x) const {
    const long want = static_cast<long>(spec_.in_channels) * spec_.height * spec_.width;
    if (x.rows() != want)
        throw std::invalid_argument("input rows " + std::to_string(x.rows()) +
                                    " do not match input shape (" + std::to_string(want) + ")");
}

Scalar cross_entropy(const Mat& logits, const IntVec& y) {
    const Index n = logits.cols();
    Scalar total = 0;
    for (Index j = 0; j < n; ++j) {
        Vec p = softmax_col(logits.col(j));
        total += -std::log(std::max(p[y[j]], Scalar(1e-300)));
    }
    return total / static_cast<Scalar>(n);
}

IntVec argmax_labels(const Mat& logits) {
    IntVec out(logits.cols());
    for (Index j = 0; j < logits.cols(); ++j) {
        Index r;
        logits.col(j).maxCoeff(&r);
        out[j] = static_cast<int>(r);
    }
    return out;
}

Mat MaskedModel::forward(const Mat& x) const {
    IntVec dummy;
    return forward_backward(x, dummy, false, false).logits;
}

IntVec MaskedModel::predict(const Mat& x) const { return argmax_labels(forward(x)); }

MaskedModel::Backward MaskedModel::forward_backward(const Mat& x, const IntVec& y,
                                                    bool want_weight_grad,
                                                    bool want_input_grad) const {
    check_input(x);
    const bool want_loss = y.size() > 0;
    const bool want_back = want_weight_grad || want_input_grad;
    if (want_back && !want_loss)
        throw std::invalid_argument("gradients require labels");
    const Index batch = x.cols();

    Backward out;
    out.logits.resize(spec_.num_classes, batch);
    if (want_weight_grad) {
        out.weight_grad.resize(layers_.size());
        for (std::size_t l = 0; l < layers_.size(); ++l)
            out.weight_grad[l] = Vec::Zero(layers_[l].omega.size());
    }
    if (want_input_grad) out.input_grad.setZero(x.rows(), batch);

    // effective weights, shared across the batch
    std::vector<Vec> eff(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l)
        eff[l] = layers_[l].mask.cast<Scalar>().matrix().cwiseProduct(layers_[l].omega);

    struct ConvState {
        Mat cols;  // C*9 x P
        Mat pre;   // out_ch x P, pre-ReLU
        int h = 0, w = 0;  // input spatial size of this layer
    };

    Scalar loss_sum = 0;

    for (Index j = 0; j < batch; ++j) {
        // spatial activation: channels x (h*w)
        Mat act = Eigen::Map<const Mat>(x.col(j).data(), spec_.height * spec_.width,
                                        spec_.in_channels)
                      .transpose();
        // x is channel-major: reinterpret as (h*w rows, channels cols) then transpose
        int h = spec_.height, w = spec_.width;
        bool spatial = true;
        Vec feat;  // dense-path activation
        std::vector<ConvState> conv_states;
        std::vector<Vec> dense_pre;    // pre-ReLU of intermediate dense layers
        std::vector<Vec> dense_in;     // inputs to each dense layer
        int gap_positions = 0;         // >0 when a global average pool fed the first dense

        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const LayerDesc& d = layers_[l].desc;
            if (d.kind == LayerKind::conv3x3) {
                ConvState st;
                st.h = h;
                st.w = w;
                im2col(act, h, w, d.stride, st.cols);
                WMap wmap(eff[l].data(), d.fan_out, d.fan_in * 9);
                st.pre = wmap * st.cols;
                act = st.pre.cwiseMax(Scalar(0));
                auto [ho, wo] = conv_out_size(h, w, d.stride);
                h = ho;
                w = wo;
                conv_states.push_back(std::move(st));
            } else {
                if (spatial) {
                    const long chw = act.rows() * h * w;
                    if (d.fan_in == act.rows()) {
                        gap_positions = h * w;
                        feat = act.rowwise().mean();
                    } else if (d.fan_in == chw) {
                        feat.resize(chw);
                        for (Index c = 0; c < act.rows(); ++c)
                            feat.segment(c * h * w, h * w) = act.row(c).transpose();
                    } else {
                        throw std::invalid_argument("dense fan_in incompatible with activation");
                    }
                    spatial = false;
                } else if (!dense_pre.empty()) {
                    feat = dense_pre.back().cwiseMax(Scalar(0));
                }
                dense_in.push_back(feat);
                WMap wmap(eff[l].data(), d.fan_out, d.fan_in);
                Vec pre = wmap * feat;
                dense_pre.push_back(pre);
                feat = pre;
            }
        }

        const Vec& logits = dense_pre.back();
        out.logits.col(j) = logits;
        if (!want_loss) continue;

        Vec p = softmax_col(logits);
        loss_sum += -std::log(std::max(p[y[j]], Scalar(1e-300)));
        if (!want_back) continue;

        // backward; gradient of the batch-mean loss
        Vec dvec = p;
        dvec[y[j]] -= 1.0;
        dvec /= static_cast<Scalar>(batch);

        // dense layers, last to first
        std::size_t conv_count = conv_states.size();
        std::size_t dense_count = dense_pre.size();
        for (std::size_t k = dense_count; k-- > 0;) {
            std::size_t l = conv_count + k;  // layers are convs-then-denses by construction
            const LayerDesc& d = layers_[l].desc;
            if (k + 1 < dense_count) {
                // dvec currently holds grad wrt post-ReLU input of layer k+1 ==
                // relu(pre_k); fold the ReLU mask of pre_k
                dvec = dvec.cwiseProduct(
                    (dense_pre[k].array() > 0).cast<Scalar>().matrix());
            }
            if (want_weight_grad) {
                WMapMut gmap(out.weight_grad[l].data(), d.fan_out, d.fan_in);
                gmap.noalias() += dvec * dense_in[k].transpose();
            }
            WMap wmap(eff[l].data(), d.fan_out, d.fan_in);
            dvec = wmap.transpose() * dvec;
        }

        // un-pool / un-flatten into spatial grad
        Mat dact;
        if (conv_count > 0) {
            const ConvState& last = conv_states.back();
            auto [ho, wo] = conv_out_size(last.h, last.w, layers_[conv_count - 1].desc.stride);
            const Index c_out = last.pre.rows();
            dact.resize(c_out, ho * wo);
            if (gap_positions > 0) {
                for (Index c = 0; c < c_out; ++c)
                    dact.row(c).setConstant(dvec[c] / static_cast<Scalar>(gap_positions));
            } else {
                for (Index c = 0; c < c_out; ++c)
                    dact.row(c) = dvec.segment(c * ho * wo, ho * wo).transpose();
            }
        } else if (want_input_grad) {
            // dense-only model: dvec is already the input gradient
            out.input_grad.col(j) = dvec;
            continue;
        }

        for (std::size_t l = conv_count; l-- > 0;) {
            const LayerDesc& d = layers_[l].desc;
            const ConvState& st = conv_states[l];
            // through ReLU
            Mat dpre = dact.cwiseProduct(
                (st.pre.array() > 0).cast<Scalar>().matrix());
            if (want_weight_grad) {
                WMapMut gmap(out.weight_grad[l].data(), d.fan_out, d.fan_in * 9);
                gmap.noalias() += dpre * st.cols.transpose();
            }
            if (l == 0 && !want_input_grad) break;
            WMap wmap(eff[l].data(), d.fan_out, d.fan_in * 9);
            Mat dcols = wmap.transpose() * dpre;
            Mat da;
            col2im(dcols, d.fan_in, st.h, st.w, d.stride, da);
            dact = std::move(da);
        }
        if (conv_count > 0 && want_input_grad) {
            // dact: (in_channels x h*w) -> channel-major column
            for (Index c = 0; c < dact.rows(); ++c)
                out.input_grad.col(j).segment(c * spec_.height * spec_.width,
                                              spec_.height * spec_.width) =
                    dact.row(c).transpose();
        }
    }

    if (want_loss) out.loss = loss_sum / static_cast<Scalar>(batch);
    return out;
}

}  // namespace rlt
