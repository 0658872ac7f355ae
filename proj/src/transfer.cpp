#include "rlt/transfer.hpp"

#include "rlt/rng.hpp"
#include "rlt/sha256.hpp"

#include <cstring>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

namespace rlt {

namespace fs = std::filesystem;

namespace {

constexpr Index kEvalBatch = 64;

// mirrors the batching and per-batch seed convention of evaluate_accuracy so
// the diagonal equals the white-box robust accuracy
Mat craft_adversarial(const MaskedModel& model, const Dataset& data, const AttackConfig& attack) {
    Mat x_adv(data.x.rows(), data.x.cols());
    Index batch_index = 0;
    for (Index begin = 0; begin < data.x.cols(); begin += kEvalBatch, ++batch_index) {
        const Index count = std::min(kEvalBatch, data.x.cols() - begin);
        AttackConfig cfg = attack;
        cfg.rng_seed = derive_seed(attack.rng_seed, static_cast<std::uint64_t>(batch_index));
        x_adv.middleCols(begin, count) =
            pgd_attack(model, data.x.middleCols(begin, count), data.y.segment(begin, count), cfg);
    }
    return x_adv;
}

std::string cache_key(const std::string& source_id, const Dataset& data,
                      const AttackConfig& attack) {
    return Sha256::hex_of(source_id + "|" + data.digest() + "|" + attack.digest()).substr(0, 24);
}

bool try_load_cache(const fs::path& file, Index rows, Index cols, Mat& out) {
    std::ifstream in(file, std::ios::binary);
    if (!in) return false;
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string blob = ss.str();
    const std::size_t payload = sizeof(Scalar) * static_cast<std::size_t>(rows) * cols;
    if (blob.size() != 4 + payload + 32 || blob.compare(0, 4, "RLTA") != 0) return false;
    auto digest = Sha256::hash(blob.data(), 4 + payload);
    if (std::memcmp(digest.data(), blob.data() + 4 + payload, 32) != 0) return false;
    out.resize(rows, cols);
    std::memcpy(out.data(), blob.data() + 4, payload);
    return true;
}

void store_cache(const fs::path& file, const Mat& x) {
    std::string blob = "RLTA";
    blob.append(reinterpret_cast<const char*>(x.data()),
                sizeof(Scalar) * static_cast<std::size_t>(x.size()));
    auto digest = Sha256::hash(blob.data(), blob.size());
    blob.append(reinterpret_cast<const char*>(digest.data()), digest.size());
    fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

}  // namespace

TransferMatrix transfer_matrix(const LibraryStore& store,
                               const std::vector<std::string>& source_ids,
                               const std::vector<std::string>& target_ids, const Dataset& data,
                               const AttackConfig& attack,
                               const std::optional<fs::path>& cache_dir, int jobs) {
    attack.validate();
    if (attack.family != AttackFamily::pgd)
        throw std::invalid_argument("transfer_matrix requires a pgd attack");

    TransferMatrix m;
    m.sources = source_ids;
    m.targets = target_ids;
    m.attack = attack;
    m.dataset_digest = data.digest();
    m.values.resize(static_cast<Index>(source_ids.size()), static_cast<Index>(target_ids.size()));

    std::vector<MaskedModel> targets;
    targets.reserve(target_ids.size());
    for (const auto& id : target_ids) targets.push_back(store.load_model(id));

    AttackConfig none;
    none.family = AttackFamily::none;

    for (std::size_t si = 0; si < source_ids.size(); ++si) {
        MaskedModel source = store.load_model(source_ids[si]);

        Mat x_adv;
        bool have = false;
        fs::path cache_file;
        if (cache_dir) {
            cache_file = *cache_dir / (cache_key(source_ids[si], data, attack) + ".adv");
            have = try_load_cache(cache_file, data.x.rows(), data.x.cols(), x_adv);
            if (!have && fs::exists(cache_file))
                std::cerr << "warning: adversarial cache " << cache_file
                          << " failed its digest check; regenerating\n";
        }
        if (!have) {
            x_adv = craft_adversarial(source, data, attack);
            if (cache_dir) store_cache(cache_file, x_adv);
        }

        auto eval_target = [&](std::size_t ti) {
            return evaluate_accuracy(Predictor::of(targets[ti]), x_adv, data.y, none, kEvalBatch);
        };
        if (jobs > 1) {
            std::vector<std::future<double>> futs;
            for (std::size_t ti = 0; ti < targets.size(); ++ti)
                futs.push_back(std::async(std::launch::async, eval_target, ti));
            for (std::size_t ti = 0; ti < targets.size(); ++ti)
                m.values(static_cast<Index>(si), static_cast<Index>(ti)) = futs[ti].get();
        } else {
            for (std::size_t ti = 0; ti < targets.size(); ++ti)
                m.values(static_cast<Index>(si), static_cast<Index>(ti)) = eval_target(ti);
        }
    }
    return m;
}

TransferGapStats transfer_gap_stats(const TransferMatrix& matrix,
                                    const std::map<std::string, std::string>& structure_of) {
    auto arch_of = [&](const std::string& id) -> const std::string& {
        auto it = structure_of.find(id);
        if (it == structure_of.end())
            throw std::invalid_argument("no structure mapping for ticket " + id);
        return it->second;
    };

    std::map<std::string, int> seen;
    for (const auto& id : matrix.sources) ++seen[arch_of(id)];
    for (const auto& id : matrix.targets) ++seen[arch_of(id)];
    if (seen.size() < 2)
        throw std::invalid_argument("transfer_gap_stats needs at least two structures");

    double same_sum = 0, cross_sum = 0;
    long same_n = 0, cross_n = 0;
    for (std::size_t i = 0; i < matrix.sources.size(); ++i) {
        for (std::size_t j = 0; j < matrix.targets.size(); ++j) {
            if (matrix.sources[i] == matrix.targets[j]) continue;  // diagonal excluded
            const double v = matrix.values(static_cast<Index>(i), static_cast<Index>(j));
            if (arch_of(matrix.sources[i]) == arch_of(matrix.targets[j])) {
                same_sum += v;
                ++same_n;
            } else {
                cross_sum += v;
                ++cross_n;
            }
        }
    }
    TransferGapStats stats;
    stats.same_structure_mean = same_n > 0 ? same_sum / same_n : 0.0;
    stats.cross_structure_mean = cross_n > 0 ? cross_sum / cross_n : 0.0;
    stats.gap = stats.cross_structure_mean - stats.same_structure_mean;
    return stats;
}

void write_transfer_csv(const TransferMatrix& matrix, const fs::path& path,
                        const std::string& header_comment) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!header_comment.empty()) out << "# " << header_comment << "\n";
    out << "# attack_digest=" << matrix.attack.digest().substr(0, 16)
        << " dataset_digest=" << matrix.dataset_digest.substr(0, 16) << "\n";
    out << "source";
    for (const auto& t : matrix.targets) out << "," << t;
    out << "\n";
    char buf[32];
    for (std::size_t i = 0; i < matrix.sources.size(); ++i) {
        out << matrix.sources[i];
        for (std::size_t j = 0; j < matrix.targets.size(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.6f",
                          matrix.values(static_cast<Index>(i), static_cast<Index>(j)));
            out << "," << buf;
        }
        out << "\n";
    }
}

}  // namespace rlt
