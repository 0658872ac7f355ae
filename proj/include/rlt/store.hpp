#pragma once

#include "rlt/pruning.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace rlt {

// Total mask L0 implied by (spec, ratio, scope): per-layer budgets are
// rounded per layer, global scope rounds once over the prunable total.
long expected_mask_budget(const ArchitectureSpec& spec, double ratio, MaskScope scope);

struct ManifestEntry {
    std::string ticket_id;
    std::string arch_id;
    double remaining_ratio = 1.0;
    std::uint64_t omega_seed = 0;
    std::string mask_blob_path;  // relative to the library root
    std::string mask_sha256;
    TicketMetrics metrics;
    TrainingConfig training_config;
};

struct LibraryManifest {
    int format_version = 1;
    std::vector<ManifestEntry> entries;
};

// Persistent checksummed ticket storage. Weights are never stored; a ticket
// is (arch_id, ratio, omega_seed, mask blob) and rebuilds deterministically.
//
// Blob layout (little-endian): magic "RLTM", u32 version, u32 layer_count,
// then per layer a u64 entry count followed by the bit-packed mask
// (LSB-first within each byte), then a trailing 32-byte SHA-256 of all
// preceding bytes.
class LibraryStore {
  public:
    explicit LibraryStore(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }

    // Content-derived id; saving identical content twice is a no-op.
    // Id collision with differing content raises IntegrityError.
    std::string save_ticket(const RobustTicket& ticket);

    RobustTicket load_ticket(const std::string& ticket_id) const;
    MaskedModel load_model(const std::string& ticket_id) const;

    LibraryManifest manifest() const;
    std::optional<std::string> find(const std::string& arch_id, double remaining_ratio) const;

    struct EntryReport {
        std::string ticket_id;
        bool ok = true;
        std::string detail;
    };
    struct Report {
        bool ok = true;
        std::vector<std::string> manifest_errors;
        std::vector<EntryReport> entries;
    };
    Report validate() const;

    static std::string ticket_id_for(const RobustTicket& ticket);

    // test fail-point, invoked after the blob lands but before the manifest
    // commit; lets tests simulate a crash mid-save
    std::function<void()> pre_commit_hook;

  private:
    std::filesystem::path manifest_path() const { return root_ / "manifest.json"; }
    void write_manifest_atomic(const LibraryManifest& m) const;

    std::filesystem::path root_;
};

// All tickets of a store loaded into memory, addressable by
// (structure, remaining ratio). Models are immutable once loaded.
class TicketLibrary {
  public:
    static TicketLibrary load(const LibraryStore& store);

    const MaskedModel& resolve(const std::string& arch_id, double ratio) const;
    const std::string& ticket_id(const std::string& arch_id, double ratio) const;
    bool contains(const std::string& arch_id, double ratio) const;

    std::vector<std::string> structures() const;
    std::vector<double> ratios_for(const std::string& arch_id) const;
    std::vector<const MaskedModel*> all_members() const;
    std::vector<std::string> all_ticket_ids() const;
    std::size_t size() const { return models_.size(); }

    void add(const std::string& ticket_id, const RobustTicket& ticket);

  private:
    using Key = std::pair<std::string, long>;  // (arch, round(ratio*1e4))
    static Key key_of(const std::string& arch, double ratio);

    std::map<Key, std::shared_ptr<const MaskedModel>> models_;
    std::map<Key, std::string> ids_;
};

}  // namespace rlt
