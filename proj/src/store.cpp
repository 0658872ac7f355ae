#include "rlt/store.hpp"

#include "rlt/sha256.hpp"

#include <nlohmann/json.hpp>

#include <sys/file.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace rlt {

namespace fs = std::filesystem;

long expected_mask_budget(const ArchitectureSpec& spec, double ratio, MaskScope scope) {
    if (scope == MaskScope::global) return std::lround(ratio * spec.prunable_param_count());
    long total = 0;
    for (const auto& l : spec.layers)
        total += l.prunable ? std::lround(ratio * l.param_count()) : l.param_count();
    return total;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char(v >> (8 * i)));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char(v >> (8 * i)));
}

std::uint32_t get_u32(const std::string& s, std::size_t& off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(s.at(off++))) << (8 * i);
    return v;
}

std::uint64_t get_u64(const std::string& s, std::size_t& off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(s.at(off++))) << (8 * i);
    return v;
}

std::string pack_bits(const MaskVec& mask) {
    std::string out((static_cast<std::size_t>(mask.size()) + 7) / 8, '\0');
    for (Index i = 0; i < mask.size(); ++i)
        if (mask[i]) out[static_cast<std::size_t>(i) / 8] |= char(1 << (i % 8));
    return out;
}

MaskVec unpack_bits(const std::string& bytes, std::size_t off, std::uint64_t n) {
    MaskVec mask(static_cast<Index>(n));
    for (std::uint64_t i = 0; i < n; ++i)
        mask[static_cast<Index>(i)] =
            (std::uint8_t(bytes.at(off + i / 8)) >> (i % 8)) & 1;
    return mask;
}

std::string encode_blob(const std::vector<MaskVec>& mask) {
    std::string body = "RLTM";
    put_u32(body, 1);
    put_u32(body, static_cast<std::uint32_t>(mask.size()));
    for (const auto& m : mask) {
        put_u64(body, static_cast<std::uint64_t>(m.size()));
        body += pack_bits(m);
    }
    auto digest = Sha256::hash(body.data(), body.size());
    body.append(reinterpret_cast<const char*>(digest.data()), digest.size());
    return body;
}

std::vector<MaskVec> decode_blob(const std::string& blob, const std::string& name) {
    if (blob.size() < 4 + 4 + 4 + 32 || blob.compare(0, 4, "RLTM") != 0)
        throw IntegrityError("mask blob " + name + ": bad magic or truncated file");
    const std::string body = blob.substr(0, blob.size() - 32);
    auto digest = Sha256::hash(body.data(), body.size());
    if (std::memcmp(digest.data(), blob.data() + body.size(), 32) != 0)
        throw IntegrityError("mask blob " + name + ": checksum mismatch");
    std::size_t off = 4;
    std::uint32_t version = get_u32(body, off);
    if (version != 1)
        throw IntegrityError("mask blob " + name + ": unsupported version");
    std::uint32_t layers = get_u32(body, off);
    std::vector<MaskVec> out;
    try {
        for (std::uint32_t l = 0; l < layers; ++l) {
            std::uint64_t n = get_u64(body, off);
            out.push_back(unpack_bits(body, off, n));
            off += (n + 7) / 8;
        }
    } catch (const std::out_of_range&) {
        throw IntegrityError("mask blob " + name + ": truncated payload");
    }
    return out;
}

std::string mask_payload_sha(const std::vector<MaskVec>& mask) {
    Sha256 h;
    for (const auto& m : mask) {
        std::string bits = pack_bits(m);
        h.update(bits.data(), bits.size());
    }
    return Sha256::hex(h.digest());
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_atomic(const fs::path& p, const std::string& data) {
    fs::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        out.flush();
        if (!out) throw ExperimentError("write failed: " + tmp.string());
    }
    fs::rename(tmp, p);
}

nlohmann::json metrics_to_json(const TicketMetrics& m) {
    return {{"clean_accuracy", m.clean_accuracy}, {"robust_accuracy", m.robust_accuracy}};
}

TicketMetrics metrics_from_json(const nlohmann::json& j) {
    TicketMetrics m;
    m.clean_accuracy = j.value("clean_accuracy", 0.0);
    m.robust_accuracy = j.value("robust_accuracy", 0.0);
    return m;
}

nlohmann::json entry_to_json(const ManifestEntry& e) {
    return {{"ticket_id", e.ticket_id},
            {"arch_id", e.arch_id},
            {"remaining_ratio", e.remaining_ratio},
            {"omega_seed", e.omega_seed},
            {"mask_blob_path", e.mask_blob_path},
            {"mask_sha256", e.mask_sha256},
            {"metrics", metrics_to_json(e.metrics)},
            {"training_config", e.training_config.to_json()}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
    ManifestEntry e;
    e.ticket_id = j.at("ticket_id").get<std::string>();
    e.arch_id = j.at("arch_id").get<std::string>();
    e.remaining_ratio = j.at("remaining_ratio").get<double>();
    e.omega_seed = j.at("omega_seed").get<std::uint64_t>();
    e.mask_blob_path = j.at("mask_blob_path").get<std::string>();
    e.mask_sha256 = j.at("mask_sha256").get<std::string>();
    e.metrics = metrics_from_json(j.value("metrics", nlohmann::json::object()));
    e.training_config = TrainingConfig::from_json(j.value("training_config", nlohmann::json::object()));
    return e;
}

// advisory writer lock on the library root, released on destruction
class ScopedFlock {
  public:
    explicit ScopedFlock(const fs::path& root) {
        fd_ = ::open((root / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
        if (fd_ >= 0) ::flock(fd_, LOCK_EX);
    }
    ~ScopedFlock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }

  private:
    int fd_ = -1;
};

}  // namespace

LibraryStore::LibraryStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_ / "blobs");
    if (!fs::exists(manifest_path())) write_manifest_atomic(LibraryManifest{});
}

void LibraryStore::write_manifest_atomic(const LibraryManifest& m) const {
    nlohmann::json j;
    j["format_version"] = m.format_version;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : m.entries) j["entries"].push_back(entry_to_json(e));
    write_file_atomic(manifest_path(), j.dump(2) + "\n");
}

LibraryManifest LibraryStore::manifest() const {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(manifest_path()));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("unreadable manifest: " + std::string(e.what()));
    }
    if (!j.contains("format_version"))
        throw IntegrityError("manifest missing format_version");
    LibraryManifest m;
    m.format_version = j["format_version"].get<int>();
    for (const auto& je : j.value("entries", nlohmann::json::array()))
        m.entries.push_back(entry_from_json(je));
    return m;
}

std::string LibraryStore::ticket_id_for(const RobustTicket& ticket) {
    std::ostringstream content;
    content << ticket.arch_id << "|" << std::llround(ticket.remaining_ratio * 1e6) << "|"
            << ticket.omega_seed << "|" << mask_payload_sha(ticket.mask);
    return "t" + Sha256::hex_of(content.str()).substr(0, 16);
}

std::string LibraryStore::save_ticket(const RobustTicket& ticket) {
    const std::string id = ticket_id_for(ticket);
    const std::string blob = encode_blob(ticket.mask);
    const std::string mask_sha = mask_payload_sha(ticket.mask);

    ScopedFlock lock(root_);
    LibraryManifest m = manifest();
    for (const auto& e : m.entries) {
        if (e.ticket_id == id) {
            if (e.arch_id != ticket.arch_id || e.omega_seed != ticket.omega_seed ||
                e.mask_sha256 != mask_sha ||
                std::llround(e.remaining_ratio * 1e6) != std::llround(ticket.remaining_ratio * 1e6))
                throw IntegrityError("ticket id collision with differing content: " + id);
            return id;  // identical content already stored
        }
        if (e.arch_id == ticket.arch_id &&
            std::llround(e.remaining_ratio * 1e6) == std::llround(ticket.remaining_ratio * 1e6))
            throw IntegrityError("library already holds a ticket for (" + ticket.arch_id + ", " +
                                 std::to_string(ticket.remaining_ratio) + ")");
    }

    ManifestEntry e;
    e.ticket_id = id;
    e.arch_id = ticket.arch_id;
    e.remaining_ratio = ticket.remaining_ratio;
    e.omega_seed = ticket.omega_seed;
    e.mask_blob_path = "blobs/" + id + ".mask";
    e.mask_sha256 = mask_sha;
    e.metrics = ticket.metrics;
    e.training_config = ticket.training_config;

    // blob lands (atomically) before the manifest ever references it
    write_file_atomic(root_ / e.mask_blob_path, blob);
    if (pre_commit_hook) pre_commit_hook();
    m.entries.push_back(e);
    write_manifest_atomic(m);
    return id;
}

RobustTicket LibraryStore::load_ticket(const std::string& ticket_id) const {
    LibraryManifest m = manifest();
    const ManifestEntry* entry = nullptr;
    for (const auto& e : m.entries)
        if (e.ticket_id == ticket_id) entry = &e;
    if (entry == nullptr) throw NotFoundError("no manifest entry for ticket " + ticket_id);

    std::string blob;
    try {
        blob = read_file(root_ / entry->mask_blob_path);
    } catch (const NotFoundError&) {
        throw IntegrityError("mask blob missing: " + entry->mask_blob_path);
    }
    std::vector<MaskVec> mask = decode_blob(blob, entry->mask_blob_path);
    if (mask_payload_sha(mask) != entry->mask_sha256)
        throw IntegrityError("mask blob " + entry->mask_blob_path +
                             ": payload does not match manifest checksum");

    const ArchitectureSpec& spec = find_architecture(entry->arch_id);
    if (mask.size() != spec.layers.size())
        throw ValidationError("ticket " + ticket_id + ": mask layer count mismatch");
    long l0 = 0;
    for (std::size_t l = 0; l < mask.size(); ++l) {
        if (mask[l].size() != spec.layers[l].param_count())
            throw ValidationError("ticket " + ticket_id + ": mask shape mismatch at layer " +
                                  std::to_string(l));
        l0 += (mask[l] != 0).count();
    }
    const long want = expected_mask_budget(spec, entry->remaining_ratio,
                                           entry->training_config.mask_scope);
    if (l0 != want)
        throw ValidationError("ticket " + ticket_id + ": mask L0 " + std::to_string(l0) +
                              " inconsistent with remaining ratio (expected " +
                              std::to_string(want) + ")");

    RobustTicket t;
    t.arch_id = entry->arch_id;
    t.remaining_ratio = entry->remaining_ratio;
    t.omega_seed = entry->omega_seed;
    t.mask = std::move(mask);
    t.metrics = entry->metrics;
    t.training_config = entry->training_config;
    return t;
}

MaskedModel LibraryStore::load_model(const std::string& ticket_id) const {
    return load_ticket(ticket_id).build_model();
}

std::optional<std::string> LibraryStore::find(const std::string& arch_id,
                                              double remaining_ratio) const {
    for (const auto& e : manifest().entries)
        if (e.arch_id == arch_id &&
            std::llround(e.remaining_ratio * 1e6) == std::llround(remaining_ratio * 1e6))
            return e.ticket_id;
    return std::nullopt;
}

LibraryStore::Report LibraryStore::validate() const {
    Report report;
    LibraryManifest m = manifest();  // unreadable manifest throws (fatal)

    std::map<std::string, int> id_count;
    std::map<std::pair<std::string, long>, int> pair_count;
    for (const auto& e : m.entries) {
        ++id_count[e.ticket_id];
        ++pair_count[{e.arch_id, std::llround(e.remaining_ratio * 1e6)}];
    }
    for (const auto& [id, n] : id_count)
        if (n > 1) report.manifest_errors.push_back("duplicate ticket_id " + id);
    for (const auto& [key, n] : pair_count)
        if (n > 1)
            report.manifest_errors.push_back("duplicate (arch, ratio) pair for " + key.first);

    for (const auto& e : m.entries) {
        EntryReport er;
        er.ticket_id = e.ticket_id;
        try {
            load_ticket(e.ticket_id);
        } catch (const std::exception& ex) {
            er.ok = false;
            er.detail = ex.what();
        }
        report.entries.push_back(std::move(er));
    }
    report.ok = report.manifest_errors.empty();
    for (const auto& er : report.entries) report.ok = report.ok && er.ok;
    return report;
}

TicketLibrary::Key TicketLibrary::key_of(const std::string& arch, double ratio) {
    return {arch, std::lround(ratio * 1e4)};
}

TicketLibrary TicketLibrary::load(const LibraryStore& store) {
    TicketLibrary lib;
    for (const auto& e : store.manifest().entries)
        lib.add(e.ticket_id, store.load_ticket(e.ticket_id));
    return lib;
}

void TicketLibrary::add(const std::string& ticket_id, const RobustTicket& ticket) {
    Key k = key_of(ticket.arch_id, ticket.remaining_ratio);
    models_[k] = std::make_shared<const MaskedModel>(ticket.build_model());
    ids_[k] = ticket_id;
}

bool TicketLibrary::contains(const std::string& arch_id, double ratio) const {
    return models_.count(key_of(arch_id, ratio)) > 0;
}

const MaskedModel& TicketLibrary::resolve(const std::string& arch_id, double ratio) const {
    auto it = models_.find(key_of(arch_id, ratio));
    if (it == models_.end())
        throw ConfigError("no ticket loaded for (" + arch_id + ", " + std::to_string(ratio) + ")");
    return *it->second;
}

const std::string& TicketLibrary::ticket_id(const std::string& arch_id, double ratio) const {
    auto it = ids_.find(key_of(arch_id, ratio));
    if (it == ids_.end())
        throw ConfigError("no ticket loaded for (" + arch_id + ", " + std::to_string(ratio) + ")");
    return it->second;
}

std::vector<std::string> TicketLibrary::structures() const {
    std::vector<std::string> out;
    for (const auto& [key, _] : models_)
        if (out.empty() || out.back() != key.first) out.push_back(key.first);
    return out;
}

std::vector<double> TicketLibrary::ratios_for(const std::string& arch_id) const {
    std::vector<double> out;
    for (const auto& [key, _] : models_)
        if (key.first == arch_id) out.push_back(static_cast<double>(key.second) / 1e4);
    return out;
}

std::vector<const MaskedModel*> TicketLibrary::all_members() const {
    std::vector<const MaskedModel*> out;
    for (const auto& [_, m] : models_) out.push_back(m.get());
    return out;
}

std::vector<std::string> TicketLibrary::all_ticket_ids() const {
    std::vector<std::string> out;
    for (const auto& [_, id] : ids_) out.push_back(id);
    return out;
}

}  // namespace rlt
