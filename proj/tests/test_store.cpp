#include "rlt/store.hpp"

#include "rlt/rng.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <random>

using namespace rlt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("rlt-store-test-" + std::to_string(Rng(std::random_device{}()).next()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

RobustTicket make_ticket(const std::string& arch, double ratio, std::uint64_t seed,
                         std::uint64_t score_shuffle = 0) {
    MaskedModel m = MaskedModel::build(arch, seed);
    if (score_shuffle != 0) {
        // randomize scores so distinct tickets carry distinct masks at the
        // same (arch, ratio)
        Rng rng(score_shuffle);
        for (std::size_t l = 0; l < m.layer_count(); ++l)
            for (Index i = 0; i < m.layer(l).scores.size(); ++i)
                m.layer(l).scores[i] = rng.uniform();
    }
    m.set_sparsity(ratio);
    RobustTicket t;
    t.arch_id = arch;
    t.remaining_ratio = ratio;
    t.omega_seed = seed;
    t.mask = m.mask();
    t.metrics.clean_accuracy = 0.5 + 0.1 * (seed % 4);
    t.metrics.robust_accuracy = 0.25 + 0.1 * (seed % 3);
    t.training_config.rng_seed = seed;
    return t;
}

fs::path blob_path_of(const LibraryStore& store, const std::string& id) {
    for (const auto& e : store.manifest().entries)
        if (e.ticket_id == id) return store.root() / e.mask_blob_path;
    FAIL("ticket not in manifest: ", id);
    return {};
}

}  // namespace

TEST_CASE("expected mask budget: per-layer rounds per layer, global rounds once") {
    const ArchitectureSpec& spec = find_architecture("slim-8");
    long per_layer = 0;
    for (const auto& l : spec.layers) per_layer += std::lround(0.37 * l.param_count());
    CHECK(expected_mask_budget(spec, 0.37, MaskScope::per_layer) == per_layer);
    CHECK(expected_mask_budget(spec, 0.37, MaskScope::global) ==
          std::lround(0.37 * spec.prunable_param_count()));
}

TEST_CASE("save/load round trip preserves every ticket field") {
    TempDir dir;
    LibraryStore store(dir.path);
    Rng rng(404);
    std::vector<std::string> archs = registered_architectures();
    for (int iter = 0; iter < 200; ++iter) {
        const std::string arch = archs[rng.uniform_int(static_cast<int>(archs.size()))];
        const double ratio = 0.05 + 0.9 * rng.uniform() + iter * 1e-6;  // unique per iter
        RobustTicket t = make_ticket(arch, ratio, 1 + rng.next() % 1000, rng.next());
        const std::string id = store.save_ticket(t);
        REQUIRE(id.size() == 17);
        REQUIRE(id[0] == 't');

        RobustTicket back = store.load_ticket(id);
        CHECK(back.arch_id == t.arch_id);
        CHECK(back.remaining_ratio == t.remaining_ratio);
        CHECK(back.omega_seed == t.omega_seed);
        CHECK(back.metrics.clean_accuracy == t.metrics.clean_accuracy);
        CHECK(back.metrics.robust_accuracy == t.metrics.robust_accuracy);
        CHECK(back.training_config.rng_seed == t.training_config.rng_seed);
        REQUIRE(back.mask.size() == t.mask.size());
        for (std::size_t l = 0; l < t.mask.size(); ++l)
            CHECK((back.mask[l] == t.mask[l]).all());

        CHECK(store.find(arch, ratio) == id);
    }
    CHECK(store.manifest().entries.size() == 200);
    CHECK(store.validate().ok);
}

TEST_CASE("rebuilt model equals the saved one") {
    TempDir dir;
    LibraryStore store(dir.path);
    RobustTicket t = make_ticket("deep-8", 0.3, 77);
    const std::string id = store.save_ticket(t);
    MaskedModel m = store.load_model(id);
    MaskedModel direct = t.build_model();
    Rng rng(5);
    Mat x(3 * 8 * 8, 2);
    for (Index j = 0; j < x.cols(); ++j)
        for (Index i = 0; i < x.rows(); ++i) x(i, j) = rng.uniform();
    CHECK((m.forward(x) - direct.forward(x)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("saving identical content twice is a no-op with a stable id") {
    TempDir dir;
    LibraryStore store(dir.path);
    RobustTicket t = make_ticket("slim-8", 0.5, 9);
    const std::string a = store.save_ticket(t);
    const std::string b = store.save_ticket(t);
    CHECK(a == b);
    CHECK(store.manifest().entries.size() == 1);
}

TEST_CASE("a second ticket at the same (structure, sparsity) is rejected") {
    TempDir dir;
    LibraryStore store(dir.path);
    store.save_ticket(make_ticket("slim-8", 0.5, 9));
    CHECK_THROWS_AS(store.save_ticket(make_ticket("slim-8", 0.5, 10)), IntegrityError);
    CHECK(store.manifest().entries.size() == 1);
}

TEST_CASE("every single-byte corruption of the blob is detected") {
    TempDir dir;
    LibraryStore store(dir.path);
    const std::string id = store.save_ticket(make_ticket("slim-8", 0.5, 3));
    const fs::path blob = blob_path_of(store, id);
    std::ifstream in(blob, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    REQUIRE(!bytes.empty());

    Rng rng(8);
    int detected = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        std::string corrupted = bytes;
        const std::size_t pos = rng.next() % corrupted.size();
        corrupted[pos] = static_cast<char>(corrupted[pos] ^ (1 + rng.next() % 255));
        std::ofstream out(blob, std::ios::binary | std::ios::trunc);
        out.write(corrupted.data(), static_cast<std::streamsize>(corrupted.size()));
        out.close();
        try {
            store.load_ticket(id);
        } catch (const IntegrityError& e) {
            ++detected;
            CHECK(std::string(e.what()).find(blob.filename().string()) != std::string::npos);
        } catch (const ValidationError&) {
            ++detected;  // a flipped mask bit surfaces as a budget violation
        }
    }
    CHECK(detected == trials);  // 100% corruption detection

    // restore and confirm the store is healthy again
    std::ofstream out(blob, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_NOTHROW(store.load_ticket(id));
}

TEST_CASE("truncated and missing blobs are detected") {
    TempDir dir;
    LibraryStore store(dir.path);
    const std::string id = store.save_ticket(make_ticket("wide-8", 0.3, 4));
    const fs::path blob = blob_path_of(store, id);
    std::ifstream in(blob, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    std::ofstream out(blob, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_AS(store.load_ticket(id), IntegrityError);

    fs::remove(blob);
    CHECK_THROWS_AS(store.load_ticket(id), IntegrityError);
    CHECK(!store.validate().ok);
}

TEST_CASE("a tampered manifest ratio fails validation against the mask budget") {
    TempDir dir;
    LibraryStore store(dir.path);
    const std::string id = store.save_ticket(make_ticket("slim-8", 0.5, 6));

    std::ifstream in(store.root() / "manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(in);
    in.close();
    for (auto& e : manifest["entries"])
        if (e["ticket_id"] == id) e["remaining_ratio"] = 0.2;
    std::ofstream out(store.root() / "manifest.json", std::ios::trunc);
    out << manifest.dump(2);
    out.close();

    CHECK_THROWS_AS(store.load_ticket(id), ValidationError);
    auto report = store.validate();
    CHECK(!report.ok);
    bool flagged = false;
    for (const auto& e : report.entries)
        if (e.ticket_id == id && !e.ok) flagged = true;
    CHECK(flagged);
}

TEST_CASE("a crash between blob write and manifest commit leaves the store consistent") {
    TempDir dir;
    LibraryStore store(dir.path);
    store.save_ticket(make_ticket("slim-8", 0.3, 2));

    store.pre_commit_hook = [] { throw std::runtime_error("injected crash"); };
    CHECK_THROWS_WITH_AS(store.save_ticket(make_ticket("slim-8", 0.7, 5)), "injected crash",
                         std::runtime_error);
    CHECK(store.manifest().entries.size() == 1);  // no half-committed entry
    CHECK(store.validate().ok);

    // the save succeeds once the failure clears
    store.pre_commit_hook = nullptr;
    const std::string id = store.save_ticket(make_ticket("slim-8", 0.7, 5));
    CHECK_NOTHROW(store.load_ticket(id));
    CHECK(store.manifest().entries.size() == 2);
}

TEST_CASE("find resolves by structure and sparsity") {
    TempDir dir;
    LibraryStore store(dir.path);
    const std::string id = store.save_ticket(make_ticket("deep-8", 0.3, 8));
    CHECK(store.find("deep-8", 0.3) == id);
    CHECK(store.find("deep-8", 0.30000001) == id);  // micro-rounding tolerance
    CHECK(!store.find("deep-8", 0.5).has_value());
    CHECK(!store.find("slim-8", 0.3).has_value());
}

TEST_CASE("unknown ticket ids raise a not-found error") {
    TempDir dir;
    LibraryStore store(dir.path);
    CHECK_THROWS_AS(store.load_ticket("t0123456789abcdef"), NotFoundError);
}

TEST_CASE("a loaded library exposes its structures, ratios and models") {
    TempDir dir;
    LibraryStore store(dir.path);
    store.save_ticket(make_ticket("slim-8", 0.3, 1));
    store.save_ticket(make_ticket("slim-8", 0.5, 2));
    store.save_ticket(make_ticket("wide-8", 0.5, 3));

    TicketLibrary lib = TicketLibrary::load(store);
    CHECK(lib.size() == 3);
    CHECK(lib.structures() == std::vector<std::string>{"slim-8", "wide-8"});
    CHECK(lib.ratios_for("slim-8") == std::vector<double>{0.3, 0.5});
    CHECK(lib.contains("wide-8", 0.5));
    CHECK(!lib.contains("wide-8", 0.3));
    CHECK(lib.all_members().size() == 3);
    CHECK(lib.all_ticket_ids().size() == 3);

    const MaskedModel& m = lib.resolve("slim-8", 0.3);
    CHECK(m.spec().arch_id == "slim-8");
    CHECK_THROWS_AS(lib.resolve("deep-8", 0.3), ConfigError);
    CHECK_THROWS_AS(lib.ticket_id("deep-8", 0.3), ConfigError);
}
