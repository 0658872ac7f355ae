#include "rlt/ensemble.hpp"

#include "rlt/rng.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <sstream>

using namespace rlt;

namespace {

TicketLibrary make_library(const std::map<std::string, std::vector<double>>& pools) {
    TicketLibrary lib;
    int c = 0;
    for (const auto& [arch, ratios] : pools) {
        for (double r : ratios) {
            RobustTicket t;
            t.arch_id = arch;
            t.remaining_ratio = r;
            t.omega_seed = 100 + static_cast<std::uint64_t>(c);
            MaskedModel m = MaskedModel::build(arch, t.omega_seed);
            m.set_sparsity(r);
            t.mask = m.mask();
            lib.add("tkt" + std::to_string(c), t);
            ++c;
        }
    }
    return lib;
}

SamplerConfig config_for(const std::map<std::string, std::vector<double>>& pools) {
    SamplerConfig cfg;
    cfg.pools = pools;
    return cfg;
}

Mat image_batch(Index cols, std::uint64_t seed) {
    Rng rng(seed);
    Mat x(3 * 8 * 8, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < x.rows(); ++i) x(i, j) = rng.uniform();
    return x;
}

}  // namespace

TEST_CASE("degenerate sampler configurations force known draws") {
    SUBCASE("inclusion 1, single-ratio pool: always exactly that one member") {
        auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.5}}};
        TicketLibrary lib = make_library(pools);
        SamplerConfig cfg = config_for(pools);
        cfg.structure_inclusion_prob = 1.0;
        cfg.count_prob_one = 1.0;
        Rng rng(1);
        for (int i = 0; i < 20; ++i) {
            ThetaSample theta = sample_theta(lib, cfg, rng);
            CHECK(theta.total == 1);
            CHECK(theta.alpha == std::vector<std::uint8_t>{1});
            CHECK(theta.picks[0] == std::vector<double>{0.5});
        }
        // a count draw of 2 is clamped to the pool size
        cfg.count_prob_one = 0.0;
        ThetaSample clamped = sample_theta(lib, cfg, rng);
        CHECK(clamped.total == 1);
    }
    SUBCASE("inclusion 1, count-two, four structures: total is always 8") {
        auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5}},
                                                                {"deep-8", {0.3, 0.5}},
                                                                {"wide-8", {0.3, 0.5}},
                                                                {"deepwide-8", {0.3, 0.5}}};
        TicketLibrary lib = make_library(pools);
        SamplerConfig cfg = config_for(pools);
        cfg.structure_inclusion_prob = 1.0;
        cfg.count_prob_one = 0.0;
        Rng rng(2);
        for (int i = 0; i < 10; ++i) {
            ThetaSample theta = sample_theta(lib, cfg, rng);
            CHECK(theta.total == 8);
            for (auto& p : theta.picks) CHECK(p.size() == 2);
        }
    }
}

TEST_CASE("expected ensemble size matches the exact enumeration oracle") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5, 0.7}},
                                                            {"deep-8", {0.3, 0.5, 0.7}},
                                                            {"wide-8", {0.3, 0.5, 0.7}},
                                                            {"deepwide-8", {0.3, 0.5, 0.7}}};
    TicketLibrary lib = make_library(pools);
    SamplerConfig cfg = config_for(pools);

    // oracle: enumerate all non-zero alpha patterns, weight by the conditional
    // probability, and take the expected sum of counts
    const int k = 4;
    const double p = cfg.structure_inclusion_prob;
    const double mean_count = cfg.count_prob_one * 1.0 + (1.0 - cfg.count_prob_one) * 2.0;
    double expected = 0, norm = 0;
    for (int bits = 1; bits < (1 << k); ++bits) {
        const int ones = __builtin_popcount(bits);
        const double prob = std::pow(p, ones) * std::pow(1 - p, k - ones);
        expected += prob * ones * mean_count;
        norm += prob;
    }
    expected /= norm;
    CHECK(expected == doctest::Approx(2.88).epsilon(1e-9));

    Rng rng(7);
    const int draws = 100000;
    double sum = 0;
    for (int i = 0; i < draws; ++i) sum += sample_theta(lib, cfg, rng).total;
    CHECK(sum / draws == doctest::Approx(expected).epsilon(0.02 / expected));
}

TEST_CASE("count distribution conditioned on inclusion is 65/35") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5}},
                                                            {"wide-8", {0.3, 0.5}}};
    TicketLibrary lib = make_library(pools);
    SamplerConfig cfg = config_for(pools);
    Rng rng(11);
    long ones = 0, total = 0;
    for (int i = 0; i < 100000; ++i) {
        ThetaSample theta = sample_theta(lib, cfg, rng);
        for (std::size_t s = 0; s < theta.structures.size(); ++s) {
            if (!theta.alpha[s]) continue;
            ++total;
            if (theta.counts[s] == 1) ++ones;
        }
    }
    const double frac = static_cast<double>(ones) / static_cast<double>(total);
    CHECK(frac >= 0.64);
    CHECK(frac <= 0.66);
}

TEST_CASE("joint (alpha, counts) distribution passes a chi-square test at 0.01") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5}},
                                                            {"wide-8", {0.3, 0.5}}};
    TicketLibrary lib = make_library(pools);
    SamplerConfig cfg = config_for(pools);

    // categories: (alpha pattern, count tuple); exact probabilities by hand.
    // alpha uniform over {01,10,11} after the all-zero re-draw; counts are
    // independent 0.65/0.35 per selected structure.
    const double p1 = cfg.count_prob_one, p2 = 1 - p1;
    std::map<std::string, double> expect = {
        {"a=10 n=1.", p1 / 3},      {"a=10 n=2.", p2 / 3},      {"a=01 n=.1", p1 / 3},
        {"a=01 n=.2", p2 / 3},      {"a=11 n=11", p1 * p1 / 3}, {"a=11 n=12", p1 * p2 / 3},
        {"a=11 n=21", p2 * p1 / 3}, {"a=11 n=22", p2 * p2 / 3},
    };
    std::map<std::string, long> observed;
    Rng rng(13);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        ThetaSample t = sample_theta(lib, cfg, rng);
        std::string key = "a=";
        key += t.alpha[0] ? '1' : '0';
        key += t.alpha[1] ? '1' : '0';
        key += " n=";
        key += t.alpha[0] ? static_cast<char>('0' + t.counts[0]) : '.';
        key += t.alpha[1] ? static_cast<char>('0' + t.counts[1]) : '.';
        ++observed[key];
    }
    double stat = 0;
    for (const auto& [key, prob] : expect) {
        const double e = prob * draws;
        const double o = static_cast<double>(observed[key]);
        stat += (o - e) * (o - e) / e;
    }
    const double pvalue = test::chi_square_pvalue(stat, static_cast<double>(expect.size() - 1));
    CHECK(pvalue > 0.01);
    // no unexpected categories appeared
    CHECK(observed.size() == expect.size());
}

TEST_CASE("every sampled theta satisfies its structural invariants") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5, 0.7}},
                                                            {"deep-8", {0.3, 0.5}},
                                                            {"wide-8", {0.1, 0.3, 0.5, 0.7}},
                                                            {"deepwide-8", {0.5}}};
    TicketLibrary lib = make_library(pools);
    SamplerConfig cfg = config_for(pools);
    Rng rng(17);
    for (int i = 0; i < 100000; ++i) {
        ThetaSample t = sample_theta(lib, cfg, rng);
        CHECK_NOTHROW(t.check_invariants());
        REQUIRE(t.total >= 1);
        REQUIRE(t.total <= 8);
    }
}

TEST_CASE("malformed theta samples are rejected") {
    ThetaSample t;
    t.structures = {"slim-8"};
    t.alpha = {1};
    t.counts = {1};
    t.picks = {{0.5}};
    t.total = 1;
    CHECK_NOTHROW(t.check_invariants());
    t.total = 2;
    CHECK_THROWS_AS(t.check_invariants(), ValidationError);
    t.total = 1;
    t.picks = {{0.5, 0.5}};
    t.counts = {2};
    t.total = 2;
    CHECK_THROWS_AS(t.check_invariants(), ValidationError);  // duplicate pick
    t.alpha = {0};
    t.counts = {0};
    t.picks = {{}};
    t.total = 0;
    CHECK_THROWS_AS(t.check_invariants(), ValidationError);  // nothing selected
}

TEST_CASE("ensemble forward: single member, hand mean, order independence") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5}},
                                                            {"wide-8", {0.5}}};
    TicketLibrary lib = make_library(pools);
    Mat x = image_batch(3, 23);

    SUBCASE("a single-member theta equals that model's forward pass") {
        ThetaSample t;
        t.structures = {"slim-8"};
        t.alpha = {1};
        t.counts = {1};
        t.picks = {{0.3}};
        t.total = 1;
        Mat out = ensemble_forward(t, lib, x);
        Mat direct = lib.resolve("slim-8", 0.3).forward(x);
        CHECK((out - direct).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("three members equal the hand-computed mean of their logits") {
        ThetaSample t;
        t.structures = {"slim-8", "wide-8"};
        t.alpha = {1, 1};
        t.counts = {2, 1};
        t.picks = {{0.3, 0.5}, {0.5}};
        t.total = 3;
        Mat out = ensemble_forward(t, lib, x);
        Mat hand = (lib.resolve("slim-8", 0.3).forward(x) + lib.resolve("slim-8", 0.5).forward(x) +
                    lib.resolve("wide-8", 0.5).forward(x)) /
                   3.0;
        CHECK((out - hand).cwiseAbs().maxCoeff() < 1e-12);
        // argmax of the mean equals argmax of the sum
        Mat sum = hand * 3.0;
        CHECK((argmax_labels(out).array() == argmax_labels(sum).array()).all());
    }
    SUBCASE("reversing the pick order does not change the output") {
        ThetaSample a;
        a.structures = {"slim-8"};
        a.alpha = {1};
        a.counts = {2};
        a.picks = {{0.3, 0.5}};
        a.total = 2;
        ThetaSample b = a;
        b.picks = {{0.5, 0.3}};
        CHECK((ensemble_forward(a, lib, x) - ensemble_forward(b, lib, x)).cwiseAbs().maxCoeff() <
              1e-12);
    }
    SUBCASE("probability averaging equals the hand-computed softmax mean") {
        ThetaSample t;
        t.structures = {"slim-8"};
        t.alpha = {1};
        t.counts = {2};
        t.picks = {{0.3, 0.5}};
        t.total = 2;
        auto softmax = [](Mat logits) {
            for (Index j = 0; j < logits.cols(); ++j) {
                Vec col = (logits.col(j).array() - logits.col(j).maxCoeff()).exp();
                logits.col(j) = col / col.sum();
            }
            return logits;
        };
        Mat hand = (softmax(lib.resolve("slim-8", 0.3).forward(x)) +
                    softmax(lib.resolve("slim-8", 0.5).forward(x))) /
                   2.0;
        CHECK((ensemble_forward(t, lib, x, true) - hand).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("single-structure sampling includes each ratio at the closed-form rate") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5, 0.7}}};
    TicketLibrary lib = make_library(pools);
    SamplerConfig cfg = config_for(pools);
    Rng rng(29);
    const int draws = 50000;
    long hit = 0;
    for (int i = 0; i < draws; ++i) {
        ThetaSample t = sample_r2s("slim-8", lib, cfg, rng);
        CHECK(t.structures == std::vector<std::string>{"slim-8"});
        CHECK(t.alpha == std::vector<std::uint8_t>{1});
        for (double r : t.picks[0])
            if (r == 0.5) ++hit;
    }
    // P(specific ratio in the draw) = E[n] / pool size = 1.35 / 3
    const double frac = static_cast<double>(hit) / draws;
    CHECK(frac == doctest::Approx(1.35 / 3.0).epsilon(0.025));
}

TEST_CASE("dynamic prediction is reproducible and audited") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3, 0.5}},
                                                            {"wide-8", {0.3, 0.5}}};
    TicketLibrary lib = make_library(pools);
    SamplerConfig cfg = config_for(pools);
    Mat x = image_batch(4, 31);

    SUBCASE("identical seeds replay the same theta and label sequence") {
        Rng a(42), b(42);
        for (int i = 0; i < 10; ++i) {
            DynamicPrediction pa = dynamic_predict(lib, cfg, x, a);
            DynamicPrediction pb = dynamic_predict(lib, cfg, x, b);
            CHECK((pa.labels.array() == pb.labels.array()).all());
            CHECK(pa.theta.to_json() == pb.theta.to_json());
        }
    }
    SUBCASE("the returned labels match a recomputation from the returned theta") {
        Rng rng(43);
        for (int i = 0; i < 5; ++i) {
            DynamicPrediction p = dynamic_predict(lib, cfg, x, rng);
            IntVec again = argmax_labels(ensemble_forward(p.theta, lib, x));
            CHECK((p.labels.array() == again.array()).all());
        }
    }
    SUBCASE("the audit log carries one parseable record per call") {
        std::ostringstream log;
        Rng rng(44);
        dynamic_predict(lib, cfg, x, rng, &log);
        dynamic_predict(lib, cfg, x, rng, &log);
        std::istringstream in(log.str());
        std::string line;
        int lines = 0;
        while (std::getline(in, line)) {
            ++lines;
            nlohmann::json j = nlohmann::json::parse(line);
            CHECK(j.contains("structures"));
            CHECK(j.contains("alpha"));
            CHECK(j.contains("counts"));
            CHECK(j.contains("picks"));
            CHECK(j.contains("total"));
            CHECK(j.contains("timestamp_ns"));
            CHECK(j["prediction_digest"].get<std::string>().size() == 16);
        }
        CHECK(lines == 2);
    }
}

TEST_CASE("sampler configuration and pool errors") {
    auto pools = std::map<std::string, std::vector<double>>{{"slim-8", {0.3}}};
    TicketLibrary lib = make_library(pools);
    Rng rng(1);

    SamplerConfig cfg = config_for(pools);
    cfg.structure_inclusion_prob = 0.0;
    CHECK_THROWS_AS(sample_theta(lib, cfg, rng), std::invalid_argument);

    cfg = config_for(pools);
    cfg.pools["slim-8"] = {0.3, 0.9};  // 0.9 has no ticket
    CHECK_THROWS_AS(sample_theta(lib, cfg, rng), ConfigError);

    cfg = config_for({});
    CHECK_THROWS_AS(sample_theta(lib, cfg, rng), ConfigError);

    cfg = config_for(pools);
    CHECK_THROWS_AS(sample_r2s("wide-8", lib, cfg, rng), ConfigError);
}
