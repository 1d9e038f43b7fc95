#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dcla/aggregator.hpp"
#include "dcla/dcla.hpp"
#include "dcla/errors.hpp"
#include "dcla/report_io.hpp"
#include "dcla/synthbench.hpp"
#include "dcla/transformer.hpp"
#include "helpers.hpp"

using namespace dcla;

namespace {

SuiteParams small_params() {
    SuiteParams p;
    p.episodes = 24;
    p.prompt_length = 6;
    p.layers = {2, 3};
    p.magnitudes = {1.0, 4.0};
    return p;
}

const std::vector<EpisodeSpec>& small_suite() {
    static const auto s = default_suite(testing::golden_spec(), small_params());
    return s;
}

EpisodeSpec episode(int layer, double magnitude, DirectionMode dir = DirectionMode::OrthogonalToAggregate) {
    EpisodeSpec e;
    e.prompt = {3, 1, 4, 1, 5};
    e.layer = layer;
    e.magnitude = magnitude;
    e.direction = dir;
    e.max_new = 3;
    e.seed = 99;
    return e;
}

// Records what each layer's inner hook received and returned.
struct Recorder final : LayerHook {
    std::vector<Matrix> seen;
    std::vector<Matrix> returned;
    Matrix embedded;
    std::string name() const override { return "recorder"; }
    void begin_step(const StepInfo&, const Matrix& e) override {
        seen.clear();
        returned.clear();
        embedded = e;
    }
    Matrix on_layer(int, Matrix hidden) override {
        seen.push_back(hidden);
        returned.push_back(hidden);
        return hidden;
    }
};

double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

} // namespace

TEST_CASE("episode validation") {
    const ModelSpec s = testing::golden_spec();
    CHECK_NOTHROW(validate(episode(2, 1.0), s));
    CHECK_THROWS_AS(validate(episode(0, 1.0), s), InvalidArgument);
    CHECK_THROWS_AS(validate(episode(5, 1.0), s), InvalidArgument);
    CHECK_THROWS_AS(validate(episode(2, -1.0), s), InvalidArgument);
    auto e = episode(2, 1.0);
    e.step = 3;
    CHECK_THROWS_AS(validate(e, s), InvalidArgument);
    e = episode(2, 1.0);
    e.model_seed = 7;
    CHECK_THROWS_AS(validate(e, s), InvalidArgument);
    e = episode(2, 1.0);
    e.prompt.clear();
    CHECK_THROWS_AS(validate(e, s), InvalidArgument);
    CHECK_THROWS_AS(run_episode(testing::golden_model(), episode(9, 1.0), regular_strategy()), InvalidArgument);
}

TEST_CASE("enum parsing") {
    CHECK(parse_direction("orthogonal") == DirectionMode::OrthogonalToAggregate);
    CHECK(parse_direction("random-unit") == DirectionMode::RandomUnit);
    CHECK(parse_positions("all") == InjectionPositions::All);
    CHECK(parse_metric("accuracy") == SweepMetric::Accuracy);
    CHECK(std::string(to_string(DirectionMode::RandomUnit)) == "random-unit");
    CHECK_THROWS_AS(parse_direction("sideways"), InvalidArgument);
    CHECK_THROWS_AS(parse_positions("first"), InvalidArgument);
    CHECK_THROWS_AS(parse_metric("speed"), InvalidArgument);
}

TEST_CASE("zero magnitude leaves decoding untouched") {
    const auto& m = testing::golden_model();
    const auto e = episode(2, 0.0);
    auto inj = inject_surge(regular_hook(), e);
    CHECK(decode_greedy(m, e.prompt, e.max_new, inj.get()).tokens == decode_greedy(m, e.prompt, e.max_new).tokens);
    CHECK(inj->injections() == 0);
    const auto b = run_baseline(m, e);
    CHECK_FALSE(b.flipped);
    CHECK(b.clean_similarity == b.injected_similarity);
}

TEST_CASE("orthogonal surge is orthogonal to the aggregate and to h") {
    const auto& m = testing::golden_model();
    for (int layer : {1, 2, 3, 4}) {
        const auto e = episode(layer, 2.0);
        auto clean_rec = std::make_unique<Recorder>();
        auto* clean = clean_rec.get();
        auto zero = e;
        zero.magnitude = 0.0;
        auto inj0 = inject_surge(std::move(clean_rec), zero);
        decode_greedy(m, e.prompt, 0, inj0.get());

        auto rec = std::make_unique<Recorder>();
        auto* r = rec.get();
        auto inj = inject_surge(std::move(rec), e);
        decode_greedy(m, e.prompt, 0, inj.get());
        CHECK(inj->injections() == 1);

        const std::size_t last = e.prompt.size() - 1;
        std::vector<std::vector<float>> states{{clean->embedded.row(last).begin(), clean->embedded.row(last).end()}};
        for (int l = 1; l < layer; ++l) {
            auto row = clean->returned[static_cast<std::size_t>(l - 1)].row(last);
            states.emplace_back(row.begin(), row.end());
        }
        const auto agg = aggregate_bruteforce(states, 1.0);
        auto h = clean->seen[static_cast<std::size_t>(layer - 1)].row(last);
        auto hs = r->seen[static_cast<std::size_t>(layer - 1)].row(last);
        std::vector<float> u(h.size());
        for (std::size_t c = 0; c < h.size(); ++c) u[c] = hs[c] - h[c];
        const double hn = std::sqrt(dot(h, h));
        CHECK(std::sqrt(dot(u, u)) == doctest::Approx(2.0 * hn).epsilon(1e-4));
        CHECK(std::abs(dot(u, agg)) <= 1e-4 * std::sqrt(dot(u, u)) * std::sqrt(dot(agg, agg)));
        CHECK(std::abs(dot(u, h)) <= 1e-4 * std::sqrt(dot(u, u)) * hn);
        CHECK(cosine_similarity(hs, agg) < cosine_similarity(h, agg));
        // Other rows untouched.
        for (std::size_t p = 0; p < last; ++p) {
            auto a = clean->seen[static_cast<std::size_t>(layer - 1)].row(p);
            auto b = r->seen[static_cast<std::size_t>(layer - 1)].row(p);
            CHECK(std::equal(a.begin(), a.end(), b.begin()));
        }
    }
}

TEST_CASE("random-unit and all-position surges") {
    const auto& m = testing::golden_model();
    auto e = episode(2, 1.0, DirectionMode::RandomUnit);
    e.positions = InjectionPositions::All;
    auto inj = inject_surge(regular_hook(), e);
    decode_greedy(m, e.prompt, e.max_new, inj.get());
    CHECK(inj->injections() == static_cast<int>(e.prompt.size()));

    auto later = episode(2, 1.0);
    later.step = 2;
    auto inj2 = inject_surge(regular_hook(), later);
    const auto r = decode_greedy(m, later.prompt, later.max_new, inj2.get());
    CHECK(inj2->injections() == 1);
    const auto clean = decode_greedy(m, later.prompt, later.max_new).tokens;
    CHECK(r.tokens[0] == clean[0]);
    CHECK(r.tokens[1] == clean[1]);
    CHECK(inj2->name() == "regular");
}

TEST_CASE("strategies on a suite") {
    const auto& m = testing::golden_model();
    const auto& suite = small_suite();
    DclaConfig never;
    never.tau = -1.0;
    const auto report = run_suite(m, suite, {regular_strategy(), dcla_strategy(never, "never"),
                                             dcla_strategy(DclaConfig{})});
    REQUIRE(report.episode_count == 24);
    REQUIRE(report.strategies.size() == 3);
    const auto& regular = report.strategies[0];
    const auto& never_stats = report.strategies[1];
    CHECK(regular.flipped > 0);
    CHECK(regular.recovered == 0);
    CHECK(regular.triggered_on_flips == 0);
    CHECK(regular.corrections == 0);
    CHECK(never_stats.recovered == 0);
    CHECK(never_stats.corrections == 0);
    for (const auto& row : report.results) {
        CHECK(row[1].strategy_tokens == row[0].strategy_tokens);
        CHECK(row[0].strategy_tokens == row[0].perturbed_tokens);
        if (row[0].flipped) {
            CHECK(row[0].recovered == false);
            CHECK(row[1].recovered == false);
        } else {
            CHECK_FALSE(row[0].recovered.has_value());
        }
        CHECK(row[0].injected_similarity < row[0].clean_similarity);
    }

    // Rates equal a recount from per-episode results.
    for (std::size_t s = 0; s < 3; ++s) {
        int flipped = 0, recovered = 0, agree = 0, triggered = 0, no_harm = 0;
        for (const auto& row : report.results) {
            const auto& r = row[s];
            flipped += r.flipped;
            recovered += r.recovered.value_or(false);
            agree += r.agrees_with_clean;
            triggered += r.flipped && r.triggered;
            no_harm += !r.flipped && r.agrees_with_clean;
        }
        const auto& st = report.strategies[s];
        CHECK(st.flipped == flipped);
        CHECK(st.recovered == recovered);
        CHECK(st.agree == agree);
        CHECK(st.triggered_on_flips == triggered);
        CHECK(st.no_harm == no_harm);
        CHECK(*st.flip_rate() == doctest::Approx(static_cast<double>(flipped) / 24));
        CHECK(*st.accuracy() == doctest::Approx(static_cast<double>(agree) / 24));
        if (flipped) CHECK(*st.recovery_rate() == doctest::Approx(static_cast<double>(recovered) / flipped));
    }

    // Per-layer breakdown partitions the suite.
    int total = 0;
    for (const auto& lb : report.per_layer) total += lb.strategies[0].episodes;
    CHECK(total == 24);
}

TEST_CASE("zero-magnitude suite: nothing flips, recovery undefined") {
    auto p = small_params();
    p.magnitudes = {0.0};
    p.episodes = 6;
    const auto suite = default_suite(testing::golden_spec(), p);
    const auto report = run_suite(testing::golden_model(), suite, {regular_strategy(), dcla_strategy(DclaConfig{})});
    for (const auto& s : report.strategies) {
        CHECK(s.flipped == 0);
        CHECK(*s.flip_rate() == 0.0);
        CHECK_FALSE(s.recovery_rate().has_value());
        CHECK_FALSE(s.trigger_rate().has_value());
        CHECK(format_rate(s.recovery_rate()) == "n/a");
    }
}

TEST_CASE("duplicate episodes give identical results") {
    const auto& m = testing::golden_model();
    const std::vector<EpisodeSpec> suite{small_suite()[3], small_suite()[3]};
    const auto report = run_suite(m, suite, {dcla_strategy(DclaConfig{})});
    const auto& a = report.results[0][0];
    const auto& b = report.results[1][0];
    CHECK(a.strategy_tokens == b.strategy_tokens);
    CHECK(a.trigger_signature == b.trigger_signature);
    CHECK(a.min_similarity == b.min_similarity);
}

TEST_CASE("thread count does not change results") {
    const auto& m = testing::golden_model();
    BenchOptions one, many;
    many.jobs = 4;
    const auto strategies = std::vector<Strategy>{regular_strategy(), dcla_strategy(DclaConfig{})};
    const auto a = run_suite(m, small_suite(), strategies, one);
    const auto b = run_suite(m, small_suite(), strategies, many);
    CHECK(bench_csv(a) == bench_csv(b));
    CHECK(episodes_csv(a) == episodes_csv(b));
}

TEST_CASE("kept traces carry strategy and injection config") {
    BenchOptions opt;
    opt.keep_traces = true;
    const auto e = small_suite()[0];
    const auto r = run_episode(testing::golden_model(), e, dcla_strategy(DclaConfig{}), opt);
    REQUIRE(r.trace.has_value());
    CHECK(r.trace->meta.strategy == "dcla");
    CHECK(r.trace->meta.config["injection"]["layer"].get<int>() == e.layer);
    CHECK(r.trace->meta.config["strategy"]["tau"].get<float>() == 0.74f);
    CHECK_FALSE(run_episode(testing::golden_model(), e, regular_strategy()).trace.has_value());
}

TEST_CASE("default suite") {
    const auto a = default_suite(ModelSpec{});
    const auto b = default_suite(ModelSpec{});
    REQUIRE(a.size() == 200);
    CHECK(a == b);
    for (const auto& e : a) {
        CHECK(e.prompt.size() == 12);
        CHECK((e.layer >= 5 && e.layer <= 7));
        CHECK(e.direction == DirectionMode::OrthogonalToAggregate);
        CHECK_NOTHROW(validate(e, ModelSpec{}));
    }
    SuiteParams other;
    other.seed = 43;
    CHECK(default_suite(ModelSpec{}, other) != a);
    auto bad = other;
    bad.layers = {9};
    CHECK_THROWS_AS(default_suite(ModelSpec{}, bad), InvalidArgument);
}

TEST_CASE("sweep endpoints") {
    const auto& m = testing::golden_model();
    const auto matrix = sweep(m, small_suite(), {0.5, 1.0}, {-1.0, 0.74, 0.95}, DclaConfig{});
    REQUIRE(matrix.values.size() == 3);
    REQUIRE(matrix.values[0].size() == 2);
    for (std::size_t t = 0; t < 3; ++t) CHECK(*matrix.values[t][1] == 0.0);
    for (std::size_t a = 0; a < 2; ++a) CHECK(*matrix.values[0][a] == 0.0);
    CHECK(*matrix.values[2][0] > 0.0);

    // Rows with identical trigger signatures are cell-identical.
    const auto fine = sweep(m, small_suite(), {0.6, 0.8}, {0.70, 0.71, 0.72, 0.73, 0.74}, DclaConfig{});
    for (std::size_t t1 = 0; t1 < fine.taus.size(); ++t1) {
        for (std::size_t t2 = t1 + 1; t2 < fine.taus.size(); ++t2) {
            bool same = true;
            for (std::size_t a = 0; a < fine.alphas.size(); ++a) same &= fine.signatures[t1][a] == fine.signatures[t2][a];
            if (same) CHECK(fine.values[t1] == fine.values[t2]);
        }
    }
    CHECK_THROWS_AS(sweep(m, small_suite(), {0.0}, {0.5}, DclaConfig{}), InvalidArgument);
}

TEST_CASE("fixed-range comparison") {
    const auto& m = testing::golden_model();
    const auto table = compare_fixed_ranges(m, small_suite(), {LayerRange::none(), {1, 2}, {1, 3}}, DclaConfig{});
    REQUIRE(table.rows.size() == 5);
    CHECK(table.episodes == 24);
    CHECK(table.rows.front().kind == "regular");
    CHECK(table.rows.back().kind == "adaptive");
    CHECK(table.rows.back().name == "dcla");
    CHECK(table.rows[1].range == "none");
    CHECK(table.rows[1].stats.agree == table.rows[0].stats.agree);
    CHECK(table.rows[1].stats.recovered == 0);
    for (const auto& r : table.rows) CHECK(r.stats.episodes == 24);
}

TEST_CASE("correcting at the injection layer recovers at least as much as skipping it") {
    // Default suite, split by injection layer k: range k-k vs range 1-(k-1).
    // Summed over the suite only-k wins; layer 5 alone does not (3 vs 4).
    const Model& m = testing::default_model();
    const auto suite = default_suite(m.spec());
    const std::vector<std::pair<int, int>> frozen{{3, 4}, {3, 0}, {5, 1}};
    int only = 0, excluding = 0;
    for (int k : {5, 6, 7}) {
        std::vector<EpisodeSpec> sub;
        for (const auto& e : suite) {
            if (e.layer == k) sub.push_back(e);
        }
        const auto report = run_suite(m, sub, {fixed_strategy(0.82, 1.0, {k, k}), fixed_strategy(0.82, 1.0, {1, k - 1})},
                                      BenchOptions{1.0, 0, false});
        only += report.strategies[0].recovered;
        excluding += report.strategies[1].recovered;
        CHECK(report.strategies[0].recovered == frozen[static_cast<std::size_t>(k - 5)].first);
        CHECK(report.strategies[1].recovered == frozen[static_cast<std::size_t>(k - 5)].second);
    }
    CHECK(only >= excluding);
}
