#include <cmath>

#include "doctest.h"
#include "dcla/aggregator.hpp"
#include "dcla/dcla.hpp"
#include "dcla/errors.hpp"
#include "dcla/transformer.hpp"
#include "helpers.hpp"

using namespace dcla;

namespace {

double dist(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

DclaConfig with(double alpha, double tau) {
    DclaConfig c;
    c.alpha = alpha;
    c.tau = tau;
    return c;
}

} // namespace

TEST_CASE("cosine similarity") {
    const std::vector<float> x{0.3f, -1.2f, 2.0f};
    const std::vector<float> neg{-0.3f, 1.2f, -2.0f};
    CHECK(cosine_similarity(x, x) == doctest::Approx(1.0));
    CHECK(cosine_similarity(x, neg) == doctest::Approx(-1.0));
    CHECK(cosine_similarity(std::vector<float>{1, 0}, std::vector<float>{0, 1}) == 0.0);
    CHECK(cosine_similarity(std::vector<float>{0, 0}, std::vector<float>{1, 1}) == 1.0);
    CHECK(cosine_similarity(x, x) <= 1.0);
    CHECK_THROWS_AS(cosine_similarity(x, std::vector<float>{1}), InvalidArgument);
}

TEST_CASE("fuse") {
    const std::vector<float> h{1.0f, 0.0f}, agg{0.0f, 1.0f};
    const auto f = fuse(h, agg, 0.82);
    CHECK(f[0] == doctest::Approx(0.82));
    CHECK(f[1] == doctest::Approx(0.18));

    const std::vector<float> odd{0.1f, 1e-30f, -7.77f};
    CHECK(fuse(odd, std::vector<float>{5, 5, 5}, 1.0) == odd);
    CHECK_THROWS_AS(fuse(h, agg, 0.0), InvalidArgument);
    CHECK_THROWS_AS(fuse(h, agg, 1.5), InvalidArgument);
    CHECK_THROWS_AS(fuse(h, std::vector<float>{1}, 0.5), InvalidArgument);
}

TEST_CASE("fuse contracts toward the aggregate") {
    std::mt19937_64 rng(11);
    for (double alpha : {0.1, 0.5, 0.82, 0.99}) {
        for (int i = 0; i < 50; ++i) {
            const auto h = testing::random_vector(rng, 64);
            const auto r = testing::random_vector(rng, 64);
            const auto f = fuse(h, r, alpha);
            CHECK(dist(f, r) == doctest::Approx(alpha * dist(h, r)).epsilon(1e-6));
        }
    }
}

TEST_CASE("config validation") {
    CHECK_NOTHROW(validate(DclaConfig{}));
    CHECK_THROWS_AS(validate(with(0.0, 0.5)), InvalidArgument);
    CHECK_THROWS_AS(validate(with(1.01, 0.5)), InvalidArgument);
    CHECK_THROWS_AS(validate(with(0.5, 1.5)), InvalidArgument);
    CHECK_THROWS_AS(validate(with(0.5, -1.01)), InvalidArgument);
    DclaConfig c;
    c.gamma = -1;
    CHECK_THROWS_AS(validate(c), InvalidArgument);
    c = DclaConfig{};
    c.eps = 0;
    CHECK_THROWS_AS(validate(c), InvalidArgument);
    CHECK_THROWS_AS(dcla_hook(with(0.0, 0.5)), InvalidArgument);
}

TEST_CASE("eligible range") {
    DclaConfig c;
    CHECK(eligible_range(c, 8) == LayerRange{1, 7});
    c.include_final_layer = true;
    CHECK(eligible_range(c, 8) == LayerRange{1, 8});
    c.layer_min = 3;
    c.layer_max = 5;
    CHECK(eligible_range(c, 8) == LayerRange{3, 5});
    c.layer_max = 9;
    CHECK_THROWS_AS(eligible_range(c, 8), InvalidArgument);
    c.layer_min = 0;
    c.layer_max = 4;
    CHECK_THROWS_AS(eligible_range(c, 8), InvalidArgument);
    c.layer_min = 5;
    c.layer_max = 4;
    CHECK(eligible_range(c, 8).empty());
    DclaConfig one;
    CHECK(eligible_range(one, 1).empty());
}

TEST_CASE("layer range parsing") {
    CHECK(LayerRange::parse("1-4") == LayerRange{1, 4});
    CHECK(LayerRange::parse("3") == LayerRange{3, 3});
    CHECK(LayerRange::parse("none").empty());
    CHECK(LayerRange::parse("2-6").label() == "2-6");
    CHECK(LayerRange::none().label() == "none");
    CHECK_THROWS_AS(LayerRange::parse("4-1"), InvalidArgument);
    CHECK_THROWS_AS(LayerRange::parse("a-b"), InvalidArgument);
    CHECK_THROWS_AS(LayerRange::parse("1-4x"), InvalidArgument);
}

TEST_CASE("synthetic surge triggers and contracts") {
    // h = H + delta * u with u orthogonal to H: cos = |H| / sqrt(|H|^2 + delta^2).
    const double tau = 0.74;
    const std::vector<float> H{3.0f, 4.0f, 0.0f, 0.0f}; // |H| = 5
    const double delta = 5.0 * std::sqrt(1.0 / (tau * tau) - 1.0) * 1.5;
    const std::vector<float> h{3.0f, 4.0f, static_cast<float>(delta), 0.0f};
    const double cos = cosine_similarity(h, H);
    CHECK(cos == doctest::Approx(5.0 / std::sqrt(25.0 + delta * delta)));
    CHECK(cos < tau);

    // Layer 0 = H, so the aggregate seen at layer 1 is exactly H.
    DclaConfig c = with(0.82, tau);
    c.include_final_layer = true;
    auto hook = dcla_hook(c);
    hook->begin_step({0, 1, 0}, Matrix(1, 4, H));
    const Matrix out = hook->on_layer(1, Matrix(1, 4, h));
    const auto rec = hook->take_record();
    REQUIRE(rec.has_value());
    CHECK(rec->triggered);
    CHECK(rec->corrected_positions == std::vector<int>{0});
    CHECK(dist(out.row(0), H) < dist(h, H));
    CHECK(dist(out.row(0), H) == doctest::Approx(0.82 * dist(h, H)).epsilon(1e-6));
    CHECK(hook->corrected_set() == std::vector<int>{1});
    CHECK_FALSE(hook->take_record().has_value());
}

TEST_CASE("tau = -1 and alpha = 1 degenerate to regular decoding") {
    const auto& m = testing::golden_model();
    std::mt19937_64 rng(5);
    for (int i = 0; i < 10; ++i) {
        const auto prompt = testing::random_prompt(rng, 2 + i, 64);
        const auto regular = decode_greedy(m, prompt, 6).tokens;
        auto never = dcla_hook(with(0.3, -1.0));
        const auto a = decode_greedy(m, prompt, 6, never.get());
        CHECK(a.tokens == regular);
        for (const auto& s : a.trace.steps) {
            for (const auto& l : s.layers) CHECK_FALSE(l.triggered);
        }
        auto ident = dcla_hook(with(1.0, 1.0));
        CHECK(decode_greedy(m, prompt, 6, ident.get()).tokens == regular);
        auto empty = fixed_range_hook(0.2, 1.0, LayerRange::none());
        CHECK(decode_greedy(m, prompt, 6, empty.get()).tokens == regular);
        auto full_alpha = fixed_range_hook(1.0, 1.0, LayerRange{1, 4});
        CHECK(decode_greedy(m, prompt, 6, full_alpha.get()).tokens == regular);
    }
}

TEST_CASE("fixed range over every layer changes the golden output") {
    // Same sequences from the no-cache numpy reference (tests/oracle).
    const auto& m = testing::golden_model();
    const std::vector<std::pair<std::vector<int>, std::vector<int>>> cases{
        {{3, 1, 4}, {4, 4, 4, 4, 4, 4, 4, 4}},
        {{7, 7, 7}, {7, 7, 7, 7, 7, 7, 7, 7}},
        {{0, 1, 2, 3, 4, 5}, {5, 5, 5, 5, 5, 5, 5, 5}},
    };
    for (const auto& [prompt, expected] : cases) {
        auto hook = fixed_range_hook(0.3, 1.0, LayerRange{1, 4});
        const auto fixed = decode_greedy(m, prompt, 8, hook.get()).tokens;
        CHECK(fixed == expected);
        CHECK(fixed != decode_greedy(m, prompt, 8).tokens);
    }
}

TEST_CASE("regular hook: no corrections, similarities match dcla up to the first trigger") {
    const auto& m = testing::golden_model();
    const std::vector<int> prompt{3, 1, 4, 1, 5};
    auto reg = regular_hook();
    const auto r = decode_greedy(m, prompt, 5, reg.get());
    CHECK(r.tokens == decode_greedy(m, prompt, 5).tokens);
    for (const auto& s : r.trace.steps) {
        REQUIRE(s.layers.size() == 4);
        for (const auto& l : s.layers) {
            CHECK(l.similarity.has_value());
            CHECK_FALSE(l.triggered);
            CHECK(l.corrected_positions.empty());
        }
    }

    auto d = dcla_hook(with(0.5, 0.95));
    const auto t = decode_greedy(m, prompt, 5, d.get());
    const auto& a = r.trace.steps[0].layers;
    const auto& b = t.trace.steps[0].layers;
    bool any_trigger = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(*a[i].similarity == *b[i].similarity);
        if (b[i].triggered || !b[i].corrected_positions.empty()) {
            any_trigger = true;
            break;
        }
    }
    CHECK(any_trigger);
}

TEST_CASE("observer sees raw, aggregate and effective states") {
    const auto& m = testing::golden_model();
    auto hook = fixed_range_hook(0.6, 1.0, LayerRange{2, 3});
    int events = 0, corrected = 0;
    hook->set_observer([&](const LayerEvent& e) {
        ++events;
        if (e.layer == 0) {
            CHECK(e.aggregate.empty());
            return;
        }
        REQUIRE(e.aggregate.size() == 32);
        if (e.triggered) {
            ++corrected;
            CHECK((e.layer == 2 || e.layer == 3));
            CHECK(dist(e.effective, e.aggregate) == doctest::Approx(0.6 * dist(e.raw, e.aggregate)).epsilon(1e-6));
        } else {
            CHECK(std::equal(e.raw.begin(), e.raw.end(), e.effective.begin()));
        }
    });
    decode_greedy(m, std::vector<int>{1, 2, 3}, 3, hook.get());
    // prefill 3 rows x 5 layers, then 2 steps x 1 row x 5 layers
    CHECK(events == 25);
    CHECK(corrected == 10);
    CHECK(hook->corrected_set() == std::vector<int>{2, 3});
}

TEST_CASE("aggregate-only keeps the raw forward path") {
    const auto& m = testing::golden_model();
    const std::vector<int> prompt{9, 8, 7};
    DclaConfig c = with(0.2, 1.0);
    c.aggregate_only = true;
    auto hook = dcla_hook(c);
    std::vector<int> layers;
    hook->set_observer([&](const LayerEvent& e) {
        if (e.triggered) layers.push_back(e.layer);
    });
    const auto r = decode_greedy(m, prompt, 4, hook.get());
    CHECK_FALSE(layers.empty());
    // Corrections only reach later aggregates; the hidden path (and the output)
    // is the regular one.
    CHECK(r.tokens == decode_greedy(m, prompt, 4).tokens);
}

TEST_CASE("sequence-flattened scope") {
    const auto& m = testing::golden_model();
    const std::vector<int> prompt{3, 1, 4};

    DclaConfig never = with(0.5, -1.0);
    never.scope = SimilarityScope::SequenceFlattened;
    auto h = dcla_hook(never);
    CHECK(decode_greedy(m, prompt, 5, h.get()).tokens == decode_greedy(m, prompt, 5).tokens);

    DclaConfig always = with(0.5, 1.0);
    always.scope = SimilarityScope::SequenceFlattened;
    auto a = dcla_hook(always);
    std::vector<int> positions_seen;
    a->set_observer([&](const LayerEvent& e) { positions_seen.push_back(e.position); });
    const auto r = decode_greedy(m, prompt, 3, a.get());
    for (int p : positions_seen) CHECK(p == -1);
    const auto& prefill = r.trace.steps[0].layers;
    CHECK(prefill[0].triggered);
    CHECK(prefill[0].corrected_positions == std::vector<int>{0, 1, 2});
    CHECK(prefill[3].corrected_positions.empty()); // layer N outside the default range
    const auto& step2 = r.trace.steps[2].layers;
    CHECK(step2[1].corrected_positions == std::vector<int>{4});
    for (const auto& s : r.trace.steps) {
        for (const auto& l : s.layers) CHECK(l.similarity.has_value());
    }
}

TEST_CASE("last-token scope corrects positions independently in prefill") {
    const auto& m = testing::golden_model();
    auto hook = fixed_range_hook(0.5, 1.0, LayerRange{1, 1});
    const auto r = decode_greedy(m, std::vector<int>{3, 1, 4}, 2, hook.get());
    CHECK(r.trace.steps[0].layers[0].corrected_positions == std::vector<int>{0, 1, 2});
    CHECK(r.trace.steps[1].layers[0].corrected_positions == std::vector<int>{3});
    CHECK(r.trace.steps[1].layers[1].corrected_positions.empty());
    CHECK(hook->name() == "fixed:1-1");
    CHECK(dcla_hook(DclaConfig{})->name() == "dcla");
    CHECK(regular_hook()->name() == "regular");
}

TEST_CASE("range beyond model depth is rejected at decode time") {
    const auto& m = testing::golden_model();
    auto hook = fixed_range_hook(0.5, 1.0, LayerRange{1, 8});
    CHECK_THROWS_AS(decode_greedy(m, std::vector<int>{1}, 1, hook.get()), InvalidArgument);
}

TEST_CASE("config json") {
    DclaConfig c;
    c.layer_min = 2;
    const auto j = to_json(c);
    CHECK(j["alpha"].get<float>() == 0.82f);
    CHECK(j["tau"].get<float>() == 0.74f);
    CHECK(j["layer_min"].get<int>() == 2);
    CHECK(j["layer_max"].is_null());
    CHECK(j["scope"] == "last-token");
}
