#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dcla/dcla.hpp"
#include "dcla/model.hpp"
#include "dcla/transformer.hpp"

namespace dcla {

enum class DirectionMode { RandomUnit, OrthogonalToAggregate };
enum class InjectionPositions { Last, All };

const char* to_string(DirectionMode mode);
const char* to_string(InjectionPositions positions);
DirectionMode parse_direction(const std::string& text);
InjectionPositions parse_positions(const std::string& text);

// One surge-injection experiment: add magnitude * |h_k| * u to the layer-k
// state at one decode step.
struct EpisodeSpec {
    std::uint64_t model_seed = 42;
    std::vector<int> prompt;
    int layer = 1;
    InjectionPositions positions = InjectionPositions::Last;
    DirectionMode direction = DirectionMode::OrthogonalToAggregate;
    double magnitude = 1.0;
    int step = 0;
    int max_new = 1;
    std::uint64_t seed = 0;

    friend bool operator==(const EpisodeSpec&, const EpisodeSpec&) = default;
};

void validate(const EpisodeSpec& spec, const ModelSpec& model);

// Wraps an inner hook. At (spec.step, spec.layer) the surge is added before
// the inner hook sees the state; every other call passes straight through.
//
// Orthogonal mode draws a seeded Gaussian direction and removes its
// components along the layer's aggregate (weights from gamma, over the
// states the inner hook returned for layers 0..k-1) and along h_k itself, so
// the surge leaves h.H_agg unchanged and strictly grows |h|.
class SurgeInjector final : public LayerHook {
public:
    SurgeInjector(std::unique_ptr<LayerHook> inner, EpisodeSpec spec, double gamma);

    std::string name() const override { return inner_->name(); }
    void begin_step(const StepInfo& info, const Matrix& embedded) override;
    Matrix on_layer(int layer, Matrix hidden) override;
    std::optional<CorrectionRecord> take_record() override { return inner_->take_record(); }

    LayerHook& inner() { return *inner_; }
    // Number of rows perturbed so far.
    int injections() const { return injections_; }

private:
    std::vector<float> direction(std::size_t row, std::span<const float> hidden, std::span<const float> aggregate) const;

    std::unique_ptr<LayerHook> inner_;
    EpisodeSpec spec_;
    double gamma_;
    StepInfo info_;
    std::vector<AggregatorState> rows_;
    int injections_ = 0;
};

std::unique_ptr<SurgeInjector> inject_surge(std::unique_ptr<LayerHook> inner, const EpisodeSpec& spec,
                                            double gamma = 1.0);

using HookFactory = std::function<std::unique_ptr<LayerHook>()>;

struct Strategy {
    std::string name;
    HookFactory make;
    // Snapshot written into trace meta.
    fjson config = fjson::object();
};

Strategy regular_strategy(double gamma = 1.0);
Strategy dcla_strategy(const DclaConfig& config, std::string name = "dcla");
Strategy fixed_strategy(double alpha, double gamma, LayerRange range);

struct BenchOptions {
    // Decay for the diagnostic (regular) runs and the injector's aggregate.
    double gamma = 1.0;
    // Worker threads; 0 means hardware concurrency.
    int jobs = 1;
    // Keep each strategy run's trace in EpisodeResult::trace.
    bool keep_traces = false;
};

// Clean and injected-regular runs shared by every strategy of an episode.
struct EpisodeBaseline {
    std::vector<int> clean_tokens;
    std::vector<int> perturbed_tokens;
    bool flipped = false;
    // Recorded similarity at the injection layer and step, regular hook.
    float clean_similarity = 1.0f;
    float injected_similarity = 1.0f;
};

struct EpisodeResult {
    std::string strategy;
    int layer = 0;
    double magnitude = 0.0;
    std::vector<int> clean_tokens;
    std::vector<int> perturbed_tokens;
    std::vector<int> strategy_tokens;
    bool flipped = false;
    // Strategy triggered at the injection layer on the injection step.
    bool triggered = false;
    // Set only for flipped episodes.
    std::optional<bool> recovered;
    bool agrees_with_clean = false;
    float min_similarity = 1.0f;
    float clean_similarity = 1.0f;
    float injected_similarity = 1.0f;
    int corrections = 0;
    // Hash of every (step, layer, corrected position) decision of the strategy run.
    std::uint64_t trigger_signature = 0;
    // Strategy run trace when BenchOptions::keep_traces is set.
    std::optional<DecodeTrace> trace;
};

EpisodeBaseline run_baseline(const Model& model, const EpisodeSpec& spec, const BenchOptions& options = {});
EpisodeResult evaluate_strategy(const Model& model, const EpisodeSpec& spec, const EpisodeBaseline& baseline,
                                const Strategy& strategy, const BenchOptions& options = {});
// Three decodes: clean, injected+regular, injected+strategy.
EpisodeResult run_episode(const Model& model, const EpisodeSpec& spec, const Strategy& strategy,
                          const BenchOptions& options = {});

struct StrategyStats {
    std::string name;
    int episodes = 0;
    int flipped = 0;
    int triggered_on_flips = 0;
    int recovered = 0;
    int unflipped = 0;
    int no_harm = 0;
    int agree = 0;
    int corrections = 0;

    std::optional<double> flip_rate() const;
    std::optional<double> trigger_rate() const;
    std::optional<double> recovery_rate() const;
    std::optional<double> no_harm_rate() const;
    std::optional<double> accuracy() const;
};

StrategyStats tally(const std::string& name, const std::vector<EpisodeResult>& results);

struct LayerBreakdown {
    int layer = 0;
    std::vector<StrategyStats> strategies;
};

struct BenchReport {
    int episode_count = 0;
    std::vector<std::string> strategy_names;
    std::vector<StrategyStats> strategies;
    std::vector<LayerBreakdown> per_layer;
    // results[episode][strategy]
    std::vector<std::vector<EpisodeResult>> results;
    fjson config = fjson::object();
};

BenchReport run_suite(const Model& model, const std::vector<EpisodeSpec>& suite,
                      const std::vector<Strategy>& strategies, const BenchOptions& options = {});

enum class SweepMetric { Recovery, Accuracy };
const char* to_string(SweepMetric metric);
SweepMetric parse_metric(const std::string& text);

struct SweepMatrix {
    std::vector<double> alphas;
    std::vector<double> taus;
    SweepMetric metric = SweepMetric::Recovery;
    // values[tau][alpha]; empty when undefined (no flipped episodes).
    std::vector<std::vector<std::optional<double>>> values;
    // signatures[tau][alpha][episode]: the cell's per-episode trigger decisions.
    std::vector<std::vector<std::vector<std::uint64_t>>> signatures;
    // outputs[tau][alpha][episode]: hash of the generated tokens.
    std::vector<std::vector<std::vector<std::uint64_t>>> outputs;
};

// base supplies gamma, range and scope; each cell overrides alpha and tau.
SweepMatrix sweep(const Model& model, const std::vector<EpisodeSpec>& suite, const std::vector<double>& alphas,
                  const std::vector<double>& taus, const DclaConfig& base, SweepMetric metric = SweepMetric::Recovery,
                  const BenchOptions& options = {});

struct ComparisonRow {
    std::string name;
    std::string kind; // regular | fixed | adaptive
    std::string range;
    StrategyStats stats;
};

struct ComparisonTable {
    std::vector<ComparisonRow> rows;
    int episodes = 0;
};

// Regular baseline, one row per fixed range (alpha and gamma from config),
// and adaptive DCLA, all over the same suite.
ComparisonTable compare_fixed_ranges(const Model& model, const std::vector<EpisodeSpec>& suite,
                                     const std::vector<LayerRange>& ranges, const DclaConfig& config,
                                     const BenchOptions& options = {});

struct SuiteParams {
    int episodes = 200;
    int prompt_length = 12;
    std::vector<int> layers{5, 6, 7};
    std::vector<double> magnitudes{0.5, 1.0, 2.0, 4.0};
    DirectionMode direction = DirectionMode::OrthogonalToAggregate;
    InjectionPositions positions = InjectionPositions::Last;
    int max_new = 1;
    std::uint64_t seed = 42;
};

ModelSpec default_model_spec();
std::vector<EpisodeSpec> default_suite(const ModelSpec& model, const SuiteParams& params = {});

// Runs fn(i) for i in [0, n) on up to jobs threads (0: hardware concurrency).
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

} // namespace dcla
