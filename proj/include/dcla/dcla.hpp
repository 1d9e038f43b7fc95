#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcla/aggregator.hpp"
#include "dcla/hook.hpp"
#include "dcla/fjson.hpp"

namespace dcla {

// Inclusive layer range; last < first is the empty range.
struct LayerRange {
    int first = 1;
    int last = 0;

    bool empty() const { return last < first; }
    bool contains(int layer) const { return layer >= first && layer <= last; }
    std::string label() const;

    static LayerRange none() { return {1, 0}; }
    // "a-b", "k" or "none".
    static LayerRange parse(const std::string& text);

    friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

struct DclaConfig {
    double alpha = 0.82;
    double tau = 0.74;
    double gamma = 1.0;
    // Eligible correction layers. Unset bounds resolve to 1 and N-1 (N with
    // include_final_layer). layer_max < layer_min means no eligible layer.
    std::optional<int> layer_min;
    std::optional<int> layer_max;
    bool include_final_layer = false;
    SimilarityScope scope = SimilarityScope::LastToken;
    double eps = 1e-12;
    // Corrected states enter the aggregate but the raw state feeds the next layer.
    bool aggregate_only = false;
};

// Bounds that do not depend on model depth.
void validate(const DclaConfig& config);
// Throws InvalidArgument when an explicit bound falls outside [1, n_layers].
LayerRange eligible_range(const DclaConfig& config, int n_layers);
fjson to_json(const DclaConfig& config);

// a.b / (|a||b|), clamped to [-1, 1]; 1 when |a||b| < eps.
double cosine_similarity(std::span<const float> a, std::span<const float> b, double eps = 1e-12);

// alpha * h + (1 - alpha) * aggregate, elementwise. alpha == 1 returns h bit-exactly.
std::vector<float> fuse(std::span<const float> h, std::span<const float> aggregate, double alpha);
void fuse_into(std::span<const float> h, std::span<const float> aggregate, double alpha, std::span<float> out);

enum class CorrectionMode {
    None,     // diagnostics only
    Adaptive, // correct when similarity < tau inside the eligible range
    Always,   // correct at every layer of the eligible range
};

// One observation per (layer, position) for last-token scope, or per layer
// (position = -1) for sequence-flattened scope. Layer 0 events carry an empty
// aggregate.
struct LayerEvent {
    int step = 0;
    int layer = 0;
    int position = -1;
    std::span<const float> raw;
    std::span<const float> aggregate;
    std::span<const float> effective;
    float similarity = 1.0f;
    bool triggered = false;
};

using LayerObserver = std::function<void(const LayerEvent&)>;

// Layer-aggregation hook shared by the adaptive, fixed-range and regular
// strategies. One instance per decode session.
class AggregationHook final : public LayerHook {
public:
    AggregationHook(std::string name, CorrectionMode mode, DclaConfig config);

    std::string name() const override { return name_; }
    void begin_step(const StepInfo& info, const Matrix& embedded) override;
    Matrix on_layer(int layer, Matrix hidden) override;
    std::optional<CorrectionRecord> take_record() override;

    void set_observer(LayerObserver observer) { observer_ = std::move(observer); }
    const DclaConfig& config() const { return config_; }
    CorrectionMode mode() const { return mode_; }
    // Corrected set of the last row's aggregator (last-token) or of the joint
    // aggregator (sequence-flattened), for the current step.
    const std::vector<int>& corrected_set() const;

private:
    bool should_correct(int layer, float similarity) const;
    Matrix on_layer_last_token(int layer, Matrix hidden);
    Matrix on_layer_flattened(int layer, Matrix hidden);

    std::string name_;
    CorrectionMode mode_;
    DclaConfig config_;
    float tau_;
    StepInfo info_;
    LayerRange range_;
    std::vector<AggregatorState> rows_;
    std::optional<AggregatorState> joint_;
    // Sequence-flattened scope: effective states and aggregates of positions
    // from earlier steps, per layer, concatenated by position.
    std::vector<std::vector<float>> history_effective_;
    std::vector<std::vector<float>> history_aggregate_;
    std::optional<CorrectionRecord> record_;
    LayerObserver observer_;
};

std::unique_ptr<AggregationHook> dcla_hook(const DclaConfig& config);
std::unique_ptr<AggregationHook> fixed_range_hook(double alpha, double gamma, LayerRange range);
std::unique_ptr<AggregationHook> regular_hook(double gamma = 1.0);

} // namespace dcla
