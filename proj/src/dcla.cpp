#include "dcla/dcla.hpp"

#include <algorithm>
#include <cmath>

#include "dcla/errors.hpp"

namespace dcla {

std::string LayerRange::label() const {
    if (empty()) return "none";
    return std::to_string(first) + "-" + std::to_string(last);
}

LayerRange LayerRange::parse(const std::string& text) {
    if (text == "none" || text.empty()) return none();
    try {
        std::size_t used = 0;
        const auto dash = text.find('-');
        if (dash == std::string::npos) {
            const int k = std::stoi(text, &used);
            if (used != text.size()) throw InvalidArgument("");
            return {k, k};
        }
        const std::string a = text.substr(0, dash);
        const std::string b = text.substr(dash + 1);
        const int first = std::stoi(a, &used);
        if (used != a.size()) throw InvalidArgument("");
        const int last = std::stoi(b, &used);
        if (used != b.size()) throw InvalidArgument("");
        if (last < first) throw InvalidArgument("");
        return {first, last};
    } catch (const std::exception&) {
        throw InvalidArgument("malformed layer range '" + text + "' (expected a-b, k or none)");
    }
}

void validate(const DclaConfig& c) {
    if (!(c.alpha > 0.0 && c.alpha <= 1.0)) throw InvalidArgument("alpha must be in (0, 1]");
    if (!(c.tau >= -1.0 && c.tau <= 1.0)) throw InvalidArgument("tau must be in [-1, 1]");
    if (!(c.gamma >= 0.0) || !std::isfinite(c.gamma)) throw InvalidArgument("gamma must be finite and >= 0");
    if (!(c.eps > 0.0) || !std::isfinite(c.eps)) throw InvalidArgument("eps must be finite and > 0");
}

LayerRange eligible_range(const DclaConfig& c, int n_layers) {
    const LayerRange r{c.layer_min.value_or(1), c.layer_max.value_or(c.include_final_layer ? n_layers : n_layers - 1)};
    if (r.empty()) return LayerRange::none();
    if (r.first < 1 || r.last > n_layers) {
        throw InvalidArgument("eligible layer range " + r.label() + " outside [1, " + std::to_string(n_layers) + "]");
    }
    return r;
}

fjson to_json(const DclaConfig& c) {
    return fjson{{"alpha", static_cast<float>(c.alpha)},
                 {"tau", static_cast<float>(c.tau)},
                 {"gamma", static_cast<float>(c.gamma)},
                 {"layer_min", c.layer_min ? fjson(*c.layer_min) : fjson(nullptr)},
                 {"layer_max", c.layer_max ? fjson(*c.layer_max) : fjson(nullptr)},
                 {"include_final_layer", c.include_final_layer},
                 {"scope", to_string(c.scope)},
                 {"eps", static_cast<float>(c.eps)},
                 {"aggregate_only", c.aggregate_only}};
}

double cosine_similarity(std::span<const float> a, std::span<const float> b, double eps) {
    if (a.size() != b.size()) throw InvalidArgument("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    if (denom < eps) return 1.0;
    return std::clamp(dot / denom, -1.0, 1.0);
}

void fuse_into(std::span<const float> h, std::span<const float> aggregate, double alpha, std::span<float> out) {
    if (h.size() != aggregate.size() || out.size() != h.size()) throw InvalidArgument("fuse: shape mismatch");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("fuse: alpha must be in (0, 1]");
    if (alpha == 1.0) {
        std::copy(h.begin(), h.end(), out.begin());
        return;
    }
    const double keep = 1.0 - alpha;
    for (std::size_t i = 0; i < h.size(); ++i) {
        out[i] = static_cast<float>(alpha * static_cast<double>(h[i]) + keep * static_cast<double>(aggregate[i]));
    }
}

std::vector<float> fuse(std::span<const float> h, std::span<const float> aggregate, double alpha) {
    std::vector<float> out(h.size());
    fuse_into(h, aggregate, alpha, out);
    return out;
}

AggregationHook::AggregationHook(std::string name, CorrectionMode mode, DclaConfig config)
    : name_(std::move(name)), mode_(mode), config_(config), tau_(static_cast<float>(config.tau)) {
    validate(config_);
}

void AggregationHook::begin_step(const StepInfo& info, const Matrix& embedded) {
    info_ = info;
    range_ = eligible_range(config_, info.n_layers);
    record_.reset();
    const std::size_t d = embedded.cols();

    if (config_.scope == SimilarityScope::LastToken) {
        rows_.assign(embedded.rows(), AggregatorState(config_.gamma, d));
        for (std::size_t r = 0; r < embedded.rows(); ++r) {
            rows_[r].reset(info.step);
            rows_[r].push_layer(embedded.row(r), 0, false);
            if (observer_) {
                observer_({info.step, 0, info.first_position + static_cast<int>(r), embedded.row(r), {},
                           embedded.row(r), 1.0f, false});
            }
        }
        return;
    }

    if (info.first_position == 0 || history_effective_.size() != static_cast<std::size_t>(info.n_layers) + 1) {
        history_effective_.assign(static_cast<std::size_t>(info.n_layers) + 1, {});
        history_aggregate_.assign(static_cast<std::size_t>(info.n_layers) + 1, {});
    }
    joint_.emplace(config_.gamma, embedded.size());
    joint_->reset(info.step);
    joint_->push_layer(embedded.flat(), 0, false);
    if (observer_) observer_({info.step, 0, -1, embedded.flat(), {}, embedded.flat(), 1.0f, false});
}

bool AggregationHook::should_correct(int layer, float similarity) const {
    switch (mode_) {
    case CorrectionMode::None:
        return false;
    case CorrectionMode::Always:
        return range_.contains(layer);
    case CorrectionMode::Adaptive:
        return range_.contains(layer) && similarity < tau_;
    }
    return false;
}

Matrix AggregationHook::on_layer(int layer, Matrix hidden) {
    if (config_.scope == SimilarityScope::LastToken) {
        if (hidden.rows() != rows_.size()) throw InvalidArgument("hook: row count changed within a step");
        return on_layer_last_token(layer, std::move(hidden));
    }
    if (!joint_ || hidden.size() != joint_->width()) throw InvalidArgument("hook: state shape changed within a step");
    return on_layer_flattened(layer, std::move(hidden));
}

Matrix AggregationHook::on_layer_last_token(int layer, Matrix hidden) {
    const std::size_t d = hidden.cols();
    std::vector<float> aggregate(d), effective(d);
    CorrectionRecord rec;
    rec.step = info_.step;
    rec.layer = layer;
    rec.scope = config_.scope;
    for (std::size_t r = 0; r < hidden.rows(); ++r) {
        auto raw = hidden.row(r);
        rows_[r].aggregate_into(aggregate);
        const auto sim = static_cast<float>(cosine_similarity(raw, aggregate, config_.eps));
        const bool triggered = should_correct(layer, sim);
        if (triggered) {
            fuse_into(raw, aggregate, config_.alpha, effective);
        } else {
            std::copy(raw.begin(), raw.end(), effective.begin());
        }
        rows_[r].push_layer(effective, layer, triggered);
        const int position = info_.first_position + static_cast<int>(r);
        if (observer_) observer_({info_.step, layer, position, raw, aggregate, effective, sim, triggered});
        if (triggered) {
            rec.corrected_positions.push_back(position);
            if (!config_.aggregate_only) std::copy(effective.begin(), effective.end(), raw.begin());
        }
        if (r + 1 == hidden.rows()) {
            rec.similarity = sim;
            rec.triggered = triggered;
        }
    }
    record_ = std::move(rec);
    return hidden;
}

Matrix AggregationHook::on_layer_flattened(int layer, Matrix hidden) {
    auto raw = hidden.flat();
    const std::vector<float> aggregate = joint_->aggregate();
    auto& hist_eff = history_effective_[static_cast<std::size_t>(layer)];
    auto& hist_agg = history_aggregate_[static_cast<std::size_t>(layer)];

    float sim;
    if (hist_eff.empty()) {
        sim = static_cast<float>(cosine_similarity(raw, aggregate, config_.eps));
    } else {
        std::vector<float> flat_h(hist_eff);
        flat_h.insert(flat_h.end(), raw.begin(), raw.end());
        std::vector<float> flat_agg(hist_agg);
        flat_agg.insert(flat_agg.end(), aggregate.begin(), aggregate.end());
        sim = static_cast<float>(cosine_similarity(flat_h, flat_agg, config_.eps));
    }
    const bool triggered = should_correct(layer, sim);
    std::vector<float> effective(raw.begin(), raw.end());
    if (triggered) fuse_into(raw, aggregate, config_.alpha, effective);
    joint_->push_layer(effective, layer, triggered);
    hist_eff.insert(hist_eff.end(), effective.begin(), effective.end());
    hist_agg.insert(hist_agg.end(), aggregate.begin(), aggregate.end());
    if (observer_) observer_({info_.step, layer, -1, raw, aggregate, effective, sim, triggered});

    CorrectionRecord rec;
    rec.step = info_.step;
    rec.layer = layer;
    rec.scope = config_.scope;
    rec.similarity = sim;
    rec.triggered = triggered;
    if (triggered) {
        for (std::size_t r = 0; r < hidden.rows(); ++r) rec.corrected_positions.push_back(info_.first_position + static_cast<int>(r));
        if (!config_.aggregate_only) std::copy(effective.begin(), effective.end(), raw.begin());
    }
    record_ = std::move(rec);
    return hidden;
}

std::optional<CorrectionRecord> AggregationHook::take_record() {
    auto out = std::move(record_);
    record_.reset();
    return out;
}

const std::vector<int>& AggregationHook::corrected_set() const {
    static const std::vector<int> empty;
    if (config_.scope == SimilarityScope::SequenceFlattened) return joint_ ? joint_->corrected_set() : empty;
    return rows_.empty() ? empty : rows_.back().corrected_set();
}

std::unique_ptr<AggregationHook> dcla_hook(const DclaConfig& config) {
    return std::make_unique<AggregationHook>("dcla", CorrectionMode::Adaptive, config);
}

std::unique_ptr<AggregationHook> fixed_range_hook(double alpha, double gamma, LayerRange range) {
    DclaConfig c;
    c.alpha = alpha;
    c.gamma = gamma;
    if (range.empty()) range = LayerRange::none();
    c.layer_min = range.first;
    c.layer_max = range.last;
    return std::make_unique<AggregationHook>("fixed:" + range.label(), CorrectionMode::Always, c);
}

std::unique_ptr<AggregationHook> regular_hook(double gamma) {
    DclaConfig c;
    c.gamma = gamma;
    return std::make_unique<AggregationHook>("regular", CorrectionMode::None, c);
}

} // namespace dcla
