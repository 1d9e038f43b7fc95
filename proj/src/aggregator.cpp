#include "dcla/aggregator.hpp"

#include <cmath>
#include <string>

#include "dcla/errors.hpp"

namespace dcla {

std::vector<double> layer_weights(int i, double gamma) {
    if (i < 1) throw InvalidArgument("layer_weights: i must be >= 1 (no preceding layers)");
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("layer_weights: gamma must be finite and >= 0");
    std::vector<double> w(static_cast<std::size_t>(i));
    double total = 0.0;
    for (int j = 0; j < i; ++j) {
        w[static_cast<std::size_t>(j)] = std::exp(gamma * static_cast<double>(j - (i - 1)));
        total += w[static_cast<std::size_t>(j)];
    }
    for (auto& x : w) x /= total;
    return w;
}

AggregatorState::AggregatorState(double gamma, std::size_t width)
    : gamma_(gamma), decay_(std::exp(-gamma)), numerator_(width, 0.0) {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("aggregator: gamma must be finite and >= 0");
}

void AggregatorState::push_layer(std::span<const float> effective, int layer, bool was_corrected) {
    if (layer != layer_count_) {
        throw InvalidArgument("aggregator: pushed layer " + std::to_string(layer) + ", expected " +
                              std::to_string(layer_count_));
    }
    if (effective.size() != numerator_.size()) throw InvalidArgument("aggregator: state width mismatch");
    for (std::size_t c = 0; c < numerator_.size(); ++c) {
        numerator_[c] = decay_ * numerator_[c] + static_cast<double>(effective[c]);
    }
    denominator_ = decay_ * denominator_ + 1.0;
    ++layer_count_;
    if (was_corrected) corrected_.push_back(layer);
}

void AggregatorState::aggregate_into(std::span<float> out) const {
    if (layer_count_ == 0) throw InvalidArgument("aggregator: no layers pushed");
    if (out.size() != numerator_.size()) throw InvalidArgument("aggregator: output width mismatch");
    const double inv = 1.0 / denominator_;
    for (std::size_t c = 0; c < numerator_.size(); ++c) out[c] = static_cast<float>(numerator_[c] * inv);
}

std::vector<float> AggregatorState::aggregate() const {
    std::vector<float> out(numerator_.size());
    aggregate_into(out);
    return out;
}

void AggregatorState::reset(int step) {
    std::fill(numerator_.begin(), numerator_.end(), 0.0);
    denominator_ = 0.0;
    layer_count_ = 0;
    step_ = step;
    corrected_.clear();
}

std::vector<float> aggregate_bruteforce(std::span<const std::vector<float>> states, double gamma) {
    if (states.empty()) throw InvalidArgument("aggregate_bruteforce: empty state list");
    const auto w = layer_weights(static_cast<int>(states.size()), gamma);
    const std::size_t width = states.front().size();
    std::vector<double> acc(width, 0.0);
    for (std::size_t j = 0; j < states.size(); ++j) {
        if (states[j].size() != width) throw InvalidArgument("aggregate_bruteforce: state width mismatch");
        for (std::size_t c = 0; c < width; ++c) acc[c] += w[j] * static_cast<double>(states[j][c]);
    }
    return {acc.begin(), acc.end()};
}

} // namespace dcla
