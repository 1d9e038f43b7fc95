#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dcla {

// Normalized exponential layer weights for the aggregate at layer i:
// w_j = exp(gamma * (j - (i-1))) / sum_k exp(gamma * (k - (i-1))), j = 0..i-1.
std::vector<double> layer_weights(int i, double gamma);

// Running aggregate over the effective states of layers 0..i-1.
//
// Keeps N_i = sum_j exp(-gamma * (i-1-j)) * h_j and D_i = sum_m exp(-gamma * m)
// so each push and each aggregate costs O(width). Accumulates in double.
class AggregatorState {
public:
    AggregatorState(double gamma, std::size_t width);

    // Layers must arrive in order 0, 1, 2, ...
    void push_layer(std::span<const float> effective, int layer, bool was_corrected);
    std::vector<float> aggregate() const;
    void aggregate_into(std::span<float> out) const;

    // Clears pushed layers and the corrected set for a new decode step.
    void reset(int step);

    double gamma() const { return gamma_; }
    std::size_t width() const { return numerator_.size(); }
    int layer_count() const { return layer_count_; }
    int step() const { return step_; }
    const std::vector<int>& corrected_set() const { return corrected_; }

private:
    double gamma_;
    double decay_;
    std::vector<double> numerator_;
    double denominator_ = 0.0;
    int layer_count_ = 0;
    int step_ = 0;
    std::vector<int> corrected_;
};

// Literal weighted sum with layer_weights(states.size(), gamma). Test oracle
// for the incremental path.
std::vector<float> aggregate_bruteforce(std::span<const std::vector<float>> states, double gamma);

} // namespace dcla
