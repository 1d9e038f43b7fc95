#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "dcla/model.hpp"

namespace testing {

inline dcla::ModelSpec golden_spec() {
    dcla::ModelSpec s;
    s.n_layers = 4;
    s.d_model = 32;
    s.n_heads = 4;
    s.d_ff = 128;
    s.vocab_size = 64;
    s.max_seq = 64;
    s.seed = 42;
    return s;
}

inline const dcla::Model& golden_model() {
    static const dcla::Model m = dcla::init_random_model(golden_spec());
    return m;
}

inline const dcla::Model& default_model() {
    static const dcla::Model m = dcla::init_random_model(dcla::ModelSpec{});
    return m;
}

inline double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline std::vector<float> random_vector(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(dist(rng));
    return v;
}

inline std::vector<int> random_prompt(std::mt19937_64& rng, int length, int vocab) {
    std::uniform_int_distribution<int> dist(0, vocab - 1);
    std::vector<int> p(static_cast<std::size_t>(length));
    for (auto& t : p) t = dist(rng);
    return p;
}

// Relative difference |a-b| / max(|b|, tiny) over whole vectors.
template <class A, class B>
double rel_diff(const A& a, const B& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        num += d * d;
        den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

} // namespace testing
