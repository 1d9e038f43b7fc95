#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dcla/matrix.hpp"

namespace dcla {

struct ModelSpec {
    int n_layers = 8;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 256;
    int max_seq = 1024;
    float ln_eps = 1e-5f;
    std::uint64_t seed = 42;
    // Unembedding is the token embedding transpose unless set.
    bool untied = false;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Throws InvalidArgument naming the first violated constraint.
void validate(const ModelSpec& spec);

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> values;
};

struct TensorInfo {
    std::string name;
    std::vector<std::size_t> shape;
};

// Canonical tensor names and shapes for a spec, in storage order.
std::vector<TensorInfo> expected_tensors(const ModelSpec& spec);

struct LayerNormView {
    std::span<const float> gain;
    std::span<const float> bias;
};

struct BlockView {
    LayerNormView ln1;
    MatrixView wq, wk, wv, wo;
    LayerNormView ln2;
    MatrixView w1;
    std::span<const float> b1;
    MatrixView w2;
    std::span<const float> b2;
};

// Immutable decoder-only transformer weights. Safe to share between
// concurrent decode sessions.
class Model {
public:
    // Validates the spec, the tensor set, every shape and finiteness.
    Model(ModelSpec spec, std::vector<Tensor> tensors);

    const ModelSpec& spec() const { return spec_; }
    std::span<const Tensor> tensors() const { return tensors_; }
    const Tensor& tensor(std::string_view name) const;

    MatrixView token_embedding() const;
    MatrixView position_embedding() const;
    // Layers are numbered 1..n_layers.
    BlockView block(int layer) const;
    LayerNormView final_norm() const;
    // d_model x vocab when untied; null view (tied) otherwise.
    MatrixView unembedding() const;

private:
    std::span<const float> vec(std::size_t index) const;
    MatrixView mat(std::size_t index) const;

    struct BlockIndex {
        std::size_t ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
    };

    ModelSpec spec_;
    std::vector<Tensor> tensors_;
    std::vector<BlockIndex> blocks_;
    std::size_t tok_emb_ = 0, pos_emb_ = 0, final_gain_ = 0, final_bias_ = 0, unembed_ = 0;
};

// Weights ~ normal(0, 0.02) from a seeded mt19937_64 stream; gains 1, biases 0.
Model init_random_model(const ModelSpec& spec);

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::span<const float> values, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Hash of the spec and every tensor, in canonical order.
std::uint64_t checksum(const Model& model);
std::string checksum_hex(const Model& model);

} // namespace dcla
