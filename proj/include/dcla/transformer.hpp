#pragma once

#include <span>
#include <vector>

#include "dcla/hook.hpp"
#include "dcla/model.hpp"
#include "dcla/trace.hpp"

namespace dcla {

struct HiddenState {
    int layer = 0;
    int step = 0;
    Matrix values; // positions x d_model
};

// Per-layer key/value rows for one decode session.
class KVCache {
public:
    explicit KVCache(const ModelSpec& spec);

    // Rows cached for a layer (1-based). Equal across layers between steps.
    int length(int layer) const;
    // Common length; throws if layers disagree (mid-step).
    int length() const;
    int capacity() const { return max_seq_; }

    void append(int layer, std::span<const float> key, std::span<const float> value);
    std::span<const float> key(int layer, int position) const;
    std::span<const float> value(int layer, int position) const;

private:
    std::size_t slot(int layer) const;

    int max_seq_;
    int d_model_;
    std::vector<std::vector<float>> keys_;
    std::vector<std::vector<float>> values_;
    std::vector<int> lengths_;
};

// Token embedding plus learned absolute position embedding (layer 0).
HiddenState embed(const Model& model, std::span<const int> tokens, int first_position = 0);

// Pre-norm block: h + Attn(LN1(h)), then + FF(LN2(.)). Appends this layer's
// keys/values to the cache. Throws NumericError on non-finite output.
HiddenState layer_forward(const Model& model, int layer, const HiddenState& input, KVCache& cache);

// Decoding head on any layer's state: final layer norm then unembedding.
// One logit row per input row.
Matrix early_exit_logits(const Model& model, const Matrix& hidden);
std::vector<float> early_exit_logits(const Model& model, std::span<const float> hidden_row);

std::vector<float> softmax(std::span<const float> logits);
// Lowest id wins ties.
int argmax(std::span<const float> values);
std::vector<TokenProb> top_k(std::span<const float> probs, int k);

struct DecodeOptions {
    // Early-exit top-k per layer in the trace; 0 disables.
    int early_exit_top_k = 0;
    // Copied into the trace meta.
    fjson config = fjson::object();
};

struct DecodeResult {
    std::vector<int> tokens;
    DecodeTrace trace;
};

// Greedy decoding with a KV cache. max_new = 0 runs the prefill pass only.
// The hook (optional) sees every layer 1..N of every step.
DecodeResult decode_greedy(const Model& model, std::span<const int> prompt, int max_new,
                           LayerHook* hook = nullptr, const DecodeOptions& options = {});

} // namespace dcla
