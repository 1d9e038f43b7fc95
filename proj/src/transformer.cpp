#include "dcla/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dcla {

KVCache::KVCache(const ModelSpec& spec)
    : max_seq_(spec.max_seq), d_model_(spec.d_model),
      keys_(static_cast<std::size_t>(spec.n_layers)),
      values_(static_cast<std::size_t>(spec.n_layers)),
      lengths_(static_cast<std::size_t>(spec.n_layers), 0) {}

std::size_t KVCache::slot(int layer) const {
    if (layer < 1 || layer > static_cast<int>(lengths_.size())) {
        throw InvalidArgument("cache layer " + std::to_string(layer) + " out of range");
    }
    return static_cast<std::size_t>(layer - 1);
}

int KVCache::length(int layer) const { return lengths_[slot(layer)]; }

int KVCache::length() const {
    const int first = lengths_.front();
    for (int len : lengths_) {
        if (len != first) throw InvalidArgument("cache lengths differ across layers");
    }
    return first;
}

void KVCache::append(int layer, std::span<const float> key, std::span<const float> value) {
    const auto s = slot(layer);
    if (key.size() != static_cast<std::size_t>(d_model_) || value.size() != key.size()) {
        throw InvalidArgument("cache row width mismatch");
    }
    if (lengths_[s] >= max_seq_) throw InvalidArgument("KV cache length would exceed max_seq");
    keys_[s].insert(keys_[s].end(), key.begin(), key.end());
    values_[s].insert(values_[s].end(), value.begin(), value.end());
    ++lengths_[s];
}

std::span<const float> KVCache::key(int layer, int position) const {
    const auto s = slot(layer);
    return {keys_[s].data() + static_cast<std::size_t>(position) * d_model_, static_cast<std::size_t>(d_model_)};
}

std::span<const float> KVCache::value(int layer, int position) const {
    const auto s = slot(layer);
    return {values_[s].data() + static_cast<std::size_t>(position) * d_model_, static_cast<std::size_t>(d_model_)};
}

namespace {

void layer_norm(std::span<const float> x, LayerNormView ln, float eps, std::span<float> out) {
    const float n = static_cast<float>(x.size());
    float mean = 0.0f;
    for (float v : x) mean += v;
    mean /= n;
    float var = 0.0f;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= n;
    const float inv = 1.0f / std::sqrt(var + eps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * ln.gain[i] + ln.bias[i];
}

// out = x . w, with w stored in x out row-major.
void linear(std::span<const float> x, const MatrixView& w, std::span<float> out) {
    std::fill(out.begin(), out.end(), 0.0f);
    for (std::size_t i = 0; i < w.rows; ++i) {
        const float xi = x[i];
        const float* wr = w.data + i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xi * wr[j];
    }
}

float gelu(float x) {
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

} // namespace

HiddenState embed(const Model& model, std::span<const int> tokens, int first_position) {
    const ModelSpec& spec = model.spec();
    if (tokens.empty()) throw InvalidArgument("embed: empty token sequence");
    if (first_position < 0 || first_position + static_cast<int>(tokens.size()) > spec.max_seq) {
        throw InvalidArgument("embed: positions exceed max_seq");
    }
    const MatrixView tok = model.token_embedding();
    const MatrixView pos = model.position_embedding();
    HiddenState h{0, 0, Matrix(tokens.size(), static_cast<std::size_t>(spec.d_model))};
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const int id = tokens[p];
        if (id < 0 || id >= spec.vocab_size) {
            throw InvalidArgument("token id " + std::to_string(id) + " out of range");
        }
        auto te = tok.row(static_cast<std::size_t>(id));
        auto pe = pos.row(static_cast<std::size_t>(first_position) + p);
        auto out = h.values.row(p);
        for (std::size_t c = 0; c < out.size(); ++c) out[c] = te[c] + pe[c];
    }
    return h;
}

HiddenState layer_forward(const Model& model, int layer, const HiddenState& input, KVCache& cache) {
    const ModelSpec& spec = model.spec();
    const BlockView b = model.block(layer);
    const std::size_t d = static_cast<std::size_t>(spec.d_model);
    const std::size_t heads = static_cast<std::size_t>(spec.n_heads);
    const std::size_t dh = d / heads;
    const Matrix& x = input.values;
    if (x.cols() != d || x.rows() == 0) throw InvalidArgument("layer_forward: hidden state shape mismatch");
    const int offset = cache.length(layer);
    if (offset + static_cast<int>(x.rows()) > spec.max_seq) {
        throw InvalidArgument("layer_forward: cache length would exceed max_seq");
    }

    HiddenState out{layer, input.step, x};
    std::vector<float> normed(d), q(x.rows() * d), k(d), v(d);

    // Queries for every row; keys/values appended in order so row r sees
    // cached positions 0..offset+r.
    for (std::size_t r = 0; r < x.rows(); ++r) {
        layer_norm(x.row(r), b.ln1, spec.ln_eps, normed);
        linear(normed, b.wq, std::span<float>(q.data() + r * d, d));
        linear(normed, b.wk, k);
        linear(normed, b.wv, v);
        cache.append(layer, k, v);
    }

    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> attn(d), proj(d), scores, hidden(static_cast<std::size_t>(spec.d_ff)), ff(d);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const int visible = offset + static_cast<int>(r) + 1;
        scores.resize(static_cast<std::size_t>(visible));
        std::fill(attn.begin(), attn.end(), 0.0f);
        const float* qr = q.data() + r * d;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = h * dh;
            float max_score = -INFINITY;
            for (int p = 0; p < visible; ++p) {
                const float* kp = cache.key(layer, p).data() + base;
                float s = 0.0f;
                for (std::size_t c = 0; c < dh; ++c) s += qr[base + c] * kp[c];
                s *= scale;
                scores[static_cast<std::size_t>(p)] = s;
                max_score = std::max(max_score, s);
            }
            float denom = 0.0f;
            for (auto& s : scores) {
                s = std::exp(s - max_score);
                denom += s;
            }
            for (int p = 0; p < visible; ++p) {
                const float w = scores[static_cast<std::size_t>(p)] / denom;
                const float* vp = cache.value(layer, p).data() + base;
                for (std::size_t c = 0; c < dh; ++c) attn[base + c] += w * vp[c];
            }
        }
        linear(attn, b.wo, proj);
        auto row = out.values.row(r);
        for (std::size_t c = 0; c < d; ++c) row[c] += proj[c];

        layer_norm(row, b.ln2, spec.ln_eps, normed);
        linear(normed, b.w1, hidden);
        for (std::size_t j = 0; j < hidden.size(); ++j) hidden[j] = gelu(hidden[j] + b.b1[j]);
        linear(hidden, b.w2, ff);
        for (std::size_t c = 0; c < d; ++c) row[c] += ff[c] + b.b2[c];
    }

    if (!all_finite(out.values.flat())) {
        throw NumericError("non-finite activation at layer " + std::to_string(layer));
    }
    return out;
}

std::vector<float> early_exit_logits(const Model& model, std::span<const float> hidden_row) {
    const ModelSpec& spec = model.spec();
    const std::size_t d = static_cast<std::size_t>(spec.d_model);
    if (hidden_row.size() != d) throw InvalidArgument("early_exit_logits: hidden width mismatch");
    std::vector<float> normed(d);
    layer_norm(hidden_row, model.final_norm(), spec.ln_eps, normed);
    std::vector<float> logits(static_cast<std::size_t>(spec.vocab_size));
    if (spec.untied) {
        linear(normed, model.unembedding(), logits);
    } else {
        const MatrixView emb = model.token_embedding();
        for (std::size_t t = 0; t < logits.size(); ++t) {
            const float* e = emb.data + t * d;
            float s = 0.0f;
            for (std::size_t c = 0; c < d; ++c) s += normed[c] * e[c];
            logits[t] = s;
        }
    }
    return logits;
}

Matrix early_exit_logits(const Model& model, const Matrix& hidden) {
    if (hidden.cols() != static_cast<std::size_t>(model.spec().d_model)) {
        throw InvalidArgument("early_exit_logits: hidden width mismatch");
    }
    Matrix out(hidden.rows(), static_cast<std::size_t>(model.spec().vocab_size));
    for (std::size_t r = 0; r < hidden.rows(); ++r) {
        const auto row = early_exit_logits(model, hidden.row(r));
        std::copy(row.begin(), row.end(), out.row(r).begin());
    }
    return out;
}

std::vector<float> softmax(std::span<const float> logits) {
    if (logits.empty()) return {};
    const float max_logit = *std::max_element(logits.begin(), logits.end());
    std::vector<float> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max_logit);
        total += out[i];
    }
    for (auto& p : out) p = static_cast<float>(p / total);
    return out;
}

int argmax(std::span<const float> values) {
    if (values.empty()) throw InvalidArgument("argmax of empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return static_cast<int>(best);
}

std::vector<TokenProb> top_k(std::span<const float> probs, int k) {
    std::vector<int> ids(probs.size());
    std::iota(ids.begin(), ids.end(), 0);
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(), [&](int a, int b) {
        const float pa = probs[static_cast<std::size_t>(a)];
        const float pb = probs[static_cast<std::size_t>(b)];
        return pa > pb || (pa == pb && a < b);
    });
    std::vector<TokenProb> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({ids[i], probs[static_cast<std::size_t>(ids[i])]});
    return out;
}

DecodeResult decode_greedy(const Model& model, std::span<const int> prompt, int max_new, LayerHook* hook,
                           const DecodeOptions& options) {
    const ModelSpec& spec = model.spec();
    if (prompt.empty()) throw InvalidArgument("decode: prompt must be non-empty");
    if (max_new < 0) throw InvalidArgument("decode: max_new must be >= 0");
    if (static_cast<long>(prompt.size()) + max_new > spec.max_seq) {
        throw InvalidArgument("decode: prompt length + max_new exceeds max_seq");
    }

    DecodeResult result;
    result.trace.meta.model_checksum = checksum_hex(model);
    result.trace.meta.n_layers = spec.n_layers;
    result.trace.meta.prompt.assign(prompt.begin(), prompt.end());
    result.trace.meta.strategy = hook ? hook->name() : "none";
    result.trace.meta.config = options.config;

    KVCache cache(spec);
    std::vector<int> input(prompt.begin(), prompt.end());
    const int passes = std::max(max_new, 1);
    for (int step = 0; step < passes; ++step) {
        const int first_position = cache.length();
        HiddenState h = embed(model, input, first_position);
        h.step = step;
        if (hook) hook->begin_step({step, spec.n_layers, first_position}, h.values);

        TraceStep record;
        record.step = step;
        for (int layer = 1; layer <= spec.n_layers; ++layer) {
            h = layer_forward(model, layer, h, cache);
            TraceLayer tl;
            tl.layer = layer;
            if (hook) {
                Matrix effective = hook->on_layer(layer, std::move(h.values));
                if (effective.rows() != input.size() || effective.cols() != static_cast<std::size_t>(spec.d_model)) {
                    throw InvalidArgument("hook '" + hook->name() + "' returned a state of the wrong shape at layer " +
                                          std::to_string(layer));
                }
                if (!all_finite(effective.flat())) {
                    throw NumericError("hook returned non-finite state at layer " + std::to_string(layer));
                }
                h.values = std::move(effective);
                if (auto rec = hook->take_record()) {
                    tl.similarity = rec->similarity;
                    tl.triggered = rec->triggered;
                    tl.corrected_positions = std::move(rec->corrected_positions);
                }
            }
            if (options.early_exit_top_k > 0) {
                const auto probs = softmax(early_exit_logits(model, h.values.row(h.values.rows() - 1)));
                tl.top_k = top_k(probs, options.early_exit_top_k);
            }
            record.layers.push_back(std::move(tl));
        }

        if (step < max_new) {
            const auto logits = early_exit_logits(model, h.values.row(h.values.rows() - 1));
            const int token = argmax(logits);
            result.tokens.push_back(token);
            record.token = token;
            input.assign(1, token);
        }
        record_step(result.trace, std::move(record));
    }
    return result;
}

} // namespace dcla
