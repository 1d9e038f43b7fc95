#include "dcla/model.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "dcla/random.hpp"

namespace dcla {

void validate(const ModelSpec& spec) {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw InvalidArgument(std::string("invalid model spec: ") + what);
    };
    require(spec.n_layers >= 1, "n_layers must be >= 1");
    require(spec.d_model >= 1, "d_model must be >= 1");
    require(spec.n_heads >= 1, "n_heads must be >= 1");
    require(spec.d_ff >= 1, "d_ff must be >= 1");
    require(spec.vocab_size >= 1, "vocab_size must be >= 1");
    require(spec.max_seq >= 1, "max_seq must be >= 1");
    require(std::isfinite(spec.ln_eps) && spec.ln_eps > 0.0f, "ln_eps must be > 0");
    require(spec.d_model % spec.n_heads == 0, "n_heads must divide d_model");
}

namespace {

std::string layer_name(int layer, const char* suffix) {
    return "layers." + std::to_string(layer) + "." + suffix;
}

bool is_random_weight(const std::string& name) {
    auto ends_with = [&](std::string_view s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return name == "tok_emb" || name == "pos_emb" || name == "unembed" || ends_with(".wq") ||
           ends_with(".wk") || ends_with(".wv") || ends_with(".wo") || ends_with(".w1") ||
           ends_with(".w2");
}

bool is_gain(const std::string& name) {
    return name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

} // namespace

std::vector<TensorInfo> expected_tensors(const ModelSpec& spec) {
    validate(spec);
    const auto d = static_cast<std::size_t>(spec.d_model);
    const auto ff = static_cast<std::size_t>(spec.d_ff);
    const auto v = static_cast<std::size_t>(spec.vocab_size);
    std::vector<TensorInfo> out;
    out.push_back({"tok_emb", {v, d}});
    out.push_back({"pos_emb", {static_cast<std::size_t>(spec.max_seq), d}});
    for (int l = 1; l <= spec.n_layers; ++l) {
        out.push_back({layer_name(l, "ln1.gain"), {d}});
        out.push_back({layer_name(l, "ln1.bias"), {d}});
        out.push_back({layer_name(l, "attn.wq"), {d, d}});
        out.push_back({layer_name(l, "attn.wk"), {d, d}});
        out.push_back({layer_name(l, "attn.wv"), {d, d}});
        out.push_back({layer_name(l, "attn.wo"), {d, d}});
        out.push_back({layer_name(l, "ln2.gain"), {d}});
        out.push_back({layer_name(l, "ln2.bias"), {d}});
        out.push_back({layer_name(l, "ff.w1"), {d, ff}});
        out.push_back({layer_name(l, "ff.b1"), {ff}});
        out.push_back({layer_name(l, "ff.w2"), {ff, d}});
        out.push_back({layer_name(l, "ff.b2"), {d}});
    }
    out.push_back({"final_norm.gain", {d}});
    out.push_back({"final_norm.bias", {d}});
    if (spec.untied) out.push_back({"unembed", {d, v}});
    return out;
}

Model::Model(ModelSpec spec, std::vector<Tensor> tensors) : spec_(spec) {
    const auto expected = expected_tensors(spec_);
    std::unordered_map<std::string, std::size_t> by_name;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (!by_name.emplace(tensors[i].name, i).second) {
            throw InvalidArgument("duplicate tensor '" + tensors[i].name + "'");
        }
    }
    if (tensors.size() != expected.size()) {
        throw InvalidArgument("expected " + std::to_string(expected.size()) + " tensors, got " +
                              std::to_string(tensors.size()));
    }
    tensors_.reserve(expected.size());
    for (const auto& info : expected) {
        auto it = by_name.find(info.name);
        if (it == by_name.end()) throw InvalidArgument("missing tensor '" + info.name + "'");
        Tensor& t = tensors[it->second];
        if (t.shape != info.shape) throw InvalidArgument("shape mismatch for tensor '" + info.name + "'");
        if (t.values.size() != element_count(t.shape)) {
            throw InvalidArgument("value count mismatch for tensor '" + info.name + "'");
        }
        if (!all_finite(t.values)) throw NumericError("non-finite value in tensor '" + info.name + "'");
        tensors_.push_back(std::move(t));
    }

    std::size_t idx = 0;
    tok_emb_ = idx++;
    pos_emb_ = idx++;
    for (int l = 1; l <= spec_.n_layers; ++l) {
        BlockIndex b{};
        b.ln1_gain = idx++;
        b.ln1_bias = idx++;
        b.wq = idx++;
        b.wk = idx++;
        b.wv = idx++;
        b.wo = idx++;
        b.ln2_gain = idx++;
        b.ln2_bias = idx++;
        b.w1 = idx++;
        b.b1 = idx++;
        b.w2 = idx++;
        b.b2 = idx++;
        blocks_.push_back(b);
    }
    final_gain_ = idx++;
    final_bias_ = idx++;
    if (spec_.untied) unembed_ = idx++;
}

const Tensor& Model::tensor(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw InvalidArgument("no tensor named '" + std::string(name) + "'");
}

std::span<const float> Model::vec(std::size_t index) const { return tensors_[index].values; }

MatrixView Model::mat(std::size_t index) const {
    const Tensor& t = tensors_[index];
    return {t.values.data(), t.shape[0], t.shape[1]};
}

MatrixView Model::token_embedding() const { return mat(tok_emb_); }
MatrixView Model::position_embedding() const { return mat(pos_emb_); }

BlockView Model::block(int layer) const {
    if (layer < 1 || layer > spec_.n_layers) {
        throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
    }
    const BlockIndex& b = blocks_[static_cast<std::size_t>(layer - 1)];
    return {{vec(b.ln1_gain), vec(b.ln1_bias)},
            mat(b.wq), mat(b.wk), mat(b.wv), mat(b.wo),
            {vec(b.ln2_gain), vec(b.ln2_bias)},
            mat(b.w1), vec(b.b1), mat(b.w2), vec(b.b2)};
}

LayerNormView Model::final_norm() const { return {vec(final_gain_), vec(final_bias_)}; }

MatrixView Model::unembedding() const {
    if (!spec_.untied) return {};
    return mat(unembed_);
}

Model init_random_model(const ModelSpec& spec) {
    NormalStream normal(spec.seed);
    std::vector<Tensor> tensors;
    for (auto& info : expected_tensors(spec)) {
        Tensor t{info.name, info.shape, std::vector<float>(element_count(info.shape), 0.0f)};
        if (is_random_weight(t.name)) {
            for (auto& v : t.values) v = static_cast<float>(0.02 * normal.next());
        } else if (is_gain(t.name)) {
            std::fill(t.values.begin(), t.values.end(), 1.0f);
        }
        tensors.push_back(std::move(t));
    }
    return Model(spec, std::move(tensors));
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (auto b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::span<const float> values, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (float v : values) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int shift = 0; shift < 32; shift += 8) {
            h ^= (bits >> shift) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::uint64_t checksum(const Model& model) {
    const ModelSpec& s = model.spec();
    char buf[256];
    const int n = std::snprintf(buf, sizeof buf, "%d/%d/%d/%d/%d/%d/%a/%llu/%d", s.n_layers,
                                s.d_model, s.n_heads, s.d_ff, s.vocab_size, s.max_seq,
                                static_cast<double>(s.ln_eps),
                                static_cast<unsigned long long>(s.seed), s.untied ? 1 : 0);
    std::uint64_t h = fnv1a64(std::as_bytes(std::span<const char>(buf, static_cast<std::size_t>(n))));
    for (const auto& t : model.tensors()) {
        h = fnv1a64(std::as_bytes(std::span<const char>(t.name.data(), t.name.size())), h);
        h = fnv1a64(t.values, h);
    }
    return h;
}

std::string checksum_hex(const Model& model) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(checksum(model)));
    return buf;
}

} // namespace dcla
