#include "dcla/model_io.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace dcla {

namespace {

using nlohmann::json;

json spec_to_json(const ModelSpec& s) {
    return json{{"n_layers", s.n_layers}, {"d_model", s.d_model},     {"n_heads", s.n_heads},
                {"d_ff", s.d_ff},         {"vocab_size", s.vocab_size}, {"max_seq", s.max_seq},
                {"ln_eps", s.ln_eps},     {"seed", s.seed},            {"untied", s.untied}};
}

ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    s.n_layers = j.at("n_layers").get<int>();
    s.d_model = j.at("d_model").get<int>();
    s.n_heads = j.at("n_heads").get<int>();
    s.d_ff = j.at("d_ff").get<int>();
    s.vocab_size = j.at("vocab_size").get<int>();
    s.max_seq = j.at("max_seq").get<int>();
    s.ln_eps = j.at("ln_eps").get<float>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.untied = j.value("untied", false);
    return s;
}

void append_le(std::string& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int shift = 0; shift < 32; shift += 8) {
        out.push_back(static_cast<char>((bits >> shift) & 0xffu));
    }
}

float read_le(const unsigned char* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) |
                               (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

} // namespace

std::string serialize_model(const Model& model) {
    json manifest = json::array();
    std::string blob;
    for (const auto& t : model.tensors()) {
        manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", blob.size()}});
        blob.reserve(blob.size() + t.values.size() * 4);
        for (float v : t.values) append_le(blob, v);
    }
    json header{{"format", kModelFormat}, {"spec", spec_to_json(model.spec())}, {"tensors", manifest}};
    std::string out = header.dump();
    out.push_back('\n');
    out += blob;
    return out;
}

Model deserialize_model(const std::string& bytes) {
    const auto newline = bytes.find('\n');
    if (newline == std::string::npos) throw FormatError("model file: missing header line");

    json header;
    try {
        header = json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(newline));
    } catch (const json::exception& e) {
        throw FormatError(std::string("model file: malformed header: ") + e.what());
    }

    ModelSpec spec;
    std::vector<TensorInfo> expected;
    try {
        if (header.at("format").get<std::string>() != kModelFormat) {
            throw FormatError("model file: unsupported format '" + header.at("format").get<std::string>() + "'");
        }
        spec = spec_from_json(header.at("spec"));
        expected = expected_tensors(spec);
    } catch (const json::exception& e) {
        throw FormatError(std::string("model file: malformed header: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("model file: ") + e.what());
    }

    std::map<std::string, std::vector<std::size_t>> expected_shape;
    for (const auto& info : expected) expected_shape[info.name] = info.shape;

    const auto* blob = reinterpret_cast<const unsigned char*>(bytes.data()) + newline + 1;
    const std::size_t blob_size = bytes.size() - newline - 1;

    std::vector<Tensor> tensors;
    std::vector<std::pair<std::size_t, std::size_t>> extents;
    try {
        const json& manifest = header.at("tensors");
        if (!manifest.is_array()) throw FormatError("model file: tensors must be an array");
        for (const auto& entry : manifest) {
            Tensor t;
            t.name = entry.at("name").get<std::string>();
            t.shape = entry.at("shape").get<std::vector<std::size_t>>();
            const auto offset = entry.at("offset").get<std::size_t>();
            auto it = expected_shape.find(t.name);
            if (it == expected_shape.end()) throw FormatError("model file: unexpected tensor '" + t.name + "'");
            if (it->second != t.shape) throw FormatError("model file: shape mismatch for tensor '" + t.name + "'");
            std::size_t count = 1;
            for (auto s : t.shape) count *= s;
            const std::size_t nbytes = count * 4;
            if (offset % 4 != 0 || offset > blob_size || nbytes > blob_size - offset) {
                throw FormatError("model file: tensor '" + t.name + "' offset/size outside blob (truncated?)");
            }
            extents.emplace_back(offset, offset + nbytes);
            t.values.resize(count);
            for (std::size_t i = 0; i < count; ++i) t.values[i] = read_le(blob + offset + 4 * i);
            tensors.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("model file: malformed manifest: ") + e.what());
    }

    std::sort(extents.begin(), extents.end());
    for (std::size_t i = 1; i < extents.size(); ++i) {
        if (extents[i].first < extents[i - 1].second) throw FormatError("model file: overlapping tensor extents");
    }

    try {
        return Model(spec, std::move(tensors));
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("model file: ") + e.what());
    } catch (const NumericError& e) {
        throw FormatError(std::string("model file: ") + e.what());
    }
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    const std::string bytes = serialize_model(model);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_model(ss.str());
}

} // namespace dcla
