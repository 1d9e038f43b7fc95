#include "dcla/trace.hpp"

#include <fstream>
#include <sstream>

namespace dcla {

const char* to_string(SimilarityScope scope) {
    return scope == SimilarityScope::LastToken ? "last-token" : "sequence-flattened";
}

SimilarityScope parse_scope(const std::string& text) {
    if (text == "last-token") return SimilarityScope::LastToken;
    if (text == "sequence-flattened") return SimilarityScope::SequenceFlattened;
    throw InvalidArgument("unknown similarity scope '" + text + "'");
}

void record_step(DecodeTrace& trace, TraceStep step) {
    const int expected = trace.steps.empty() ? 0 : trace.steps.back().step + 1;
    if (step.step != expected) {
        throw InvalidArgument("trace step " + std::to_string(step.step) + " out of order (expected " +
                              std::to_string(expected) + ")");
    }
    if (static_cast<int>(step.layers.size()) != trace.meta.n_layers) {
        throw InvalidArgument("trace step " + std::to_string(step.step) + " has " +
                              std::to_string(step.layers.size()) + " layer records, expected " +
                              std::to_string(trace.meta.n_layers));
    }
    for (std::size_t i = 0; i < step.layers.size(); ++i) {
        const TraceLayer& rec = step.layers[i];
        if (rec.layer != static_cast<int>(i) + 1) throw InvalidArgument("trace layer records out of order");
        if (rec.similarity && !(*rec.similarity >= -1.0f && *rec.similarity <= 1.0f)) {
            throw InvalidArgument("trace similarity outside [-1, 1]");
        }
        double total = 0.0;
        for (std::size_t k = 0; k < rec.top_k.size(); ++k) {
            const float p = rec.top_k[k].prob;
            if (!(p >= 0.0f && p <= 1.0f)) throw InvalidArgument("trace probability outside [0, 1]");
            if (k > 0 && p > rec.top_k[k - 1].prob) throw InvalidArgument("trace top-k not descending");
            total += p;
        }
        if (total > 1.0 + 1e-6) throw InvalidArgument("trace top-k probabilities sum above 1");
    }
    trace.steps.push_back(std::move(step));
}

namespace {

fjson meta_to_json(const TraceMeta& m) {
    return fjson{{"schema", m.schema},     {"model_checksum", m.model_checksum},
                 {"n_layers", m.n_layers}, {"prompt", m.prompt},
                 {"strategy", m.strategy}, {"config", m.config}};
}

fjson step_to_json(const TraceStep& s) {
    fjson layers = fjson::array();
    for (const auto& l : s.layers) {
        fjson top = fjson::array();
        for (const auto& tp : l.top_k) top.push_back(fjson::array({tp.token, tp.prob}));
        fjson rec{{"layer", l.layer},
                  {"similarity", l.similarity ? fjson(*l.similarity) : fjson(nullptr)},
                  {"triggered", l.triggered},
                  {"corrected_positions", l.corrected_positions}};
        if (!l.top_k.empty()) rec["top_k"] = std::move(top);
        layers.push_back(std::move(rec));
    }
    return fjson{{"step", s.step}, {"token", s.token ? fjson(*s.token) : fjson(nullptr)}, {"layers", layers}};
}

TraceMeta meta_from_json(const fjson& j) {
    TraceMeta m;
    m.schema = j.at("schema").get<std::string>();
    if (m.schema != kTraceSchema) throw FormatError("trace: unsupported schema '" + m.schema + "'");
    m.model_checksum = j.at("model_checksum").get<std::string>();
    m.n_layers = j.at("n_layers").get<int>();
    if (m.n_layers < 1) throw FormatError("trace: n_layers must be >= 1");
    m.prompt = j.at("prompt").get<std::vector<int>>();
    m.strategy = j.at("strategy").get<std::string>();
    m.config = j.at("config");
    return m;
}

TraceStep step_from_json(const fjson& j) {
    TraceStep s;
    s.step = j.at("step").get<int>();
    if (!j.at("token").is_null()) s.token = j.at("token").get<int>();
    for (const auto& l : j.at("layers")) {
        TraceLayer rec;
        rec.layer = l.at("layer").get<int>();
        if (!l.at("similarity").is_null()) rec.similarity = l.at("similarity").get<float>();
        rec.triggered = l.at("triggered").get<bool>();
        rec.corrected_positions = l.at("corrected_positions").get<std::vector<int>>();
        if (l.contains("top_k")) {
            for (const auto& tp : l.at("top_k")) {
                if (!tp.is_array() || tp.size() != 2) throw FormatError("trace: malformed top_k entry");
                rec.top_k.push_back({tp.at(0).get<int>(), tp.at(1).get<float>()});
            }
        }
        s.layers.push_back(std::move(rec));
    }
    return s;
}

} // namespace

std::string to_jsonl(const DecodeTrace& trace) {
    std::string out = meta_to_json(trace.meta).dump();
    out.push_back('\n');
    for (const auto& s : trace.steps) {
        out += step_to_json(s).dump();
        out.push_back('\n');
    }
    return out;
}

DecodeTrace from_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    DecodeTrace trace;
    bool have_meta = false;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        fjson j;
        try {
            j = fjson::parse(line);
        } catch (const fjson::exception& e) {
            throw FormatError("trace line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        try {
            if (!have_meta) {
                if (!j.is_object() || !j.contains("schema")) {
                    throw FormatError("trace line " + std::to_string(line_no) + ": first line must be the meta record");
                }
                trace.meta = meta_from_json(j);
                have_meta = true;
            } else {
                if (j.contains("schema")) throw FormatError("trace line " + std::to_string(line_no) + ": duplicate meta record");
                record_step(trace, step_from_json(j));
            }
        } catch (const fjson::exception& e) {
            throw FormatError("trace line " + std::to_string(line_no) + ": schema violation: " + e.what());
        } catch (const InvalidArgument& e) {
            throw FormatError("trace line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_meta) throw FormatError("trace: missing meta line");
    return trace;
}

void write_jsonl(const DecodeTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    const std::string text = to_jsonl(trace);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

DecodeTrace read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_jsonl(ss.str());
}

TraceSummary summarize(const DecodeTrace& trace) {
    TraceSummary summary;
    summary.layers.resize(static_cast<std::size_t>(trace.meta.n_layers));
    std::vector<double> sums(summary.layers.size(), 0.0);
    for (std::size_t i = 0; i < summary.layers.size(); ++i) summary.layers[i].layer = static_cast<int>(i) + 1;

    for (const auto& step : trace.steps) {
        if (step.token) ++summary.tokens_generated;
        for (const auto& rec : step.layers) {
            auto& ls = summary.layers.at(static_cast<std::size_t>(rec.layer - 1));
            if (rec.triggered) {
                ++ls.triggers;
                ++summary.total_corrections;
            }
            if (rec.similarity) {
                const float s = *rec.similarity;
                ls.sim_min = ls.sim_min ? std::min(*ls.sim_min, s) : s;
                ls.sim_max = ls.sim_max ? std::max(*ls.sim_max, s) : s;
                sums[static_cast<std::size_t>(rec.layer - 1)] += s;
                ++ls.samples;
            }
        }
    }
    for (std::size_t i = 0; i < summary.layers.size(); ++i) {
        if (summary.layers[i].samples > 0) summary.layers[i].sim_mean = sums[i] / summary.layers[i].samples;
    }
    return summary;
}

fjson summary_to_json(const TraceSummary& summary) {
    fjson layers = fjson::array();
    auto opt = [](const auto& v) { return v ? fjson(static_cast<float>(*v)) : fjson(nullptr); };
    for (const auto& l : summary.layers) {
        layers.push_back({{"layer", l.layer},
                          {"triggers", l.triggers},
                          {"samples", l.samples},
                          {"sim_min", opt(l.sim_min)},
                          {"sim_mean", opt(l.sim_mean)},
                          {"sim_max", opt(l.sim_max)}});
    }
    return fjson{{"layers", layers},
                 {"total_corrections", summary.total_corrections},
                 {"tokens_generated", summary.tokens_generated}};
}

} // namespace dcla
