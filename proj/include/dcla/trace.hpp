#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dcla/hook.hpp"
#include "dcla/fjson.hpp"

namespace dcla {

inline constexpr const char* kTraceSchema = "dcla-trace/1";

struct TokenProb {
    int token = 0;
    float prob = 0.0f;

    friend bool operator==(const TokenProb&, const TokenProb&) = default;
};

struct TraceLayer {
    int layer = 0;
    // Absent when the hook computes no diagnostics.
    std::optional<float> similarity;
    bool triggered = false;
    std::vector<int> corrected_positions;
    // Early-exit distribution, descending probability; empty unless requested.
    std::vector<TokenProb> top_k;

    friend bool operator==(const TraceLayer&, const TraceLayer&) = default;
};

struct TraceStep {
    int step = 0;
    // Absent on a prefill-only pass (max_new = 0).
    std::optional<int> token;
    std::vector<TraceLayer> layers;

    friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct TraceMeta {
    std::string schema = kTraceSchema;
    std::string model_checksum;
    int n_layers = 0;
    std::vector<int> prompt;
    std::string strategy;
    fjson config = fjson::object();

    friend bool operator==(const TraceMeta&, const TraceMeta&) = default;
};

struct DecodeTrace {
    TraceMeta meta;
    std::vector<TraceStep> steps;

    friend bool operator==(const DecodeTrace&, const DecodeTrace&) = default;
};

// Appends a step. Throws InvalidArgument unless step indices are contiguous
// from 0 and the step holds exactly one record per layer 1..N, in order, with
// top-k lists sorted descending and summing to at most 1.
void record_step(DecodeTrace& trace, TraceStep step);

std::string to_jsonl(const DecodeTrace& trace);
DecodeTrace from_jsonl(const std::string& text);

void write_jsonl(const DecodeTrace& trace, const std::filesystem::path& path);
DecodeTrace read_jsonl(const std::filesystem::path& path);

struct LayerSummary {
    int layer = 0;
    int triggers = 0;
    int samples = 0;
    std::optional<float> sim_min;
    std::optional<float> sim_max;
    std::optional<double> sim_mean;
};

struct TraceSummary {
    std::vector<LayerSummary> layers;
    int total_corrections = 0;
    int tokens_generated = 0;
};

TraceSummary summarize(const DecodeTrace& trace);
fjson summary_to_json(const TraceSummary& summary);

} // namespace dcla
