#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dcla/synthbench.hpp"

namespace dcla {

// "%.6f", or "n/a" when undefined.
std::string format_rate(std::optional<double> rate);

std::string bench_csv(const BenchReport& report);
std::string per_layer_csv(const BenchReport& report);
std::string episodes_csv(const BenchReport& report);
fjson bench_summary(const BenchReport& report);

// Rows are tau, columns alpha, first cell "tau\alpha".
std::string sweep_csv(const SweepMatrix& matrix);
std::string comparison_csv(const ComparisonTable& table);

fjson suite_to_json(const std::vector<EpisodeSpec>& suite);
std::vector<EpisodeSpec> suite_from_json(const fjson& j);
std::vector<EpisodeSpec> load_suite(const std::filesystem::path& path);

// "start:stop:step", endpoints inclusive within 1e-9; or a single value.
std::vector<double> parse_grid(const std::string& text);
// Comma-separated token ids.
std::vector<int> parse_token_list(const std::string& text);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace dcla
