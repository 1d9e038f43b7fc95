#include "dcla/report_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dcla {

std::string format_rate(std::optional<double> rate) {
    if (!rate) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *rate);
    return buf;
}

namespace {

// Shortest round-trip text for grid values already snapped to 1e-9.
std::string format_grid_value(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string join_tokens(const std::vector<int>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += std::to_string(tokens[i]);
    }
    return out;
}

fjson stats_json(const StrategyStats& s) {
    auto rate = [](std::optional<double> r) { return r ? fjson(static_cast<float>(*r)) : fjson(nullptr); };
    return fjson{{"name", s.name},
                 {"episodes", s.episodes},
                 {"flipped", s.flipped},
                 {"triggered_on_flips", s.triggered_on_flips},
                 {"recovered", s.recovered},
                 {"unflipped", s.unflipped},
                 {"no_harm", s.no_harm},
                 {"agree", s.agree},
                 {"corrections", s.corrections},
                 {"flip_rate", rate(s.flip_rate())},
                 {"trigger_rate", rate(s.trigger_rate())},
                 {"recovery_rate", rate(s.recovery_rate())},
                 {"no_harm_rate", rate(s.no_harm_rate())},
                 {"accuracy", rate(s.accuracy())}};
}

void stats_row(std::ostringstream& out, const StrategyStats& s) {
    out << s.episodes << ',' << s.flipped << ',' << format_rate(s.flip_rate()) << ',' << s.triggered_on_flips << ','
        << format_rate(s.trigger_rate()) << ',' << s.recovered << ',' << format_rate(s.recovery_rate()) << ','
        << s.no_harm << ',' << format_rate(s.no_harm_rate()) << ',' << format_rate(s.accuracy()) << ','
        << s.corrections;
}

constexpr const char* kStatsHeader =
    "episodes,flipped,flip_rate,triggered_on_flips,trigger_rate,recovered,recovery_rate,no_harm,no_harm_rate,"
    "accuracy,corrections";

} // namespace

std::string bench_csv(const BenchReport& report) {
    std::ostringstream out;
    out << "strategy," << kStatsHeader << '\n';
    for (const auto& s : report.strategies) {
        out << s.name << ',';
        stats_row(out, s);
        out << '\n';
    }
    return out.str();
}

std::string per_layer_csv(const BenchReport& report) {
    std::ostringstream out;
    out << "layer,strategy," << kStatsHeader << '\n';
    for (const auto& lb : report.per_layer) {
        for (const auto& s : lb.strategies) {
            out << lb.layer << ',' << s.name << ',';
            stats_row(out, s);
            out << '\n';
        }
    }
    return out.str();
}

std::string episodes_csv(const BenchReport& report) {
    std::ostringstream out;
    out << "episode,strategy,layer,magnitude,clean,perturbed,output,flipped,triggered,recovered,clean_similarity,"
           "injected_similarity,min_similarity,corrections\n";
    for (std::size_t e = 0; e < report.results.size(); ++e) {
        for (const auto& r : report.results[e]) {
            char sims[96];
            std::snprintf(sims, sizeof sims, "%.6f,%.6f,%.6f", r.clean_similarity, r.injected_similarity,
                          r.min_similarity);
            out << e << ',' << r.strategy << ',' << r.layer << ',' << format_grid_value(r.magnitude) << ','
                << join_tokens(r.clean_tokens) << ',' << join_tokens(r.perturbed_tokens) << ','
                << join_tokens(r.strategy_tokens) << ',' << (r.flipped ? 1 : 0) << ',' << (r.triggered ? 1 : 0) << ','
                << (r.recovered ? (*r.recovered ? "1" : "0") : "n/a") << ',' << sims << ',' << r.corrections << '\n';
        }
    }
    return out.str();
}

fjson bench_summary(const BenchReport& report) {
    fjson strategies = fjson::array();
    for (const auto& s : report.strategies) strategies.push_back(stats_json(s));
    fjson layers = fjson::array();
    for (const auto& lb : report.per_layer) {
        fjson rows = fjson::array();
        for (const auto& s : lb.strategies) rows.push_back(stats_json(s));
        layers.push_back({{"layer", lb.layer}, {"strategies", rows}});
    }
    return fjson{{"episodes", report.episode_count},
                 {"strategies", strategies},
                 {"per_layer", layers},
                 {"config", report.config}};
}

std::string sweep_csv(const SweepMatrix& m) {
    std::ostringstream out;
    out << "tau\\alpha";
    for (double a : m.alphas) out << ',' << format_grid_value(a);
    out << '\n';
    for (std::size_t t = 0; t < m.taus.size(); ++t) {
        out << format_grid_value(m.taus[t]);
        for (std::size_t a = 0; a < m.alphas.size(); ++a) out << ',' << format_rate(m.values[t][a]);
        out << '\n';
    }
    return out.str();
}

std::string comparison_csv(const ComparisonTable& table) {
    std::ostringstream out;
    out << "correction,kind,range," << kStatsHeader << '\n';
    for (const auto& row : table.rows) {
        out << row.name << ',' << row.kind << ',' << row.range << ',';
        stats_row(out, row.stats);
        out << '\n';
    }
    return out.str();
}

fjson suite_to_json(const std::vector<EpisodeSpec>& suite) {
    fjson episodes = fjson::array();
    for (const auto& s : suite) {
        episodes.push_back({{"model_seed", s.model_seed},
                            {"prompt", s.prompt},
                            {"layer", s.layer},
                            {"positions", to_string(s.positions)},
                            {"direction", to_string(s.direction)},
                            {"magnitude", static_cast<float>(s.magnitude)},
                            {"step", s.step},
                            {"max_new", s.max_new},
                            {"seed", s.seed}});
    }
    return fjson{{"episodes", episodes}};
}

std::vector<EpisodeSpec> suite_from_json(const fjson& j) {
    std::vector<EpisodeSpec> suite;
    try {
        for (const auto& e : j.at("episodes")) {
            EpisodeSpec s;
            s.model_seed = e.value("model_seed", std::uint64_t{42});
            s.prompt = e.at("prompt").get<std::vector<int>>();
            s.layer = e.at("layer").get<int>();
            s.positions = parse_positions(e.value("positions", std::string("last")));
            s.direction = parse_direction(e.value("direction", std::string("orthogonal")));
            // Shortest float text, so 0.3 reads back as the double 0.3.
            char buf[32];
            const float mag = e.at("magnitude").get<float>();
            auto res = std::to_chars(buf, buf + sizeof buf, mag);
            s.magnitude = std::strtod(std::string(buf, res.ptr).c_str(), nullptr);
            s.step = e.value("step", 0);
            s.max_new = e.value("max_new", 1);
            s.seed = e.value("seed", std::uint64_t{0});
            suite.push_back(std::move(s));
        }
    } catch (const fjson::exception& e) {
        throw FormatError(std::string("suite: schema violation: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("suite: ") + e.what());
    }
    if (suite.empty()) throw FormatError("suite: no episodes");
    return suite;
}

std::vector<EpisodeSpec> load_suite(const std::filesystem::path& path) {
    try {
        return suite_from_json(fjson::parse(read_text_file(path)));
    } catch (const fjson::parse_error& e) {
        throw FormatError("suite '" + path.string() + "': malformed JSON: " + e.what());
    }
}

namespace {

double parse_double(const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size() || !std::isfinite(v)) throw InvalidArgument("malformed number '" + text + "'");
    return v;
}

} // namespace

std::vector<double> parse_grid(const std::string& text) {
    const auto c1 = text.find(':');
    if (c1 == std::string::npos) return {parse_double(text)};
    const auto c2 = text.find(':', c1 + 1);
    if (c2 == std::string::npos || text.find(':', c2 + 1) != std::string::npos) {
        throw InvalidArgument("malformed grid '" + text + "' (expected start:stop:step)");
    }
    const double start = parse_double(text.substr(0, c1));
    const double stop = parse_double(text.substr(c1 + 1, c2 - c1 - 1));
    const double step = parse_double(text.substr(c2 + 1));
    if (!(step > 0.0)) throw InvalidArgument("grid step must be > 0");
    if (stop < start - 1e-9) throw InvalidArgument("grid stop below start");
    const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    if (count > 100000) throw InvalidArgument("grid too large");
    std::vector<double> out;
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(std::round((start + static_cast<double>(i) * step) * 1e9) / 1e9);
    }
    return out;
}

std::vector<int> parse_token_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t\r\n");
        const auto e = item.find_last_not_of(" \t\r\n");
        if (b == std::string::npos) throw InvalidArgument("empty token id in '" + text + "'");
        item = item.substr(b, e - b + 1);
        int v = 0;
        auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (res.ec != std::errc() || res.ptr != item.data() + item.size() || v < 0) {
            throw InvalidArgument("malformed token id '" + item + "'");
        }
        out.push_back(v);
    }
    if (out.empty()) throw InvalidArgument("empty token list");
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

} // namespace dcla
