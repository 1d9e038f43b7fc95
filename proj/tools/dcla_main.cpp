// dcla: command-line front end.
//
//   dcla gen-model --layers 8 --dmodel 64 --vocab 256 --seed 42 --out m.bin
//   dcla decode --model m.bin --prompt 3,1,4 --max-new 8 --strategy dcla --trace t.jsonl
//   dcla trace --in t.jsonl
//   dcla bench --report-out report.csv --summary-out summary.json --trace-dir traces/
//   dcla sweep --alphas 0.80:0.90:0.01 --taus 0.70:0.80:0.01 --out sweep.csv
//   dcla compare --ranges none,1-4,1-5,1-6,1-7,1-8 --out compare.csv
//
// Exit codes: 0 ok, 1 usage, 2 I/O or format, 3 non-finite activations.
// --config FILE.json supplies flag values (keys are flag names without
// dashes); flags on the command line win.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dcla/dcla.hpp"
#include "dcla/model_io.hpp"
#include "dcla/report_io.hpp"
#include "dcla/synthbench.hpp"
#include "dcla/transformer.hpp"
#include "json.hpp"

namespace {

using namespace dcla;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelFlags {
    std::string path;
    ModelSpec spec = default_model_spec();
};

struct CorrectionFlags {
    double alpha = 0.82;
    double tau = 0.74;
    double gamma = 1.0;
    int layer_min = 1;
    int layer_max = 0;
    bool include_final = false;
    std::string scope = "last-token";
    bool aggregate_only = false;
    double eps = 1e-12;
    CLI::Option* layer_min_opt = nullptr;
    CLI::Option* layer_max_opt = nullptr;
    CLI::Option* alpha_opt = nullptr;
    CLI::Option* tau_opt = nullptr;

    DclaConfig config() const {
        DclaConfig c;
        c.alpha = alpha;
        c.tau = tau;
        c.gamma = gamma;
        if (layer_min_opt->count()) c.layer_min = layer_min;
        if (layer_max_opt->count()) c.layer_max = layer_max;
        c.include_final_layer = include_final;
        c.scope = parse_scope(scope);
        c.aggregate_only = aggregate_only;
        c.eps = eps;
        validate(c);
        return c;
    }
};

struct SuiteFlags {
    std::string path;
    int episodes = 200;
    int prompt_length = 12;
    std::string direction = "orthogonal";
    std::string positions = "last";
    int max_new = 1;
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
    cmd->add_option("--model", m.path, "Model file (default: generated from --seed and default dimensions)");
}

void add_spec_flags(CLI::App* cmd, ModelSpec& s) {
    cmd->add_option("--layers", s.n_layers, "Transformer layers");
    cmd->add_option("--dmodel", s.d_model, "Hidden width");
    cmd->add_option("--heads", s.n_heads, "Attention heads (must divide --dmodel)");
    cmd->add_option("--dff", s.d_ff, "Feed-forward width");
    cmd->add_option("--vocab", s.vocab_size, "Vocabulary size");
    cmd->add_option("--max-seq", s.max_seq, "Maximum sequence length");
    cmd->add_option("--ln-eps", s.ln_eps, "Layer-norm epsilon");
    cmd->add_flag("--untied", s.untied, "Separate unembedding matrix");
}

void add_correction_flags(CLI::App* cmd, CorrectionFlags& f) {
    f.alpha_opt = cmd->add_option("--alpha", f.alpha, "Correction strength in (0, 1]");
    f.tau_opt = cmd->add_option("--tau", f.tau, "Trigger threshold in [-1, 1]");
    cmd->add_option("--gamma", f.gamma, "Layer-distance decay >= 0");
    f.layer_min_opt = cmd->add_option("--layer-min", f.layer_min, "First eligible layer (default 1)");
    f.layer_max_opt = cmd->add_option("--layer-max", f.layer_max, "Last eligible layer (default N-1)");
    cmd->add_flag("--include-final", f.include_final, "Default eligible range ends at layer N");
    cmd->add_option("--scope", f.scope, "Similarity scope")->check(CLI::IsMember({"last-token", "sequence-flattened"}));
    cmd->add_flag("--aggregate-only", f.aggregate_only, "Corrections enter the aggregate only");
    cmd->add_option("--eps", f.eps, "Zero-norm guard for cosine similarity");
}

void add_suite_flags(CLI::App* cmd, SuiteFlags& s) {
    cmd->add_option("--suite", s.path, "Suite JSON file (default: generated from --seed)");
    cmd->add_option("--episodes", s.episodes, "Episodes in the generated suite");
    cmd->add_option("--prompt-length", s.prompt_length, "Prompt length in the generated suite");
    cmd->add_option("--direction", s.direction, "Surge direction for the generated suite")
        ->check(CLI::IsMember({"orthogonal", "random-unit"}));
    cmd->add_option("--positions", s.positions, "Surged positions for the generated suite")
        ->check(CLI::IsMember({"last", "all"}));
    cmd->add_option("--suite-max-new", s.max_new, "Tokens generated per episode");
}

Model resolve_model(const ModelFlags& m, std::uint64_t seed) {
    if (!m.path.empty()) return load_model(m.path);
    ModelSpec spec = m.spec;
    spec.seed = seed;
    return init_random_model(spec);
}

std::vector<EpisodeSpec> resolve_suite(const SuiteFlags& s, const ModelSpec& model, std::uint64_t seed) {
    if (!s.path.empty()) return load_suite(s.path);
    SuiteParams p;
    p.episodes = s.episodes;
    p.prompt_length = s.prompt_length;
    p.direction = parse_direction(s.direction);
    p.positions = parse_positions(s.positions);
    p.max_new = s.max_new;
    p.seed = seed;
    if (model.n_layers < 8) {
        // Late-layer injection: the last three layers below the top.
        p.layers.clear();
        for (int l = std::max(1, model.n_layers - 3); l <= std::max(1, model.n_layers - 1); ++l) p.layers.push_back(l);
    }
    return default_suite(model, p);
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        write_text_file(path, text);
    }
}

std::string join(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out.push_back(',');
        out += std::to_string(v[i]);
    }
    return out;
}

// Turns {"alpha": 0.8, "max-new": 4, "untied": true} into flag tokens.
std::vector<std::string> config_args(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("config '" + path + "': malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw FormatError("config '" + path + "': expected a JSON object");
    std::vector<std::string> args;
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_string()) {
            args.push_back(flag);
            args.push_back(value.get<std::string>());
        } else if (value.is_number()) {
            args.push_back(flag);
            args.push_back(value.dump());
        } else if (value.is_array()) {
            std::string joined;
            for (const auto& item : value) {
                if (!joined.empty()) joined.push_back(',');
                joined += item.is_string() ? item.get<std::string>() : item.dump();
            }
            args.push_back(flag);
            args.push_back(joined);
        } else {
            throw UsageError("config key '" + key + "' has an unsupported value type");
        }
    }
    return args;
}

// Config values are inserted right after the subcommand so that later
// command-line flags take precedence (options keep their last value).
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::optional<std::string> config;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config requires a file");
            config = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            config = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (config) {
        if (args.empty() || args.front().rfind("-", 0) == 0) throw UsageError("--config must follow a subcommand");
        auto extra = config_args(*config);
        args.insert(args.begin() + 1, extra.begin(), extra.end());
    }
    return args;
}

int run(int argc, char** argv) {
    CLI::App app{"Layer-aggregation decoding on a tiny deterministic transformer", "dcla"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);

    std::uint64_t seed = 42;
    int jobs = 0;
    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "Seed for generated models and suites")->envname("DCLA_SEED");
    };
    auto add_jobs = [&](CLI::App* cmd) {
        cmd->add_option("--jobs", jobs, "Worker threads (default: available cores)")->check(CLI::NonNegativeNumber);
    };

    // gen-model
    auto* gen = app.add_subcommand("gen-model", "Write a seeded random model file");
    ModelSpec gen_spec = default_model_spec();
    std::string gen_out;
    add_spec_flags(gen, gen_spec);
    add_seed(gen);
    gen->add_option("--out", gen_out, "Output model file")->required();

    // decode
    auto* dec = app.add_subcommand("decode", "Greedy decoding with a correction strategy");
    ModelFlags dec_model;
    add_model_flags(dec, dec_model);
    add_seed(dec);
    std::string prompt_text, prompt_file, strategy = "regular", range_text, trace_out;
    int max_new = 8, top_k = 0;
    CorrectionFlags dec_corr;
    auto* prompt_opt = dec->add_option("--prompt", prompt_text, "Comma-separated token ids");
    auto* prompt_file_opt = dec->add_option("--prompt-file", prompt_file, "File of comma- or space-separated token ids");
    prompt_opt->excludes(prompt_file_opt);
    dec->add_option("--max-new", max_new, "Tokens to generate")->check(CLI::NonNegativeNumber);
    dec->add_option("--strategy", strategy, "regular | dcla | fixed")->check(CLI::IsMember({"regular", "dcla", "fixed"}));
    auto* range_opt = dec->add_option("--range", range_text, "Fixed correction range a-b (strategy fixed)");
    add_correction_flags(dec, dec_corr);
    dec->add_option("--top-k", top_k, "Early-exit top-k per layer in the trace")->check(CLI::NonNegativeNumber);
    dec->add_option("--trace", trace_out, "Write a JSONL trace");

    // trace
    auto* tr = app.add_subcommand("trace", "Validate and summarize a JSONL trace");
    std::string trace_in, summary_out;
    tr->add_option("--in", trace_in, "Trace file")->required();
    tr->add_option("--out", summary_out, "Summary JSON file (default: stdout)");

    // bench
    auto* bench = app.add_subcommand("bench", "Surge-injection benchmark: regular vs DCLA");
    ModelFlags bench_model;
    SuiteFlags bench_suite;
    CorrectionFlags bench_corr;
    std::string report_out, layers_out, episodes_out, bench_summary_out, trace_dir, suite_out;
    add_model_flags(bench, bench_model);
    add_suite_flags(bench, bench_suite);
    add_correction_flags(bench, bench_corr);
    add_seed(bench);
    add_jobs(bench);
    bench->add_option("--report-out", report_out, "Strategy report CSV (default: stdout)");
    bench->add_option("--layers-out", layers_out, "Per-layer breakdown CSV");
    bench->add_option("--episodes-out", episodes_out, "Per-episode CSV");
    bench->add_option("--summary-out", bench_summary_out, "JSON summary");
    bench->add_option("--trace-dir", trace_dir, "Directory for per-episode DCLA traces");
    bench->add_option("--suite-out", suite_out, "Write the suite as JSON");

    // sweep
    auto* sw = app.add_subcommand("sweep", "Alpha x tau grid of DCLA recovery");
    ModelFlags sweep_model;
    SuiteFlags sweep_suite;
    CorrectionFlags sweep_corr;
    std::string alphas_text = "0.80:0.90:0.01", taus_text = "0.70:0.80:0.01", metric = "recovery", sweep_out;
    add_model_flags(sw, sweep_model);
    add_suite_flags(sw, sweep_suite);
    add_correction_flags(sw, sweep_corr);
    add_seed(sw);
    add_jobs(sw);
    sw->add_option("--alphas", alphas_text, "Alpha grid start:stop:step");
    sw->add_option("--taus", taus_text, "Tau grid start:stop:step");
    sw->add_option("--metric", metric, "recovery | accuracy")->check(CLI::IsMember({"recovery", "accuracy"}));
    sw->add_option("--out", sweep_out, "Matrix CSV (default: stdout)");

    // compare
    auto* cmp = app.add_subcommand("compare", "Fixed correction ranges vs adaptive DCLA");
    ModelFlags cmp_model;
    SuiteFlags cmp_suite;
    CorrectionFlags cmp_corr;
    std::string ranges_text = "none,1-4,1-5,1-6,1-7,1-8", cmp_out;
    add_model_flags(cmp, cmp_model);
    add_suite_flags(cmp, cmp_suite);
    add_correction_flags(cmp, cmp_corr);
    add_seed(cmp);
    add_jobs(cmp);
    cmp->add_option("--ranges", ranges_text, "Comma-separated fixed ranges (a-b or none)");
    cmp->add_option("--out", cmp_out, "Table CSV (default: stdout)");

    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    if (gen->parsed()) {
        gen_spec.seed = seed;
        save_model(init_random_model(gen_spec), gen_out);
        return 0;
    }

    if (dec->parsed()) {
        if (strategy == "regular" && (dec_corr.alpha_opt->count() || dec_corr.tau_opt->count() || range_opt->count())) {
            throw UsageError("--alpha/--tau/--range conflict with --strategy regular");
        }
        if (strategy == "dcla" && range_opt->count()) throw UsageError("--range requires --strategy fixed");
        if (strategy == "fixed" && dec_corr.tau_opt->count()) throw UsageError("--tau conflicts with --strategy fixed");
        if (!prompt_opt->count() && !prompt_file_opt->count()) throw UsageError("decode needs --prompt or --prompt-file");

        std::vector<int> prompt;
        if (prompt_file_opt->count()) {
            std::string text = read_text_file(prompt_file);
            for (char& c : text) {
                if (c == ' ' || c == '\n' || c == '\t' || c == '\r') c = ',';
            }
            std::string compact;
            for (std::size_t i = 0; i < text.size(); ++i) {
                if (text[i] == ',' && (compact.empty() || compact.back() == ',')) continue;
                compact.push_back(text[i]);
            }
            while (!compact.empty() && compact.back() == ',') compact.pop_back();
            prompt = parse_token_list(compact);
        } else {
            prompt = parse_token_list(prompt_text);
        }

        const Model model = resolve_model(dec_model, seed);
        const DclaConfig cfg = dec_corr.config();
        std::unique_ptr<AggregationHook> hook;
        if (strategy == "regular") {
            hook = regular_hook(cfg.gamma);
        } else if (strategy == "dcla") {
            hook = dcla_hook(cfg);
        } else {
            if (!range_opt->count()) throw UsageError("--strategy fixed needs --range");
            hook = fixed_range_hook(cfg.alpha, cfg.gamma, LayerRange::parse(range_text));
        }
        DecodeOptions options;
        options.early_exit_top_k = top_k;
        options.config = to_json(cfg);
        if (strategy == "fixed") options.config["range"] = range_text;
        const auto result = decode_greedy(model, prompt, max_new, hook.get(), options);
        std::cout << join(result.tokens) << '\n';
        if (!trace_out.empty()) write_jsonl(result.trace, trace_out);
        return 0;
    }

    if (tr->parsed()) {
        const auto trace = read_jsonl(trace_in);
        emit(summary_out, summary_to_json(summarize(trace)).dump(2) + "\n");
        return 0;
    }

    BenchOptions options;
    options.jobs = jobs;

    if (bench->parsed()) {
        const Model model = resolve_model(bench_model, seed);
        const auto suite = resolve_suite(bench_suite, model.spec(), seed);
        const DclaConfig cfg = bench_corr.config();
        options.gamma = cfg.gamma;
        options.keep_traces = !trace_dir.empty();
        const auto report = run_suite(model, suite, {regular_strategy(cfg.gamma), dcla_strategy(cfg)}, options);
        emit(report_out, bench_csv(report));
        if (!layers_out.empty()) write_text_file(layers_out, per_layer_csv(report));
        if (!episodes_out.empty()) write_text_file(episodes_out, episodes_csv(report));
        if (!suite_out.empty()) write_text_file(suite_out, suite_to_json(suite).dump(2) + "\n");
        if (!bench_summary_out.empty()) {
            fjson summary = bench_summary(report);
            summary["config"]["dcla"] = to_json(cfg);
            summary["config"]["model_checksum"] = checksum_hex(model);
            write_text_file(bench_summary_out, summary.dump(2) + "\n");
        }
        if (!trace_dir.empty()) {
            std::error_code ec;
            std::filesystem::create_directories(trace_dir, ec);
            if (ec) throw FormatError("cannot create '" + trace_dir + "': " + ec.message());
            for (std::size_t e = 0; e < report.results.size(); ++e) {
                char name[32];
                std::snprintf(name, sizeof name, "episode_%04zu.jsonl", e);
                write_jsonl(*report.results[e].back().trace, std::filesystem::path(trace_dir) / name);
            }
        }
        return 0;
    }

    if (sw->parsed()) {
        const Model model = resolve_model(sweep_model, seed);
        const auto suite = resolve_suite(sweep_suite, model.spec(), seed);
        const DclaConfig cfg = sweep_corr.config();
        options.gamma = cfg.gamma;
        const auto alphas = parse_grid(alphas_text);
        const auto taus = parse_grid(taus_text);
        for (double a : alphas) {
            if (!(a > 0.0 && a <= 1.0)) throw InvalidArgument("alpha grid value outside (0, 1]");
        }
        for (double t : taus) {
            if (!(t >= -1.0 && t <= 1.0)) throw InvalidArgument("tau grid value outside [-1, 1]");
        }
        const auto matrix = sweep(model, suite, alphas, taus, cfg, parse_metric(metric), options);
        emit(sweep_out, sweep_csv(matrix));
        return 0;
    }

    if (cmp->parsed()) {
        const Model model = resolve_model(cmp_model, seed);
        const auto suite = resolve_suite(cmp_suite, model.spec(), seed);
        const DclaConfig cfg = cmp_corr.config();
        options.gamma = cfg.gamma;
        std::vector<LayerRange> ranges;
        std::stringstream ss(ranges_text);
        std::string item;
        while (std::getline(ss, item, ',')) ranges.push_back(LayerRange::parse(item));
        const auto table = compare_fixed_ranges(model, suite, ranges, cfg, options);
        emit(cmp_out, comparison_csv(table));
        return 0;
    }
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\nrun 'dcla --help' for usage\n";
        return 1;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\nrun 'dcla --help' for usage\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
