#include "dcla/synthbench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "dcla/random.hpp"

namespace dcla {

const char* to_string(DirectionMode mode) {
    return mode == DirectionMode::RandomUnit ? "random-unit" : "orthogonal";
}

const char* to_string(InjectionPositions positions) {
    return positions == InjectionPositions::Last ? "last" : "all";
}

DirectionMode parse_direction(const std::string& text) {
    if (text == "random-unit") return DirectionMode::RandomUnit;
    if (text == "orthogonal" || text == "orthogonal-to-aggregate") return DirectionMode::OrthogonalToAggregate;
    throw InvalidArgument("unknown direction mode '" + text + "'");
}

InjectionPositions parse_positions(const std::string& text) {
    if (text == "last") return InjectionPositions::Last;
    if (text == "all") return InjectionPositions::All;
    throw InvalidArgument("unknown injection positions '" + text + "'");
}

const char* to_string(SweepMetric metric) { return metric == SweepMetric::Recovery ? "recovery" : "accuracy"; }

SweepMetric parse_metric(const std::string& text) {
    if (text == "recovery") return SweepMetric::Recovery;
    if (text == "accuracy") return SweepMetric::Accuracy;
    throw InvalidArgument("unknown sweep metric '" + text + "'");
}

void validate(const EpisodeSpec& spec, const ModelSpec& model) {
    if (spec.layer < 1 || spec.layer > model.n_layers) {
        throw InvalidArgument("injection layer " + std::to_string(spec.layer) + " outside [1, " +
                              std::to_string(model.n_layers) + "]");
    }
    if (!(spec.magnitude >= 0.0) || !std::isfinite(spec.magnitude)) throw InvalidArgument("magnitude must be finite and >= 0");
    if (spec.max_new < 0) throw InvalidArgument("episode max_new must be >= 0");
    if (spec.step < 0 || spec.step >= std::max(spec.max_new, 1)) throw InvalidArgument("injection step outside the decode");
    if (spec.prompt.empty()) throw InvalidArgument("episode prompt must be non-empty");
    if (spec.model_seed != model.seed) throw InvalidArgument("episode model_seed does not match the model");
}

SurgeInjector::SurgeInjector(std::unique_ptr<LayerHook> inner, EpisodeSpec spec, double gamma)
    : inner_(std::move(inner)), spec_(std::move(spec)), gamma_(gamma) {
    if (!inner_) throw InvalidArgument("inject_surge: null inner hook");
    if (spec_.layer < 1) throw InvalidArgument("inject_surge: layer must be >= 1");
    if (!(spec_.magnitude >= 0.0)) throw InvalidArgument("inject_surge: magnitude must be >= 0");
}

void SurgeInjector::begin_step(const StepInfo& info, const Matrix& embedded) {
    if (spec_.layer > info.n_layers) {
        throw InvalidArgument("inject_surge: layer " + std::to_string(spec_.layer) + " beyond model depth");
    }
    info_ = info;
    inner_->begin_step(info, embedded);
    rows_.clear();
    if (info.step == spec_.step && spec_.direction == DirectionMode::OrthogonalToAggregate) {
        rows_.assign(embedded.rows(), AggregatorState(gamma_, embedded.cols()));
        for (std::size_t r = 0; r < embedded.rows(); ++r) rows_[r].push_layer(embedded.row(r), 0, false);
    }
}

std::vector<float> SurgeInjector::direction(std::size_t row, std::span<const float> hidden,
                                            std::span<const float> aggregate) const {
    const std::size_t d = hidden.size();
    const auto position = static_cast<std::uint64_t>(info_.first_position) + row;
    NormalStream normal(splitmix64(spec_.seed ^ splitmix64(position)));
    std::vector<double> u(d);
    for (auto& x : u) x = normal.next();

    auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
        return s;
    };
    auto remove = [&](std::vector<double>& v, const std::vector<double>& unit) {
        const double c = dot(v, unit);
        for (std::size_t i = 0; i < d; ++i) v[i] -= c * unit[i];
    };
    auto normalize = [&](std::vector<double>& v) {
        const double n = std::sqrt(dot(v, v));
        if (n < 1e-30) return false;
        for (auto& x : v) x /= n;
        return true;
    };

    if (spec_.direction == DirectionMode::OrthogonalToAggregate) {
        std::vector<double> basis[2];
        std::vector<double> e1(aggregate.begin(), aggregate.end());
        std::vector<double> e2(hidden.begin(), hidden.end());
        int count = 0;
        if (normalize(e1)) basis[count++] = e1;
        if (count > 0) remove(e2, basis[0]);
        if (normalize(e2)) basis[count++] = e2;
        for (int pass = 0; pass < 2; ++pass) {
            for (int b = 0; b < count; ++b) remove(u, basis[b]);
        }
    }
    normalize(u);
    return {u.begin(), u.end()};
}

Matrix SurgeInjector::on_layer(int layer, Matrix hidden) {
    const bool injection_step = info_.step == spec_.step;
    if (injection_step && layer == spec_.layer && spec_.magnitude > 0.0) {
        const std::size_t first = spec_.positions == InjectionPositions::Last ? hidden.rows() - 1 : 0;
        std::vector<float> aggregate(hidden.cols(), 0.0f);
        for (std::size_t r = first; r < hidden.rows(); ++r) {
            auto h = hidden.row(r);
            if (!rows_.empty()) rows_[r].aggregate_into(aggregate);
            const auto u = direction(r, h, aggregate);
            double norm = 0.0;
            for (float v : h) norm += static_cast<double>(v) * v;
            const double scale = spec_.magnitude * std::sqrt(norm);
            for (std::size_t c = 0; c < h.size(); ++c) h[c] = static_cast<float>(h[c] + scale * u[c]);
            ++injections_;
        }
    }
    Matrix out = inner_->on_layer(layer, std::move(hidden));
    if (injection_step && layer < spec_.layer && !rows_.empty()) {
        for (std::size_t r = 0; r < out.rows() && r < rows_.size(); ++r) rows_[r].push_layer(out.row(r), layer, false);
    }
    return out;
}

std::unique_ptr<SurgeInjector> inject_surge(std::unique_ptr<LayerHook> inner, const EpisodeSpec& spec, double gamma) {
    return std::make_unique<SurgeInjector>(std::move(inner), spec, gamma);
}

Strategy regular_strategy(double gamma) {
    return {"regular", [gamma] { return std::unique_ptr<LayerHook>(regular_hook(gamma)); },
            fjson{{"gamma", static_cast<float>(gamma)}}};
}

Strategy dcla_strategy(const DclaConfig& config, std::string name) {
    validate(config);
    return {std::move(name), [config] { return std::unique_ptr<LayerHook>(dcla_hook(config)); }, to_json(config)};
}

Strategy fixed_strategy(double alpha, double gamma, LayerRange range) {
    return {"fixed:" + range.label(),
            [alpha, gamma, range] { return std::unique_ptr<LayerHook>(fixed_range_hook(alpha, gamma, range)); },
            fjson{{"alpha", static_cast<float>(alpha)}, {"gamma", static_cast<float>(gamma)}, {"range", range.label()}}};
}

namespace {

float similarity_at(const DecodeTrace& trace, int step, int layer) {
    const auto& rec = trace.steps.at(static_cast<std::size_t>(step)).layers.at(static_cast<std::size_t>(layer - 1));
    return rec.similarity.value_or(1.0f);
}

std::uint64_t mix(std::uint64_t h, std::int64_t v) {
    for (int shift = 0; shift < 64; shift += 8) {
        h ^= (static_cast<std::uint64_t>(v) >> shift) & 0xffu;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::optional<double> ratio(int num, int den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / den;
}

} // namespace

EpisodeBaseline run_baseline(const Model& model, const EpisodeSpec& spec, const BenchOptions& options) {
    validate(spec, model.spec());
    EpisodeBaseline base;

    auto clean_hook = regular_hook(options.gamma);
    const auto clean = decode_greedy(model, spec.prompt, spec.max_new, clean_hook.get());
    base.clean_tokens = clean.tokens;
    base.clean_similarity = similarity_at(clean.trace, spec.step, spec.layer);

    auto injected_hook = inject_surge(regular_hook(options.gamma), spec, options.gamma);
    const auto injected = decode_greedy(model, spec.prompt, spec.max_new, injected_hook.get());
    base.perturbed_tokens = injected.tokens;
    base.injected_similarity = similarity_at(injected.trace, spec.step, spec.layer);
    base.flipped = base.perturbed_tokens != base.clean_tokens;
    return base;
}

EpisodeResult evaluate_strategy(const Model& model, const EpisodeSpec& spec, const EpisodeBaseline& baseline,
                                const Strategy& strategy, const BenchOptions& options) {
    validate(spec, model.spec());
    auto hook = inject_surge(strategy.make(), spec, options.gamma);
    DecodeOptions decode_options;
    decode_options.config = fjson{{"strategy", strategy.config},
                                  {"injection",
                                   {{"layer", spec.layer},
                                    {"magnitude", static_cast<float>(spec.magnitude)},
                                    {"direction", to_string(spec.direction)},
                                    {"positions", to_string(spec.positions)},
                                    {"step", spec.step},
                                    {"seed", spec.seed}}}};
    auto run = decode_greedy(model, spec.prompt, spec.max_new, hook.get(), decode_options);

    EpisodeResult r;
    r.strategy = strategy.name;
    r.layer = spec.layer;
    r.magnitude = spec.magnitude;
    r.clean_tokens = baseline.clean_tokens;
    r.perturbed_tokens = baseline.perturbed_tokens;
    r.strategy_tokens = run.tokens;
    r.flipped = baseline.flipped;
    r.clean_similarity = baseline.clean_similarity;
    r.injected_similarity = baseline.injected_similarity;
    r.agrees_with_clean = r.strategy_tokens == r.clean_tokens;
    if (r.flipped) r.recovered = r.agrees_with_clean;

    std::uint64_t sig = 0xcbf29ce484222325ULL;
    for (const auto& step : run.trace.steps) {
        for (const auto& rec : step.layers) {
            if (rec.layer == spec.layer && rec.similarity) r.min_similarity = std::min(r.min_similarity, *rec.similarity);
            if (rec.corrected_positions.empty()) continue;
            sig = mix(mix(sig, step.step), rec.layer);
            for (int p : rec.corrected_positions) sig = mix(sig, p);
            r.corrections += static_cast<int>(rec.corrected_positions.size());
        }
    }
    r.trigger_signature = sig;
    r.triggered = run.trace.steps.at(static_cast<std::size_t>(spec.step))
                      .layers.at(static_cast<std::size_t>(spec.layer - 1))
                      .triggered;
    if (options.keep_traces) r.trace = std::move(run.trace);
    return r;
}

EpisodeResult run_episode(const Model& model, const EpisodeSpec& spec, const Strategy& strategy,
                          const BenchOptions& options) {
    return evaluate_strategy(model, spec, run_baseline(model, spec, options), strategy, options);
}

std::optional<double> StrategyStats::flip_rate() const { return ratio(flipped, episodes); }
std::optional<double> StrategyStats::trigger_rate() const { return ratio(triggered_on_flips, flipped); }
std::optional<double> StrategyStats::recovery_rate() const { return ratio(recovered, flipped); }
std::optional<double> StrategyStats::no_harm_rate() const { return ratio(no_harm, unflipped); }
std::optional<double> StrategyStats::accuracy() const { return ratio(agree, episodes); }

StrategyStats tally(const std::string& name, const std::vector<EpisodeResult>& results) {
    StrategyStats s;
    s.name = name;
    for (const auto& r : results) {
        ++s.episodes;
        s.corrections += r.corrections;
        if (r.agrees_with_clean) ++s.agree;
        if (r.flipped) {
            ++s.flipped;
            if (r.triggered) ++s.triggered_on_flips;
            if (r.recovered.value_or(false)) ++s.recovered;
        } else {
            ++s.unflipped;
            if (r.agrees_with_clean) ++s.no_harm;
        }
    }
    return s;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    std::size_t workers = jobs > 0 ? static_cast<std::size_t>(jobs) : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(error_mutex);
                        if (!error) error = std::current_exception();
                        next = n;
                    }
                }
            });
        }
    }
    if (error) std::rethrow_exception(error);
}

namespace {

std::vector<EpisodeBaseline> run_baselines(const Model& model, const std::vector<EpisodeSpec>& suite,
                                           const BenchOptions& options) {
    std::vector<EpisodeBaseline> baselines(suite.size());
    parallel_for(suite.size(), options.jobs, [&](std::size_t e) { baselines[e] = run_baseline(model, suite[e], options); });
    return baselines;
}

} // namespace

BenchReport run_suite(const Model& model, const std::vector<EpisodeSpec>& suite, const std::vector<Strategy>& strategies,
                      const BenchOptions& options) {
    if (suite.empty()) throw InvalidArgument("run_suite: empty suite");
    if (strategies.empty()) throw InvalidArgument("run_suite: no strategies");
    for (const auto& spec : suite) validate(spec, model.spec());

    const auto baselines = run_baselines(model, suite, options);
    const std::size_t ns = strategies.size();
    BenchReport report;
    report.episode_count = static_cast<int>(suite.size());
    report.results.assign(suite.size(), std::vector<EpisodeResult>(ns));
    parallel_for(suite.size() * ns, options.jobs, [&](std::size_t task) {
        const std::size_t e = task / ns, s = task % ns;
        report.results[e][s] = evaluate_strategy(model, suite[e], baselines[e], strategies[s], options);
    });

    std::vector<int> layers;
    for (const auto& spec : suite) layers.push_back(spec.layer);
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

    for (std::size_t s = 0; s < ns; ++s) {
        report.strategy_names.push_back(strategies[s].name);
        std::vector<EpisodeResult> column;
        for (const auto& row : report.results) column.push_back(row[s]);
        report.strategies.push_back(tally(strategies[s].name, column));
    }
    for (int layer : layers) {
        LayerBreakdown lb;
        lb.layer = layer;
        for (std::size_t s = 0; s < ns; ++s) {
            std::vector<EpisodeResult> column;
            for (const auto& row : report.results) {
                if (row[s].layer == layer) column.push_back(row[s]);
            }
            lb.strategies.push_back(tally(strategies[s].name, column));
        }
        report.per_layer.push_back(std::move(lb));
    }
    report.config = fjson{{"episodes", report.episode_count},
                          {"gamma", static_cast<float>(options.gamma)},
                          {"strategies", report.strategy_names},
                          {"model_seed", model.spec().seed}};
    return report;
}

SweepMatrix sweep(const Model& model, const std::vector<EpisodeSpec>& suite, const std::vector<double>& alphas,
                  const std::vector<double>& taus, const DclaConfig& base, SweepMetric metric,
                  const BenchOptions& options) {
    if (alphas.empty() || taus.empty()) throw InvalidArgument("sweep: empty grid");
    if (suite.empty()) throw InvalidArgument("sweep: empty suite");
    for (const auto& spec : suite) validate(spec, model.spec());

    std::vector<Strategy> cells;
    for (double tau : taus) {
        for (double alpha : alphas) {
            DclaConfig c = base;
            c.alpha = alpha;
            c.tau = tau;
            cells.push_back(dcla_strategy(c));
        }
    }

    const auto baselines = run_baselines(model, suite, options);
    const std::size_t ne = suite.size();
    std::vector<EpisodeResult> results(cells.size() * ne);
    parallel_for(results.size(), options.jobs, [&](std::size_t task) {
        const std::size_t cell = task / ne, e = task % ne;
        results[task] = evaluate_strategy(model, suite[e], baselines[e], cells[cell], options);
    });

    SweepMatrix m;
    m.alphas = alphas;
    m.taus = taus;
    m.metric = metric;
    m.values.assign(taus.size(), std::vector<std::optional<double>>(alphas.size()));
    m.signatures.assign(taus.size(), std::vector<std::vector<std::uint64_t>>(alphas.size()));
    m.outputs = m.signatures;
    for (std::size_t t = 0; t < taus.size(); ++t) {
        for (std::size_t a = 0; a < alphas.size(); ++a) {
            const std::size_t cell = t * alphas.size() + a;
            std::vector<EpisodeResult> column(results.begin() + static_cast<std::ptrdiff_t>(cell * ne),
                                              results.begin() + static_cast<std::ptrdiff_t>((cell + 1) * ne));
            const auto stats = tally("dcla", column);
            m.values[t][a] = metric == SweepMetric::Recovery ? stats.recovery_rate() : stats.accuracy();
            for (const auto& r : column) {
                m.signatures[t][a].push_back(r.trigger_signature);
                const auto bytes = std::as_bytes(std::span<const int>(r.strategy_tokens));
                m.outputs[t][a].push_back(fnv1a64(bytes));
            }
        }
    }
    return m;
}

ComparisonTable compare_fixed_ranges(const Model& model, const std::vector<EpisodeSpec>& suite,
                                     const std::vector<LayerRange>& ranges, const DclaConfig& config,
                                     const BenchOptions& options) {
    if (ranges.empty()) throw InvalidArgument("compare_fixed_ranges: no ranges");
    validate(config);
    for (const auto& r : ranges) {
        if (!r.empty() && (r.first < 1 || r.last > model.spec().n_layers)) {
            throw InvalidArgument("fixed range " + r.label() + " outside model depth");
        }
    }
    std::vector<Strategy> strategies{regular_strategy(options.gamma)};
    for (const auto& r : ranges) strategies.push_back(fixed_strategy(config.alpha, config.gamma, r));
    strategies.push_back(dcla_strategy(config));

    const BenchReport report = run_suite(model, suite, strategies, options);
    ComparisonTable table;
    table.episodes = report.episode_count;
    table.rows.push_back({"regular", "regular", "none", report.strategies.front()});
    for (std::size_t i = 0; i < ranges.size(); ++i) {
        table.rows.push_back({strategies[i + 1].name, "fixed", ranges[i].label(), report.strategies[i + 1]});
    }
    const LayerRange adaptive = eligible_range(config, model.spec().n_layers);
    table.rows.push_back({"dcla", "adaptive", adaptive.label(), report.strategies.back()});
    return table;
}

ModelSpec default_model_spec() {
    ModelSpec s;
    s.n_layers = 8;
    s.d_model = 64;
    s.n_heads = 4;
    s.d_ff = 256;
    s.vocab_size = 256;
    s.max_seq = 1024;
    s.seed = 42;
    return s;
}

std::vector<EpisodeSpec> default_suite(const ModelSpec& model, const SuiteParams& params) {
    if (params.episodes < 1) throw InvalidArgument("suite needs at least one episode");
    if (params.layers.empty() || params.magnitudes.empty()) throw InvalidArgument("suite layer and magnitude grids must be non-empty");
    std::mt19937_64 rng(params.seed);
    std::vector<EpisodeSpec> suite;
    for (int e = 0; e < params.episodes; ++e) {
        EpisodeSpec spec;
        spec.model_seed = model.seed;
        for (int i = 0; i < params.prompt_length; ++i) {
            spec.prompt.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(model.vocab_size)));
        }
        spec.layer = params.layers[rng() % params.layers.size()];
        spec.magnitude = params.magnitudes[rng() % params.magnitudes.size()];
        spec.direction = params.direction;
        spec.positions = params.positions;
        spec.max_new = params.max_new;
        spec.step = 0;
        spec.seed = rng();
        validate(spec, model);
        suite.push_back(std::move(spec));
    }
    return suite;
}

} // namespace dcla
