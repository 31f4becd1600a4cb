#pragma once

// The CLI subcommands as functions from a validated config to output files.

#include <atomic>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "spi/harness/config.hpp"
#include "spi/harness/io.hpp"
#include "spi/harness/scenario.hpp"
#include "spi/map_estimator.hpp"
#include "spi/param_solvers.hpp"
#include "spi/pcrb.hpp"

namespace spi::harness {

using ordered_json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitInfeasible = 3;
inline constexpr int kExitRuntime = 4;

struct RunOptions
{
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    /// Overrides output.record_timing.
    std::optional<bool> timing;
};

enum class ExperimentKind { rate_sweep, covariance_sweep };

inline const char* to_string(ExperimentKind k)
{
    return k == ExperimentKind::rate_sweep ? "rate_sweep" : "covariance_sweep";
}

namespace detail {

inline std::uint64_t base_seed(const ExperimentConfig& c, const RunOptions& o)
{
    return o.seed.value_or(c.trials.base_seed);
}

inline bool timing(const ExperimentConfig& c, const RunOptions& o)
{
    return o.timing.value_or(c.output.record_timing);
}

/// Runs fn(0..n-1) on up to `jobs` threads. Callers write results into
/// pre-sized slots, so the merged output does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn)
{
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n)
                    return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error)
                        error = std::current_exception();
                }
            }
        });
    for (auto& t : pool)
        t.join();
    if (error)
        std::rethrow_exception(error);
}

inline ordered_json matrix_json(const Mat& m)
{
    ordered_json rows = ordered_json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        ordered_json row = ordered_json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

inline void put_status(ordered_json& j, const SolveStatus& s, bool record_timing)
{
    j["status"] = to_string(s.status);
    j["certificate"] = s.certificate;
    j["note"] = s.note;
    j["iterations"] = s.iterations;
    j["solve_time_s"] = record_timing ? s.wall_time : 0.0;
}

inline Scenario scenario_for(const ExperimentConfig& cfg, std::uint64_t base, std::size_t ka_index, std::size_t trial)
{
    return make_scenario(cfg, trial_seed(base, ka_index, trial, Stream::initial_state));
}

/// Upper-triangle entries of a covariance, row-major.
inline std::vector<double> upper_triangle(const Mat& m)
{
    std::vector<double> v;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = i; j < m.cols(); ++j)
            v.push_back(m(i, j));
    return v;
}

inline std::vector<std::string> covariance_columns(Eigen::Index n)
{
    std::vector<std::string> cols;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i; j < n; ++j)
            cols.push_back("solved_cov_" + std::to_string(i + 1) + std::to_string(j + 1));
    return cols;
}

inline void require_sensor(const ExperimentConfig& cfg, const char* command)
{
    if (cfg.sensor.kind == SensorKind::none)
        throw ConfigError("sensor.kind", std::string(command) + " needs a sensor");
}

} // namespace detail

// ---------------------------------------------------------------- schedule

inline CommandOutput cmd_schedule(const ExperimentConfig& cfg, const RunOptions& ro = {})
{
    detail::require_sensor(cfg, "schedule");
    if (!cfg.rate_is_solved())
        throw ConfigError("schedule.rate_hz", "schedule needs rate_hz = \"solve\"");
    const MotionPrior prior = cfg.motion_prior();
    const Sensor sensor = cfg.sensor_model();
    const std::uint64_t base = detail::base_seed(cfg, ro);
    const bool timed = detail::timing(cfg, ro);

    std::vector<ordered_json> results(cfg.ka.size());
    std::vector<bool> infeasible(cfg.ka.size(), false);
    detail::parallel_for(cfg.ka.size(), ro.jobs, [&](std::size_t i) {
        const AccuracySpec acc(cfg.ka[i]);
        const Scenario sc = detail::scenario_for(cfg, base, i, 0);
        ordered_json r;
        r["ka"] = cfg.ka[i];
        r["mode"] = to_string(cfg.schedule.mode);
        ScheduleSolution sol;
        if (cfg.schedule.mode == ScheduleMode::constant) {
            sol = solve_constant_rate(prior, sensor, acc, sc.nominal, cfg.solver_options());
            r["rate_hz"] = sol.status.ok() ? ordered_json(rounded(sol.constant_rate, 6)) : ordered_json(nullptr);
        } else {
            sol = solve_per_step_schedule(prior, sensor, acc, sc.nominal,
                                          initialize(KnownState{cfg.dimension, acc.ka}), cfg.solver_options());
            ordered_json rates = ordered_json::array();
            for (const auto& s : sol.rates)
                rates.push_back({{"t", s.time}, {"rate_hz", rounded(s.rate_hz, 6)}});
            r["steps"] = sol.rates.size();
            r["rates"] = std::move(rates);
            r["failed_step"] = sol.failed_step ? ordered_json(*sol.failed_step) : ordered_json(nullptr);
        }
        detail::put_status(r, sol.status, timed);
        infeasible[i] = !sol.status.ok();
        results[i] = std::move(r);
    });

    ordered_json report;
    report["schema_version"] = kSchemaVersion;
    report["command"] = "schedule";
    report["sensor"] = to_string(cfg.sensor.kind);
    report["results"] = results;
    CommandOutput out;
    out.files.push_back({"schedule.json", report.dump(2) + "\n"});
    for (std::size_t i = 0; i < cfg.ka.size(); ++i) {
        const auto& r = results[i];
        out.summary += "ka = " + num(cfg.ka[i], 6) + " m: " + r["status"].get<std::string>();
        if (r.contains("rate_hz") && !r["rate_hz"].is_null())
            out.summary += ", m_s = " + num(r["rate_hz"].get<double>(), 6) + " Hz";
        if (!r["certificate"].get<std::string>().empty())
            out.summary += " (" + r["certificate"].get<std::string>() + ")";
        out.summary += "\n";
        if (infeasible[i])
            out.exit_code = kExitInfeasible;
    }
    return out;
}

// -------------------------------------------------------------- covariance

inline CommandOutput cmd_covariance(const ExperimentConfig& cfg, const RunOptions& ro = {})
{
    detail::require_sensor(cfg, "covariance");
    if (!cfg.covariance_is_solved())
        throw ConfigError("sensor.covariance", "covariance needs covariance = \"solve\"");
    const MotionPrior prior = cfg.motion_prior();
    const double rate = *cfg.schedule.rate_hz;
    const std::uint64_t base = detail::base_seed(cfg, ro);
    const bool timed = detail::timing(cfg, ro);

    std::vector<ordered_json> results(cfg.ka.size());
    std::vector<bool> infeasible(cfg.ka.size(), false);
    detail::parallel_for(cfg.ka.size(), ro.jobs, [&](std::size_t i) {
        const AccuracySpec acc(cfg.ka[i]);
        const Scenario sc = detail::scenario_for(cfg, base, i, 0);
        const CovarianceSolution sol = solve_covariance(prior, cfg.covariance_target(), rate, acc, sc.nominal,
                                                        cfg.schedule.mode, cfg.solver_options());
        ordered_json r;
        r["ka"] = cfg.ka[i];
        r["rate_hz"] = rate;
        r["mode"] = to_string(cfg.schedule.mode);
        auto entry = [](const Mat& p, const std::optional<Mat>& c) {
            ordered_json e;
            e["precision"] = detail::matrix_json(p);
            e["implied_covariance"] = c ? detail::matrix_json(*c) : ordered_json(nullptr);
            return e;
        };
        if (cfg.schedule.mode == ScheduleMode::constant) {
            if (!sol.precision.empty()) {
                const auto e = entry(sol.precision.front(), sol.implied_cov.front());
                r["precision"] = e["precision"];
                r["implied_covariance"] = e["implied_covariance"];
            } else {
                r["precision"] = nullptr;
                r["implied_covariance"] = nullptr;
            }
        } else {
            ordered_json steps = ordered_json::array();
            for (std::size_t k = 0; k < sol.precision.size(); ++k) {
                auto e = entry(sol.precision[k], sol.implied_cov[k]);
                ordered_json s;
                s["t"] = sol.times[k];
                s["precision"] = e["precision"];
                s["implied_covariance"] = e["implied_covariance"];
                steps.push_back(std::move(s));
            }
            r["steps"] = std::move(steps);
            r["failed_step"] = sol.failed_step ? ordered_json(*sol.failed_step) : ordered_json(nullptr);
        }
        r["ka_min"] = sol.ka_min;
        r["kkt_residual"] = sol.status.kkt_residual;
        detail::put_status(r, sol.status, timed);
        infeasible[i] = !sol.status.ok();
        results[i] = std::move(r);
    });

    ordered_json report;
    report["schema_version"] = kSchemaVersion;
    report["command"] = "covariance";
    report["sensor"] = to_string(cfg.sensor.kind);
    report["results"] = results;
    CommandOutput out;
    out.files.push_back({"covariance.json", report.dump(2) + "\n"});
    for (std::size_t i = 0; i < cfg.ka.size(); ++i) {
        const auto& r = results[i];
        out.summary += "ka = " + num(cfg.ka[i], 6) + " m: " + r["status"].get<std::string>();
        if (r.contains("implied_covariance") && r["implied_covariance"].is_array())
            out.summary += ", R = " + r["implied_covariance"].dump();
        if (!r["certificate"].get<std::string>().empty())
            out.summary += " (" + r["certificate"].get<std::string>() + ")";
        out.summary += "\n";
        if (infeasible[i])
            out.exit_code = kExitInfeasible;
    }
    return out;
}

// -------------------------------------------------------------- pcrb-trace

namespace detail {

/// A measurement schedule with the sensor information at each query.
struct QueryPlan
{
    std::string variant;
    std::vector<double> dts;
    std::vector<Mat> infos;
};

struct Resolved
{
    SolveStatus status;
    std::vector<QueryPlan> plans;
};

inline std::vector<double> repeat(double dt, double duration)
{
    const auto n = static_cast<std::size_t>(std::floor(duration / dt + 1e-9));
    return std::vector<double>(n, dt);
}

/// Query plans for the bound trace of one accuracy value.
inline Resolved resolve_plans(const ExperimentConfig& cfg, const MotionPrior& prior, const AccuracySpec& acc,
                              const Scenario& sc)
{
    const int d = cfg.dimension;
    const double T = cfg.motion.duration;
    const SolverOptions opts = cfg.solver_options();
    const Mat spread = acc.ka * acc.ka * Mat::Identity(d, d);
    Resolved r;
    if (cfg.sensor.kind == SensorKind::none) {
        const double dt = 1.0 / *cfg.schedule.rate_hz;
        const auto dts = repeat(dt, T);
        r.plans.push_back({"given", dts, std::vector<Mat>(dts.size(), Mat::Zero(d, d))});
        return r;
    }
    if (cfg.rate_is_solved()) {
        const Sensor sensor = cfg.sensor_model();
        const double f = cfg.schedule.suboptimal_factor;
        if (cfg.schedule.mode == ScheduleMode::constant) {
            const auto sol = solve_constant_rate(prior, sensor, acc, sc.nominal, opts);
            r.status = sol.status;
            if (!sol.status.ok())
                return r;
            for (const auto& [name, dt] : {std::pair{"optimal", 1.0 / sol.constant_rate},
                                           std::pair{"suboptimal", f / sol.constant_rate}}) {
                const auto dts = repeat(dt, T);
                r.plans.push_back({name, dts, std::vector<Mat>(dts.size(), sol.sensor_info)});
            }
            return r;
        }
        const auto sol = solve_per_step_schedule(prior, sensor, acc, sc.nominal, initialize(KnownState{d, acc.ka}),
                                                 opts);
        r.status = sol.status;
        if (!sol.status.ok())
            return r;
        for (const auto& [name, stretch] : {std::pair{"optimal", 1.0}, std::pair{"suboptimal", f}}) {
            QueryPlan p{name, {}, {}};
            const auto times = schedule_times(sol.rates, stretch, T);
            for (std::size_t k = 0; k < times.size(); ++k) {
                p.dts.push_back(stretch / sol.rates[k].rate_hz);
                p.infos.push_back(expected_information(sensor, sc.nominal.position_at(times[k]), spread,
                                                       opts.quadrature_order));
            }
            r.plans.push_back(std::move(p));
        }
        return r;
    }
    const double rate = *cfg.schedule.rate_hz;
    const double dt = 1.0 / rate;
    if (!cfg.covariance_is_solved()) {
        const Sensor sensor = cfg.sensor_model();
        const auto dts = repeat(dt, T);
        QueryPlan p{"given", dts, {}};
        if (cfg.schedule.mode == ScheduleMode::constant) {
            p.infos.assign(dts.size(), nominal_information(sensor, sc.nominal, spread, opts.quadrature_order));
        } else {
            for (std::size_t k = 0; k < dts.size(); ++k)
                p.infos.push_back(expected_information(sensor, sc.nominal.position_at(static_cast<double>(k) * dt),
                                                       spread, opts.quadrature_order));
        }
        r.plans.push_back(std::move(p));
        return r;
    }
    const auto sol = solve_covariance(prior, cfg.covariance_target(), rate, acc, sc.nominal, cfg.schedule.mode, opts);
    r.status = sol.status;
    if (!sol.status.ok())
        return r;
    const double f = cfg.covariance_suboptimal_factor;
    const std::size_t steps = repeat(dt, T).size();
    QueryPlan opt{"optimal", std::vector<double>(steps, dt), {}};
    auto info_of = [&](const Mat& precision, double t) -> Mat {
        if (cfg.sensor.kind == SensorKind::position)
            return precision;
        const RangeSensor unit(1.0, cfg.sensor.anchors, cfg.sensor.active);
        if (cfg.schedule.mode == ScheduleMode::constant)
            return precision(0, 0) * nominal_information(unit, sc.nominal, spread, opts.quadrature_order);
        return precision(0, 0) * range_geometry(unit, sc.nominal.position_at(t), spread, opts.quadrature_order);
    };
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t idx = cfg.schedule.mode == ScheduleMode::constant ? 0 : std::min(k, sol.precision.size() - 1);
        opt.infos.push_back(info_of(sol.precision[idx], static_cast<double>(k) * dt));
    }
    QueryPlan sub{"suboptimal", opt.dts, {}};
    for (const auto& m : opt.infos)
        sub.infos.push_back(m / f);
    r.plans.push_back(std::move(opt));
    r.plans.push_back(std::move(sub));
    return r;
}

} // namespace detail

inline CommandOutput cmd_pcrb_trace(const ExperimentConfig& cfg, const RunOptions& ro = {})
{
    const MotionPrior prior = cfg.motion_prior();
    const std::uint64_t base = detail::base_seed(cfg, ro);
    std::vector<std::string> blocks(cfg.ka.size());
    std::vector<SolveStatus> statuses(cfg.ka.size());
    std::vector<double> worst(cfg.ka.size() * 2, 0.0);
    detail::parallel_for(cfg.ka.size(), ro.jobs, [&](std::size_t i) {
        const AccuracySpec acc(cfg.ka[i]);
        const Scenario sc = detail::scenario_for(cfg, base, i, 0);
        const auto resolved = detail::resolve_plans(cfg, prior, acc, sc);
        statuses[i] = resolved.status;
        std::string text;
        const std::string ka = num(cfg.ka[i], 9);
        for (std::size_t v = 0; v < resolved.plans.size(); ++v) {
            const auto& plan = resolved.plans[v];
            InfoState s = initialize(KnownState{cfg.dimension, acc.ka});
            text += ka + "," + plan.variant + ",0,0," + num(s.bound_max_eigenvalue(), 12) + "\n";
            double peak = 0.0;
            for (std::size_t k = 0; k < plan.dts.size(); ++k) {
                s = recurse(s, assemble_dblocks(prior, plan.infos[k], plan.dts[k]));
                const double b = s.bound_max_eigenvalue();
                peak = std::max(peak, b);
                text += ka + "," + plan.variant + "," + std::to_string(k + 1) + "," + num(s.time, 12) + ","
                        + num(b, 12) + "\n";
            }
            if (v < 2)
                worst[2 * i + v] = peak;
        }
        blocks[i] = std::move(text);
    });

    CommandOutput out;
    std::string csv = "ka,variant,step,t,bound\n";
    for (const auto& b : blocks)
        csv += b;
    out.files.push_back({"pcrb_trace.csv", std::move(csv)});
    for (std::size_t i = 0; i < cfg.ka.size(); ++i) {
        out.summary += "ka = " + num(cfg.ka[i], 6) + " m: " + to_string(statuses[i].status);
        if (statuses[i].ok())
            out.summary += ", max bound " + num(worst[2 * i], 6) + " m^2 (ka^2 = " + num(cfg.ka[i] * cfg.ka[i], 6) + ")";
        else
            out.summary += " (" + statuses[i].certificate + ")";
        out.summary += "\n";
        if (!statuses[i].ok())
            out.exit_code = kExitInfeasible;
    }
    return out;
}

// -------------------------------------------------------- simulate/estimate

namespace detail {

struct ResolvedSensor
{
    SolveStatus status;
    std::optional<Sensor> sensor;
    std::optional<Mat> covariance;
    std::vector<double> times;
    double rate_hz = 0.0;
};

/// Concrete sensor and query times for one accuracy value (optimal variant).
inline ResolvedSensor resolve_sensor(const ExperimentConfig& cfg, const MotionPrior& prior, const AccuracySpec& acc,
                                     const Scenario& sc)
{
    ResolvedSensor r;
    const double T = cfg.motion.duration;
    if (cfg.sensor.kind == SensorKind::none) {
        r.rate_hz = *cfg.schedule.rate_hz;
        return r;
    }
    if (cfg.rate_is_solved()) {
        r.sensor = cfg.sensor_model();
        r.covariance = cfg.sensor.covariance;
        if (cfg.schedule.mode == ScheduleMode::constant) {
            const auto sol = solve_constant_rate(prior, *r.sensor, acc, sc.nominal, cfg.solver_options());
            r.status = sol.status;
            if (sol.status.ok()) {
                r.rate_hz = sol.constant_rate;
                r.times = constant_rate_times(sol.constant_rate, 0.0, T);
            }
        } else {
            const auto sol = solve_per_step_schedule(prior, *r.sensor, acc, sc.nominal,
                                                     initialize(KnownState{cfg.dimension, acc.ka}),
                                                     cfg.solver_options());
            r.status = sol.status;
            if (sol.status.ok()) {
                r.times = schedule_times(sol.rates, 1.0, T);
                r.rate_hz = static_cast<double>(r.times.size()) / T;
            }
        }
        return r;
    }
    r.rate_hz = *cfg.schedule.rate_hz;
    r.times = constant_rate_times(r.rate_hz, 0.0, T);
    if (!cfg.covariance_is_solved()) {
        r.sensor = cfg.sensor_model();
        r.covariance = cfg.sensor.covariance;
        return r;
    }
    if (cfg.schedule.mode != ScheduleMode::constant)
        throw ConfigError("schedule.mode", "simulating a solved covariance needs constant mode");
    const auto sol = solve_covariance(prior, cfg.covariance_target(), r.rate_hz, acc, sc.nominal,
                                      ScheduleMode::constant, cfg.solver_options());
    r.status = sol.status;
    if (sol.status.ok() && sol.implied_cov.front()) {
        r.covariance = *sol.implied_cov.front();
        r.sensor = cfg.sensor_with(*r.covariance);
    } else if (sol.status.ok()) {
        r.times.clear(); // zero precision: the sensor adds nothing
    }
    return r;
}

inline std::string trajectory_csv(const Trajectory& traj)
{
    std::string s = "t";
    for (int i = 0; i < traj.dim(); ++i)
        s += ",x" + std::to_string(i + 1);
    s += "\n";
    for (const auto& p : traj.samples) {
        s += exact(p.time);
        for (Eigen::Index i = 0; i < p.position.size(); ++i)
            s += "," + exact(p.position[i]);
        s += "\n";
    }
    return s;
}

inline Trajectory trajectory_from(const Table& t, int d)
{
    Trajectory traj;
    const std::size_t tc = t.column("t");
    std::vector<std::size_t> xc;
    for (int i = 0; i < d; ++i)
        xc.push_back(t.column("x" + std::to_string(i + 1)));
    for (const auto& row : t.rows) {
        Vec x(d);
        for (int i = 0; i < d; ++i)
            x[i] = to_double(row[xc[static_cast<std::size_t>(i)]]);
        traj.samples.push_back({to_double(row[tc]), x, Vec::Zero(d)});
    }
    return traj;
}

} // namespace detail

inline CommandOutput cmd_simulate(const ExperimentConfig& cfg, const RunOptions& ro = {})
{
    const MotionPrior prior = cfg.motion_prior();
    const std::uint64_t base = detail::base_seed(cfg, ro);
    const int d = cfg.dimension;
    const AccuracySpec acc(cfg.ka.front());
    const Scenario sc = detail::scenario_for(cfg, base, 0, 0);
    const auto rs = detail::resolve_sensor(cfg, prior, acc, sc);

    CommandOutput out;
    ordered_json info;
    info["schema_version"] = kSchemaVersion;
    info["command"] = "simulate";
    info["ka"] = acc.ka;
    info["seed"] = base;
    info["sensor"] = to_string(cfg.sensor.kind);
    detail::put_status(info, rs.status, detail::timing(cfg, ro));
    if (!rs.status.ok()) {
        out.files.push_back({"simulate.json", info.dump(2) + "\n"});
        out.summary = "infeasible: " + rs.status.certificate + "\n";
        out.exit_code = kExitInfeasible;
        return out;
    }
    const Trajectory truth = simulate_truth(cfg, prior, sc, rs.times, trial_seed(base, 0, 0, Stream::truth));
    std::vector<MeasurementRecord> meas;
    if (rs.sensor)
        meas = simulate_measurements(*rs.sensor, truth, rs.times, trial_seed(base, 0, 0, Stream::measurements));
    info["rate_hz"] = rounded(rs.rate_hz, 6);
    info["queries"] = rs.times.size();
    info["sensor_covariance"] = rs.covariance ? detail::matrix_json(*rs.covariance) : ordered_json(nullptr);

    out.files.push_back({"truth.csv", detail::trajectory_csv(truth)});

    std::string m = "t,kind,anchor";
    for (int i = 0; i < d; ++i)
        m += ",v" + std::to_string(i + 1);
    m += "\n";
    for (const auto& r : meas) {
        m += exact(r.time) + "," + (r.kind == MeasurementKind::position ? "position" : "range") + ","
             + (r.anchor_index ? std::to_string(*r.anchor_index) : std::string());
        for (int i = 0; i < d; ++i)
            m += "," + (i < r.value.size() ? exact(r.value[i]) : std::string());
        m += "\n";
    }
    out.files.push_back({"measurements.csv", std::move(m)});

    std::string u = "t";
    for (int i = 0; i < d; ++i)
        u += ",u" + std::to_string(i + 1);
    u += "\n";
    for (std::size_t k = 0; k < sc.input.breaks().size(); ++k) {
        u += exact(sc.input.breaks()[k]);
        for (int i = 0; i < d; ++i)
            u += "," + exact(sc.input.values()[k][i]);
        u += "\n";
    }
    out.files.push_back({"inputs.csv", std::move(u)});

    if (cfg.estimator.initial_prior) {
        GaussianStream g(trial_seed(base, 0, 0, Stream::estimator_prior));
        const Vec mean = sc.x0 + acc.ka * g.standard(d);
        std::string p;
        for (int i = 0; i < d; ++i)
            p += (i ? "," : "") + std::string("m") + std::to_string(i + 1);
        p += ",std\n";
        for (int i = 0; i < d; ++i)
            p += (i ? "," : "") + exact(mean[i]);
        p += "," + exact(acc.ka) + "\n";
        out.files.push_back({"initial_prior.csv", std::move(p)});
    }
    out.files.push_back({"simulate.json", info.dump(2) + "\n"});
    out.summary = "simulated " + std::to_string(truth.samples.size()) + " truth samples and "
                  + std::to_string(meas.size()) + " measurements at " + num(rs.rate_hz, 6) + " Hz\n";
    return out;
}

/// MAP estimate from a directory written by `simulate` (measurements.csv,
/// inputs.csv and, when present, initial_prior.csv, truth.csv, simulate.json).
inline CommandOutput cmd_estimate(const ExperimentConfig& cfg, const std::filesystem::path& input_dir,
                                  const RunOptions& ro = {})
{
    (void)ro;
    detail::require_sensor(cfg, "estimate");
    const int d = cfg.dimension;
    const MotionPrior prior = cfg.motion_prior();

    Mat cov;
    if (cfg.sensor.covariance) {
        cov = *cfg.sensor.covariance;
    } else {
        std::ifstream in(input_dir / "simulate.json");
        if (!in)
            throw InvalidArgument("sensor covariance is \"solve\" and no simulate.json was found in "
                                  + input_dir.string());
        const json sim = json::parse(in);
        if (!sim.contains("sensor_covariance") || sim["sensor_covariance"].is_null())
            throw InvalidArgument("simulate.json has no sensor covariance");
        const auto& m = sim["sensor_covariance"];
        cov.resize(static_cast<Eigen::Index>(m.size()), static_cast<Eigen::Index>(m.size()));
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = 0; j < m.size(); ++j)
                cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m[i][j].get<double>();
    }
    const Sensor sensor = cfg.sensor_with(cov);

    const Table mt = read_csv(input_dir / "measurements.csv");
    const std::size_t tc = mt.column("t"), kc = mt.column("kind"), ac = mt.column("anchor");
    std::vector<MeasurementRecord> meas;
    for (const auto& row : mt.rows) {
        MeasurementRecord r;
        r.time = to_double(row[tc]);
        if (row[kc] == "position") {
            r.kind = MeasurementKind::position;
            r.value.resize(d);
            for (int i = 0; i < d; ++i)
                r.value[i] = to_double(row[mt.column("v" + std::to_string(i + 1))]);
        } else if (row[kc] == "range") {
            r.kind = MeasurementKind::range;
            r.anchor_index = static_cast<std::size_t>(std::stoul(row[ac]));
            r.value = Vec::Constant(1, to_double(row[mt.column("v1")]));
        } else {
            throw InvalidArgument("measurements.csv: unknown kind '" + row[kc] + "'");
        }
        meas.push_back(std::move(r));
    }

    const Table ut = read_csv(input_dir / "inputs.csv");
    std::vector<double> breaks;
    std::vector<Vec> values;
    for (const auto& row : ut.rows) {
        breaks.push_back(to_double(row[ut.column("t")]));
        Vec u(d);
        for (int i = 0; i < d; ++i)
            u[i] = to_double(row[ut.column("u" + std::to_string(i + 1))]);
        values.push_back(u);
    }
    const PiecewiseConstantInput input(std::move(breaks), std::move(values));

    BuildOptions bo;
    bo.t_start = 0.0;
    if (std::filesystem::exists(input_dir / "initial_prior.csv") && cfg.estimator.initial_prior) {
        const Table pt = read_csv(input_dir / "initial_prior.csv");
        StatePrior p;
        p.mean.resize(d);
        for (int i = 0; i < d; ++i)
            p.mean[i] = to_double(pt.rows.at(0)[pt.column("m" + std::to_string(i + 1))]);
        const double sd = to_double(pt.rows.at(0)[pt.column("std")]);
        p.info = Mat::Identity(d, d) / (sd * sd);
        bo.initial_prior = p;
    }
    const auto problem = build_problem(prior, sensor, meas, &input, bo);
    GaussNewtonOptions go;
    go.max_iter = cfg.estimator.max_iter;
    const auto res = solve_gauss_newton(problem, go);

    ordered_json report;
    report["schema_version"] = kSchemaVersion;
    report["command"] = "estimate";
    report["states"] = res.estimate.samples.size();
    report["iterations"] = res.iterations;
    report["final_cost"] = res.final_cost;
    report["gradient_norm"] = res.gradient_norm;
    report["converged"] = res.converged;
    CommandOutput out;
    out.summary = "MAP estimate: " + std::to_string(res.estimate.samples.size()) + " states, "
                  + std::to_string(res.iterations) + " iterations, converged = " + (res.converged ? "yes" : "no");
    if (std::filesystem::exists(input_dir / "truth.csv")) {
        const Trajectory truth = detail::trajectory_from(read_csv(input_dir / "truth.csv"), d);
        const double e = rmse(res.estimate, truth);
        report["rmse_m"] = e;
        out.summary += ", RMSE = " + num(e, 6) + " m";
    }
    out.summary += "\n";
    out.files.push_back({"estimate.csv", detail::trajectory_csv(res.estimate)});
    out.files.push_back({"estimate.json", report.dump(2) + "\n"});
    return out;
}

// -------------------------------------------------------------- experiment

struct ResultRow
{
    double ka = 0.0;
    std::string variant;
    std::string trial;
    std::vector<double> solved;
    std::optional<double> rmse;
    std::string status;
    double solver_time = 0.0;
};

namespace detail {

struct TrialOutcome
{
    ResultRow optimal;
    ResultRow suboptimal;
};

inline TrialOutcome run_trial(const ExperimentConfig& cfg, ExperimentKind kind, const MotionPrior& prior,
                              std::uint64_t base, std::size_t ka_index, std::size_t trial, bool timed)
{
    const double ka = cfg.ka[ka_index];
    const AccuracySpec acc(ka);
    const int d = cfg.dimension;
    const double T = cfg.motion.duration;
    const Scenario sc = scenario_for(cfg, base, ka_index, trial);

    TrialOutcome o;
    o.optimal = {ka, "optimal", std::to_string(trial), {}, std::nullopt, "", 0.0};
    o.suboptimal = {ka, "suboptimal", std::to_string(trial), {}, std::nullopt, "", 0.0};

    std::optional<Sensor> sensor_opt, sensor_sub;
    std::vector<double> times_opt, times_sub;
    SolveStatus st;

    if (kind == ExperimentKind::rate_sweep) {
        const Sensor sensor = cfg.sensor_model();
        const double f = cfg.schedule.suboptimal_factor;
        if (cfg.schedule.mode == ScheduleMode::constant) {
            const auto sol = solve_constant_rate(prior, sensor, acc, sc.nominal, cfg.solver_options());
            st = sol.status;
            if (st.ok()) {
                times_opt = constant_rate_times(sol.constant_rate, 0.0, T);
                times_sub = constant_rate_times(sol.constant_rate / f, 0.0, T);
                o.optimal.solved = {sol.constant_rate};
                o.suboptimal.solved = {sol.constant_rate / f};
            }
        } else {
            const auto sol = solve_per_step_schedule(prior, sensor, acc, sc.nominal, initialize(KnownState{d, ka}),
                                                     cfg.solver_options());
            st = sol.status;
            if (st.ok()) {
                times_opt = schedule_times(sol.rates, 1.0, T);
                times_sub = schedule_times(sol.rates, f, T);
                o.optimal.solved = {static_cast<double>(times_opt.size()) / T};
                o.suboptimal.solved = {static_cast<double>(times_sub.size()) / T};
            }
        }
        sensor_opt = sensor_sub = sensor;
    } else {
        const double rate = *cfg.schedule.rate_hz;
        const auto sol = solve_covariance(prior, cfg.covariance_target(), rate, acc, sc.nominal,
                                          ScheduleMode::constant, cfg.solver_options());
        st = sol.status;
        const Eigen::Index n = cfg.sensor.kind == SensorKind::range ? 1 : d;
        if (st.ok()) {
            times_opt = times_sub = constant_rate_times(rate, 0.0, T);
            if (sol.implied_cov.front()) {
                const Mat cov = *sol.implied_cov.front();
                sensor_opt = cfg.sensor_with(cov);
                sensor_sub = cfg.sensor_with(cov * cfg.covariance_suboptimal_factor);
                o.optimal.solved = upper_triangle(cov);
                o.suboptimal.solved = upper_triangle(cov * cfg.covariance_suboptimal_factor);
            } else {
                // Zero precision is optimal: no measurement is needed.
                times_opt.clear();
                times_sub.clear();
                const auto inf = std::numeric_limits<double>::infinity();
                o.optimal.solved = o.suboptimal.solved = upper_triangle(Mat::Constant(n, n, inf));
            }
        }
    }
    o.optimal.status = o.suboptimal.status = to_string(st.status);
    o.optimal.solver_time = o.suboptimal.solver_time = timed ? st.wall_time : 0.0;
    if (!st.ok())
        return o;

    std::vector<double> all(times_opt);
    all.insert(all.end(), times_sub.begin(), times_sub.end());
    const Trajectory truth = simulate_truth(cfg, prior, sc, all, trial_seed(base, ka_index, trial, Stream::truth));
    auto run = [&](ResultRow& row, const std::optional<Sensor>& sensor, const std::vector<double>& times,
                   std::uint64_t variant) {
        std::vector<MeasurementRecord> meas;
        if (sensor)
            meas = simulate_measurements(*sensor, truth, times,
                                         trial_seed(base, ka_index, trial, Stream::measurements, variant));
        const Sensor& model = sensor ? *sensor : *sensor_opt;
        const auto est = estimate_trajectory(cfg, prior, model, meas, sc.input, sc.x0, ka,
                                             trial_seed(base, ka_index, trial, Stream::estimator_prior));
        row.rmse = rmse(est.estimate, truth);
    };
    if (!sensor_opt) {
        // Solved-away sensor: estimate from the prior alone with a nominal model.
        sensor_opt = sensor_sub = cfg.sensor_with(Mat::Identity(cfg.sensor.kind == SensorKind::range ? 1 : d,
                                                                cfg.sensor.kind == SensorKind::range ? 1 : d));
        run(o.optimal, std::nullopt, times_opt, 0);
        run(o.suboptimal, std::nullopt, times_sub, 1);
        return o;
    }
    run(o.optimal, sensor_opt, times_opt, 0);
    run(o.suboptimal, sensor_sub, times_sub, 1);
    return o;
}

inline std::string row_csv(const ResultRow& r)
{
    std::string s = num(r.ka, 9) + "," + r.variant + "," + r.trial;
    for (double v : r.solved)
        s += "," + num(v, 6);
    s += "," + (r.rmse ? num(*r.rmse, 9) : std::string()) + "," + r.status + "," + num(r.solver_time, 6) + "\n";
    return s;
}

inline ResultRow mean_row(const std::vector<const ResultRow*>& rows)
{
    ResultRow m = *rows.front();
    m.trial = "mean";
    std::size_t n_solved = 0, n_rmse = 0;
    std::vector<double> solved(rows.front()->solved.size(), 0.0);
    double rmse_sum = 0.0, time_sum = 0.0;
    m.status = "optimal";
    for (const auto* r : rows) {
        if (r->solved.size() == solved.size() && !solved.empty()) {
            for (std::size_t i = 0; i < solved.size(); ++i)
                solved[i] += r->solved[i];
            ++n_solved;
        }
        if (r->rmse) {
            rmse_sum += *r->rmse;
            ++n_rmse;
        }
        time_sum += r->solver_time;
        if (r->status != "optimal" && m.status == "optimal")
            m.status = r->status;
    }
    m.solved.clear();
    if (n_solved > 0)
        for (double v : solved)
            m.solved.push_back(v / static_cast<double>(n_solved));
    m.rmse = n_rmse > 0 ? std::optional<double>(rmse_sum / static_cast<double>(n_rmse)) : std::nullopt;
    m.solver_time = time_sum / static_cast<double>(rows.size());
    return m;
}

} // namespace detail

struct ExperimentResult
{
    std::vector<ResultRow> rows;
    /// Per (ka, variant) means, ka-major, optimal before suboptimal.
    std::vector<ResultRow> means;
    CommandOutput output;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, ExperimentKind kind, const RunOptions& ro = {})
{
    detail::require_sensor(cfg, "experiment");
    if (kind == ExperimentKind::rate_sweep && !cfg.rate_is_solved())
        throw ConfigError("schedule.rate_hz", "rate-sweep needs rate_hz = \"solve\"");
    if (kind == ExperimentKind::covariance_sweep) {
        if (!cfg.covariance_is_solved())
            throw ConfigError("sensor.covariance", "covariance-sweep needs covariance = \"solve\"");
        if (cfg.schedule.mode != ScheduleMode::constant)
            throw ConfigError("schedule.mode", "covariance-sweep supports constant mode only");
    }
    const MotionPrior prior = cfg.motion_prior();
    const std::uint64_t base = detail::base_seed(cfg, ro);
    const bool timed = detail::timing(cfg, ro);
    const std::size_t trials = static_cast<std::size_t>(cfg.trials.count);
    const std::size_t tasks = cfg.ka.size() * trials;

    std::vector<detail::TrialOutcome> outcomes(tasks);
    detail::parallel_for(tasks, ro.jobs, [&](std::size_t i) {
        const std::size_t ka_index = i / trials, trial = i % trials;
        try {
            outcomes[i] = detail::run_trial(cfg, kind, prior, base, ka_index, trial, timed);
        } catch (const std::exception&) {
            // Partial failure: keep the row, mark it, carry on.
            const double ka = cfg.ka[ka_index];
            outcomes[i].optimal = {ka, "optimal", std::to_string(trial), {}, std::nullopt, "error", 0.0};
            outcomes[i].suboptimal = {ka, "suboptimal", std::to_string(trial), {}, std::nullopt, "error", 0.0};
        }
    });

    ExperimentResult res;
    std::vector<std::string> solved_cols{"solved_rate_hz"};
    if (kind == ExperimentKind::covariance_sweep)
        solved_cols = detail::covariance_columns(cfg.sensor.kind == SensorKind::range ? 1 : cfg.dimension);
    const std::size_t n_solved = solved_cols.size();

    std::string csv = "ka,variant,trial";
    for (const auto& c : solved_cols)
        csv += "," + c;
    csv += ",rmse_m,status,solver_time_s\n";
    auto pad = [&](ResultRow r) {
        if (r.solved.size() != n_solved)
            r.solved.assign(n_solved, std::numeric_limits<double>::quiet_NaN());
        return r;
    };
    for (const auto& o : outcomes) {
        res.rows.push_back(pad(o.optimal));
        res.rows.push_back(pad(o.suboptimal));
    }
    for (const auto& r : res.rows)
        csv += detail::row_csv(r);
    for (std::size_t k = 0; k < cfg.ka.size(); ++k)
        for (const char* variant : {"optimal", "suboptimal"}) {
            std::vector<const ResultRow*> group;
            for (const auto& r : res.rows)
                if (r.ka == cfg.ka[k] && r.variant == variant)
                    group.push_back(&r);
            res.means.push_back(pad(detail::mean_row(group)));
            csv += detail::row_csv(res.means.back());
        }

    const std::string name = to_string(kind);
    res.output.files.push_back({name + ".csv", std::move(csv)});
    if (cfg.output.gnuplot)
        for (const char* variant : {"optimal", "suboptimal"}) {
            std::string dat = "# ka_m mean_rmse_m (" + std::string(variant) + ")\n";
            for (const auto& m : res.means)
                if (m.variant == variant && m.rmse)
                    dat += num(m.ka, 9) + " " + num(*m.rmse, 9) + "\n";
            res.output.files.push_back({name + "_" + variant + ".dat", std::move(dat)});
        }
    for (const auto& m : res.means)
        res.output.summary += "ka = " + num(m.ka, 6) + " m, " + m.variant + ": mean RMSE = "
                              + (m.rmse ? num(*m.rmse, 6) + " m" : std::string("n/a")) + " (" + m.status + ")\n";
    return res;
}

inline CommandOutput cmd_experiment(const ExperimentConfig& cfg, ExperimentKind kind, const RunOptions& ro = {})
{
    return run_experiment(cfg, kind, ro).output;
}

} // namespace spi::harness
