#pragma once

// Experiment configuration: one JSON document, validated up front with
// field-path error messages.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spi/core.hpp"
#include "spi/param_solvers.hpp"

namespace spi::harness {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

class ConfigError : public Error
{
public:
    ConfigError(const std::string& path, const std::string& what) : Error(path + ": " + what) {}
};

enum class SensorKind { position, range, none };

inline const char* to_string(SensorKind k)
{
    switch (k) {
    case SensorKind::position:
        return "position";
    case SensorKind::range:
        return "range";
    case SensorKind::none:
        return "none";
    }
    return "unknown";
}

struct MotionConfig
{
    Mat psd;
    double gt_step = 0.01;
    double duration = 120.0;
    double position_range = 4.0;
    double velocity_range = 1.0;
    /// Commanded velocity reflects when the mean path leaves this box.
    double arena_half_width = 5.0;
};

struct SensorConfig
{
    SensorKind kind = SensorKind::position;
    /// Unset means "solve".
    std::optional<Mat> covariance;
    std::vector<Vec> anchors;
    std::vector<std::size_t> active;
    int quadrature_order = 3;
    bool isotropic = false;
};

struct ScheduleConfig
{
    /// Unset means "solve".
    std::optional<double> rate_hz;
    ScheduleMode mode = ScheduleMode::constant;
    double suboptimal_factor = 3.0;
};

struct TrialConfig
{
    int count = 1;
    std::uint64_t base_seed = 0;
};

struct EstimatorConfig
{
    bool initial_prior = true;
    int max_iter = 50;
};

struct OutputConfig
{
    std::string directory = "out";
    bool record_timing = false;
    bool gnuplot = true;
};

struct ExperimentConfig
{
    int dimension = 2;
    MotionConfig motion;
    SensorConfig sensor;
    std::vector<double> ka;
    ScheduleConfig schedule;
    double covariance_suboptimal_factor = 3.0;
    TrialConfig trials;
    EstimatorConfig estimator;
    OutputConfig output;

    bool rate_is_solved() const { return !schedule.rate_hz.has_value(); }
    bool covariance_is_solved() const { return sensor.kind != SensorKind::none && !sensor.covariance.has_value(); }

    MotionPrior motion_prior() const { return MotionPrior(motion.psd); }

    /// Sensor with a concrete covariance (or variance for range sensors).
    Sensor sensor_with(const Mat& cov) const
    {
        if (sensor.kind == SensorKind::position)
            return PositionSensor(cov);
        if (sensor.kind == SensorKind::range)
            return RangeSensor(cov(0, 0), sensor.anchors, sensor.active);
        throw InvalidArgument("no sensor configured");
    }

    Sensor sensor_model() const
    {
        if (!sensor.covariance)
            throw InvalidArgument("sensor covariance is to be solved, not given");
        return sensor_with(*sensor.covariance);
    }

    CovarianceTarget covariance_target() const
    {
        if (sensor.kind == SensorKind::range)
            return RangeCovarianceTarget{sensor.anchors, sensor.active};
        return PositionCovarianceTarget{dimension, sensor.isotropic};
    }

    SolverOptions solver_options() const
    {
        SolverOptions o;
        o.quadrature_order = sensor.quadrature_order;
        o.isotropic_position = sensor.isotropic;
        return o;
    }
};

namespace detail {

inline std::string join(const std::string& path, const std::string& key)
{
    return path.empty() ? key : path + "." + key;
}

inline std::string index(const std::string& path, std::size_t i)
{
    return path + "[" + std::to_string(i) + "]";
}

inline const json* find(const json& obj, const std::string& key)
{
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

inline double number(const json& v, const std::string& path)
{
    if (!v.is_number())
        throw ConfigError(path, "expected a number");
    return v.get<double>();
}

inline double positive(const json& v, const std::string& path, const std::string& what = "must be positive")
{
    const double x = number(v, path);
    if (!(x > 0.0) || !std::isfinite(x))
        throw ConfigError(path, what);
    return x;
}

inline bool boolean(const json& v, const std::string& path)
{
    if (!v.is_boolean())
        throw ConfigError(path, "expected true or false");
    return v.get<bool>();
}

inline int integer(const json& v, const std::string& path)
{
    if (!v.is_number_integer())
        throw ConfigError(path, "expected an integer");
    return v.get<int>();
}

inline void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed)
{
    if (!obj.is_object())
        throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed)
            ok = ok || it.key() == a;
        if (!ok)
            throw ConfigError(join(path, it.key()), "unknown field");
    }
}

/// A scalar s (meaning s I), a list (diagonal) or a d x d nested list.
inline Mat matrix(const json& v, int d, const std::string& path)
{
    if (v.is_number()) {
        const double s = number(v, path);
        return s * Mat::Identity(d, d);
    }
    if (!v.is_array() || v.size() != static_cast<std::size_t>(d))
        throw ConfigError(path, "expected a number, a length-" + std::to_string(d) + " diagonal or a " + std::to_string(d)
                                    + "x" + std::to_string(d) + " matrix");
    Mat m = Mat::Zero(d, d);
    if (v[0].is_number()) {
        for (int i = 0; i < d; ++i)
            m(i, i) = number(v[static_cast<std::size_t>(i)], index(path, static_cast<std::size_t>(i)));
        return m;
    }
    for (int i = 0; i < d; ++i) {
        const auto& row = v[static_cast<std::size_t>(i)];
        const std::string rp = index(path, static_cast<std::size_t>(i));
        if (!row.is_array() || row.size() != static_cast<std::size_t>(d))
            throw ConfigError(rp, "expected a row of length " + std::to_string(d));
        for (int j = 0; j < d; ++j)
            m(i, j) = number(row[static_cast<std::size_t>(j)], index(rp, static_cast<std::size_t>(j)));
    }
    return m;
}

inline void check_spd(const Mat& m, const std::string& path)
{
    if (!linalg::is_symmetric(m, 1e-12))
        throw ConfigError(path, "matrix must be symmetric");
    if (!(linalg::min_eigenvalue(m) > 0.0))
        throw ConfigError(path, "matrix must be positive definite");
}

/// Eight anchors on the square of the given half-width: corners and edge
/// midpoints (2-D); the corners of the cube in 3-D; +-h in 1-D.
inline std::vector<Vec> square_anchors(int d, double h)
{
    std::vector<Vec> out;
    if (d == 1) {
        out.push_back(Vec::Constant(1, -h));
        out.push_back(Vec::Constant(1, h));
    } else if (d == 2) {
        const double c[8][2] = {{-h, -h}, {0, -h}, {h, -h}, {h, 0}, {h, h}, {0, h}, {-h, h}, {-h, 0}};
        for (const auto& p : c)
            out.push_back(Vec{{p[0], p[1]}});
    } else {
        for (int mask = 0; mask < (1 << d); ++mask) {
            Vec a(d);
            for (int i = 0; i < d; ++i)
                a[i] = (mask >> i & 1) ? h : -h;
            out.push_back(a);
        }
    }
    return out;
}

} // namespace detail

inline ExperimentConfig parse_config(const json& root)
{
    using namespace detail;
    ExperimentConfig c;
    check_keys(root, "", {"schema_version", "dimension", "motion", "sensor", "accuracy", "schedule", "covariance",
                          "trials", "estimator", "output"});

    const json* ver = find(root, "schema_version");
    if (!ver)
        throw ConfigError("schema_version", "missing");
    if (integer(*ver, "schema_version") != kSchemaVersion)
        throw ConfigError("schema_version", "unsupported version (expected " + std::to_string(kSchemaVersion) + ")");

    if (const json* v = find(root, "dimension")) {
        c.dimension = integer(*v, "dimension");
        if (c.dimension < 1 || c.dimension > 3)
            throw ConfigError("dimension", "must be 1, 2 or 3");
    }
    const int d = c.dimension;

    // motion
    const json* motion = find(root, "motion");
    if (!motion)
        throw ConfigError("motion", "missing");
    check_keys(*motion, "motion", {"psd", "gt_step", "duration", "initial_position_range", "initial_velocity_range",
                                   "arena_half_width"});
    const json* psd = find(*motion, "psd");
    if (!psd)
        throw ConfigError("motion.psd", "missing");
    c.motion.psd = matrix(*psd, d, "motion.psd");
    check_spd(c.motion.psd, "motion.psd");
    if (const json* v = find(*motion, "gt_step"))
        c.motion.gt_step = positive(*v, "motion.gt_step");
    if (const json* v = find(*motion, "duration"))
        c.motion.duration = positive(*v, "motion.duration");
    if (const json* v = find(*motion, "initial_position_range")) {
        c.motion.position_range = number(*v, "motion.initial_position_range");
        if (c.motion.position_range < 0.0)
            throw ConfigError("motion.initial_position_range", "must be non-negative");
    }
    if (const json* v = find(*motion, "initial_velocity_range")) {
        c.motion.velocity_range = number(*v, "motion.initial_velocity_range");
        if (c.motion.velocity_range < 0.0)
            throw ConfigError("motion.initial_velocity_range", "must be non-negative");
    }
    if (const json* v = find(*motion, "arena_half_width"))
        c.motion.arena_half_width = positive(*v, "motion.arena_half_width");
    if (c.motion.gt_step > c.motion.duration)
        throw ConfigError("motion.gt_step", "must not exceed motion.duration");

    // sensor
    const json* sensor = find(root, "sensor");
    if (!sensor)
        throw ConfigError("sensor", "missing");
    check_keys(*sensor, "sensor", {"kind", "covariance", "anchors", "anchor_half_width", "active", "quadrature_order",
                                   "isotropic"});
    const json* kind = find(*sensor, "kind");
    if (!kind || !kind->is_string())
        throw ConfigError("sensor.kind", "expected \"position\", \"range\" or \"none\"");
    const std::string k = kind->get<std::string>();
    if (k == "position")
        c.sensor.kind = SensorKind::position;
    else if (k == "range")
        c.sensor.kind = SensorKind::range;
    else if (k == "none")
        c.sensor.kind = SensorKind::none;
    else
        throw ConfigError("sensor.kind", "expected \"position\", \"range\" or \"none\"");

    if (c.sensor.kind != SensorKind::none) {
        const json* cov = find(*sensor, "covariance");
        if (!cov)
            throw ConfigError("sensor.covariance", "missing (give a value or \"solve\")");
        if (cov->is_string()) {
            if (cov->get<std::string>() != "solve")
                throw ConfigError("sensor.covariance", "expected a value or \"solve\"");
        } else if (c.sensor.kind == SensorKind::range) {
            Mat v(1, 1);
            v(0, 0) = positive(*cov, "sensor.covariance", "range variance must be positive");
            c.sensor.covariance = v;
        } else {
            c.sensor.covariance = matrix(*cov, d, "sensor.covariance");
            check_spd(*c.sensor.covariance, "sensor.covariance");
        }
    }
    if (const json* v = find(*sensor, "quadrature_order")) {
        c.sensor.quadrature_order = integer(*v, "sensor.quadrature_order");
        if (c.sensor.quadrature_order < 1)
            throw ConfigError("sensor.quadrature_order", "must be >= 1");
    }
    if (const json* v = find(*sensor, "isotropic"))
        c.sensor.isotropic = boolean(*v, "sensor.isotropic");
    if (c.sensor.kind == SensorKind::range) {
        const json* anchors = find(*sensor, "anchors");
        if (!anchors || (anchors->is_string() && anchors->get<std::string>() == "square")) {
            double h = 6.0;
            if (const json* v = find(*sensor, "anchor_half_width"))
                h = positive(*v, "sensor.anchor_half_width");
            c.sensor.anchors = square_anchors(d, h);
        } else {
            if (!anchors->is_array() || anchors->empty())
                throw ConfigError("sensor.anchors", "expected a non-empty list of positions or \"square\"");
            for (std::size_t i = 0; i < anchors->size(); ++i) {
                const auto& a = (*anchors)[i];
                const std::string ap = index("sensor.anchors", i);
                if (!a.is_array() || a.size() != static_cast<std::size_t>(d))
                    throw ConfigError(ap, "expected a position of dimension " + std::to_string(d));
                Vec p(d);
                for (int j = 0; j < d; ++j)
                    p[j] = number(a[static_cast<std::size_t>(j)], index(ap, static_cast<std::size_t>(j)));
                c.sensor.anchors.push_back(p);
            }
        }
        if (const json* v = find(*sensor, "active")) {
            if (!v->is_array())
                throw ConfigError("sensor.active", "expected a list of anchor indices");
            for (std::size_t i = 0; i < v->size(); ++i) {
                const int a = integer((*v)[i], index("sensor.active", i));
                if (a < 0 || static_cast<std::size_t>(a) >= c.sensor.anchors.size())
                    throw ConfigError(index("sensor.active", i), "anchor index out of range");
                c.sensor.active.push_back(static_cast<std::size_t>(a));
            }
        }
        const std::size_t n_active = c.sensor.active.empty() ? c.sensor.anchors.size() : c.sensor.active.size();
        if (n_active < static_cast<std::size_t>(d))
            throw ConfigError("sensor.anchors", "at least " + std::to_string(d) + " active anchors are required");
    }

    // accuracy
    const json* acc = find(root, "accuracy");
    if (!acc)
        throw ConfigError("accuracy", "missing");
    check_keys(*acc, "accuracy", {"ka"});
    const json* ka = find(*acc, "ka");
    if (!ka)
        throw ConfigError("accuracy.ka", "missing");
    if (ka->is_array()) {
        if (ka->empty())
            throw ConfigError("accuracy.ka", "expected at least one value");
        for (std::size_t i = 0; i < ka->size(); ++i)
            c.ka.push_back(positive((*ka)[i], index("accuracy.ka", i), "accuracy must be positive"));
    } else {
        c.ka.push_back(positive(*ka, "accuracy.ka", "accuracy must be positive"));
    }

    // schedule
    if (const json* sched = find(root, "schedule")) {
        check_keys(*sched, "schedule", {"rate_hz", "mode", "suboptimal_factor"});
        if (const json* v = find(*sched, "rate_hz")) {
            if (v->is_string()) {
                if (v->get<std::string>() != "solve")
                    throw ConfigError("schedule.rate_hz", "expected a rate or \"solve\"");
            } else {
                c.schedule.rate_hz = positive(*v, "schedule.rate_hz", "rate must be positive");
            }
        } else {
            throw ConfigError("schedule.rate_hz", "missing (give a rate or \"solve\")");
        }
        if (const json* v = find(*sched, "mode")) {
            const std::string m = v->is_string() ? v->get<std::string>() : "";
            if (m == "constant")
                c.schedule.mode = ScheduleMode::constant;
            else if (m == "per-step")
                c.schedule.mode = ScheduleMode::per_step;
            else
                throw ConfigError("schedule.mode", "expected \"constant\" or \"per-step\"");
        }
        if (const json* v = find(*sched, "suboptimal_factor"))
            c.schedule.suboptimal_factor = positive(*v, "schedule.suboptimal_factor");
    } else {
        throw ConfigError("schedule", "missing");
    }

    if (const json* cov = find(root, "covariance")) {
        check_keys(*cov, "covariance", {"suboptimal_factor"});
        if (const json* v = find(*cov, "suboptimal_factor"))
            c.covariance_suboptimal_factor = positive(*v, "covariance.suboptimal_factor");
    }

    if (const json* trials = find(root, "trials")) {
        check_keys(*trials, "trials", {"count", "base_seed"});
        if (const json* v = find(*trials, "count")) {
            c.trials.count = integer(*v, "trials.count");
            if (c.trials.count < 1)
                throw ConfigError("trials.count", "must be >= 1");
        }
        if (const json* v = find(*trials, "base_seed")) {
            if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0))
                throw ConfigError("trials.base_seed", "expected a non-negative integer");
            c.trials.base_seed = v->get<std::uint64_t>();
        }
    }

    if (const json* est = find(root, "estimator")) {
        check_keys(*est, "estimator", {"initial_prior", "max_iter"});
        if (const json* v = find(*est, "initial_prior"))
            c.estimator.initial_prior = boolean(*v, "estimator.initial_prior");
        if (const json* v = find(*est, "max_iter")) {
            c.estimator.max_iter = integer(*v, "estimator.max_iter");
            if (c.estimator.max_iter < 1)
                throw ConfigError("estimator.max_iter", "must be >= 1");
        }
    }

    if (const json* out = find(root, "output")) {
        check_keys(*out, "output", {"directory", "record_timing", "gnuplot"});
        if (const json* v = find(*out, "directory")) {
            if (!v->is_string() || v->get<std::string>().empty())
                throw ConfigError("output.directory", "expected a non-empty path");
            c.output.directory = v->get<std::string>();
        }
        if (const json* v = find(*out, "record_timing"))
            c.output.record_timing = boolean(*v, "output.record_timing");
        if (const json* v = find(*out, "gnuplot"))
            c.output.gnuplot = boolean(*v, "output.gnuplot");
    }

    if (c.rate_is_solved() && c.covariance_is_solved())
        throw ConfigError("sensor.covariance", "only one of sensor.covariance and schedule.rate_hz may be \"solve\"");
    if (c.sensor.kind == SensorKind::none && c.rate_is_solved())
        throw ConfigError("schedule.rate_hz", "a rate must be given when no sensor is configured");
    return c;
}

inline ExperimentConfig parse_config_text(const std::string& text)
{
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(root);
}

inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("<file>", "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

} // namespace spi::harness
