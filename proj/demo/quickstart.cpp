// Minimal query rate and loosest covariance for a 2-D robot with a position
// sensor, then a check of the guarantee along the bound recursion.

#include <cstdio>

#include "spi/param_solvers.hpp"

int main()
{
    using namespace spi;
    const MotionPrior prior = MotionPrior::isotropic(2, 0.001);
    const PositionSensor sensor = PositionSensor::isotropic(2, 0.08 * 0.08);
    const AccuracySpec acc(0.05);

    Trajectory nominal;
    nominal.samples = {{0.0, Vec::Zero(2), Vec::Zero(2)}, {10.0, Vec::Zero(2), Vec::Zero(2)}};

    const ScheduleSolution rate = solve_constant_rate(prior, sensor, acc, nominal);
    std::printf("constant rate: %.6g Hz (%s)\n", rate.constant_rate, to_string(rate.status.status));

    InfoState s = initialize(KnownState{2, acc.ka});
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        s = recurse(s, assemble_dblocks(prior, rate.sensor_info, 1.0 / rate.constant_rate));
        worst = std::max(worst, s.bound_max_eigenvalue());
    }
    std::printf("max lambda(J^-1) over 100 steps: %.6g m^2 (ka^2 = %.6g)\n", worst, acc.ka * acc.ka);

    const CovarianceSolution cov =
        solve_covariance(prior, PositionCovarianceTarget{2, false}, 20.0, acc, nominal, ScheduleMode::constant);
    if (cov.status.ok() && cov.implied_cov.front())
        std::printf("loosest covariance at 20 Hz: diag(%.6g, %.6g) m^2\n", (*cov.implied_cov.front())(0, 0),
                    (*cov.implied_cov.front())(1, 1));
    return 0;
}
