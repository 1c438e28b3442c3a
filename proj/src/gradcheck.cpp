#include "prefixprop/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prefixprop/errors.hpp"
#include "prefixprop/rng.hpp"

namespace prefixprop {

namespace {

double evaluate(const LossFn& loss_fn) {
    Tape tape(false);
    return loss_fn(tape).value()[0];
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, std::span<Parameter* const> params, double eps,
                           const GradCheckOptions& options) {
    if (!(eps >= 1e-6 && eps <= 1e-4)) {
        throw ConfigError("grad_check: eps must lie in [1e-6, 1e-4]");
    }

    const double base = evaluate(loss_fn);
    if (evaluate(loss_fn) != base) {
        throw DeterminismError("grad_check: loss function is not deterministic");
    }

    for (Parameter* p : params) {
        p->zero_grad();
    }
    {
        Tape tape;
        tape.backward(loss_fn(tape));
    }

    GradCheckReport report;
    Rng rng(options.seed);
    for (Parameter* p : params) {
        std::vector<std::size_t> coords(p->value.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (options.max_coords_per_param != 0 && coords.size() > options.max_coords_per_param) {
            shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t idx : coords) {
            double& slot = p->value[idx];
            const double saved = slot;
            slot = saved + eps;
            const double up = evaluate(loss_fn);
            slot = saved - eps;
            const double down = evaluate(loss_fn);
            slot = saved;

            GradCheckEntry e;
            e.param = p->name;
            e.index = idx;
            e.analytic = p->grad[idx];
            e.numeric = (up - down) / (2.0 * eps);
            const double diff = std::abs(e.analytic - e.numeric);
            const double magnitude = std::max(std::abs(e.analytic), std::abs(e.numeric));
            if (magnitude < options.small_grad) {
                e.relative = false;
                e.error = diff;
                e.passed = diff < options.abs_tol;
                report.max_absolute_error = std::max(report.max_absolute_error, diff);
            } else {
                e.error = diff / magnitude;
                e.passed = e.error < options.rel_tol;
                report.max_relative_error = std::max(report.max_relative_error, e.error);
            }
            report.passed = report.passed && e.passed;
            report.entries.push_back(std::move(e));
        }
    }
    return report;
}

}  // namespace prefixprop
