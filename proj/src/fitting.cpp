#include "dce/fitting.hpp"

#include <algorithm>
#include <cmath>

namespace dce {

void FitConfig::validate() const {
    if (max_iterations <= 0) throw ConfigError("fit: max_iterations must be positive");
    if (!(gradient_tolerance > 0) || !(residual_change_tolerance > 0))
        throw ConfigError("fit: tolerances must be positive");
    for (const ParamBounds& b : {ktrans_bounds, vp_bounds, ve_bounds})
        if (!(b.lo <= b.hi)) throw ConfigError("fit: bounds must satisfy lo <= hi");
}

namespace {

// Solves the n x n symmetric system A x = b in place by Gaussian elimination
// with partial pivoting. Throws SingularDesign when a pivot degenerates.
void solve_small(std::vector<double>& a, std::vector<double>& b, int n) {
    double scale = 0;
    for (int i = 0; i < n * n; ++i) scale = std::max(scale, std::abs(a[i]));
    if (scale == 0) throw SingularDesign("fit: zero design matrix");
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
        if (std::abs(a[pivot * n + col]) < 1e-13 * scale)
            throw SingularDesign("fit: rank-deficient design matrix");
        if (pivot != col) {
            for (int c = 0; c < n; ++c) std::swap(a[col * n + c], a[pivot * n + c]);
            std::swap(b[col], b[pivot]);
        }
        for (int r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] / a[col * n + col];
            for (int c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    for (int r = n - 1; r >= 0; --r) {
        double s = b[r];
        for (int c = r + 1; c < n; ++c) s -= a[r * n + c] * b[c];
        b[r] = s / a[r * n + r];
    }
}

// Least squares via normal equations for a column-major design matrix
// (n_rows x n_cols, n_cols <= 3).
std::vector<double> lls_solve(const std::vector<std::vector<double>>& cols,
                              const std::vector<double>& rhs) {
    const int n = static_cast<int>(cols.size());
    std::vector<double> ata(n * n, 0.0), atb(n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (size_t r = 0; r < rhs.size(); ++r) s += cols[i][r] * cols[j][r];
            ata[i * n + j] = s;
        }
        double s = 0;
        for (size_t r = 0; r < rhs.size(); ++r) s += cols[i][r] * rhs[r];
        atb[i] = s;
    }
    solve_small(ata, atb, n);
    return atb;
}

double clamp_flag(double v, const ParamBounds& b, bool& clamped) {
    if (v < b.lo) {
        clamped = true;
        return b.lo;
    }
    if (v > b.hi) {
        clamped = true;
        return b.hi;
    }
    return v;
}

double residual_norm_for(TkModel model, const std::vector<double>& p,
                         const ConcentrationCurve& ct, const PlasmaCurve& cp) {
    ConcentrationCurve fit = model == TkModel::ETofts
                                 ? etofts_concentration(p[0], p[1], p[2], cp)
                                 : patlak_concentration(p[0], p[1], cp);
    double s = 0;
    for (size_t i = 0; i < ct.n(); ++i) {
        const double d = ct.values_mM[i] - fit.values_mM[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace

FitResult fit_patlak_lls(const ConcentrationCurve& ct, const PlasmaCurve& cp,
                         const FitConfig& cfg) {
    ct.validate();
    cp.validate();
    cfg.validate();
    if (ct.n() != cp.n()) throw ShapeMismatch("fit_patlak_lls: curve length mismatch");
    if (ct.n() < 3) throw ConfigError("fit_patlak_lls: need >= 3 frames");
    const std::vector<double> integral = cumtrapz(cp.time_seconds, cp.values_mM);
    std::vector<double> theta = lls_solve({cp.values_mM, integral}, ct.values_mM);
    FitResult res;
    res.parameters = {clamp_flag(theta[1], cfg.ktrans_bounds, res.clamped),
                      clamp_flag(theta[0], cfg.vp_bounds, res.clamped)};
    res.residual_norm = residual_norm_for(TkModel::Patlak, res.parameters, ct, cp);
    res.converged = true;
    return res;
}

FitResult fit_etofts_lls(const ConcentrationCurve& ct, const PlasmaCurve& cp,
                         const FitConfig& cfg) {
    ct.validate();
    cp.validate();
    cfg.validate();
    if (ct.n() != cp.n()) throw ShapeMismatch("fit_etofts_lls: curve length mismatch");
    if (ct.n() < 4) throw ConfigError("fit_etofts_lls: need >= 4 frames");
    const std::vector<double> int_cp = cumtrapz(cp.time_seconds, cp.values_mM);
    std::vector<double> int_ct = cumtrapz(ct.time_seconds, ct.values_mM);
    for (double& v : int_ct) v = -v;
    // Ct = th1*Cp + th2*intCp - th3*intCt (Murase linearization)
    std::vector<double> theta;
    try {
        theta = lls_solve({cp.values_mM, int_cp, int_ct}, ct.values_mM);
    } catch (const SingularDesign&) {
        // intCt collinear with the other columns (ktrans ~ 0): the backflux
        // term is unidentifiable and the model degrades to Patlak.
        FitResult res = fit_patlak_lls(ct, cp, cfg);
        res.degenerate_kep = true;
        res.parameters = {res.parameters[0], res.parameters[1], 0.0};
        return res;
    }
    const double vp_raw = theta[0];
    const double kep = theta[2];
    const double ktrans_raw = theta[1] - theta[2] * theta[0];

    FitResult res;
    constexpr double kKepTol = 1e-10;
    if (kep <= kKepTol) {
        res.degenerate_kep = true;
        res.parameters = {clamp_flag(ktrans_raw, cfg.ktrans_bounds, res.clamped),
                          clamp_flag(vp_raw, cfg.vp_bounds, res.clamped), 0.0};
        res.residual_norm = residual_norm_for(
            TkModel::Patlak, {res.parameters[0], res.parameters[1]}, ct, cp);
        res.converged = true;
        return res;
    }
    const double ktrans = clamp_flag(ktrans_raw, cfg.ktrans_bounds, res.clamped);
    const double ve = clamp_flag(ktrans_raw > 0 ? ktrans_raw / kep : 0.0, cfg.ve_bounds,
                                 res.clamped);
    res.parameters = {ktrans, clamp_flag(vp_raw, cfg.vp_bounds, res.clamped), ve};
    res.residual_norm = residual_norm_for(TkModel::ETofts, res.parameters, ct, cp);
    res.converged = true;
    return res;
}

void model_residual_jacobian(TkModel model, const std::vector<double>& p,
                             const ConcentrationCurve& ct, const PlasmaCurve& cp,
                             std::vector<double>& residual, std::vector<double>& jacobian) {
    const size_t n = ct.n();
    const int np = model == TkModel::ETofts ? 3 : 2;
    residual.resize(n);
    jacobian.assign(n * np, 0.0);
    if (model == TkModel::Patlak) {
        const std::vector<double> integral = cumtrapz(cp.time_seconds, cp.values_mM);
        for (size_t i = 0; i < n; ++i) {
            const double m = p[1] * cp.values_mM[i] + p[0] * integral[i];
            residual[i] = ct.values_mM[i] - m;
            jacobian[i * np + 0] = integral[i];
            jacobian[i * np + 1] = cp.values_mM[i];
        }
        return;
    }
    const double kt = p[0], vp = p[1], ve = p[2];
    const double kep = kt / ve;
    std::vector<double> dconv;
    const std::vector<double> conv = exp_conv(cp.time_seconds, cp.values_mM, kep, &dconv);
    for (size_t i = 0; i < n; ++i) {
        const double m = vp * cp.values_mM[i] + kt * conv[i];
        residual[i] = ct.values_mM[i] - m;
        jacobian[i * np + 0] = conv[i] + kt * dconv[i] / ve;        // d/d ktrans
        jacobian[i * np + 1] = cp.values_mM[i];                     // d/d vp
        jacobian[i * np + 2] = kt * dconv[i] * (-kt / (ve * ve));   // d/d ve
    }
}

namespace {

std::vector<ParamBounds> bounds_for(TkModel model, const FitConfig& cfg) {
    std::vector<ParamBounds> b = {cfg.ktrans_bounds, cfg.vp_bounds};
    if (model == TkModel::ETofts) b.push_back(cfg.ve_bounds);
    return b;
}

std::vector<double> default_guess(TkModel model, const FitConfig& cfg) {
    std::vector<double> p = {0.5 * (cfg.ktrans_bounds.lo + cfg.ktrans_bounds.hi) * 0.1,
                             0.05};
    if (model == TkModel::ETofts) p.push_back(0.1);
    return p;
}

}  // namespace

FitResult fit_nlls(const ConcentrationCurve& ct, const PlasmaCurve& cp, const FitConfig& cfg,
                   std::vector<double>* residual_history) {
    ct.validate();
    cp.validate();
    cfg.validate();
    const TkModel model = cfg.model;
    const int np = model == TkModel::ETofts ? 3 : 2;
    const std::vector<ParamBounds> bounds = bounds_for(model, cfg);

    std::vector<double> p;
    if (cfg.initial_guess) {
        if (static_cast<int>(cfg.initial_guess->size()) != np)
            throw ConfigError("fit_nlls: initial guess size mismatch");
        p = *cfg.initial_guess;
    } else {
        try {
            FitResult init = model == TkModel::ETofts ? fit_etofts_lls(ct, cp, cfg)
                                                      : fit_patlak_lls(ct, cp, cfg);
            p = init.parameters;
            if (model == TkModel::ETofts && init.degenerate_kep) p[2] = 0.1;
        } catch (const SingularDesign&) {
            p = default_guess(model, cfg);
        }
    }
    for (int i = 0; i < np; ++i) p[i] = std::clamp(p[i], bounds[i].lo, bounds[i].hi);

    std::vector<double> r, jac;
    model_residual_jacobian(model, p, ct, cp, r, jac);
    auto sumsq = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x * x;
        return s;
    };
    double cost = sumsq(r);
    if (residual_history) residual_history->push_back(std::sqrt(cost));

    double lambda = 1e-3;
    FitResult res;
    int iter = 0;
    for (; iter < cfg.max_iterations; ++iter) {
        // gradient = -J^T r (of 0.5*||r||^2 up to sign); infinity-norm stop
        std::vector<double> jtr(np, 0.0), jtj(np * np, 0.0);
        const size_t n = r.size();
        for (size_t i = 0; i < n; ++i)
            for (int a = 0; a < np; ++a) {
                jtr[a] += jac[i * np + a] * r[i];
                for (int b = 0; b < np; ++b) jtj[a * np + b] += jac[i * np + a] * jac[i * np + b];
            }
        double gmax = 0;
        for (int a = 0; a < np; ++a) gmax = std::max(gmax, std::abs(jtr[a]));
        if (gmax < cfg.gradient_tolerance) {
            res.converged = true;
            break;
        }

        bool accepted = false;
        while (!accepted && lambda < 1e12) {
            std::vector<double> a = jtj, b = jtr;
            for (int d = 0; d < np; ++d) a[d * np + d] += lambda * std::max(jtj[d * np + d], 1e-30);
            try {
                solve_small(a, b, np);
            } catch (const SingularDesign&) {
                lambda *= 10;
                continue;
            }
            std::vector<double> trial(np);
            for (int d = 0; d < np; ++d)
                trial[d] = std::clamp(p[d] + b[d], bounds[d].lo, bounds[d].hi);
            std::vector<double> tr, tjac;
            model_residual_jacobian(model, trial, ct, cp, tr, tjac);
            const double tcost = sumsq(tr);
            if (tcost <= cost) {
                const double rel_change = (cost - tcost) / std::max(cost, 1e-300);
                p = trial;
                r = std::move(tr);
                jac = std::move(tjac);
                const bool stalled = rel_change < cfg.residual_change_tolerance;
                cost = tcost;
                lambda = std::max(lambda / 10, 1e-12);
                accepted = true;
                if (residual_history) residual_history->push_back(std::sqrt(cost));
                if (stalled) {
                    res.converged = true;
                    iter++;
                    goto done;
                }
            } else {
                lambda *= 10;
            }
        }
        if (!accepted) {
            res.converged = true;  // no descent direction left
            break;
        }
    }
done:
    res.parameters = p;
    res.residual_norm = std::sqrt(cost);
    res.iterations_used = iter;
    if (iter >= cfg.max_iterations) res.converged = false;
    return res;
}

namespace {

void fit_voxel(const DceSeries& series, const PlasmaCurve& cp, const AuxMaps& aux,
               const FitConfig& cfg, int x, int y, PkMap& map, Raster<uint8_t>& status) {
    const size_t idx = static_cast<size_t>(y) * series.width + x;
    if (!aux.mask.data[idx]) {
        status.data[idx] = static_cast<uint8_t>(VoxelStatus::Unmasked);
        return;
    }
    std::vector<double> sig(series.acq.n_frames);
    for (int f = 0; f < series.acq.n_frames; ++f) sig[f] = series.at(f, x, y);
    ConcentrationCurve ct;
    try {
        ct = signal_to_concentration(sig, aux.s0.data[idx], aux.t1_seconds.data[idx], series.acq);
    } catch (const Error&) {
        status.data[idx] = static_cast<uint8_t>(VoxelStatus::InversionFailed);
        return;
    }
    FitResult res;
    try {
        if (cfg.method == FitMethod::NLLS)
            res = fit_nlls(ct, cp, cfg);
        else if (cfg.model == TkModel::ETofts)
            res = fit_etofts_lls(ct, cp, cfg);
        else
            res = fit_patlak_lls(ct, cp, cfg);
    } catch (const SingularDesign&) {
        status.data[idx] = static_cast<uint8_t>(VoxelStatus::SingularFit);
        return;
    }
    map.ktrans_per_min.data[idx] = ktrans_per_s_to_per_min(res.parameters[0]);
    map.vp.data[idx] = res.parameters[1];
    if (cfg.model == TkModel::ETofts)
        map.ve->data[idx] = res.parameters.size() > 2 ? res.parameters[2] : 0.0;
    if (res.degenerate_kep)
        status.data[idx] = static_cast<uint8_t>(VoxelStatus::DegenerateKep);
    else if (!res.converged)
        status.data[idx] = static_cast<uint8_t>(VoxelStatus::NotConverged);
}

VolumeFitResult fit_volume_impl(const DceSeries& series, const PlasmaCurve& cp,
                                const AuxMaps& aux, const FitConfig& cfg, bool parallel) {
    series.validate();
    cp.validate();
    aux.validate();
    cfg.validate();
    if (!aux.dims_match(series.width, series.height))
        throw ShapeMismatch("fit_volume: aux/series dimension mismatch");
    if (static_cast<int>(cp.n()) != series.acq.n_frames)
        throw ShapeMismatch("fit_volume: plasma curve length != n_frames");

    VolumeFitResult out;
    out.map = PkMap::create(cfg.model, series.width, series.height);
    out.status = Raster<uint8_t>(series.width, series.height);

#pragma omp parallel for schedule(static) if (parallel)
    for (int y = 0; y < series.height; ++y)
        for (int x = 0; x < series.width; ++x)
            fit_voxel(series, cp, aux, cfg, x, y, out.map, out.status);

    for (uint8_t s : out.status.data)
        if (s == static_cast<uint8_t>(VoxelStatus::InversionFailed) ||
            s == static_cast<uint8_t>(VoxelStatus::SingularFit))
            out.n_failed++;
    return out;
}

}  // namespace

VolumeFitResult fit_volume(const DceSeries& series, const PlasmaCurve& cp, const AuxMaps& aux,
                           const FitConfig& cfg, bool parallel) {
    return fit_volume_impl(series, cp, aux, cfg, parallel);
}

namespace serial {
VolumeFitResult fit_volume(const DceSeries& series, const PlasmaCurve& cp, const AuxMaps& aux,
                           const FitConfig& cfg) {
    return fit_volume_impl(series, cp, aux, cfg, /*parallel=*/false);
}
}  // namespace serial

}  // namespace dce
