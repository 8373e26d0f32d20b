#include "dce/physics.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dce {

void ConcentrationCurve::validate() const {
    if (values_mM.size() != time_seconds.size())
        throw ShapeMismatch("ConcentrationCurve: values/time length mismatch");
    require_strictly_increasing(time_seconds, "ConcentrationCurve");
    for (double v : values_mM)
        if (!std::isfinite(v)) throw UnitError("ConcentrationCurve values must be finite");
}

std::vector<double> cumtrapz(const std::vector<double>& t, const std::vector<double>& v) {
    std::vector<double> out(t.size(), 0.0);
    for (size_t i = 1; i < t.size(); ++i)
        out[i] = out[i - 1] + 0.5 * (t[i] - t[i - 1]) * (v[i] + v[i - 1]);
    return out;
}

namespace {

// phi1(x) = (1 - e^-x)/x, phi2(x) = (x - 1 + e^-x)/x^2 and their derivatives,
// with series fallbacks near zero.
struct SegmentWeights {
    double e;    // e^-x
    double f1;   // h * phi1
    double f2;   // h^2 * phi2
    double df1;  // dF1/dkep = h^2 phi1'
    double df2;  // dF2/dkep = h^3 phi2'
};

SegmentWeights segment_weights(double kep, double h) {
    const double x = kep * h;
    SegmentWeights w;
    w.e = std::exp(-x);
    if (x > 1e-4) {
        w.f1 = (1.0 - w.e) / kep;
        w.f2 = (x - 1.0 + w.e) / (kep * kep);
        w.df1 = h * h * ((w.e * (x + 1.0) - 1.0) / (x * x));
        const double phi1 = (1.0 - w.e) / x;
        const double phi2 = (x - 1.0 + w.e) / (x * x);
        w.df2 = h * h * h * ((phi1 - 2.0 * phi2) / x);
    } else {
        w.f1 = h * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0);
        w.f2 = h * h * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0);
        w.df1 = h * h * (-0.5 + x / 3.0 - x * x / 8.0);
        w.df2 = h * h * h * (-1.0 / 6.0 + x / 12.0 - x * x / 40.0);
    }
    return w;
}

}  // namespace

std::vector<double> exp_conv(const std::vector<double>& t, const std::vector<double>& v,
                             double kep, std::vector<double>* d_dkep) {
    const size_t n = t.size();
    std::vector<double> out(n, 0.0);
    if (d_dkep) d_dkep->assign(n, 0.0);
    double acc = 0.0, dacc = 0.0;
    for (size_t i = 1; i < n; ++i) {
        const double h = t[i] - t[i - 1];
        const double c0 = v[i - 1];
        const double m = (v[i] - v[i - 1]) / h;
        const SegmentWeights w = segment_weights(kep, h);
        const double next = w.e * acc + c0 * w.f1 + m * w.f2;
        if (d_dkep) dacc = -h * w.e * acc + w.e * dacc + c0 * w.df1 + m * w.df2;
        acc = next;
        out[i] = acc;
        if (d_dkep) (*d_dkep)[i] = dacc;
    }
    return out;
}

std::vector<double> exp_conv_adjoint(const std::vector<double>& t, double kep,
                                     const std::vector<double>& dL_dI) {
    const size_t n = t.size();
    if (dL_dI.size() != n) throw ShapeMismatch("exp_conv_adjoint: grid/cotangent size mismatch");
    std::vector<double> gv(n, 0.0);
    // I_i = E_i I_{i-1} + v_{i-1} (F1_i - F2_i/h_i) + v_i F2_i/h_i; accumulate
    // the running cotangent mu = dL/dI_i through the E_i chain.
    double mu = 0.0;
    for (size_t i = n; i-- > 1;) {
        const double h = t[i] - t[i - 1];
        const SegmentWeights w = segment_weights(kep, h);
        mu += dL_dI[i];
        gv[i] += mu * (w.f2 / h);
        gv[i - 1] += mu * (w.f1 - w.f2 / h);
        mu *= w.e;
    }
    return gv;
}

ConcentrationCurve etofts_concentration(double ktrans_per_s, double vp, double ve,
                                        const PlasmaCurve& cp) {
    cp.validate();
    if (ve <= 0 && ktrans_per_s > 0)
        throw DegenerateModel("etofts: ve == 0 with ktrans > 0 leaves kep undefined");
    ConcentrationCurve ct;
    ct.time_seconds = cp.time_seconds;
    if (ktrans_per_s == 0) {
        ct.values_mM.resize(cp.n());
        for (size_t i = 0; i < cp.n(); ++i) ct.values_mM[i] = vp * cp.values_mM[i];
        return ct;
    }
    const double kep = ktrans_per_s / ve;
    std::vector<double> conv = exp_conv(cp.time_seconds, cp.values_mM, kep);
    ct.values_mM.resize(cp.n());
    for (size_t i = 0; i < cp.n(); ++i)
        ct.values_mM[i] = vp * cp.values_mM[i] + ktrans_per_s * conv[i];
    return ct;
}

ConcentrationCurve patlak_concentration(double ktrans_per_s, double vp, const PlasmaCurve& cp) {
    cp.validate();
    ConcentrationCurve ct;
    ct.time_seconds = cp.time_seconds;
    std::vector<double> integral = cumtrapz(cp.time_seconds, cp.values_mM);
    ct.values_mM.resize(cp.n());
    for (size_t i = 0; i < cp.n(); ++i)
        ct.values_mM[i] = vp * cp.values_mM[i] + ktrans_per_s * integral[i];
    return ct;
}

SpgrParams::SpgrParams(double s0_, double t1_seconds, const AcqParams& acq) {
    if (!(s0_ > 0)) throw UnitError("spgr: s0 must be > 0");
    if (!(t1_seconds > 0)) throw UnitError("spgr: t1 must be > 0");
    a = acq.tr_seconds / t1_seconds;
    b = acq.r1_per_mM_per_second * acq.tr_seconds;
    cos_alpha = std::cos(acq.flip_angle_radians);
    s0 = s0_;
    const double ea = std::exp(-a);
    if (1.0 - ea <= 0 || 1.0 - cos_alpha * ea <= 0)
        throw NumericalRange("spgr: denominator underflow (TR/T1 too small)");
}

double spgr_signal(double ct_mM, const SpgrParams& p) {
    const double u = std::exp(-p.a - p.b * ct_mM);
    const double ea = std::exp(-p.a);
    return p.s0 * (1.0 - u) * (1.0 - p.cos_alpha * ea) /
           ((1.0 - p.cos_alpha * u) * (1.0 - ea));
}

double spgr_signal_deriv(double ct_mM, const SpgrParams& p) {
    const double u = std::exp(-p.a - p.b * ct_mM);
    const double ea = std::exp(-p.a);
    const double k = (1.0 - p.cos_alpha * ea) / (1.0 - ea);
    const double d = 1.0 - p.cos_alpha * u;
    return p.s0 * k * (1.0 - p.cos_alpha) * p.b * u / (d * d);
}

double spgr_concentration(double signal, const SpgrParams& p, int frame_idx) {
    const double ea = std::exp(-p.a);
    const double scale = (1.0 - ea) / (1.0 - p.cos_alpha * ea);
    const double r = signal / p.s0 * scale;
    const double num = r - 1.0;
    const double den = r * p.cos_alpha - 1.0;
    // num >= 0 means S at or above the signal supremum; den >= 0 is the
    // spurious branch beyond it. Both leave Eq. (3) without a physical root.
    const double arg = (num < 0 && den < 0) ? num / den : -1.0;
    if (!(arg > 0))
        throw OutOfInvertibleRange("spgr: log argument non-positive at frame " +
                                       std::to_string(frame_idx),
                                   frame_idx);
    return -(p.a + std::log(arg)) / p.b;
}

std::vector<double> concentration_to_signal(const ConcentrationCurve& ct, double s0,
                                            double t1_seconds, const AcqParams& acq) {
    const SpgrParams p(s0, t1_seconds, acq);
    std::vector<double> s(ct.n());
    for (size_t i = 0; i < ct.n(); ++i) s[i] = spgr_signal(ct.values_mM[i], p);
    return s;
}

ConcentrationCurve signal_to_concentration(const std::vector<double>& s, double s0,
                                           double t1_seconds, const AcqParams& acq,
                                           bool clamp_failures) {
    const SpgrParams p(s0, t1_seconds, acq);
    ConcentrationCurve ct;
    ct.time_seconds = acq.time_grid();
    if (s.size() != ct.time_seconds.size())
        throw ShapeMismatch("signal_to_concentration: signal length != n_frames");
    ct.values_mM.resize(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (clamp_failures) {
            try {
                ct.values_mM[i] = std::max(0.0, spgr_concentration(s[i], p, static_cast<int>(i)));
            } catch (const OutOfInvertibleRange&) {
                ct.values_mM[i] = 0.0;
            }
        } else {
            ct.values_mM[i] = spgr_concentration(s[i], p, static_cast<int>(i));
        }
    }
    return ct;
}

namespace {

void forward_voxel(const PkMap& pk, const PlasmaCurve& cp, const AuxMaps& aux,
                   const AcqParams& acq, int x, int y, DceSeries& out) {
    const size_t idx = static_cast<size_t>(y) * pk.width + x;
    if (!aux.mask.data[idx]) {
        const double s0 = aux.s0.data[idx];
        for (int f = 0; f < acq.n_frames; ++f) out.at(f, x, y) = s0;
        return;
    }
    const double kt = ktrans_per_min_to_per_s(pk.ktrans_per_min.data[idx]);
    const double vp = pk.vp.data[idx];
    ConcentrationCurve ct;
    try {
        if (pk.model == TkModel::ETofts)
            ct = etofts_concentration(kt, vp, pk.ve->data[idx], cp);
        else
            ct = patlak_concentration(kt, vp, cp);
        const std::vector<double> s =
            concentration_to_signal(ct, aux.s0.data[idx], aux.t1_seconds.data[idx], acq);
        for (int f = 0; f < acq.n_frames; ++f) out.at(f, x, y) = s[f];
    } catch (const Error& e) {
        throw Error("forward_operator: voxel (" + std::to_string(x) + "," + std::to_string(y) +
                    "): " + e.what());
    }
}

}  // namespace

DceSeries forward_operator(const PkMap& pk, const PlasmaCurve& cp, const AuxMaps& aux,
                           const AcqParams& acq, bool parallel) {
    pk.validate();
    cp.validate();
    aux.validate();
    if (!aux.dims_match(pk.width, pk.height))
        throw ShapeMismatch("forward_operator: aux/pk dimension mismatch");
    if (static_cast<int>(cp.n()) != acq.n_frames)
        throw ShapeMismatch("forward_operator: plasma curve length != n_frames");
    DceSeries out = DceSeries::create(acq, pk.width, pk.height);

    std::string first_error;
#pragma omp parallel for schedule(static) if (parallel)
    for (int y = 0; y < pk.height; ++y) {
        for (int x = 0; x < pk.width; ++x) {
            try {
                forward_voxel(pk, cp, aux, acq, x, y, out);
            } catch (const Error& e) {
#pragma omp critical
                if (first_error.empty()) first_error = e.what();
            }
        }
    }
    if (!first_error.empty()) throw Error(first_error);
    return out;
}

namespace serial {

DceSeries forward_operator(const PkMap& pk, const PlasmaCurve& cp, const AuxMaps& aux,
                           const AcqParams& acq) {
    pk.validate();
    cp.validate();
    aux.validate();
    if (!aux.dims_match(pk.width, pk.height))
        throw ShapeMismatch("forward_operator: aux/pk dimension mismatch");
    if (static_cast<int>(cp.n()) != acq.n_frames)
        throw ShapeMismatch("forward_operator: plasma curve length != n_frames");
    DceSeries out = DceSeries::create(acq, pk.width, pk.height);
    for (int y = 0; y < pk.height; ++y)
        for (int x = 0; x < pk.width; ++x) forward_voxel(pk, cp, aux, acq, x, y, out);
    return out;
}

}  // namespace serial

}  // namespace dce
