#pragma once

#include "dce/core.hpp"

namespace dce {

struct ConcentrationCurve {
    std::vector<double> values_mM;
    std::vector<double> time_seconds;

    void validate() const;
    size_t n() const { return values_mM.size(); }
};

// Cumulative trapezoidal integral of (t, v) evaluated at each grid point.
std::vector<double> cumtrapz(const std::vector<double>& t, const std::vector<double>& v);

// Exponential convolution I(t_i) = int_0^{t_i} v(tau) exp(-kep (t_i - tau)) dtau
// for piecewise-linear v on the grid. Exact per segment, O(n).
// When d_dkep is non-null it receives dI/dkep from the differentiated recursion.
std::vector<double> exp_conv(const std::vector<double>& t, const std::vector<double>& v,
                             double kep, std::vector<double>* d_dkep = nullptr);

// Adjoint of exp_conv with respect to v: given dL/dI at every grid point,
// returns dL/dv. Runs the segment recursion in reverse, O(n).
std::vector<double> exp_conv_adjoint(const std::vector<double>& t, double kep,
                                     const std::vector<double>& dL_dI);

ConcentrationCurve etofts_concentration(double ktrans_per_s, double vp, double ve,
                                        const PlasmaCurve& cp);
ConcentrationCurve patlak_concentration(double ktrans_per_s, double vp, const PlasmaCurve& cp);

// Spoiled gradient echo signal model.
struct SpgrParams {
    double a = 0;  // TR / T1
    double b = 0;  // r1 * TR
    double cos_alpha = 0;
    double s0 = 0;

    SpgrParams(double s0, double t1_seconds, const AcqParams& acq);
};

double spgr_signal(double ct_mM, const SpgrParams& p);
double spgr_signal_deriv(double ct_mM, const SpgrParams& p);  // dS/dCt
// Inverse of spgr_signal. Throws OutOfInvertibleRange (frame = frame_idx) when
// the log argument is non-positive.
double spgr_concentration(double signal, const SpgrParams& p, int frame_idx = -1);

std::vector<double> concentration_to_signal(const ConcentrationCurve& ct, double s0,
                                            double t1_seconds, const AcqParams& acq);
// clamp_failures: map non-invertible or negative samples to 0 instead of throwing.
ConcentrationCurve signal_to_concentration(const std::vector<double>& s, double s0,
                                           double t1_seconds, const AcqParams& acq,
                                           bool clamp_failures = false);

// Composes the TK model with the signal equation per masked voxel. Unmasked
// voxels emit constant S0. PkMap carries ktrans in min^-1 (external units).
DceSeries forward_operator(const PkMap& pk, const PlasmaCurve& cp, const AuxMaps& aux,
                           const AcqParams& acq, bool parallel = true);

namespace serial {
// Plain reference loop, kept for testing the parallel path against.
DceSeries forward_operator(const PkMap& pk, const PlasmaCurve& cp, const AuxMaps& aux,
                           const AcqParams& acq);
}  // namespace serial

}  // namespace dce
