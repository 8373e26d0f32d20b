#pragma once

#include "dce/core.hpp"
#include "dce/physics.hpp"

namespace dce {

struct SingularDesign : Error {
    using Error::Error;
};

enum class FitMethod { LLS, NLLS };

struct ParamBounds {
    double lo = 0;
    double hi = 1;
};

// All fitting-internal parameters use seconds (ktrans in s^-1); conversion to
// min^-1 happens only when results are packed into a PkMap.
struct FitConfig {
    FitMethod method = FitMethod::LLS;
    TkModel model = TkModel::Patlak;
    int max_iterations = 200;
    double gradient_tolerance = 1e-10;
    double residual_change_tolerance = 1e-12;
    ParamBounds ktrans_bounds{0.0, 1.0 / kSecondsPerMinute};  // [0, 1] min^-1
    ParamBounds vp_bounds{0.0, 1.0};
    ParamBounds ve_bounds{1e-6, 1.0};
    std::optional<std::vector<double>> initial_guess;  // model-ordered (kt, vp[, ve])

    void validate() const;
};

struct FitResult {
    std::vector<double> parameters;  // (ktrans_per_s, vp) or (ktrans_per_s, vp, ve)
    double residual_norm = 0;
    int iterations_used = 0;
    bool converged = false;
    bool degenerate_kep = false;
    bool clamped = false;  // an LLS estimate was pulled back to the bounds
};

FitResult fit_patlak_lls(const ConcentrationCurve& ct, const PlasmaCurve& cp,
                         const FitConfig& cfg = {});
FitResult fit_etofts_lls(const ConcentrationCurve& ct, const PlasmaCurve& cp,
                         const FitConfig& cfg = {});
FitResult fit_nlls(const ConcentrationCurve& ct, const PlasmaCurve& cp, const FitConfig& cfg,
                   std::vector<double>* residual_history = nullptr);

// Residuals and analytic Jacobian of the configured model, shared by the LM
// solver and its tests. Column order matches FitResult::parameters.
void model_residual_jacobian(TkModel model, const std::vector<double>& params,
                             const ConcentrationCurve& ct, const PlasmaCurve& cp,
                             std::vector<double>& residual, std::vector<double>& jacobian);

// Per-voxel failure codes recorded by fit_volume.
enum class VoxelStatus : uint8_t {
    Ok = 0,
    Unmasked = 1,
    InversionFailed = 2,
    SingularFit = 3,
    NotConverged = 4,
    DegenerateKep = 5,
};

struct VolumeFitResult {
    PkMap map;
    Raster<uint8_t> status;  // VoxelStatus values
    size_t n_failed = 0;     // inversion/singular failures among masked voxels
};

VolumeFitResult fit_volume(const DceSeries& series, const PlasmaCurve& cp, const AuxMaps& aux,
                           const FitConfig& cfg, bool parallel = true);

namespace serial {
VolumeFitResult fit_volume(const DceSeries& series, const PlasmaCurve& cp, const AuxMaps& aux,
                           const FitConfig& cfg);
}

}  // namespace dce
