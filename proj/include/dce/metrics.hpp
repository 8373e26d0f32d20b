#pragma once

#include "dce/core.hpp"

#include <limits>
#include <map>
#include <set>

namespace dce {

struct EmptyMask : Error {
    using Error::Error;
};
struct ImageTooSmall : Error {
    using Error::Error;
};
struct EmptyRegion : Error {
    using Error::Error;
};

// 10*log10(range^2 / MSE) over masked voxels; +inf when the RMS error is zero
// at double precision (<= data_range * 1e-12).
double psnr(const RasterD& pred, const RasterD& reference, double data_range, const RasterB& mask);

// Mean local SSIM over masked centers, 11x11 Gaussian window sigma = 1.5,
// K1 = 0.01, K2 = 0.03. Window weights renormalized at image borders.
double ssim(const RasterD& pred, const RasterD& reference, double data_range, const RasterB& mask);

struct RegionSpec {
    Raster<int32_t> label_raster;
    std::set<int32_t> region_ids;
};

// Mean of each parameter map per region, in external units (ktrans min^-1).
// Rows keyed by region id, values ordered (ktrans, vp[, ve]).
std::map<int32_t, std::vector<double>> region_stats(const PkMap& map, const RegionSpec& regions);

}  // namespace dce
