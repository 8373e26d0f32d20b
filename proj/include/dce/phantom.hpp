#pragma once

#include "dce/aif.hpp"
#include "dce/core.hpp"

#include <cstdint>

namespace dce {

struct ValueRange {
    double lo = 0;
    double hi = 0;
};

struct PhantomConfig {
    int width = 64;
    int height = 64;
    TkModel model = TkModel::Patlak;
    int n_regions = 4;  // lesion-like regions on top of the background tissue

    // lesion draws, pinned to tumor-like magnitudes
    ValueRange ktrans_per_min{0.010, 0.016};
    ValueRange vp{0.003, 0.006};
    ValueRange ve{0.030, 0.055};
    // background tissue draws
    ValueRange bg_ktrans_per_min{0.001, 0.004};
    ValueRange bg_vp{0.001, 0.003};
    ValueRange bg_ve{0.010, 0.030};

    ValueRange t1_seconds{0.8, 1.6};
    ValueRange s0{80.0, 120.0};

    AcqParams acq{0.0028, 10.0 * 3.14159265358979323846 / 180.0, 3.47, 6.5, 65, 4};
    AifParams aif{};
    double hct = 0.45;
    double noise_sigma = 0.0;  // fraction of mean S0
    uint64_t seed = 1;

    void validate() const;
};

struct PhantomOutput {
    PkMap pk;
    AuxMaps aux;
    PlasmaCurve cp;
    DceSeries series;
    Raster<int32_t> labels;  // 0 outside mask, 1 background, 2.. lesions
};

PhantomOutput generate_phantom(const PhantomConfig& cfg);

DceSeries add_noise(const DceSeries& series, double sigma, uint64_t seed);

}  // namespace dce
