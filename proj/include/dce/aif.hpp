#pragma once

#include "dce/core.hpp"

#include <iosfwd>

namespace dce {

struct AifParams {
    double bolus_arrival_seconds = 26.0;
    double peak_amplitude_mM = 5.0;
    double bolus_width_seconds = 12.0;
    double recirculation_amplitude_mM = 1.0;
    double washout_rate_per_s = 0.01;
    double tail_amplitude_mM = 0.6;
    double tail_rate_per_s = 0.0015;

    void validate() const;
};

// Whole-blood concentration: gamma-variate bolus plus recirculation and a
// slow washout tail, zero before bolus arrival.
std::vector<double> population_aif(const AifParams& params, const std::vector<double>& grid);

PlasmaCurve blood_to_plasma(const std::vector<double>& cb, const std::vector<double>& grid,
                            double hct);

struct AifFeatures {
    double first_moment_seconds = 0;
    double peak_enhancement_mM = 0;
    double auc_mM_seconds = 0;
};

struct EmptyCurve : Error {
    using Error::Error;
};

AifFeatures aif_quality_features(const PlasmaCurve& curve);

// Two-column CSV, header "time_seconds,concentration_mM".
void write_aif_csv(std::ostream& os, const PlasmaCurve& curve);
PlasmaCurve read_aif_csv(std::istream& is);

}  // namespace dce
