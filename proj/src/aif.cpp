#include "dce/aif.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace dce {

void AifParams::validate() const {
    if (bolus_arrival_seconds < 0) throw UnitError("aif: bolus_arrival_seconds must be >= 0");
    if (!(peak_amplitude_mM > 0)) throw UnitError("aif: peak_amplitude_mM must be > 0");
    if (!(bolus_width_seconds > 0)) throw UnitError("aif: bolus_width_seconds must be > 0");
    if (recirculation_amplitude_mM < 0)
        throw UnitError("aif: recirculation_amplitude_mM must be >= 0");
    if (!(washout_rate_per_s > 0)) throw UnitError("aif: washout_rate_per_s must be > 0");
    if (tail_amplitude_mM < 0) throw UnitError("aif: tail_amplitude_mM must be >= 0");
    if (!(tail_rate_per_s > 0)) throw UnitError("aif: tail_rate_per_s must be > 0");
}

std::vector<double> population_aif(const AifParams& p, const std::vector<double>& grid) {
    p.validate();
    require_strictly_increasing(grid, "population_aif");
    std::vector<double> cb(grid.size(), 0.0);
    const double w = p.bolus_width_seconds;
    for (size_t i = 0; i < grid.size(); ++i) {
        const double u = grid[i] - p.bolus_arrival_seconds;
        if (u < 0) continue;
        const double r = u / w;
        // normalized so the gamma-variate term peaks at u == w with peak_amplitude
        const double bolus = p.peak_amplitude_mM * r * r * std::exp(2.0 * (1.0 - r));
        const double ramp = 1.0 - std::exp(-u / w);
        const double recirc = p.recirculation_amplitude_mM * std::exp(-p.washout_rate_per_s * u) * ramp;
        const double tail = p.tail_amplitude_mM * std::exp(-p.tail_rate_per_s * u) * ramp;
        cb[i] = bolus + recirc + tail;
    }
    return cb;
}

PlasmaCurve blood_to_plasma(const std::vector<double>& cb, const std::vector<double>& grid,
                            double hct) {
    if (!(hct >= 0 && hct < 1)) throw UnitError("blood_to_plasma: hct must lie in [0,1)");
    if (cb.size() != grid.size()) throw ShapeMismatch("blood_to_plasma: length mismatch");
    PlasmaCurve cp;
    cp.time_seconds = grid;
    cp.values_mM.resize(cb.size());
    const double f = 1.0 / (1.0 - hct);
    for (size_t i = 0; i < cb.size(); ++i) cp.values_mM[i] = cb[i] * f;
    cp.validate();
    return cp;
}

AifFeatures aif_quality_features(const PlasmaCurve& curve) {
    curve.validate();
    double sum = 0, weighted = 0, peak = 0;
    for (size_t i = 0; i < curve.n(); ++i) {
        sum += curve.values_mM[i];
        weighted += curve.time_seconds[i] * curve.values_mM[i];
        peak = std::max(peak, curve.values_mM[i]);
    }
    if (sum == 0) throw EmptyCurve("aif_quality_features: all-zero curve, first moment undefined");
    AifFeatures f;
    f.first_moment_seconds = weighted / sum;
    f.peak_enhancement_mM = peak;
    double auc = 0;
    for (size_t i = 1; i < curve.n(); ++i)
        auc += 0.5 * (curve.time_seconds[i] - curve.time_seconds[i - 1]) *
               (curve.values_mM[i] + curve.values_mM[i - 1]);
    f.auc_mM_seconds = auc;
    return f;
}

void write_aif_csv(std::ostream& os, const PlasmaCurve& curve) {
    os << "time_seconds,concentration_mM\n";
    os.precision(17);
    for (size_t i = 0; i < curve.n(); ++i)
        os << curve.time_seconds[i] << ',' << curve.values_mM[i] << '\n';
}

PlasmaCurve read_aif_csv(std::istream& is) {
    PlasmaCurve curve;
    std::string line;
    if (!std::getline(is, line) || line.rfind("time_seconds,", 0) != 0)
        throw IoError("aif csv: missing header row");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        double t, c;
        char comma;
        if (!(row >> t >> comma >> c) || comma != ',')
            throw IoError("aif csv: malformed row '" + line + "'");
        curve.time_seconds.push_back(t);
        curve.values_mM.push_back(c);
    }
    curve.validate();
    return curve;
}

}  // namespace dce
