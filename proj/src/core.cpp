#include "dce/core.hpp"

#include <numbers>

namespace dce {

TkModel tk_model_from_string(const std::string& s) {
    if (s == "etofts") return TkModel::ETofts;
    if (s == "patlak") return TkModel::Patlak;
    throw ConfigError("unknown TK model '" + s + "' (expected etofts|patlak)");
}

std::vector<double> AcqParams::time_grid() const {
    std::vector<double> t(n_frames);
    for (int i = 0; i < n_frames; ++i) t[i] = i * frame_interval_seconds;
    return t;
}

AcqParams validate_units(const AcqParams& acq) {
    if (!(acq.tr_seconds > 0)) throw UnitError("tr_seconds must be > 0");
    if (!(acq.flip_angle_radians > 0 && acq.flip_angle_radians < std::numbers::pi / 2))
        throw UnitError("flip_angle_radians must lie in (0, pi/2)");
    if (!(acq.r1_per_mM_per_second > 0)) throw UnitError("r1_per_mM_per_second must be > 0");
    if (!(acq.frame_interval_seconds > 0)) throw UnitError("frame_interval_seconds must be > 0");
    if (acq.n_frames < 2) throw UnitError("n_frames must be >= 2");
    if (acq.bolus_arrival_frame < 0 || acq.bolus_arrival_frame >= acq.n_frames)
        throw UnitError("bolus_arrival_frame must lie in [0, n_frames)");
    return acq;
}

PkMap PkMap::create(TkModel model, int width, int height) {
    PkMap m;
    m.model = model;
    m.width = width;
    m.height = height;
    m.ktrans_per_min = RasterD(width, height);
    m.vp = RasterD(width, height);
    if (model == TkModel::ETofts) m.ve = RasterD(width, height);
    return m;
}

void PkMap::validate() const {
    if (width <= 0 || height <= 0) throw ShapeMismatch("PkMap dimensions must be positive");
    auto check_dims = [&](const RasterD& r, const char* name) {
        if (!r.same_dims(width, height))
            throw ShapeMismatch(std::string("PkMap raster dims mismatch: ") + name);
    };
    check_dims(ktrans_per_min, "ktrans");
    check_dims(vp, "vp");
    if ((model == TkModel::ETofts) != ve.has_value())
        throw ShapeMismatch("PkMap: ve present iff model is eTofts");
    if (ve) check_dims(*ve, "ve");
    for (double k : ktrans_per_min.data)
        if (!(k >= 0) || !std::isfinite(k)) throw UnitError("ktrans must be finite and >= 0");
    for (double v : vp.data)
        if (!(v >= 0 && v <= 1)) throw UnitError("vp must lie in [0,1]");
    if (ve)
        for (double v : ve->data)
            if (!(v >= 0 && v <= 1)) throw UnitError("ve must lie in [0,1]");
}

DceSeries DceSeries::create(const AcqParams& acq, int width, int height) {
    DceSeries s;
    s.acq = validate_units(acq);
    s.width = width;
    s.height = height;
    s.data.assign(static_cast<size_t>(acq.n_frames) * width * height, 0.0);
    return s;
}

void DceSeries::validate() const {
    validate_units(acq);
    if (data.size() != static_cast<size_t>(acq.n_frames) * width * height)
        throw ShapeMismatch("DceSeries data length does not match n_frames*height*width");
    for (double v : data)
        if (!std::isfinite(v) || v < 0) throw UnitError("DceSeries values must be finite and >= 0");
}

void require_strictly_increasing(const std::vector<double>& t, const std::string& what) {
    for (size_t i = 1; i < t.size(); ++i)
        if (!(t[i] > t[i - 1])) throw UnitError(what + ": time grid must be strictly increasing");
}

void PlasmaCurve::validate() const {
    if (values_mM.size() != time_seconds.size())
        throw ShapeMismatch("PlasmaCurve: values/time length mismatch");
    require_strictly_increasing(time_seconds, "PlasmaCurve");
    for (double v : values_mM)
        if (!std::isfinite(v) || v < 0) throw UnitError("PlasmaCurve values must be finite and >= 0");
}

void AuxMaps::validate() const {
    if (!t1_seconds.same_dims(s0.width, s0.height) || !mask.same_dims(s0.width, s0.height))
        throw ShapeMismatch("AuxMaps rasters must share dimensions");
    for (size_t i = 0; i < mask.data.size(); ++i) {
        if (!mask.data[i]) continue;
        if (!(t1_seconds.data[i] > 0)) throw UnitError("t1_seconds must be > 0 inside mask");
        if (!(s0.data[i] > 0)) throw UnitError("s0 must be > 0 inside mask");
    }
}

}  // namespace dce
