#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dce {

// Error hierarchy shared by all modules. Every error carries a message
// naming the offending field / op / voxel.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UnitError : Error {
    using Error::Error;
};
struct DegenerateModel : Error {
    using Error::Error;
};
struct NumericalRange : Error {
    using Error::Error;
};
struct OutOfInvertibleRange : Error {
    int frame = -1;
    OutOfInvertibleRange(const std::string& msg, int frame_idx)
        : Error(msg), frame(frame_idx) {}
};
struct ShapeMismatch : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

enum class TkModel { ETofts, Patlak };

inline const char* to_string(TkModel m) {
    return m == TkModel::ETofts ? "etofts" : "patlak";
}
TkModel tk_model_from_string(const std::string& s);

// Dense row-major 2D raster.
template <typename T>
struct Raster {
    int width = 0;
    int height = 0;
    std::vector<T> data;

    Raster() = default;
    Raster(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    T& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
    const T& at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return data.size(); }
    bool same_dims(int w, int h) const { return width == w && height == h; }
};

using RasterD = Raster<double>;
using RasterB = Raster<uint8_t>;

// Acquisition parameters. Internal unit convention: seconds and mM
// everywhere; K^trans crosses the min^-1 boundary only in I/O code.
struct AcqParams {
    double tr_seconds = 0;
    double flip_angle_radians = 0;
    double r1_per_mM_per_second = 0;
    double frame_interval_seconds = 0;
    int n_frames = 0;
    int bolus_arrival_frame = 0;

    std::vector<double> time_grid() const;
};

AcqParams validate_units(const AcqParams& acq);

constexpr double kSecondsPerMinute = 60.0;
inline double ktrans_per_min_to_per_s(double k) { return k / kSecondsPerMinute; }
inline double ktrans_per_s_to_per_min(double k) { return k * kSecondsPerMinute; }

// Per-voxel PK parameter maps for one TK model. ve present iff ETofts.
struct PkMap {
    TkModel model = TkModel::Patlak;
    RasterD ktrans_per_min;  // external convention, min^-1
    RasterD vp;
    std::optional<RasterD> ve;
    int width = 0;
    int height = 0;

    static PkMap create(TkModel model, int width, int height);
    void validate() const;
    int n_params() const { return model == TkModel::ETofts ? 3 : 2; }
};

// Signal time series, frame as slowest axis.
struct DceSeries {
    std::vector<double> data;  // n_frames * height * width
    int width = 0;
    int height = 0;
    AcqParams acq;

    static DceSeries create(const AcqParams& acq, int width, int height);
    double& at(int frame, int x, int y) {
        return data[(static_cast<size_t>(frame) * height + y) * width + x];
    }
    const double& at(int frame, int x, int y) const {
        return data[(static_cast<size_t>(frame) * height + y) * width + x];
    }
    void validate() const;
};

// Sampled arterial plasma concentration on the series time grid.
struct PlasmaCurve {
    std::vector<double> values_mM;
    std::vector<double> time_seconds;

    void validate() const;
    size_t n() const { return values_mM.size(); }
};

struct AuxMaps {
    RasterD t1_seconds;
    RasterD s0;
    RasterB mask;

    void validate() const;
    bool dims_match(int w, int h) const {
        return t1_seconds.same_dims(w, h) && s0.same_dims(w, h) && mask.same_dims(w, h);
    }
};

void require_strictly_increasing(const std::vector<double>& t, const std::string& what);

}  // namespace dce
