#include "dce/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dce {

namespace {

constexpr int kPlotW = 420;
constexpr int kPlotH = 260;
constexpr int kMargin = 40;
constexpr int kPanel = 128;

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

void polyline(std::ostringstream& os, const PlasmaCurve& curve, double t_max, double c_max,
              const char* color, const char* dash) {
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
    if (dash[0]) os << " stroke-dasharray=\"" << dash << "\"";
    os << " points=\"";
    for (size_t i = 0; i < curve.n(); ++i) {
        const double x = kMargin + (kPlotW - 2 * kMargin) * curve.time_seconds[i] / t_max;
        const double y =
            kPlotH - kMargin - (kPlotH - 2 * kMargin) * curve.values_mM[i] / c_max;
        os << (i ? " " : "") << fmt(x) << ',' << fmt(y);
    }
    os << "\"/>\n";
}

std::string gray(double v01) {
    const int g = static_cast<int>(std::lround(255.0 * std::clamp(v01, 0.0, 1.0)));
    std::ostringstream os;
    os << "rgb(" << g << ',' << g << ',' << g << ')';
    return os.str();
}

void panel(std::ostringstream& os, const RasterD& map, const std::string& title, int x0, int y0) {
    double lo = map.data.empty() ? 0.0 : map.data[0];
    double hi = lo;
    for (double v : map.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    const double cell = static_cast<double>(kPanel) / std::max(map.width, map.height);
    os << "<text x=\"" << x0 << "\" y=\"" << y0 - 6 << "\" font-size=\"12\">" << title
       << "</text>\n";
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x)
            os << "<rect x=\"" << fmt(x0 + x * cell) << "\" y=\"" << fmt(y0 + y * cell)
               << "\" width=\"" << fmt(cell + 0.1) << "\" height=\"" << fmt(cell + 0.1)
               << "\" fill=\"" << gray((map.at(x, y) - lo) / span) << "\"/>\n";
    // scale bar: bottom (lo) to top (hi)
    const int bar_x = x0 + kPanel + 8;
    const int steps = 16;
    for (int i = 0; i < steps; ++i)
        os << "<rect x=\"" << bar_x << "\" y=\"" << fmt(y0 + kPanel * (1.0 - (i + 1.0) / steps))
           << "\" width=\"10\" height=\"" << fmt(static_cast<double>(kPanel) / steps)
           << "\" fill=\"" << gray((i + 0.5) / steps) << "\"/>\n";
    os << "<text x=\"" << bar_x + 14 << "\" y=\"" << y0 + 10 << "\" font-size=\"9\">" << fmt(hi)
       << "</text>\n";
    os << "<text x=\"" << bar_x + 14 << "\" y=\"" << y0 + kPanel << "\" font-size=\"9\">"
       << fmt(lo) << "</text>\n";
}

}  // namespace

std::string svg_aif_overlay(const PlasmaCurve& truth, const PlasmaCurve& estimate) {
    truth.validate();
    estimate.validate();
    double t_max = 1.0, c_max = 1e-12;
    for (double t : truth.time_seconds) t_max = std::max(t_max, t);
    for (double t : estimate.time_seconds) t_max = std::max(t_max, t);
    for (double v : truth.values_mM) c_max = std::max(c_max, v);
    for (double v : estimate.values_mM) c_max = std::max(c_max, v);
    std::ostringstream os;
    os << "<g>\n";
    os << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\""
       << kPlotW - 2 * kMargin << "\" height=\"" << kPlotH - 2 * kMargin
       << "\" fill=\"white\" stroke=\"black\"/>\n";
    polyline(os, truth, t_max, c_max, "#1f77b4", "");
    polyline(os, estimate, t_max, c_max, "#d62728", "5,3");
    os << "<text x=\"" << kMargin << "\" y=\"" << kPlotH - 8
       << "\" font-size=\"11\">time [s], 0 to " << fmt(t_max) << "</text>\n";
    os << "<text x=\"4\" y=\"" << kMargin - 8 << "\" font-size=\"11\">plasma conc. [mM], max "
       << fmt(c_max) << "</text>\n";
    os << "<text x=\"" << kPlotW - 170 << "\" y=\"" << kMargin + 14
       << "\" font-size=\"11\" fill=\"#1f77b4\">reference</text>\n";
    os << "<text x=\"" << kPlotW - 100 << "\" y=\"" << kMargin + 14
       << "\" font-size=\"11\" fill=\"#d62728\">estimate</text>\n";
    os << "</g>\n";
    return os.str();
}

std::string svg_pk_panels(const PkMap& pk) {
    pk.validate();
    std::ostringstream os;
    const char* names[3] = {"Ktrans [1/min]", "vp", "ve"};
    const RasterD* maps[3] = {&pk.ktrans_per_min, &pk.vp, pk.ve ? &*pk.ve : nullptr};
    int x0 = kMargin;
    for (int i = 0; i < pk.n_params(); ++i) {
        panel(os, *maps[i], names[i], x0, kPlotH + kMargin);
        x0 += kPanel + 60;
    }
    return os.str();
}

void write_evaluation_svg(const std::string& path, const PkMap& pred,
                          const PlasmaCurve* aif_true, const PlasmaCurve* aif_estimate) {
    const int n = pred.n_params();
    const int width = std::max(kPlotW, kMargin + n * (kPanel + 60));
    const int height = kPlotH + kMargin + kPanel + kMargin;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
       << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (aif_true && aif_estimate) os << svg_aif_overlay(*aif_true, *aif_estimate);
    os << svg_pk_panels(pred);
    os << "</svg>\n";
    std::ofstream out(path);
    if (!out) throw IoError("svg: cannot open for writing: " + path);
    out << os.str();
    if (!out) throw IoError("svg: write failed: " + path);
}

}  // namespace dce
