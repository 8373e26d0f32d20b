#pragma once

#include "dce/core.hpp"

#include <string>

namespace dce {

// Overlay of two concentration curves as SVG polylines with axes.
std::string svg_aif_overlay(const PlasmaCurve& truth, const PlasmaCurve& estimate);

// One grayscale panel per PK parameter with a value scale bar.
std::string svg_pk_panels(const PkMap& pk);

// Combined evaluation figure: parameter panels plus, when both curves are
// given, the AIF overlay.
void write_evaluation_svg(const std::string& path, const PkMap& pred,
                          const PlasmaCurve* aif_true, const PlasmaCurve* aif_estimate);

}  // namespace dce
