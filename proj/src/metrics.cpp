#include "dce/metrics.hpp"

#include <cmath>

namespace dce {

namespace {

void check_dims(const RasterD& a, const RasterD& b, const RasterB& m, const char* who) {
    if (!b.same_dims(a.width, a.height) || !m.same_dims(a.width, a.height))
        throw ShapeMismatch(std::string(who) + ": dimension mismatch");
}

}  // namespace

double psnr(const RasterD& pred, const RasterD& reference, double data_range,
            const RasterB& mask) {
    check_dims(pred, reference, mask, "psnr");
    if (!(data_range > 0)) throw ConfigError("psnr: data_range must be > 0");
    double mse = 0;
    size_t n = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!mask.data[i]) continue;
        const double d = pred.data[i] - reference.data[i];
        mse += d * d;
        n++;
    }
    if (n == 0) throw EmptyMask("psnr: empty mask");
    mse /= n;
    // An RMS error below data_range * 1e-12 is indistinguishable from zero in
    // double precision; report the exact-match sentinel instead of a finite
    // value driven by rounding noise.
    const double floor = data_range * 1e-12;
    if (mse <= floor * floor) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

double ssim(const RasterD& pred, const RasterD& reference, double data_range,
            const RasterB& mask) {
    check_dims(pred, reference, mask, "ssim");
    if (!(data_range > 0)) throw ConfigError("ssim: data_range must be > 0");
    constexpr int kRadius = 5;  // 11x11 window
    constexpr double kSigma = 1.5;
    if (pred.width < 2 * kRadius + 1 || pred.height < 2 * kRadius + 1)
        throw ImageTooSmall("ssim: image smaller than the 11x11 window");

    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);

    double weights[2 * kRadius + 1][2 * kRadius + 1];
    for (int dy = -kRadius; dy <= kRadius; ++dy)
        for (int dx = -kRadius; dx <= kRadius; ++dx)
            weights[dy + kRadius][dx + kRadius] =
                std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));

    double total = 0;
    size_t n = 0;
    for (int y = 0; y < pred.height; ++y) {
        for (int x = 0; x < pred.width; ++x) {
            if (!mask.at(x, y)) continue;
            double wsum = 0, ma = 0, mb = 0;
            for (int dy = -kRadius; dy <= kRadius; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= pred.height) continue;
                for (int dx = -kRadius; dx <= kRadius; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= pred.width) continue;
                    const double w = weights[dy + kRadius][dx + kRadius];
                    wsum += w;
                    ma += w * pred.at(xx, yy);
                    mb += w * reference.at(xx, yy);
                }
            }
            ma /= wsum;
            mb /= wsum;
            double va = 0, vb = 0, cov = 0;
            for (int dy = -kRadius; dy <= kRadius; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= pred.height) continue;
                for (int dx = -kRadius; dx <= kRadius; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= pred.width) continue;
                    const double w = weights[dy + kRadius][dx + kRadius];
                    const double da = pred.at(xx, yy) - ma;
                    const double db = reference.at(xx, yy) - mb;
                    va += w * da * da;
                    vb += w * db * db;
                    cov += w * da * db;
                }
            }
            va /= wsum;
            vb /= wsum;
            cov /= wsum;
            const double s = ((2 * ma * mb + c1) * (2 * cov + c2)) /
                             ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            n++;
        }
    }
    if (n == 0) throw EmptyMask("ssim: empty mask");
    return total / n;
}

std::map<int32_t, std::vector<double>> region_stats(const PkMap& map, const RegionSpec& regions) {
    if (!regions.label_raster.same_dims(map.width, map.height))
        throw ShapeMismatch("region_stats: label raster dimension mismatch");
    const int np = map.n_params();
    std::map<int32_t, std::vector<double>> sums;
    std::map<int32_t, size_t> counts;
    for (int32_t id : regions.region_ids) {
        sums[id].assign(np, 0.0);
        counts[id] = 0;
    }
    for (size_t i = 0; i < map.ktrans_per_min.size(); ++i) {
        auto it = sums.find(regions.label_raster.data[i]);
        if (it == sums.end()) continue;
        it->second[0] += map.ktrans_per_min.data[i];
        it->second[1] += map.vp.data[i];
        if (np == 3) it->second[2] += map.ve->data[i];
        counts[it->first]++;
    }
    for (auto& [id, vec] : sums) {
        if (counts[id] == 0)
            throw EmptyRegion("region_stats: region " + std::to_string(id) + " has no voxels");
        for (double& v : vec) v /= counts[id];
    }
    return sums;
}

}  // namespace dce
