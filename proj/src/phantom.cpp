#include "dce/phantom.hpp"

#include "dce/physics.hpp"

#include <cmath>
#include <random>

namespace dce {

namespace {

void check_range(const ValueRange& r, const char* name, double lo_ok, double hi_ok) {
    if (!(r.lo <= r.hi)) throw ConfigError(std::string("phantom: range lo > hi for ") + name);
    // ramps add +-10%, keep the stretched range inside the fitting bounds
    if (r.lo * 0.9 < lo_ok || r.hi * 1.1 > hi_ok)
        throw ConfigError(std::string("phantom: range outside fitting bounds for ") + name);
}

double uniform(std::mt19937_64& rng, const ValueRange& r) {
    return r.lo + (r.hi - r.lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

struct Ellipse {
    double cx, cy, rx, ry;
    bool contains(int x, int y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

}  // namespace

void PhantomConfig::validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("phantom: dimensions must be positive");
    if (n_regions < 1) throw ConfigError("phantom: n_regions must be positive");
    validate_units(acq);
    aif.validate();
    if (!(hct >= 0 && hct < 1)) throw ConfigError("phantom: hct must lie in [0,1)");
    if (noise_sigma < 0) throw ConfigError("phantom: noise_sigma must be >= 0");
    check_range(ktrans_per_min, "ktrans", 0.0, 1.0);
    check_range(vp, "vp", 0.0, 1.0);
    check_range(bg_ktrans_per_min, "bg_ktrans", 0.0, 1.0);
    check_range(bg_vp, "bg_vp", 0.0, 1.0);
    if (model == TkModel::ETofts) {
        check_range(ve, "ve", 1e-6, 1.0);
        check_range(bg_ve, "bg_ve", 1e-6, 1.0);
    }
    if (!(t1_seconds.lo > 0 && t1_seconds.lo <= t1_seconds.hi))
        throw ConfigError("phantom: t1 range must be positive");
    if (!(s0.lo > 0 && s0.lo <= s0.hi)) throw ConfigError("phantom: s0 range must be positive");
}

PhantomOutput generate_phantom(const PhantomConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);

    PhantomOutput out;
    out.pk = PkMap::create(cfg.model, cfg.width, cfg.height);
    out.aux.t1_seconds = RasterD(cfg.width, cfg.height, 1.0);
    out.aux.s0 = RasterD(cfg.width, cfg.height, 0.5 * (cfg.s0.lo + cfg.s0.hi));
    out.aux.mask = RasterB(cfg.width, cfg.height, 0);
    out.labels = Raster<int32_t>(cfg.width, cfg.height, 0);

    const Ellipse brain{cfg.width / 2.0, cfg.height / 2.0, 0.45 * cfg.width, 0.45 * cfg.height};

    struct RegionDraw {
        Ellipse shape;
        double kt, vp, ve, t1, s0;
        double gx, gy;  // ramp direction, +-10% across the region
    };
    std::vector<RegionDraw> regions;

    // background first so lesions overwrite it
    RegionDraw bg;
    bg.shape = brain;
    bg.kt = uniform(rng, cfg.bg_ktrans_per_min);
    bg.vp = uniform(rng, cfg.bg_vp);
    bg.ve = cfg.model == TkModel::ETofts ? uniform(rng, cfg.bg_ve) : 0.0;
    bg.t1 = uniform(rng, cfg.t1_seconds);
    bg.s0 = uniform(rng, cfg.s0);
    bg.gx = uniform(rng, {-1.0, 1.0});
    bg.gy = uniform(rng, {-1.0, 1.0});
    regions.push_back(bg);

    for (int i = 0; i < cfg.n_regions; ++i) {
        RegionDraw r;
        r.shape.rx = uniform(rng, {0.06 * cfg.width, 0.14 * cfg.width});
        r.shape.ry = uniform(rng, {0.06 * cfg.height, 0.14 * cfg.height});
        r.shape.cx = uniform(rng, {brain.cx - 0.6 * brain.rx, brain.cx + 0.6 * brain.rx});
        r.shape.cy = uniform(rng, {brain.cy - 0.6 * brain.ry, brain.cy + 0.6 * brain.ry});
        r.kt = uniform(rng, cfg.ktrans_per_min);
        r.vp = uniform(rng, cfg.vp);
        r.ve = cfg.model == TkModel::ETofts ? uniform(rng, cfg.ve) : 0.0;
        r.t1 = uniform(rng, cfg.t1_seconds);
        r.s0 = uniform(rng, cfg.s0);
        r.gx = uniform(rng, {-1.0, 1.0});
        r.gy = uniform(rng, {-1.0, 1.0});
        regions.push_back(r);
    }

    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            if (!brain.contains(x, y)) continue;
            const size_t idx = static_cast<size_t>(y) * cfg.width + x;
            int label = 1;
            const RegionDraw* owner = &regions[0];
            for (size_t r = 1; r < regions.size(); ++r) {
                if (regions[r].shape.contains(x, y)) {
                    owner = &regions[r];
                    label = static_cast<int>(r) + 1;
                }
            }
            const Ellipse& e = owner->shape;
            const double u = (x - e.cx) / e.rx, v = (y - e.cy) / e.ry;
            const double ramp = 1.0 + 0.1 * 0.5 * (owner->gx * u + owner->gy * v);
            out.pk.ktrans_per_min.data[idx] = owner->kt * ramp;
            out.pk.vp.data[idx] = owner->vp * ramp;
            if (cfg.model == TkModel::ETofts) out.pk.ve->data[idx] = owner->ve * ramp;
            out.aux.t1_seconds.data[idx] = owner->t1;
            out.aux.s0.data[idx] = owner->s0;
            out.aux.mask.data[idx] = 1;
            out.labels.data[idx] = label;
        }
    }

    const std::vector<double> grid = cfg.acq.time_grid();
    AifParams aif = cfg.aif;
    // injection happens after the bolus-arrival frame
    aif.bolus_arrival_seconds =
        std::max(aif.bolus_arrival_seconds,
                 cfg.acq.bolus_arrival_frame * cfg.acq.frame_interval_seconds);
    out.cp = blood_to_plasma(population_aif(aif, grid), grid, cfg.hct);

    out.series = forward_operator(out.pk, out.cp, out.aux, cfg.acq, /*parallel=*/false);
    if (cfg.noise_sigma > 0) {
        double mean_s0 = 0;
        size_t n = 0;
        for (size_t i = 0; i < out.aux.mask.data.size(); ++i)
            if (out.aux.mask.data[i]) {
                mean_s0 += out.aux.s0.data[i];
                n++;
            }
        mean_s0 /= std::max<size_t>(n, 1);
        out.series = add_noise(out.series, cfg.noise_sigma * mean_s0, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    }
    return out;
}

DceSeries add_noise(const DceSeries& series, double sigma, uint64_t seed) {
    if (sigma < 0) throw ConfigError("add_noise: sigma must be >= 0");
    if (sigma == 0) return series;
    DceSeries out = series;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (double& v : out.data) v = std::max(0.0, v + noise(rng));
    return out;
}

}  // namespace dce
