// Benchmarks the OpenMP-parallel kernels against their serial reference
// implementations and reports timings plus the max absolute deviation.
#include "dce/fitting.hpp"
#include "dce/nn/tensor.hpp"
#include "dce/phantom.hpp"
#include "dce/physics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

double time_seconds(const std::function<void()>& fn, int repeats) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < repeats; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / repeats;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void report(const char* name, double serial_s, double parallel_s, double diff) {
    std::printf("%-24s serial %8.4f s   parallel %8.4f s   speedup %5.2fx   max|diff| %.3g\n",
                name, serial_s, parallel_s, serial_s / parallel_s, diff);
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("threads: %d\n", omp_get_max_threads());
#else
    std::printf("threads: 1 (built without OpenMP)\n");
#endif

    dce::PhantomConfig cfg;
    cfg.width = 128;
    cfg.height = 128;
    cfg.model = dce::TkModel::ETofts;
    cfg.seed = 2024;
    const dce::PhantomOutput ph = dce::generate_phantom(cfg);

    {
        const dce::DceSeries ref =
            dce::serial::forward_operator(ph.pk, ph.cp, ph.aux, cfg.acq);
        const dce::DceSeries par = dce::forward_operator(ph.pk, ph.cp, ph.aux, cfg.acq);
        const double ts = time_seconds(
            [&] { dce::serial::forward_operator(ph.pk, ph.cp, ph.aux, cfg.acq); }, 3);
        const double tp =
            time_seconds([&] { dce::forward_operator(ph.pk, ph.cp, ph.aux, cfg.acq); }, 3);
        report("forward_operator", ts, tp, max_abs_diff(ref.data, par.data));
    }

    {
        dce::FitConfig fit;
        fit.model = dce::TkModel::ETofts;
        fit.method = dce::FitMethod::NLLS;
        const dce::VolumeFitResult ref =
            dce::serial::fit_volume(ph.series, ph.cp, ph.aux, fit);
        const dce::VolumeFitResult par = dce::fit_volume(ph.series, ph.cp, ph.aux, fit);
        double diff = max_abs_diff(ref.map.ktrans_per_min.data, par.map.ktrans_per_min.data);
        diff = std::max(diff, max_abs_diff(ref.map.vp.data, par.map.vp.data));
        const double ts =
            time_seconds([&] { dce::serial::fit_volume(ph.series, ph.cp, ph.aux, fit); }, 1);
        const double tp = time_seconds([&] { dce::fit_volume(ph.series, ph.cp, ph.aux, fit); }, 1);
        report("fit_volume (NLLS)", ts, tp, diff);
    }

    {
        // conv2d's loops are parallel internally; compare one thread vs. all.
        std::mt19937_64 rng(7);
        std::normal_distribution<double> dist(0.0, 1.0);
        auto randn = [&](const dce::nn::Shape& shape) {
            std::vector<double> v(dce::nn::shape_numel(shape));
            for (double& x : v) x = dist(rng);
            return dce::nn::Tensor::from_data(shape, std::move(v));
        };
        dce::nn::Tensor x = randn({8, 64, 48, 48});
        dce::nn::Tensor w = randn({64, 64, 3, 3});
        dce::nn::Tensor b = dce::nn::Tensor::zeros({64});
        auto run = [&] { dce::nn::conv2d(x, w, b, 1, 1, 1); };
#ifdef _OPENMP
        const int n = omp_get_max_threads();
        omp_set_num_threads(1);
        const std::vector<double> ref = dce::nn::conv2d(x, w, b, 1, 1, 1).data();
        const double ts = time_seconds(run, 3);
        omp_set_num_threads(n);
        const std::vector<double> par = dce::nn::conv2d(x, w, b, 1, 1, 1).data();
        const double tp = time_seconds(run, 3);
        report("conv2d 3x3 (64ch)", ts, tp, max_abs_diff(ref, par));
#else
        std::printf("conv2d 3x3 (64ch)        single-thread %8.4f s\n", time_seconds(run, 3));
#endif
    }
    return 0;
}
