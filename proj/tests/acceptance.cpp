// Release gate: each test case checks one numbered acceptance criterion and
// prints a single PASS/FAIL line for it.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dce/aif.hpp"
#include "dce/fitting.hpp"
#include "dce/metrics.hpp"
#include "dce/networks.hpp"
#include "dce/nn/optim.hpp"
#include "dce/phantom.hpp"
#include "dce/physics.hpp"
#include "dce/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <sys/wait.h>

namespace fs = std::filesystem;
using namespace dce;

namespace {

// Collects sub-checks for one criterion and prints its verdict on destruction.
struct Gate {
    int id;
    const char* name;
    bool ok = true;

    Gate(int id_, const char* name_) : id(id_), name(name_) {}
    void check(bool cond, const char* what) {
        ok = ok && cond;
        CHECK_MESSAGE(cond, std::string(what));
    }
    ~Gate() {
        std::printf("criterion %02d %-28s %s\n", id, name, ok ? "PASS" : "FAIL");
        std::fflush(stdout);
    }
};

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string cli_bin() {
    const char* p = std::getenv("DCEFIT_BIN");
    REQUIRE_MESSAGE(p != nullptr, "DCEFIT_BIN must point at the dcefit binary");
    return p;
}

int run_cli(const std::string& args, const std::string& log) {
    const std::string cmd = cli_bin() + " " + args + " >" + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path fresh_dir(const std::string& name) {
    fs::path d = fs::temp_directory_path() / "dce_acceptance" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "cannot open " << p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Small phantom family shared by the learning and CLI criteria.
PhantomConfig small_phantom_config(uint64_t seed) {
    PhantomConfig cfg;
    cfg.width = 24;
    cfg.height = 24;
    cfg.model = TkModel::Patlak;
    cfg.n_regions = 2;
    cfg.seed = seed;
    cfg.acq.n_frames = 30;
    cfg.acq.bolus_arrival_frame = 3;
    return cfg;
}

double max_rel_err(const RasterD& est, const RasterD& truth, const RasterB& mask) {
    double worst = 0;
    for (size_t i = 0; i < est.data.size(); ++i)
        if (mask.data[i])
            worst = std::max(worst,
                             std::abs(est.data[i] - truth.data[i]) / std::abs(truth.data[i]));
    return worst;
}

double masked_max(const RasterD& r, const RasterB& mask) {
    double m = 0;
    for (size_t i = 0; i < r.data.size(); ++i)
        if (mask.data[i]) m = std::max(m, r.data[i]);
    return m;
}

}  // namespace

TEST_CASE("criterion 1: signal <-> concentration round trip") {
    Gate gate(1, "physics round trip");
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double t0 = now_seconds();
    double worst = 0;
    for (int i = 0; i < 1000; ++i) {
        AcqParams acq;
        acq.tr_seconds = 0.002 + 0.004 * u01(rng);
        acq.flip_angle_radians = (5.0 + 20.0 * u01(rng)) * M_PI / 180.0;
        acq.r1_per_mM_per_second = 3.0 + 2.0 * u01(rng);
        acq.frame_interval_seconds = 1.0;
        acq.n_frames = 1;
        const double s0 = 50.0 + 100.0 * u01(rng);
        const double t1 = 0.5 + 1.5 * u01(rng);
        const double ct = 10.0 * u01(rng);
        SpgrParams p(s0, t1, acq);
        const double back = spgr_concentration(spgr_signal(ct, p), p);
        worst = std::max(worst, std::abs(back - ct) / std::max(ct, 1e-12));
    }
    const double elapsed = now_seconds() - t0;
    gate.check(worst <= 1e-10, "max relative round-trip error <= 1e-10");
    gate.check(elapsed < 1.0, "1000 round trips run in under 1 s");
}

TEST_CASE("criterion 2: closed-form concentration oracles") {
    Gate gate(2, "closed-form oracles");

    // Patlak with constant plasma concentration: exact trapezoid integral.
    {
        PlasmaCurve cp;
        for (int i = 0; i <= 60; ++i) {
            cp.time_seconds.push_back(double(i));
            cp.values_mM.push_back(1.0);
        }
        ConcentrationCurve ct = patlak_concentration(0.001, 0.02, cp);
        gate.check(std::abs(ct.values_mM.back() - 0.08) <= 1e-6,
                   "Patlak constant-Cp value 0.02 + 0.001*60 = 0.08 mM");
    }

    // eTofts, vp = 0, constant Cp: closed form ve*(1 - exp(-kep*t)). Linear
    // input is handled exactly by the segment recursion.
    {
        PlasmaCurve cp;
        for (int i = 0; i <= 200; ++i) {
            cp.time_seconds.push_back(0.5 * i);
            cp.values_mM.push_back(1.0);
        }
        ConcentrationCurve ct = etofts_concentration(0.001, 0.0, 0.1, cp);
        gate.check(std::abs(ct.values_mM.back() - 0.06321205588285576) <= 1e-9,
                   "eTofts constant-Cp value 0.1*(1-exp(-1)) mM");
    }

    // Convergence order on a smooth (exponential) input where the piecewise-
    // linear interpolation of Cp is the only discretization error source:
    // Cp(t) = exp(-a t) gives Ct(t) = kt*(exp(-a t) - exp(-kep t))/(kep - a).
    {
        const double kt = 0.001, ve = 0.1, kep = kt / ve, a = 0.025, T = 100.0;
        const double exact = kt * (std::exp(-a * T) - std::exp(-kep * T)) / (kep - a);
        std::vector<double> errs;
        for (double dt : {4.0, 2.0, 1.0, 0.5}) {
            PlasmaCurve cp;
            for (int i = 0; i * dt <= T + 1e-9; ++i) {
                cp.time_seconds.push_back(i * dt);
                cp.values_mM.push_back(std::exp(-a * i * dt));
            }
            ConcentrationCurve ct = etofts_concentration(kt, 0.0, ve, cp);
            errs.push_back(std::abs(ct.values_mM.back() - exact));
        }
        for (size_t k = 0; k + 1 < errs.size(); ++k) {
            CAPTURE(errs[k]);
            CAPTURE(errs[k + 1]);
            gate.check(errs[k] / errs[k + 1] >= 3.5,
                       "error drops >= 3.5x per grid halving (second order)");
        }
    }
}

TEST_CASE("criterion 3: noiseless phantom recovery") {
    Gate gate(3, "noiseless recovery");
    const double t0 = now_seconds();

    PhantomConfig pat_cfg;  // 64x64 Patlak defaults, zero noise
    pat_cfg.seed = 1;
    PhantomOutput pat = generate_phantom(pat_cfg);
    PhantomConfig et_cfg;
    et_cfg.model = TkModel::ETofts;
    et_cfg.seed = 2;
    // The linearized eTofts fit carries O(dt^2) quadrature error from the
    // cumulative integrals; sample at half the default frame interval so that
    // error sits comfortably inside the 1e-3 budget.
    et_cfg.acq.frame_interval_seconds = 3.25;
    et_cfg.acq.n_frames = 130;
    et_cfg.acq.bolus_arrival_frame = 8;
    PhantomOutput et = generate_phantom(et_cfg);

    auto run = [](const PhantomOutput& ph, TkModel model, FitMethod method,
                  std::vector<double> init) {
        FitConfig cfg;
        cfg.model = model;
        cfg.method = method;
        if (!init.empty()) cfg.initial_guess = std::move(init);
        return fit_volume(ph.series, ph.cp, ph.aux, cfg, /*parallel=*/false);
    };
    auto worst = [](const VolumeFitResult& res, const PhantomOutput& ph) {
        double w = std::max(max_rel_err(res.map.ktrans_per_min, ph.pk.ktrans_per_min,
                                        ph.aux.mask),
                            max_rel_err(res.map.vp, ph.pk.vp, ph.aux.mask));
        if (res.map.ve) w = std::max(w, max_rel_err(*res.map.ve, *ph.pk.ve, ph.aux.mask));
        return w;
    };

    VolumeFitResult r = run(pat, TkModel::Patlak, FitMethod::LLS, {});
    gate.check(r.n_failed == 0 && worst(r, pat) <= 1e-6, "Patlak LLS max rel err <= 1e-6");
    r = run(et, TkModel::ETofts, FitMethod::LLS, {});
    gate.check(r.n_failed == 0 && worst(r, et) <= 1e-3, "eTofts LLS max rel err <= 1e-3");
    r = run(pat, TkModel::Patlak, FitMethod::NLLS, {0.008 / 60.0, 0.004});
    gate.check(r.n_failed == 0 && worst(r, pat) <= 1e-6,
               "Patlak NLLS from perturbed init <= 1e-6");
    r = run(et, TkModel::ETofts, FitMethod::NLLS, {0.008 / 60.0, 0.004, 0.04});
    gate.check(r.n_failed == 0 && worst(r, et) <= 1e-6,
               "eTofts NLLS from perturbed init <= 1e-6");
    gate.check(now_seconds() - t0 < 30.0, "all four single-threaded fits in under 30 s");
}

namespace {

double curve_sse(const ConcentrationCurve& model, const ConcentrationCurve& data) {
    double sse = 0;
    for (size_t i = 0; i < data.n(); ++i) {
        const double d = model.values_mM[i] - data.values_mM[i];
        sse += d * d;
    }
    return sse;
}

// Brute-force box-constrained grid search, iteratively refined around the best
// cell until every parameter's spacing is below 1e-7 (finer than the required
// 1e-4 resolution). When the level's best lands on the search box boundary the
// box is re-centered at the same spacing instead of shrunk, so the search can
// walk along the correlated kt/vp valley rather than getting pinned.
double grid_search_objective(TkModel model, const ConcentrationCurve& ct,
                             const PlasmaCurve& cp) {
    const int npar = model == TkModel::ETofts ? 3 : 2;
    const std::vector<double> glo = {0.0, 0.0, 1e-6};
    const std::vector<double> ghi = {1.0 / 60.0, 1.0, 1.0};
    std::vector<double> lo(glo.begin(), glo.begin() + npar);
    std::vector<double> hi(ghi.begin(), ghi.begin() + npar);
    const int pts = 21;
    double best_obj = std::numeric_limits<double>::infinity();

    for (int level = 0; level < 500; ++level) {
        std::vector<double> step(npar);
        for (int p = 0; p < npar; ++p) step[p] = (hi[p] - lo[p]) / (pts - 1);
        std::vector<double> best(npar);
        double level_best = std::numeric_limits<double>::infinity();
        std::vector<int> idx(npar, 0);
        std::vector<double> par(npar);
        bool carry = false;
        while (!carry) {
            for (int p = 0; p < npar; ++p) par[p] = lo[p] + idx[p] * step[p];
            ConcentrationCurve m = model == TkModel::ETofts
                                       ? etofts_concentration(par[0], par[1], par[2], cp)
                                       : patlak_concentration(par[0], par[1], cp);
            const double obj = curve_sse(m, ct);
            if (obj < level_best) {
                level_best = obj;
                best = par;
            }
            int p = 0;
            for (; p < npar; ++p) {
                if (++idx[p] < pts) break;
                idx[p] = 0;
            }
            carry = p == npar;
        }
        best_obj = std::min(best_obj, level_best);

        bool on_interior_edge = false;
        double max_step = 0;
        for (int p = 0; p < npar; ++p) {
            max_step = std::max(max_step, step[p]);
            if (best[p] - lo[p] < 0.51 * step[p] && lo[p] > glo[p] + 1e-300)
                on_interior_edge = true;
            if (hi[p] - best[p] < 0.51 * step[p] && hi[p] < ghi[p] - 1e-12)
                on_interior_edge = true;
        }
        if (max_step < 1e-7 && !on_interior_edge) break;

        for (int p = 0; p < npar; ++p) {
            // re-center; keep the spacing when pinned to an interior edge,
            // otherwise shrink to +-2 cells around the best point
            const double half = on_interior_edge ? (hi[p] - lo[p]) / 2 : 2 * step[p];
            lo[p] = std::max(glo[p], best[p] - half);
            hi[p] = std::min(ghi[p], best[p] + half);
        }
    }
    return best_obj;
}

}  // namespace

TEST_CASE("criterion 4: grid-search oracle equivalence") {
    Gate gate(4, "grid-search equivalence");
    PhantomOutput ph = generate_phantom(small_phantom_config(33));
    std::mt19937_64 rng(44);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    struct Voxel {
        TkModel model;
        std::vector<double> par;  // seconds-based ktrans
    };
    std::vector<Voxel> voxels;
    for (int i = 0; i < 3; ++i)
        voxels.push_back({TkModel::Patlak,
                          {(0.001 + 0.015 * u01(rng)) / 60.0, 0.001 + 0.005 * u01(rng)}});
    for (int i = 0; i < 2; ++i)
        voxels.push_back({TkModel::ETofts,
                          {(0.001 + 0.015 * u01(rng)) / 60.0, 0.001 + 0.005 * u01(rng),
                           0.02 + 0.05 * u01(rng)}});

    for (const Voxel& v : voxels) {
        ConcentrationCurve ct =
            v.model == TkModel::ETofts
                ? etofts_concentration(v.par[0], v.par[1], v.par[2], ph.cp)
                : patlak_concentration(v.par[0], v.par[1], ph.cp);
        FitConfig cfg;
        cfg.model = v.model;
        cfg.method = FitMethod::NLLS;
        FitResult fit = fit_nlls(ct, ph.cp, cfg);
        const double obj_nlls = fit.residual_norm * fit.residual_norm;
        const double obj_grid = grid_search_objective(v.model, ct, ph.cp);
        CAPTURE(obj_nlls);
        CAPTURE(obj_grid);
        gate.check(std::abs(obj_nlls - obj_grid) <= 1e-8,
                   "NLLS objective matches refined grid search within 1e-8");
    }
}

namespace {

using namespace dce::nn;

std::mt19937_64 g_fd_rng(505);

Tensor random_tensor(const Shape& shape, bool rg = true) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = u(g_fd_rng);
    return Tensor::from_data(shape, std::move(v), rg);
}

bool fd_ok(const std::function<Tensor()>& builder, std::vector<Tensor> leaves,
           double tol = 1e-4) {
    for (Tensor& leaf : leaves) leaf.zero_grad();
    Tensor loss = builder();
    loss.backward();
    for (Tensor& leaf : leaves) {
        std::vector<double> analytic = leaf.grad();
        for (size_t i = 0; i < leaf.numel(); ++i) {
            const double h = 1e-4;
            const double orig = leaf.data()[i];
            leaf.data()[i] = orig + h;
            const double up = builder().data()[0];
            leaf.data()[i] = orig - h;
            const double dn = builder().data()[0];
            leaf.data()[i] = orig;
            const double fd = (up - dn) / (2 * h);
            if (std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)) > tol) return false;
        }
    }
    return true;
}

Tensor project(const Tensor& out, const Tensor& weights) { return mean(mul(out, weights)); }

}  // namespace

TEST_CASE("criterion 5: autodiff, Adam, and the lr schedule") {
    Gate gate(5, "autodiff & optimizer");

    bool all_ok = true;
    for (int inst = 0; inst < 20 && all_ok; ++inst) {
        {
            Tensor a = random_tensor({2, 6});
            Tensor b = random_tensor({2, 6});
            Tensor p = random_tensor({2, 6}, false);
            all_ok = all_ok && fd_ok(
                                   [&] {
                                       return project(
                                           add_scalar(
                                               scale(add(mul(a, b), sub(a, b)), 0.7), 0.3),
                                           p);
                                   },
                                   {a, b});
        }
        {
            Tensor a = random_tensor({3, 5});
            for (double& v : a.data())
                if (std::abs(v) < 5e-3) v += 0.01;  // keep clear of the kinks
            Tensor p = random_tensor({3, 5}, false);
            all_ok = all_ok && fd_ok([&] { return project(relu(a), p); }, {a});
            all_ok = all_ok && fd_ok([&] { return project(leaky_relu(a, 0.2), p); }, {a});
            all_ok = all_ok && fd_ok([&] { return project(abs(a), p); }, {a});
            all_ok = all_ok && fd_ok([&] { return project(square(a), p); }, {a});
        }
        {
            Tensor x = random_tensor({2, 3, 6, 6});
            Tensor w = random_tensor({2, 3, 3, 3});
            Tensor b = random_tensor({2});
            Tensor p = random_tensor({2, 2, 6, 6}, false);
            all_ok =
                all_ok && fd_ok([&] { return project(conv2d(x, w, b, 1, 2, 2), p); }, {x, w, b});
        }
        {
            Tensor x = random_tensor({1, 2, 8, 8});
            Tensor w = random_tensor({2, 2, 4, 4});
            Tensor b = random_tensor({2});
            Tensor p = random_tensor({1, 2, 4, 4}, false);
            all_ok =
                all_ok && fd_ok([&] { return project(conv2d(x, w, b, 2, 1, 1), p); }, {x, w, b});
        }
        {
            Tensor x = random_tensor({2, 3, 5, 5});
            Tensor g = random_tensor({3});
            Tensor b = random_tensor({3});
            Tensor p = random_tensor({2, 3, 5, 5}, false);
            all_ok = all_ok &&
                     fd_ok([&] { return project(instance_norm(x, g, b), p); }, {x, g, b}, 2e-4);
        }
        {
            Tensor x = random_tensor({2, 4, 5, 5});
            Tensor w = random_tensor({3, 4});
            Tensor b = random_tensor({3});
            Tensor p = random_tensor({2, 3}, false);
            all_ok = all_ok &&
                     fd_ok([&] { return project(fully_connected(global_avg_pool(x), w, b), p); },
                           {x, w, b});
        }
        {
            Tensor a = random_tensor({2, 2, 4, 4});
            Tensor b = random_tensor({2, 3, 4, 4});
            Tensor p = random_tensor({2, 5, 4, 4}, false);
            all_ok = all_ok && fd_ok([&] { return project(concat_channels(a, b), p); }, {a, b});
        }
        {
            Tensor a = random_tensor({4, 4});
            all_ok = all_ok && fd_ok([&] { return mean(a); }, {a});
        }
    }
    gate.check(all_ok, "finite differences within 1e-4 for every op, 20 instances each");

    // Adam step 1: bias correction gives mhat = g, vhat = g^2, so the update
    // is exactly -lr * g / (|g| + eps), i.e. -lr * sign(g) up to eps effects.
    {
        AdamConfig cfg;
        cfg.lr = 1e-2;
        const double g = 0.3;
        Tensor p = Tensor::from_data({1}, {1.0}, true);
        Adam opt({p}, cfg);
        Tensor loss = scale(mean(p), g);
        loss.backward();
        opt.step();
        const double expected = 1.0 - cfg.lr * g / (std::abs(g) + cfg.epsilon);
        gate.check(std::abs(p.data()[0] - expected) <= 1e-15, "Adam first step exact per formula");
        gate.check(std::abs((p.data()[0] - 1.0) + cfg.lr) <= cfg.lr * 1e-6,
                   "first step is -lr*sign(g) up to epsilon effects");
    }

    gate.check(lr_linear_decay(1e-5, 0, 200, 100) == 1e-5, "lr schedule starts at 1e-5 exactly");
    gate.check(lr_linear_decay(1e-5, 200, 200, 100) == 0.0, "lr schedule ends at 0 exactly");
}

namespace {

TrainConfig tiny_train_config(TrainMode mode) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.model = TkModel::Patlak;
    cfg.batch_size = 2;
    cfg.patch = 24;
    cfg.epochs = 1;
    cfg.steps_per_epoch = 4;
    cfg.base_channels = 8;
    cfg.cp_hidden_units = 8;
    cfg.disc_base_filters = 4;
    cfg.lr = 1e-4;
    cfg.seed = 21;
    return cfg;
}

TrainDataset small_dataset(int n, uint64_t seed0) {
    TrainDataset ds;
    for (int i = 0; i < n; ++i) {
        PhantomOutput ph = generate_phantom(small_phantom_config(seed0 + i));
        ds.push_back({ph.series, ph.aux, ph.pk, ph.cp});
    }
    return ds;
}

}  // namespace

TEST_CASE("criterion 6: loss definitions and weight wiring") {
    Gate gate(6, "loss definitions");
    using namespace dce::nn;

    // cycle loss vanishes when every cycle is an identity
    {
        Tensor p = random_tensor({2, 2, 4, 4}, false);
        Tensor s = random_tensor({2, 5, 4, 4}, false);
        Tensor cp = random_tensor({2, 5}, false);
        gate.check(cycle_loss(p, p, s, s, cp, cp, 1.0).data()[0] == 0.0,
                   "cycle loss is exactly zero at identity");
    }

    // LSGAN at the two reference score tables
    {
        Tensor ones = Tensor::full({2, 1, 4, 4}, 1.0);
        Tensor zeros = Tensor::zeros({2, 1, 4, 4});
        LsganLosses perfect = lsgan_losses(ones, zeros);  // discriminator is right
        gate.check(perfect.disc_loss.data()[0] == 0.0 && perfect.gen_loss.data()[0] == 0.5,
                   "LSGAN (d_real=1, d_fake=0) -> disc 0, gen 1/2");
        LsganLosses fooled = lsgan_losses(ones, ones);  // generator fools it
        gate.check(fooled.disc_loss.data()[0] == 0.5 && fooled.gen_loss.data()[0] == 0.0,
                   "LSGAN (d_real=1, d_fake=1) -> disc 1/2, gen 0");
    }

    // alpha / beta scale their mean-L1 terms linearly
    {
        Tensor a = random_tensor({2, 2, 4, 4}, false);
        Tensor b = random_tensor({2, 2, 4, 4}, false);
        const double l1 = supervised_loss(a, b, 1.0).data()[0];
        gate.check(std::abs(supervised_loss(a, b, 10.0).data()[0] - 10.0 * l1) <= 1e-12,
                   "supervised loss scales linearly in alpha = 10");
        const double ph = physics_loss(a, b, 1.0).data()[0];
        gate.check(std::abs(physics_loss(a, b, 10.0).data()[0] - 10.0 * ph) <= 1e-12,
                   "physics loss scales linearly in beta = 10");
    }

    // gamma / rho wiring, checked by recomposing the logged totals of short
    // training runs that differ only in rho.
    TrainDataset ds = small_dataset(2, 300);
    auto run = [&](TrainMode mode, double rho, const char* out) {
        TrainConfig cfg = tiny_train_config(mode);
        cfg.rho = rho;
        cfg.out_dir = fresh_dir(out).string();
        return train(cfg, ds);
    };
    TrainResult full = run(TrainMode::CycleGAN, 1.0, "c6_rho1");
    TrainResult tenth = run(TrainMode::CycleGAN, 0.1, "c6_rho01");
    bool recompose = true;
    for (const LossRow& r : full.history)
        recompose = recompose &&
                    std::abs(r.total - (10.0 * (r.cycle_s + r.cycle_p + 1.0 * r.cycle_cp) +
                                        r.gen_gan)) <= 1e-9;
    for (const LossRow& r : tenth.history)
        recompose = recompose &&
                    std::abs(r.total - (10.0 * (r.cycle_s + r.cycle_p + 0.1 * r.cycle_cp) +
                                        r.gen_gan)) <= 1e-9;
    gate.check(recompose, "total = gamma*(cycles with rho) + GAN term on every logged step");
    // before any update the two runs share components, so the totals differ by
    // exactly gamma * (1 - 0.1) * cycle_cp
    const LossRow& f0 = full.history.front();
    const LossRow& t0 = tenth.history.front();
    gate.check(std::abs((f0.total - t0.total) - 10.0 * 0.9 * f0.cycle_cp) <= 1e-9,
               "rho reweights only the plasma-curve cycle");

    TrainResult sp = run(TrainMode::SupervisedPhysics, 1.0, "c6_sp");
    bool sp_ok = true;
    for (const LossRow& r : sp.history)
        sp_ok = sp_ok && std::abs(r.total - (r.supervised + r.physics)) <= 1e-9 &&
                r.supervised > 0 && r.physics > 0;
    gate.check(sp_ok, "supervised-physics total = alpha-term + beta-term");
}

TEST_CASE("criterion 7: generator shape contracts") {
    Gate gate(7, "generator shape contracts");
    {
        GeneratorSpec spec;  // 65 frames, eTofts head
        spec.in_channels = 65;
        spec.out_pk_channels = 3;
        Generator gen(spec, 1);
        Generator::Output out = gen.forward(nn::Tensor::zeros({4, 65, 48, 48}));
        gate.check(out.pk.shape() == nn::Shape{4, 3, 48, 48},
                   "[4,65,48,48] -> PK [4,3,48,48]");
        gate.check(out.cp.shape() == nn::Shape{4, 65}, "[4,65,48,48] -> Cp [4,65]");
    }
    {
        GeneratorSpec spec;  // 60 frames, Patlak head
        spec.in_channels = 60;
        spec.out_pk_channels = 2;
        Generator gen(spec, 2);
        Generator::Output out = gen.forward(nn::Tensor::zeros({2, 60, 48, 48}));
        gate.check(out.pk.shape() == nn::Shape{2, 2, 48, 48},
                   "[2,60,48,48] -> PK [2,2,48,48]");
        gate.check(out.cp.shape() == nn::Shape{2, 60}, "[2,60,48,48] -> Cp [2,60]");
    }
}

TEST_CASE("criterion 8: desk-scale learning") {
    Gate gate(8, "desk-scale learning");
    const double t0 = now_seconds();

    // Calibration fixtures, recorded from one run of this exact configuration:
    //   supervised last-epoch mean-L1 0.0185, PSNR 15.32 dB
    //   CycleGAN PSNR 15.38 dB, Cp NRMSE 0.0060
    constexpr double kSupMeanL1Threshold = 0.030;
    constexpr double kCalSupPsnr = 15.32;
    constexpr double kCalCycPsnr = 15.38;
    constexpr double kCalCpNrmse = 0.0060;

    TrainDataset ds = small_dataset(20, 100);
    PhantomOutput held = generate_phantom(small_phantom_config(999));

    auto desk_config = [&](TrainMode mode, const char* out) {
        TrainConfig cfg;
        cfg.mode = mode;
        cfg.model = TkModel::Patlak;
        cfg.batch_size = 4;
        cfg.patch = 24;
        cfg.base_channels = 8;
        cfg.cp_hidden_units = 16;
        cfg.disc_base_filters = 4;
        cfg.lr = 5e-4;
        cfg.seed = 7;
        cfg.epochs = 20;
        cfg.steps_per_epoch = 100;
        cfg.out_dir = fresh_dir(out).string();
        return cfg;
    };
    auto epoch_avg = [](const std::vector<LossRow>& hist, int epoch, auto field) {
        double sum = 0;
        int n = 0;
        for (const LossRow& r : hist)
            if (r.epoch == epoch) {
                sum += field(r);
                ++n;
            }
        return sum / n;
    };
    auto eval_psnr = [&](const std::string& ckpt_path) {
        Checkpoint ck = load_checkpoint(ckpt_path);
        InferResult inf = infer(ck, held.series, &held.aux.mask);
        const double ps_kt =
            psnr(inf.pk.ktrans_per_min, held.pk.ktrans_per_min,
                 masked_max(held.pk.ktrans_per_min, held.aux.mask), held.aux.mask);
        const double ps_vp = psnr(inf.pk.vp, held.pk.vp,
                                  masked_max(held.pk.vp, held.aux.mask), held.aux.mask);
        return std::pair<double, InferResult>(0.5 * (ps_kt + ps_vp), std::move(inf));
    };

    // (a) supervised baseline: 2000 steps
    TrainResult sup = train(desk_config(TrainMode::Supervised, "c8_sup"), ds);
    const double mean_l1 =
        epoch_avg(sup.history, 20, [](const LossRow& r) { return r.supervised; }) / 10.0;
    CAPTURE(mean_l1);
    gate.check(mean_l1 < kSupMeanL1Threshold,
               "supervised mean-L1 below the pinned threshold within 2000 steps");

    // (b) CycleGAN: epoch-averaged generator total falls from epoch 1 to 5
    TrainResult cyc = train(desk_config(TrainMode::CycleGAN, "c8_cyc"), ds);
    auto total = [](const LossRow& r) { return r.total; };
    gate.check(epoch_avg(cyc.history, 5, total) < epoch_avg(cyc.history, 1, total),
               "CycleGAN epoch-5 mean generator loss below epoch 1");

    // (c) held-out phantom: CycleGAN within 5 dB of supervised; Cp NRMSE <= 0.15
    auto [psnr_sup, inf_sup] = eval_psnr(sup.final_checkpoint);
    auto [psnr_cyc, inf_cyc] = eval_psnr(cyc.final_checkpoint);
    CAPTURE(psnr_sup);
    CAPTURE(psnr_cyc);
    gate.check(psnr_cyc >= psnr_sup - 5.0, "CycleGAN PK-map PSNR within 5 dB of supervised");
    gate.check(std::abs(psnr_sup - kCalSupPsnr) <= 0.5 &&
                   std::abs(psnr_cyc - kCalCycPsnr) <= 0.5,
               "PSNR values reproduce the calibration fixtures");

    double sse = 0, peak = 0;
    for (size_t i = 0; i < held.cp.n(); ++i) {
        const double d = inf_cyc.cp.values_mM[i] - held.cp.values_mM[i];
        sse += d * d;
        peak = std::max(peak, held.cp.values_mM[i]);
    }
    const double nrmse = std::sqrt(sse / held.cp.n()) / peak;
    CAPTURE(nrmse);
    gate.check(nrmse <= 0.15, "estimated Cp NRMSE <= 0.15 against the true AIF");
    gate.check(std::abs(nrmse - kCalCpNrmse) <= 0.02, "Cp NRMSE reproduces the fixture");

    gate.check(now_seconds() - t0 < 900.0, "criterion 8 runs in under 15 minutes");
}

namespace {

void write_cli_phantom_config(const fs::path& path) {
    std::ofstream out(path);
    out << R"({"width":24,"height":24,"model":"patlak","n_regions":2,"seed":17,
"acq":{"tr_seconds":0.0028,"flip_angle_radians":0.1745,"r1_per_mM_per_second":3.47,
"frame_interval_seconds":6.5,"n_frames":30,"bolus_arrival_frame":3}})";
}

void write_cli_train_config(const fs::path& path) {
    std::ofstream out(path);
    out << R"({"mode":"supervised","model":"patlak","epochs":1,"steps_per_epoch":2,
"batch_size":2,"patch":24,"base_channels":8,"cp_hidden_units":8,"disc_base_filters":4,
"lr":1e-4,"seed":9})";
}

}  // namespace

TEST_CASE("criterion 9: command-level determinism") {
    Gate gate(9, "determinism");
    fs::path dir = fresh_dir("c9");
    write_cli_phantom_config(dir / "phantom.json");
    write_cli_train_config(dir / "train.json");
    const std::string cfg = (dir / "phantom.json").string();

    bool sim_ok = run_cli("simulate --config " + cfg + " --out " + (dir / "a").string(),
                          (dir / "a.log").string()) == 0 &&
                  run_cli("simulate --config " + cfg + " --out " + (dir / "b").string(),
                          (dir / "b.log").string()) == 0;
    for (const char* f : {"series.dcev", "pk.dcev", "t1.dcev", "s0.dcev", "mask.dcev",
                          "labels.dcev", "aif.csv"})
        sim_ok = sim_ok && read_file(dir / "a" / f) == read_file(dir / "b" / f);
    gate.check(sim_ok, "two simulate runs with the same seed are byte-identical");

    bool train_ok = true;
    for (const char* run : {"t1", "t2"})
        train_ok = train_ok &&
                   run_cli("train --config " + (dir / "train.json").string() + " --data " +
                               (dir / "a").string() + " --out " + (dir / run).string(),
                           (dir / (std::string(run) + ".log")).string()) == 0;
    train_ok = train_ok &&
               read_file(dir / "t1" / "checkpoint_final.bin") ==
                   read_file(dir / "t2" / "checkpoint_final.bin") &&
               read_file(dir / "t1" / "loss_history.csv") ==
                   read_file(dir / "t2" / "loss_history.csv");
    gate.check(train_ok, "two train runs with the same seed are byte-identical");
}

TEST_CASE("criterion 10: end-to-end pipeline") {
    Gate gate(10, "end-to-end pipeline");
    fs::path dir = fresh_dir("c10");
    write_cli_phantom_config(dir / "phantom.json");
    write_cli_train_config(dir / "train.json");
    const std::string sim = (dir / "sim").string();

    bool chain = run_cli("simulate --config " + (dir / "phantom.json").string() + " --out " + sim,
                         (dir / "sim.log").string()) == 0;
    chain = chain && run_cli("fit --method lls --model patlak --series " + sim +
                                 "/series.dcev --aif " + sim + "/aif.csv --t1 " + sim +
                                 "/t1.dcev --s0 " + sim + "/s0.dcev --mask " + sim +
                                 "/mask.dcev --out " + (dir / "fit").string(),
                             (dir / "fit.log").string()) == 0;
    chain = chain && run_cli("evaluate --pred " + (dir / "fit").string() +
                                 "/pk.dcev --reference " + sim + "/pk.dcev --mask " + sim +
                                 "/mask.dcev --out " + (dir / "metrics.csv").string(),
                             (dir / "eval.log").string()) == 0;
    gate.check(chain, "simulate -> fit(LLS) -> evaluate all exit 0");

    int inf_rows = 0, ssim_rows = 0;
    bool ssim_ok = true;
    if (chain) {
        std::ifstream csv(dir / "metrics.csv");
        std::string line;
        std::getline(csv, line);  // header
        while (std::getline(csv, line)) {
            std::istringstream ls(line);
            std::string param, metric, value;
            std::getline(ls, param, ',');
            std::getline(ls, metric, ',');
            std::getline(ls, value, ',');
            if (metric == "psnr" && value == "inf") ++inf_rows;
            if (metric == "ssim") {
                ++ssim_rows;
                ssim_ok = ssim_ok && std::abs(std::stod(value) - 1.0) <= 1e-9;
            }
        }
    }
    gate.check(inf_rows == 2, "noiseless PSNR reports the infinity sentinel per parameter");
    gate.check(ssim_rows == 2 && ssim_ok, "noiseless SSIM = 1.0 within 1e-9 per parameter");

    bool learn = run_cli("train --config " + (dir / "train.json").string() + " --data " + sim +
                             " --out " + (dir / "run").string(),
                         (dir / "train.log").string()) == 0;
    learn = learn && run_cli("infer --checkpoint " + (dir / "run").string() +
                                 "/checkpoint_final.bin --series " + sim +
                                 "/series.dcev --mask " + sim + "/mask.dcev --out " +
                                 (dir / "inf").string(),
                             (dir / "infer.log").string()) == 0;
    learn = learn && run_cli("evaluate --pred " + (dir / "inf").string() +
                                 "/pk.dcev --reference " + sim + "/pk.dcev --mask " + sim +
                                 "/mask.dcev --out " + (dir / "metrics2.csv").string(),
                             (dir / "eval2.log").string()) == 0;
    gate.check(learn, "simulate -> train -> infer -> evaluate all exit 0");
}
