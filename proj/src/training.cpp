#include "dce/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace dce {

using nn::Tensor;

const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::CycleGAN: return "cyclegan";
        case TrainMode::Supervised: return "supervised";
        case TrainMode::SupervisedPhysics: return "supervised_physics";
    }
    return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "cyclegan") return TrainMode::CycleGAN;
    if (s == "supervised") return TrainMode::Supervised;
    if (s == "supervised_physics") return TrainMode::SupervisedPhysics;
    throw ConfigError("unknown training mode: " + s);
}

void TrainConfig::validate() const {
    if (!(gamma > 0 && rho > 0 && alpha > 0 && beta > 0))
        throw ConfigError("train: loss weights must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (patch < 17) throw ConfigError("train: patch below the network receptive-field minimum");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (steps_per_epoch < 1) throw ConfigError("train: steps_per_epoch must be >= 1");
    if (!(lr > 0)) throw ConfigError("train: lr must be positive");
    if (!(signal_scale > 0)) throw ConfigError("train: signal_scale must be positive");
    if (!(cp_scale > 0)) throw ConfigError("train: cp_scale must be positive");
    if (base_channels < 1 || cp_hidden_units < 1 || disc_base_filters < 1)
        throw ConfigError("train: network widths must be positive");
    const size_t np = model == TkModel::ETofts ? 3 : 2;
    if (!scale_factors.empty() && scale_factors.size() != np)
        throw ConfigError("train: scale_factors count does not match the TK model");
    for (double s : scale_factors)
        if (!(s > 0)) throw ConfigError("train: scale factors must be positive");
    if (checkpoint_every_epochs < 0) throw ConfigError("train: checkpoint cadence must be >= 0");
}

std::vector<double> TrainConfig::scales() const {
    return scale_factors.empty() ? pk_scale_factors(model) : scale_factors;
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
    j = nlohmann::json{{"mode", to_string(cfg.mode)},
                       {"model", to_string(cfg.model)},
                       {"gamma", cfg.gamma},
                       {"rho", cfg.rho},
                       {"alpha", cfg.alpha},
                       {"beta", cfg.beta},
                       {"batch_size", cfg.batch_size},
                       {"patch", cfg.patch},
                       {"epochs", cfg.epochs},
                       {"steps_per_epoch", cfg.steps_per_epoch},
                       {"lr", cfg.lr},
                       {"lr_decay_start", cfg.lr_decay_start},
                       {"seed", cfg.seed},
                       {"scale_factors", cfg.scales()},
                       {"signal_scale", cfg.signal_scale},
                       {"cp_scale", cfg.cp_scale},
                       {"base_channels", cfg.base_channels},
                       {"cp_hidden_units", cfg.cp_hidden_units},
                       {"disc_base_filters", cfg.disc_base_filters},
                       {"checkpoint_every_epochs", cfg.checkpoint_every_epochs},
                       {"out_dir", cfg.out_dir},
                       {"resume_from", cfg.resume_from}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
    TrainConfig d;
    cfg.mode = train_mode_from_string(j.value("mode", std::string(to_string(d.mode))));
    cfg.model = tk_model_from_string(j.value("model", std::string(to_string(d.model))));
    cfg.gamma = j.value("gamma", d.gamma);
    cfg.rho = j.value("rho", d.rho);
    cfg.alpha = j.value("alpha", d.alpha);
    cfg.beta = j.value("beta", d.beta);
    cfg.batch_size = j.value("batch_size", d.batch_size);
    cfg.patch = j.value("patch", d.patch);
    cfg.epochs = j.value("epochs", d.epochs);
    cfg.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
    cfg.lr = j.value("lr", d.lr);
    cfg.lr_decay_start = j.value("lr_decay_start", d.lr_decay_start);
    cfg.seed = j.value("seed", d.seed);
    cfg.scale_factors = j.value("scale_factors", d.scale_factors);
    cfg.signal_scale = j.value("signal_scale", d.signal_scale);
    cfg.cp_scale = j.value("cp_scale", d.cp_scale);
    cfg.base_channels = j.value("base_channels", d.base_channels);
    cfg.cp_hidden_units = j.value("cp_hidden_units", d.cp_hidden_units);
    cfg.disc_base_filters = j.value("disc_base_filters", d.disc_base_filters);
    cfg.checkpoint_every_epochs = j.value("checkpoint_every_epochs", d.checkpoint_every_epochs);
    cfg.out_dir = j.value("out_dir", d.out_dir);
    cfg.resume_from = j.value("resume_from", d.resume_from);
}

void Subject::validate() const {
    series.validate();
    aux.validate();
    pk.validate();
    cp.validate();
    if (!aux.dims_match(series.width, series.height) || pk.width != series.width ||
        pk.height != series.height)
        throw ShapeMismatch("subject: raster dimensions disagree");
    if (cp.n() != static_cast<size_t>(series.acq.n_frames))
        throw ShapeMismatch("subject: plasma curve length != n_frames");
}

namespace {

constexpr double kVeMin = 1e-6;

struct MaskIntegral {
    int w = 0, h = 0;
    std::vector<int> sums;  // (h+1)*(w+1) inclusive prefix sums

    explicit MaskIntegral(const RasterB& m) : w(m.width), h(m.height), sums((w + 1) * (h + 1), 0) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                sums[(y + 1) * (w + 1) + x + 1] = (m.at(x, y) ? 1 : 0) +
                                                  sums[y * (w + 1) + x + 1] +
                                                  sums[(y + 1) * (w + 1) + x] -
                                                  sums[y * (w + 1) + x];
    }
    int count(int x0, int y0, int p) const {
        return sums[(y0 + p) * (w + 1) + x0 + p] - sums[y0 * (w + 1) + x0 + p] -
               sums[(y0 + p) * (w + 1) + x0] + sums[y0 * (w + 1) + x0];
    }
};

struct CropDraw {
    int subject = 0, x0 = 0, y0 = 0;
    bool flip_h = false, flip_v = false;
};

CropDraw draw_crop(const TrainDataset& dataset, const std::vector<MaskIntegral>& integrals,
                   int patch, std::mt19937_64& rng) {
    CropDraw d;
    std::uniform_int_distribution<int> pick(0, static_cast<int>(dataset.size()) - 1);
    d.subject = pick(rng);
    const Subject& subj = dataset[d.subject];
    std::uniform_int_distribution<int> dx(0, subj.series.width - patch);
    std::uniform_int_distribution<int> dy(0, subj.series.height - patch);
    // keep crops on tissue where possible: best mask coverage over 50 tries,
    // stopping early at >= 50% covered
    int best = -1;
    for (int tries = 0; tries < 50; ++tries) {
        const int x = dx(rng), y = dy(rng);
        const int c = integrals[d.subject].count(x, y, patch);
        if (c > best) {
            best = c;
            d.x0 = x;
            d.y0 = y;
        }
        if (2 * best >= patch * patch) break;
    }
    std::bernoulli_distribution coin(0.5);
    d.flip_h = coin(rng);
    d.flip_v = coin(rng);
    return d;
}

// crop with the draw's spatial transform applied
template <typename Getter>
void fill_crop(double* dst, const CropDraw& d, int patch, Getter&& get) {
    for (int y = 0; y < patch; ++y) {
        const int sy = d.flip_v ? d.y0 + patch - 1 - y : d.y0 + y;
        for (int x = 0; x < patch; ++x) {
            const int sx = d.flip_h ? d.x0 + patch - 1 - x : d.x0 + x;
            dst[y * patch + x] = get(sx, sy);
        }
    }
}

Tensor mean_l1(const Tensor& a, const Tensor& b) { return nn::mean(nn::abs(nn::sub(a, b))); }

}  // namespace

UnpairedBatch sample_patches(const TrainDataset& dataset, const TrainConfig& cfg,
                             std::mt19937_64& rng, bool paired) {
    if (dataset.empty()) throw DatasetTooSmall("sample_patches: empty dataset");
    const int p = cfg.patch;
    const int F = dataset[0].series.acq.n_frames;
    for (const Subject& s : dataset) {
        if (s.series.width < p || s.series.height < p)
            throw DatasetTooSmall("sample_patches: subject smaller than patch size");
        if (s.series.acq.n_frames != F)
            throw ShapeMismatch("sample_patches: subjects disagree on frame count");
    }
    std::vector<MaskIntegral> integrals;
    integrals.reserve(dataset.size());
    for (const Subject& s : dataset) integrals.emplace_back(s.aux.mask);

    const int B = cfg.batch_size;
    const std::vector<double> scales = cfg.scales();
    const int out_pk = static_cast<int>(scales.size());
    const size_t plane = static_cast<size_t>(p) * p;

    std::vector<CropDraw> s_draws(B), p_draws(B);
    for (int b = 0; b < B; ++b) s_draws[b] = draw_crop(dataset, integrals, p, rng);
    if (paired)
        p_draws = s_draws;
    else
        for (int b = 0; b < B; ++b) p_draws[b] = draw_crop(dataset, integrals, p, rng);

    UnpairedBatch batch;
    std::vector<double> s_sig(static_cast<size_t>(B) * F * plane);
    batch.s_s0.resize(static_cast<size_t>(B) * plane);
    batch.s_t1.resize(static_cast<size_t>(B) * plane);
    std::vector<double> p_pk(static_cast<size_t>(B) * out_pk * plane);
    std::vector<double> p_cp(static_cast<size_t>(B) * F);
    batch.p_s0.resize(static_cast<size_t>(B) * plane);
    batch.p_t1.resize(static_cast<size_t>(B) * plane);

    for (int b = 0; b < B; ++b) {
        const CropDraw& ds = s_draws[b];
        const Subject& ss = dataset[ds.subject];
        for (int f = 0; f < F; ++f)
            fill_crop(&s_sig[(static_cast<size_t>(b) * F + f) * plane], ds, p,
                      [&](int x, int y) { return ss.series.at(f, x, y) / cfg.signal_scale; });
        fill_crop(&batch.s_s0[b * plane], ds, p, [&](int x, int y) { return ss.aux.s0.at(x, y); });
        fill_crop(&batch.s_t1[b * plane], ds, p,
                  [&](int x, int y) { return ss.aux.t1_seconds.at(x, y); });

        const CropDraw& dp = p_draws[b];
        const Subject& sp = dataset[dp.subject];
        fill_crop(&p_pk[(static_cast<size_t>(b) * out_pk + 0) * plane], dp, p,
                  [&](int x, int y) { return sp.pk.ktrans_per_min.at(x, y) * scales[0]; });
        fill_crop(&p_pk[(static_cast<size_t>(b) * out_pk + 1) * plane], dp, p,
                  [&](int x, int y) { return sp.pk.vp.at(x, y) * scales[1]; });
        if (out_pk == 3)
            fill_crop(&p_pk[(static_cast<size_t>(b) * out_pk + 2) * plane], dp, p,
                      [&](int x, int y) { return sp.pk.ve->at(x, y) * scales[2]; });
        for (int f = 0; f < F; ++f) p_cp[b * F + f] = sp.cp.values_mM[f] * cfg.cp_scale;
        fill_crop(&batch.p_s0[b * plane], dp, p, [&](int x, int y) { return sp.aux.s0.at(x, y); });
        fill_crop(&batch.p_t1[b * plane], dp, p,
                  [&](int x, int y) { return sp.aux.t1_seconds.at(x, y); });
    }

    batch.s_signal = Tensor::from_data({B, F, p, p}, std::move(s_sig));
    batch.p_pk = Tensor::from_data({B, out_pk, p, p}, std::move(p_pk));
    batch.p_cp = Tensor::from_data({B, F}, std::move(p_cp));
    return batch;
}

namespace {

// Everything the tracer-kinetic layer needs per evaluation, captured by value
// for the backward closure.
struct TkContext {
    std::vector<double> s0, t1;
    std::vector<double> t;  // time grid, seconds
    std::vector<double> scales;
    double signal_scale = 1, cp_scale = 1;
    TkModel model = TkModel::Patlak;
    int B = 0, C = 0, F = 0, P = 0;  // P = patch side

    size_t plane() const { return static_cast<size_t>(P) * P; }

    // clamp helpers returning the in-range flag for the zero-outside gradient
    static double clamp_flag(double x, double lo, double hi, bool& in) {
        in = x > lo && x < hi;
        return std::clamp(x, lo, hi);
    }
};

}  // namespace

Tensor tk_signal(const Tensor& pk_scaled, const Tensor& cp_scaled, const std::vector<double>& s0,
                 const std::vector<double>& t1, const AcqParams& acq, const TrainConfig& cfg) {
    if (pk_scaled.shape().size() != 4)
        throw ShapeMismatch("tk_signal: pk must be [batch, params, p, p]");
    if (cp_scaled.shape().size() != 2)
        throw ShapeMismatch("tk_signal: cp must be [batch, frames]");
    auto ctx = std::make_shared<TkContext>();
    ctx->B = pk_scaled.shape()[0];
    ctx->C = pk_scaled.shape()[1];
    ctx->P = pk_scaled.shape()[2];
    ctx->F = cp_scaled.shape()[1];
    ctx->model = cfg.model;
    ctx->scales = cfg.scales();
    ctx->signal_scale = cfg.signal_scale;
    ctx->cp_scale = cfg.cp_scale;
    if (pk_scaled.shape()[3] != ctx->P) throw ShapeMismatch("tk_signal: patches must be square");
    if (ctx->C != static_cast<int>(ctx->scales.size()))
        throw ShapeMismatch("tk_signal: pk channel count does not match the TK model");
    if (cp_scaled.shape()[0] != ctx->B) throw ShapeMismatch("tk_signal: batch sizes disagree");
    if (acq.n_frames != ctx->F) throw ShapeMismatch("tk_signal: frame count != acq.n_frames");
    if (s0.size() != static_cast<size_t>(ctx->B) * ctx->plane() || s0.size() != t1.size())
        throw ShapeMismatch("tk_signal: s0/t1 crop sizes disagree with the batch");
    ctx->s0 = s0;
    ctx->t1 = t1;
    ctx->t = acq.time_grid();
    const AcqParams acq_copy = acq;

    const int B = ctx->B, F = ctx->F;
    const size_t plane = ctx->plane();

    // per-sample clamped plasma curves in mM (and their Patlak integrals)
    auto cp_mM = std::make_shared<std::vector<std::vector<double>>>(B);
    auto cp_int = std::make_shared<std::vector<std::vector<double>>>(B);
    for (int b = 0; b < B; ++b) {
        std::vector<double> c(F);
        for (int f = 0; f < F; ++f) c[f] = std::max(cp_scaled.data()[b * F + f], 0.0) / ctx->cp_scale;
        if (ctx->model == TkModel::Patlak) (*cp_int)[b] = cumtrapz(ctx->t, c);
        (*cp_mM)[b] = std::move(c);
    }

    // shared per-voxel evaluation used by both passes
    auto eval_voxel = [ctx, cp_mM, cp_int, acq_copy](const std::vector<double>& pk_data, int b,
                                                     size_t v, std::vector<double>& ct,
                                                     std::vector<double>* conv,
                                                     std::vector<double>* d_dkep, double* kt_s_out,
                                                     double* vp_out, double* ve_out, bool* in_kt,
                                                     bool* in_vp, bool* in_ve) {
        const size_t plane = ctx->plane();
        const size_t base = static_cast<size_t>(b) * ctx->C * plane + v;
        bool ik, iv, ie = false;
        const double kt_min =
            TkContext::clamp_flag(pk_data[base] / ctx->scales[0], 0.0, 1.0, ik);
        const double vp =
            TkContext::clamp_flag(pk_data[base + plane] / ctx->scales[1], 0.0, 1.0, iv);
        const double kt_s = kt_min / kSecondsPerMinute;
        double ve = 1.0;
        if (ctx->model == TkModel::ETofts)
            ve = TkContext::clamp_flag(pk_data[base + 2 * plane] / ctx->scales[2], kVeMin, 1.0, ie);
        const std::vector<double>& cp = (*cp_mM)[b];
        ct.resize(ctx->F);
        if (ctx->model == TkModel::Patlak) {
            const std::vector<double>& icp = (*cp_int)[b];
            for (int f = 0; f < ctx->F; ++f) ct[f] = vp * cp[f] + kt_s * icp[f];
        } else {
            const double kep = kt_s / ve;
            std::vector<double> local = exp_conv(ctx->t, cp, kep, d_dkep);
            for (int f = 0; f < ctx->F; ++f) ct[f] = vp * cp[f] + kt_s * local[f];
            if (conv) *conv = std::move(local);
        }
        if (kt_s_out) *kt_s_out = kt_s;
        if (vp_out) *vp_out = vp;
        if (ve_out) *ve_out = ve;
        if (in_kt) *in_kt = ik;
        if (in_vp) *in_vp = iv;
        if (in_ve) *in_ve = ie;
    };

    Tensor out = nn::make_op(
        {B, F, ctx->P, ctx->P}, {pk_scaled, cp_scaled},
        [ctx, cp_mM, cp_int, acq_copy, eval_voxel](nn::detail::Node& self) {
            auto& pk_node = *self.parents[0];
            auto& cp_node = *self.parents[1];
            const int B = ctx->B, F = ctx->F;
            const size_t plane = ctx->plane();
            if (pk_node.requires_grad) pk_node.ensure_grad();
            if (cp_node.requires_grad) cp_node.ensure_grad();
            // fixed chunking keeps the plasma-curve reduction order independent
            // of the thread count
            constexpr int kChunks = 8;
            const size_t chunk_len = (plane + kChunks - 1) / kChunks;
            std::vector<std::vector<double>> cp_grad_mM(
                static_cast<size_t>(B) * kChunks, std::vector<double>(F, 0.0));
#pragma omp parallel for collapse(2) schedule(static)
            for (int b = 0; b < B; ++b) {
                for (int chunk = 0; chunk < kChunks; ++chunk) {
                    std::vector<double> ct, conv, d_dkep, lam(F), w_suffix(F);
                    std::vector<double>& gcp = cp_grad_mM[b * kChunks + chunk];
                    const size_t v0 = chunk * chunk_len;
                    const size_t v1 = std::min(plane, v0 + chunk_len);
                    for (size_t v = v0; v < v1; ++v) {
                        double kt_s, vp, ve;
                        bool in_kt, in_vp, in_ve;
                        eval_voxel(pk_node.value, b, v, ct,
                                   ctx->model == TkModel::ETofts ? &conv : nullptr,
                                   ctx->model == TkModel::ETofts ? &d_dkep : nullptr, &kt_s, &vp,
                                   &ve, &in_kt, &in_vp, &in_ve);
                        const size_t bv = static_cast<size_t>(b) * plane + v;
                        const SpgrParams sp(ctx->s0[bv], ctx->t1[bv], acq_copy);
                        for (int f = 0; f < F; ++f)
                            lam[f] = self.grad[(static_cast<size_t>(b) * F + f) * plane + v] *
                                     spgr_signal_deriv(ct[f], sp) / ctx->signal_scale;
                        const std::vector<double>& cp = (*cp_mM)[b];
                        double g_kt_s = 0, g_vp = 0, g_ve = 0;
                        if (ctx->model == TkModel::Patlak) {
                            const std::vector<double>& icp = (*cp_int)[b];
                            for (int f = 0; f < F; ++f) {
                                g_kt_s += lam[f] * icp[f];
                                g_vp += lam[f] * cp[f];
                            }
                            // adjoint of the running trapezoid integral
                            double suffix = 0;
                            for (int f = F - 1; f >= 0; --f) {
                                suffix += lam[f] * kt_s;
                                w_suffix[f] = suffix;
                            }
                            for (int f = 1; f < F; ++f) {
                                const double half_h = 0.5 * (ctx->t[f] - ctx->t[f - 1]);
                                gcp[f - 1] += half_h * w_suffix[f];
                                gcp[f] += half_h * w_suffix[f];
                            }
                            for (int f = 0; f < F; ++f) gcp[f] += lam[f] * vp;
                        } else {
                            const double kep = kt_s / ve;
                            for (int f = 0; f < F; ++f) {
                                g_kt_s += lam[f] * (conv[f] + kt_s * d_dkep[f] / ve);
                                g_ve += lam[f] * kt_s * d_dkep[f] * (-kt_s / (ve * ve));
                                g_vp += lam[f] * cp[f];
                                w_suffix[f] = lam[f] * kt_s;  // cotangent on conv
                            }
                            const std::vector<double> gc = exp_conv_adjoint(ctx->t, kep, w_suffix);
                            for (int f = 0; f < F; ++f) gcp[f] += gc[f] + lam[f] * vp;
                        }
                        if (pk_node.requires_grad) {
                            const size_t base = static_cast<size_t>(b) * ctx->C * plane + v;
                            if (in_kt)
                                pk_node.grad[base] +=
                                    g_kt_s / kSecondsPerMinute / ctx->scales[0];
                            if (in_vp) pk_node.grad[base + plane] += g_vp / ctx->scales[1];
                            if (ctx->model == TkModel::ETofts && in_ve)
                                pk_node.grad[base + 2 * plane] += g_ve / ctx->scales[2];
                        }
                    }
                }
            }
            if (cp_node.requires_grad) {
                for (int b = 0; b < B; ++b)
                    for (int chunk = 0; chunk < kChunks; ++chunk)
                        for (int f = 0; f < F; ++f) {
                            if (cp_node.value[b * F + f] <= 0) continue;  // clamped at zero
                            cp_node.grad[b * F + f] +=
                                cp_grad_mM[b * kChunks + chunk][f] / ctx->cp_scale;
                        }
            }
        });

    std::vector<double>& out_v = out.data();
    const std::vector<double>& pk_data = pk_scaled.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (size_t v = 0; v < plane; ++v) {
            std::vector<double> ct;
            eval_voxel(pk_data, b, v, ct, nullptr, nullptr, nullptr, nullptr, nullptr, nullptr,
                       nullptr, nullptr);
            const size_t bv = static_cast<size_t>(b) * plane + v;
            const SpgrParams sp(s0[bv], t1[bv], acq_copy);
            for (int f = 0; f < F; ++f)
                out_v[(static_cast<size_t>(b) * F + f) * plane + v] =
                    spgr_signal(ct[f], sp) / ctx->signal_scale;
        }
    }
    return out;
}

Tensor cycle_loss(const Tensor& p, const Tensor& p_cycled, const Tensor& s, const Tensor& s_cycled,
                  const Tensor& cp, const Tensor& cp_cycled, double rho) {
    return nn::add(nn::add(mean_l1(p, p_cycled), mean_l1(s, s_cycled)),
                   nn::scale(mean_l1(cp, cp_cycled), rho));
}

LsganLosses lsgan_losses(const Tensor& d_real, const Tensor& d_fake) {
    LsganLosses out;
    out.disc_loss = nn::add(nn::scale(nn::mean(nn::square(nn::add_scalar(d_real, -1.0))), 0.5),
                            nn::scale(nn::mean(nn::square(d_fake)), 0.5));
    out.gen_loss = nn::scale(nn::mean(nn::square(nn::add_scalar(d_fake, -1.0))), 0.5);
    return out;
}

Tensor supervised_loss(const Tensor& pk_pred, const Tensor& pk_label, double alpha) {
    return nn::scale(mean_l1(pk_pred, pk_label), alpha);
}

Tensor physics_loss(const Tensor& s_input, const Tensor& s_reconstructed, double beta) {
    return nn::scale(mean_l1(s_input, s_reconstructed), beta);
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& history) {
    std::ofstream out(path);
    if (!out) throw IoError("loss csv: cannot open for writing: " + path);
    out << "step,epoch,total,cycle_s,cycle_p,cycle_cp,gen_gan,disc,supervised,physics,lr\n";
    out.precision(17);
    for (const LossRow& r : history)
        out << r.step << ',' << r.epoch << ',' << r.total << ',' << r.cycle_s << ',' << r.cycle_p
            << ',' << r.cycle_cp << ',' << r.gen_gan << ',' << r.disc << ',' << r.supervised << ','
            << r.physics << ',' << r.lr << '\n';
    if (!out) throw IoError("loss csv: write failed: " + path);
}

namespace {

void require_same_acq(const AcqParams& a, const AcqParams& b) {
    if (a.tr_seconds != b.tr_seconds || a.flip_angle_radians != b.flip_angle_radians ||
        a.r1_per_mM_per_second != b.r1_per_mM_per_second ||
        a.frame_interval_seconds != b.frame_interval_seconds || a.n_frames != b.n_frames)
        throw ConfigError("train: subjects disagree on acquisition parameters");
}

double scalar(const Tensor& t) { return t.data()[0]; }

}  // namespace

TrainResult train(const TrainConfig& cfg, const TrainDataset& dataset) {
    cfg.validate();
    if (dataset.empty()) throw DatasetTooSmall("train: empty dataset");
    for (const Subject& s : dataset) {
        s.validate();
        require_same_acq(dataset[0].series.acq, s.series.acq);
        if (s.pk.model != cfg.model) throw ConfigError("train: subject PK model != config model");
    }
    const AcqParams acq = dataset[0].series.acq;
    const int out_pk = cfg.model == TkModel::ETofts ? 3 : 2;

    GeneratorSpec gspec;
    gspec.in_channels = acq.n_frames;
    gspec.base_channels = cfg.base_channels;
    gspec.out_pk_channels = out_pk;
    gspec.cp_hidden_units = cfg.cp_hidden_units;
    if (cfg.patch < gspec.min_patch())
        throw ConfigError("train: patch below the generator receptive-field minimum");
    Generator gen(gspec, cfg.seed);
    DiscriminatorSpec dspec;
    dspec.in_channels = out_pk;
    dspec.base_filters = cfg.disc_base_filters;
    Discriminator disc(dspec, cfg.seed + 1);

    nn::AdamConfig adam;
    adam.lr = cfg.lr;
    nn::Adam opt_g(gen.parameters(), adam);
    nn::Adam opt_d(disc.parameters(), adam);

    std::filesystem::create_directories(cfg.out_dir);
    auto append_moments = [](const std::string& prefix, const nn::Adam& opt,
                             std::vector<std::string>& names, std::vector<Tensor>& params) {
        for (size_t k = 0; k < opt.first_moments().size(); ++k) {
            names.push_back(prefix + ".m" + std::to_string(k));
            params.push_back(Tensor::from_data(
                {static_cast<int>(opt.first_moments()[k].size())}, opt.first_moments()[k]));
            names.push_back(prefix + ".v" + std::to_string(k));
            params.push_back(Tensor::from_data(
                {static_cast<int>(opt.second_moments()[k].size())}, opt.second_moments()[k]));
        }
    };
    auto save_all = [&](const std::string& fname, int epoch, int step, std::mt19937_64& rng) {
        nlohmann::json manifest;
        // Output plumbing is per-invocation, not part of the trained state;
        // normalizing it keeps checkpoints byte-identical across out dirs.
        TrainConfig stored = cfg;
        stored.out_dir = "";
        stored.resume_from = "";
        manifest["config"] = stored;
        manifest["n_frames"] = acq.n_frames;
        manifest["acq"] = {{"tr_seconds", acq.tr_seconds},
                           {"flip_angle_radians", acq.flip_angle_radians},
                           {"r1_per_mM_per_second", acq.r1_per_mM_per_second},
                           {"frame_interval_seconds", acq.frame_interval_seconds},
                           {"n_frames", acq.n_frames},
                           {"bolus_arrival_frame", acq.bolus_arrival_frame}};
        std::ostringstream rng_state;
        rng_state << rng;
        manifest["trainer"] = {{"epoch", epoch},
                               {"step", step},
                               {"rng", rng_state.str()},
                               {"optg_steps", opt_g.step_count()},
                               {"optd_steps", opt_d.step_count()}};
        std::vector<std::string> names;
        std::vector<Tensor> params;
        for (size_t i = 0; i < gen.parameters().size(); ++i) {
            names.push_back("gen." + gen.parameter_names()[i]);
            params.push_back(gen.parameters()[i]);
        }
        append_moments("optg", opt_g, names, params);
        if (cfg.mode == TrainMode::CycleGAN) {
            for (size_t i = 0; i < disc.parameters().size(); ++i) {
                names.push_back("disc." + disc.parameter_names()[i]);
                params.push_back(disc.parameters()[i]);
            }
            append_moments("optd", opt_d, names, params);
        }
        const std::string path = cfg.out_dir + "/" + fname;
        save_checkpoint(path, manifest, names, params);
        return path;
    };
    auto restore_moments = [](const Checkpoint& ckpt, const std::string& prefix, nn::Adam& opt,
                              int steps) {
        std::vector<std::vector<double>> m, v;
        for (size_t k = 0; k < opt.first_moments().size(); ++k) {
            for (const char* kind : {"m", "v"}) {
                const std::string name = prefix + "." + kind + std::to_string(k);
                auto it = std::find_if(ckpt.arrays.begin(), ckpt.arrays.end(),
                                       [&](const auto& kv) { return kv.first == name; });
                if (it == ckpt.arrays.end())
                    throw IoError("train: checkpoint misses optimizer state " + name);
                (*kind == 'm' ? m : v).push_back(it->second);
            }
        }
        opt.restore(steps, std::move(m), std::move(v));
    };

    TrainResult result;
    int step = 0;
    int start_epoch = 1;
    std::mt19937_64 rng(cfg.seed ^ 0xa5a5a5a55a5a5a5aULL);
    if (!cfg.resume_from.empty()) {
        Checkpoint ckpt = load_checkpoint(cfg.resume_from);
        // the resumed run must describe the same experiment; only output
        // plumbing may differ
        nlohmann::json stored = ckpt.manifest.at("config");
        nlohmann::json current = cfg;
        for (const char* k : {"out_dir", "resume_from", "checkpoint_every_epochs"}) {
            stored.erase(k);
            current.erase(k);
        }
        if (stored != current)
            throw ConfigError("train: resume checkpoint was produced by a different config");
        restore_parameters(ckpt, "gen.", gen.parameter_names(), gen.parameters());
        restore_moments(ckpt, "optg", opt_g, ckpt.manifest["trainer"]["optg_steps"].get<int>());
        if (cfg.mode == TrainMode::CycleGAN) {
            restore_parameters(ckpt, "disc.", disc.parameter_names(), disc.parameters());
            restore_moments(ckpt, "optd", opt_d,
                            ckpt.manifest["trainer"]["optd_steps"].get<int>());
        }
        std::istringstream rng_state(ckpt.manifest["trainer"]["rng"].get<std::string>());
        rng_state >> rng;
        if (!rng_state) throw IoError("train: malformed RNG state in resume checkpoint");
        start_epoch = ckpt.manifest["trainer"]["epoch"].get<int>() + 1;
        step = ckpt.manifest["trainer"]["step"].get<int>();
    }
    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        const double lr_e = nn::lr_linear_decay(cfg.lr, epoch - 1, cfg.epochs, cfg.decay_start());
        opt_g.set_lr(lr_e);
        opt_d.set_lr(lr_e);
        for (int s = 0; s < cfg.steps_per_epoch; ++s) {
            ++step;
            LossRow row;
            row.step = step;
            row.epoch = epoch;
            row.lr = lr_e;
            if (cfg.mode == TrainMode::CycleGAN) {
                UnpairedBatch batch = sample_patches(dataset, cfg, rng, false);
                // generator update
                Generator::Output out_s = gen.forward(batch.s_signal);
                Tensor s_recon =
                    tk_signal(out_s.pk, out_s.cp, batch.s_s0, batch.s_t1, acq, cfg);
                Tensor p_signal =
                    tk_signal(batch.p_pk, batch.p_cp, batch.p_s0, batch.p_t1, acq, cfg);
                Generator::Output out_p = gen.forward(p_signal);
                Tensor cyc_s = mean_l1(batch.s_signal, s_recon);
                Tensor cyc_p = mean_l1(batch.p_pk, out_p.pk);
                Tensor cyc_cp = mean_l1(batch.p_cp, out_p.cp);
                Tensor cyc = nn::add(nn::add(cyc_p, cyc_s), nn::scale(cyc_cp, cfg.rho));
                Tensor d_fake = disc.forward(out_s.pk);
                Tensor gen_gan = nn::scale(nn::mean(nn::square(nn::add_scalar(d_fake, -1.0))), 0.5);
                Tensor total_g = nn::add(nn::scale(cyc, cfg.gamma), gen_gan);
                row.cycle_s = scalar(cyc_s);
                row.cycle_p = scalar(cyc_p);
                row.cycle_cp = scalar(cyc_cp);
                row.gen_gan = scalar(gen_gan);
                row.total = scalar(total_g);
                if (!std::isfinite(row.total))
                    throw NonFiniteLoss("train: non-finite generator loss at step " +
                                            std::to_string(step),
                                        step);
                opt_g.zero_grad();
                opt_d.zero_grad();
                total_g.backward();
                opt_g.step();
                // discriminator update on detached fakes
                Tensor fake_detached = Tensor::from_data(out_s.pk.shape(), out_s.pk.data());
                Tensor d_real = disc.forward(batch.p_pk);
                Tensor d_fake2 = disc.forward(fake_detached);
                LsganLosses gan = lsgan_losses(d_real, d_fake2);
                row.disc = scalar(gan.disc_loss);
                if (!std::isfinite(row.disc))
                    throw NonFiniteLoss("train: non-finite discriminator loss at step " +
                                            std::to_string(step),
                                        step);
                opt_d.zero_grad();
                gan.disc_loss.backward();
                opt_d.step();
            } else {
                UnpairedBatch batch = sample_patches(dataset, cfg, rng, true);
                Generator::Output out = gen.forward(batch.s_signal);
                Tensor sup = supervised_loss(out.pk, batch.p_pk, cfg.alpha);
                Tensor total = sup;
                row.supervised = scalar(sup);
                if (cfg.mode == TrainMode::SupervisedPhysics) {
                    Tensor recon =
                        tk_signal(out.pk, out.cp, batch.s_s0, batch.s_t1, acq, cfg);
                    Tensor phys = physics_loss(batch.s_signal, recon, cfg.beta);
                    row.physics = scalar(phys);
                    total = nn::add(sup, phys);
                }
                row.total = scalar(total);
                if (!std::isfinite(row.total))
                    throw NonFiniteLoss(
                        "train: non-finite loss at step " + std::to_string(step), step);
                opt_g.zero_grad();
                total.backward();
                opt_g.step();
            }
            result.history.push_back(row);
        }
        if (cfg.checkpoint_every_epochs > 0 && epoch % cfg.checkpoint_every_epochs == 0)
            save_all("checkpoint_epoch_" + std::to_string(epoch) + ".bin", epoch, step, rng);
    }
    result.final_checkpoint = save_all("checkpoint_final.bin", cfg.epochs, step, rng);
    result.loss_csv = cfg.out_dir + "/loss_history.csv";
    write_loss_csv(result.loss_csv, result.history);
    return result;
}

InferResult infer(const Checkpoint& ckpt, const DceSeries& series, const RasterB* mask) {
    if (!ckpt.manifest.contains("config"))
        throw IoError("infer: checkpoint manifest has no training config");
    const TrainConfig cfg = ckpt.manifest["config"].get<TrainConfig>();
    const int F = ckpt.manifest.value("n_frames", 0);
    if (series.acq.n_frames != F)
        throw FrameCountMismatch("infer: series has " + std::to_string(series.acq.n_frames) +
                                 " frames, checkpoint expects " + std::to_string(F));
    series.validate();
    GeneratorSpec gspec;
    gspec.in_channels = F;
    gspec.base_channels = cfg.base_channels;
    gspec.out_pk_channels = cfg.model == TkModel::ETofts ? 3 : 2;
    gspec.cp_hidden_units = cfg.cp_hidden_units;
    Generator gen(gspec, 0);
    restore_parameters(ckpt, "gen.", gen.parameter_names(), gen.parameters());

    std::vector<double> input(series.data.size());
    for (size_t i = 0; i < input.size(); ++i) input[i] = series.data[i] / cfg.signal_scale;
    Tensor x = Tensor::from_data({1, F, series.height, series.width}, std::move(input));
    Generator::Output out = gen.forward(x);

    InferResult res;
    res.pk = clamp_inference_output(out.pk, cfg.model);
    if (mask) {
        if (!mask->same_dims(series.width, series.height))
            throw ShapeMismatch("infer: mask dimensions disagree with the series");
        for (size_t i = 0; i < mask->data.size(); ++i)
            if (!mask->data[i]) {
                res.pk.ktrans_per_min.data[i] = 0;
                res.pk.vp.data[i] = 0;
                if (res.pk.ve) res.pk.ve->data[i] = 0;
            }
    }
    res.cp.time_seconds = series.acq.time_grid();
    res.cp.values_mM.resize(F);
    for (int f = 0; f < F; ++f)
        res.cp.values_mM[f] = std::max(out.cp.data()[f], 0.0) / cfg.cp_scale;
    return res;
}

}  // namespace dce
