#pragma once

#include "dce/core.hpp"
#include "dce/networks.hpp"
#include "dce/nn/optim.hpp"
#include "dce/physics.hpp"

#include <random>

namespace dce {

struct DatasetTooSmall : Error {
    using Error::Error;
};
struct FrameCountMismatch : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    int step = -1;
    NonFiniteLoss(const std::string& msg, int step_idx) : Error(msg), step(step_idx) {}
};

enum class TrainMode { CycleGAN, Supervised, SupervisedPhysics };
const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct TrainConfig {
    TrainMode mode = TrainMode::CycleGAN;
    TkModel model = TkModel::Patlak;
    double gamma = 10.0;  // cycle weight in the total objective
    double rho = 1.0;     // plasma-curve cycle weight
    double alpha = 10.0;  // supervised L1 weight
    double beta = 10.0;   // signal-reconstruction weight
    int batch_size = 32;
    int patch = 48;
    int epochs = 200;
    int steps_per_epoch = 40;
    double lr = 1e-5;
    int lr_decay_start = -1;  // -1 => epochs / 2
    uint64_t seed = 0;
    std::vector<double> scale_factors;  // empty => pk_scale_factors(model)
    double signal_scale = 100.0;        // signal normalization constant
    double cp_scale = 0.1;              // scaled Cp = mM * cp_scale
    int base_channels = 64;
    int cp_hidden_units = 256;
    int disc_base_filters = 32;
    int checkpoint_every_epochs = 0;  // 0 => final checkpoint only
    std::string out_dir = ".";
    std::string resume_from;  // checkpoint path; empty => fresh start

    void validate() const;
    std::vector<double> scales() const;
    int decay_start() const { return lr_decay_start < 0 ? epochs / 2 : lr_decay_start; }
};
void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

// One training subject: a signal series with its auxiliary maps, PK ground
// truth / pool entry, and its plasma curve. All rasters share dimensions.
struct Subject {
    DceSeries series;  // raw (unnormalized) signal
    AuxMaps aux;
    PkMap pk;
    PlasmaCurve cp;

    void validate() const;
};
using TrainDataset = std::vector<Subject>;

// Batch of crops. Signal-side and PK-side samples come from independent draws
// unless `paired` was requested (supervised modes).
struct UnpairedBatch {
    nn::Tensor s_signal;          // [B, F, p, p], normalized
    std::vector<double> s_s0;     // B*p*p, raw
    std::vector<double> s_t1;     // B*p*p, seconds
    nn::Tensor p_pk;              // [B, out_pk, p, p], scaled
    nn::Tensor p_cp;              // [B, F], scaled
    std::vector<double> p_s0;
    std::vector<double> p_t1;
};

UnpairedBatch sample_patches(const TrainDataset& dataset, const TrainConfig& cfg,
                             std::mt19937_64& rng, bool paired = false);

// Differentiable tracer-kinetic + signal-equation layer: scaled PK patches and
// a scaled plasma curve per sample -> normalized signal patches [B, F, p, p].
// Parameters are clamped into physical range inside the layer (zero gradient
// outside); hand-derived adjoints for both inputs.
nn::Tensor tk_signal(const nn::Tensor& pk_scaled, const nn::Tensor& cp_scaled,
                     const std::vector<double>& s0, const std::vector<double>& t1,
                     const AcqParams& acq, const TrainConfig& cfg);

nn::Tensor cycle_loss(const nn::Tensor& p, const nn::Tensor& p_cycled, const nn::Tensor& s,
                      const nn::Tensor& s_cycled, const nn::Tensor& cp,
                      const nn::Tensor& cp_cycled, double rho);

struct LsganLosses {
    nn::Tensor disc_loss;  // 1/2 mean((d_real-1)^2) + 1/2 mean(d_fake^2)
    nn::Tensor gen_loss;   // 1/2 mean((d_fake-1)^2)
};
LsganLosses lsgan_losses(const nn::Tensor& d_real, const nn::Tensor& d_fake);

nn::Tensor supervised_loss(const nn::Tensor& pk_pred, const nn::Tensor& pk_label, double alpha);
nn::Tensor physics_loss(const nn::Tensor& s_input, const nn::Tensor& s_reconstructed,
                        double beta);

struct LossRow {
    int step = 0;   // global step, 1-based
    int epoch = 0;  // 1-based
    double total = 0;
    double cycle_s = 0;
    double cycle_p = 0;
    double cycle_cp = 0;
    double gen_gan = 0;
    double disc = 0;
    double supervised = 0;
    double physics = 0;
    double lr = 0;
};
void write_loss_csv(const std::string& path, const std::vector<LossRow>& history);

struct TrainResult {
    std::vector<LossRow> history;
    std::string final_checkpoint;
    std::string loss_csv;
};
TrainResult train(const TrainConfig& cfg, const TrainDataset& dataset);

struct InferResult {
    PkMap pk;
    PlasmaCurve cp;
};
InferResult infer(const Checkpoint& ckpt, const DceSeries& series,
                  const RasterB* mask = nullptr);

}  // namespace dce
