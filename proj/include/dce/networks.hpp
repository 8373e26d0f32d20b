#pragma once

#include "dce/core.hpp"
#include "dce/nn/tensor.hpp"

#include <array>
#include <cstdint>
#include "json.hpp"

namespace dce {

// Scaled-parameter-space factors: PK maps are multiplied by these before
// entering the learning path (eTofts 20/40/4, Patlak 40/8).
std::vector<double> pk_scale_factors(TkModel model);

struct GeneratorSpec {
    int in_channels = 65;  // n_frames
    int base_channels = 64;
    std::array<int, 3> dilations{2, 4, 8};
    int out_pk_channels = 2;
    int cp_hidden_units = 256;

    void validate() const;
    int min_patch() const;  // receptive-field minimum
};

struct DiscriminatorSpec {
    int in_channels = 2;  // out_pk_channels of the paired generator
    int base_filters = 32;
    int n_layers = 4;

    void validate() const;
};

class Generator {
public:
    Generator(GeneratorSpec spec, uint64_t seed);

    struct Output {
        nn::Tensor pk;  // [batch, out_pk, H, W], scaled parameter space
        nn::Tensor cp;  // [batch, n_frames], scaled concentration
    };
    Output forward(const nn::Tensor& s_patch) const;

    std::vector<nn::Tensor>& parameters() { return params_; }
    const std::vector<nn::Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    const GeneratorSpec& spec() const { return spec_; }
    size_t parameter_count() const;

private:
    GeneratorSpec spec_;
    std::vector<nn::Tensor> params_;
    std::vector<std::string> names_;
};

class Discriminator {
public:
    Discriminator(DiscriminatorSpec spec, uint64_t seed);

    nn::Tensor forward(const nn::Tensor& pk_patch) const;  // [batch, 1, h, w] scores

    std::vector<nn::Tensor>& parameters() { return params_; }
    const std::vector<nn::Tensor>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    const DiscriminatorSpec& spec() const { return spec_; }
    size_t parameter_count() const;

private:
    DiscriminatorSpec spec_;
    std::vector<nn::Tensor> params_;
    std::vector<std::string> names_;
};

// Unscale a generator PK output by the configured factors and clamp each
// parameter into its physical range (ktrans reported in min^-1).
PkMap clamp_inference_output(const nn::Tensor& pk_patch, TkModel model, int batch_index = 0);

// Checkpoint container: JSON manifest followed by raw little-endian doubles in
// manifest order.
void save_checkpoint(const std::string& path, const nlohmann::json& extra_manifest,
                     const std::vector<std::string>& names,
                     const std::vector<nn::Tensor>& params);
struct Checkpoint {
    nlohmann::json manifest;
    std::vector<std::pair<std::string, std::vector<double>>> arrays;
};
Checkpoint load_checkpoint(const std::string& path);
void restore_parameters(const Checkpoint& ckpt, const std::string& prefix,
                        const std::vector<std::string>& names, std::vector<nn::Tensor>& params);

}  // namespace dce
