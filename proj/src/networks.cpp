#include "dce/networks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace dce {

using nn::Tensor;

std::vector<double> pk_scale_factors(TkModel model) {
    // Scaled training space: ktrans (min^-1) x20, vp x40, ve x4 for eTofts;
    // ktrans x40, vp x8 for Patlak.
    if (model == TkModel::ETofts) return {20.0, 40.0, 4.0};
    return {40.0, 8.0};
}

void GeneratorSpec::validate() const {
    if (in_channels < 1) throw ConfigError("generator: in_channels must be >= 1");
    if (base_channels < 1) throw ConfigError("generator: base_channels must be >= 1");
    for (int d : dilations)
        if (d < 1) throw ConfigError("generator: dilations must be >= 1");
    if (out_pk_channels != 2 && out_pk_channels != 3)
        throw ConfigError("generator: out_pk_channels must be 2 (Patlak) or 3 (eTofts)");
    if (cp_hidden_units < 1) throw ConfigError("generator: cp_hidden_units must be >= 1");
}

int GeneratorSpec::min_patch() const {
    const int dmax = *std::max_element(dilations.begin(), dilations.end());
    return 2 * dmax + 1;
}

void DiscriminatorSpec::validate() const {
    if (in_channels < 1) throw ConfigError("discriminator: in_channels must be >= 1");
    if (base_filters < 1) throw ConfigError("discriminator: base_filters must be >= 1");
    if (n_layers < 1) throw ConfigError("discriminator: n_layers must be >= 1");
}

namespace {

Tensor init_conv(std::mt19937_64& rng, int cout, int cin, int k, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> w(static_cast<size_t>(cout) * cin * k * k);
    for (double& v : w) v = dist(rng);
    return Tensor::from_data({cout, cin, k, k}, std::move(w), true);
}

Tensor init_fc(std::mt19937_64& rng, int out, int in, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> w(static_cast<size_t>(out) * in);
    for (double& v : w) v = dist(rng);
    return Tensor::from_data({out, in}, std::move(w), true);
}

double he_stddev(int fan_in) { return std::sqrt(2.0 / fan_in); }

}  // namespace

Generator::Generator(GeneratorSpec spec, uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    const int b = spec_.base_channels;
    auto add_conv = [&](const std::string& name, int cout, int cin, int k) {
        params_.push_back(init_conv(rng, cout, cin, k, he_stddev(cin * k * k)));
        names_.push_back(name + ".w");
        params_.push_back(Tensor::zeros({cout}, true));
        names_.push_back(name + ".b");
    };
    add_conv("initial", b, spec_.in_channels, 3);
    for (int i = 0; i < 3; ++i) add_conv("local" + std::to_string(i), b, b, 3);
    for (int i = 0; i < 3; ++i) add_conv("global" + std::to_string(i), b, b, 3);
    add_conv("pk0", b, 2 * b, 1);
    add_conv("pk1", b, b, 1);
    add_conv("pk2", spec_.out_pk_channels, b, 1);
    params_.push_back(init_fc(rng, spec_.cp_hidden_units, 2 * b, he_stddev(2 * b)));
    names_.push_back("cp0.w");
    params_.push_back(Tensor::zeros({spec_.cp_hidden_units}, true));
    names_.push_back("cp0.b");
    params_.push_back(init_fc(rng, spec_.in_channels, spec_.cp_hidden_units,
                              he_stddev(spec_.cp_hidden_units)));
    names_.push_back("cp1.w");
    params_.push_back(Tensor::zeros({spec_.in_channels}, true));
    names_.push_back("cp1.b");
}

Generator::Output Generator::forward(const Tensor& s_patch) const {
    if (s_patch.shape().size() != 4)
        throw ShapeMismatch("generator: input must be [batch, frames, H, W]");
    if (s_patch.shape()[1] != spec_.in_channels)
        throw ShapeMismatch("generator: input has " + std::to_string(s_patch.shape()[1]) +
                            " channels, spec expects " + std::to_string(spec_.in_channels));
    if (s_patch.shape()[2] < spec_.min_patch() || s_patch.shape()[3] < spec_.min_patch())
        throw ShapeMismatch("generator: patch smaller than receptive-field minimum " +
                            std::to_string(spec_.min_patch()));
    size_t k = 0;
    auto next = [&]() -> const Tensor& { return params_[k++]; };
    auto conv_relu = [&](const Tensor& x, int pad, int dilation) {
        const Tensor& w = next();
        const Tensor& bias = next();
        return nn::relu(nn::conv2d(x, w, bias, 1, pad, dilation));
    };

    Tensor h = conv_relu(s_patch, 1, 1);  // initial
    Tensor local = h;
    for (int i = 0; i < 3; ++i) local = conv_relu(local, 1, 1);
    Tensor global = h;
    for (int d : spec_.dilations) global = conv_relu(global, d, d);
    Tensor feat = nn::concat_channels(local, global);

    Tensor pk = conv_relu(feat, 0, 1);
    pk = conv_relu(pk, 0, 1);
    {
        const Tensor& w = next();
        const Tensor& bias = next();
        pk = nn::conv2d(pk, w, bias, 1, 0, 1);  // linear head
    }

    Tensor pooled = nn::global_avg_pool(feat);
    {
        const Tensor& w0 = next();
        const Tensor& b0 = next();
        pooled = nn::relu(nn::fully_connected(pooled, w0, b0));
        const Tensor& w1 = next();
        const Tensor& b1 = next();
        pooled = nn::fully_connected(pooled, w1, b1);  // linear head
    }
    return {pk, pooled};
}

size_t Generator::parameter_count() const {
    size_t n = 0;
    for (const Tensor& p : params_) n += p.numel();
    return n;
}

Discriminator::Discriminator(DiscriminatorSpec spec, uint64_t seed) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(seed);
    int cin = spec_.in_channels;
    for (int i = 0; i < spec_.n_layers; ++i) {
        const int cout = spec_.base_filters << i;
        params_.push_back(init_conv(rng, cout, cin, 4, 0.02));
        names_.push_back("conv" + std::to_string(i) + ".w");
        params_.push_back(Tensor::zeros({cout}, true));
        names_.push_back("conv" + std::to_string(i) + ".b");
        if (i > 0) {
            params_.push_back(Tensor::full({cout}, 1.0, true));
            names_.push_back("in" + std::to_string(i) + ".gamma");
            params_.push_back(Tensor::zeros({cout}, true));
            names_.push_back("in" + std::to_string(i) + ".beta");
        }
        cin = cout;
    }
    params_.push_back(init_conv(rng, 1, cin, 4, 0.02));
    names_.push_back("final.w");
    params_.push_back(Tensor::zeros({1}, true));
    names_.push_back("final.b");
}

Tensor Discriminator::forward(const Tensor& pk_patch) const {
    if (pk_patch.shape().size() != 4)
        throw ShapeMismatch("discriminator: input must be [batch, channels, H, W]");
    if (pk_patch.shape()[1] != spec_.in_channels)
        throw ShapeMismatch("discriminator: input has " + std::to_string(pk_patch.shape()[1]) +
                            " channels, spec expects " + std::to_string(spec_.in_channels));
    size_t k = 0;
    Tensor h = pk_patch;
    for (int i = 0; i < spec_.n_layers; ++i) {
        const int stride = (i + 1 < spec_.n_layers) ? 2 : 1;
        const Tensor& w = params_[k++];
        const Tensor& b = params_[k++];
        h = nn::conv2d(h, w, b, stride, 1, 1);
        if (i > 0) {
            const Tensor& gamma = params_[k++];
            const Tensor& beta = params_[k++];
            h = nn::instance_norm(h, gamma, beta);
        }
        h = nn::leaky_relu(h, 0.2);
    }
    const Tensor& wf = params_[k++];
    const Tensor& bf = params_[k++];
    return nn::conv2d(h, wf, bf, 1, 1, 1);
}

size_t Discriminator::parameter_count() const {
    size_t n = 0;
    for (const Tensor& p : params_) n += p.numel();
    return n;
}

PkMap clamp_inference_output(const Tensor& pk_patch, TkModel model, int batch_index) {
    if (pk_patch.shape().size() != 4)
        throw ShapeMismatch("clamp_inference_output: expected [batch, params, H, W]");
    const std::vector<double> scales = pk_scale_factors(model);
    const int n = pk_patch.shape()[0];
    const int c = pk_patch.shape()[1];
    const int h = pk_patch.shape()[2];
    const int w = pk_patch.shape()[3];
    if (batch_index < 0 || batch_index >= n)
        throw ShapeMismatch("clamp_inference_output: batch index out of range");
    if (c != static_cast<int>(scales.size()))
        throw ShapeMismatch("clamp_inference_output: channel count does not match model");

    PkMap map = PkMap::create(model, w, h);
    const std::vector<double>& v = pk_patch.data();
    const size_t plane = static_cast<size_t>(h) * w;
    const size_t base = static_cast<size_t>(batch_index) * c * plane;
    auto channel_value = [&](int ch, size_t i) {
        return std::clamp(v[base + ch * plane + i] / scales[ch], 0.0, 1.0);
    };
    for (size_t i = 0; i < plane; ++i) {
        map.ktrans_per_min.data[i] = channel_value(0, i);
        map.vp.data[i] = channel_value(1, i);
        if (model == TkModel::ETofts) map.ve->data[i] = channel_value(2, i);
    }
    return map;
}

namespace {
constexpr char kCkptMagic[8] = {'D', 'C', 'E', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::string& path, const nlohmann::json& extra_manifest,
                     const std::vector<std::string>& names, const std::vector<Tensor>& params) {
    if (names.size() != params.size())
        throw ShapeMismatch("checkpoint: name/parameter count mismatch");
    nlohmann::json manifest = extra_manifest;
    manifest["format_version"] = 1;
    nlohmann::json plist = nlohmann::json::array();
    for (size_t i = 0; i < params.size(); ++i) {
        nlohmann::json entry;
        entry["name"] = names[i];
        entry["shape"] = params[i].shape();
        plist.push_back(entry);
    }
    manifest["params"] = plist;
    const std::string mtext = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open for writing: " + path);
    out.write(kCkptMagic, sizeof(kCkptMagic));
    const uint64_t mlen = mtext.size();
    uint8_t lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<uint8_t>((mlen >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    for (const Tensor& p : params) {
        // Doubles are written verbatim; this targets little-endian hosts.
        out.write(reinterpret_cast<const char*>(p.data().data()),
                  static_cast<std::streamsize>(p.numel() * sizeof(double)));
    }
    if (!out) throw IoError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    uint8_t lenbuf[8];
    in.read(reinterpret_cast<char*>(lenbuf), 8);
    if (!in) throw IoError("checkpoint: truncated manifest length in " + path);
    uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i) mlen |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw IoError("checkpoint: truncated manifest in " + path);

    Checkpoint ckpt;
    try {
        ckpt.manifest = nlohmann::json::parse(mtext);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: manifest parse error: ") + e.what());
    }
    if (!ckpt.manifest.contains("params") || !ckpt.manifest["params"].is_array())
        throw IoError("checkpoint: manifest missing params list");
    for (const auto& entry : ckpt.manifest["params"]) {
        const std::string name = entry.at("name").get<std::string>();
        size_t numel = 1;
        for (const auto& d : entry.at("shape")) numel *= d.get<size_t>();
        std::vector<double> data(numel);
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (!in) throw IoError("checkpoint: truncated parameter data for " + name);
        ckpt.arrays.emplace_back(name, std::move(data));
    }
    return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, const std::string& prefix,
                        const std::vector<std::string>& names, std::vector<Tensor>& params) {
    if (names.size() != params.size())
        throw ShapeMismatch("checkpoint: name/parameter count mismatch");
    for (size_t i = 0; i < names.size(); ++i) {
        const std::string full = prefix + names[i];
        auto it = std::find_if(ckpt.arrays.begin(), ckpt.arrays.end(),
                               [&](const auto& kv) { return kv.first == full; });
        if (it == ckpt.arrays.end()) throw IoError("checkpoint: missing parameter " + full);
        if (it->second.size() != params[i].numel())
            throw ShapeMismatch("checkpoint: size mismatch for " + full);
        params[i].data() = it->second;
    }
}

}  // namespace dce
