#include "dce/volume_io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace dce {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'E', 'V'};
constexpr uint16_t kVersion = 1;

template <typename T>
void put_le(std::ofstream& out, T value) {
    uint8_t buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<uint8_t>((value >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::ifstream& in) {
    uint8_t buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    T value = 0;
    for (size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(buf[i]) << (8 * i);
    return value;
}

}  // namespace

size_t Volume::numel() const {
    size_t n = 1;
    for (uint32_t d : dims) n *= d;
    return n;
}

std::string sidecar_path(const std::string& volume_path) {
    std::filesystem::path p(volume_path);
    p.replace_extension(".json");
    return p.string();
}

void write_volume(const std::string& path, const Volume& vol) {
    if (vol.dims.empty()) throw ConfigError("volume: dims must be non-empty");
    for (uint32_t d : vol.dims)
        if (d == 0) throw ConfigError("volume: zero dimension");
    if (vol.data.size() != vol.numel())
        throw ShapeMismatch("volume: payload length " + std::to_string(vol.data.size()) +
                            " != product of dims " + std::to_string(vol.numel()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("volume: cannot open for writing: " + path);
    out.write(kMagic, 4);
    put_le<uint16_t>(out, kVersion);
    out.put(static_cast<char>(vol.dtype));
    out.put(static_cast<char>(vol.dims.size()));
    for (uint32_t d : vol.dims) put_le<uint32_t>(out, d);
    if (vol.dtype == VolumeDtype::F64) {
        for (double v : vol.data) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_le<uint64_t>(out, bits);
        }
    } else {
        for (double v : vol.data) {
            const float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_le<uint32_t>(out, bits);
        }
    }
    if (!out) throw IoError("volume: write failed: " + path);

    nlohmann::json side = vol.sidecar;
    side["dims"] = vol.dims;
    std::ofstream sout(sidecar_path(path));
    if (!sout) throw IoError("volume: cannot open sidecar for writing: " + sidecar_path(path));
    sout << side.dump(2) << '\n';
    if (!sout) throw IoError("volume: sidecar write failed: " + sidecar_path(path));
}

Volume read_volume(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("volume: cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("volume: bad magic in " + path);
    const uint16_t version = get_le<uint16_t>(in);
    if (version != kVersion)
        throw IoError("volume: unsupported version " + std::to_string(version) + " in " + path);
    Volume vol;
    const int dtype = in.get();
    if (dtype != 0 && dtype != 1) throw IoError("volume: unknown dtype in " + path);
    vol.dtype = static_cast<VolumeDtype>(dtype);
    const int n_dims = in.get();
    if (n_dims <= 0 || n_dims > 8) throw IoError("volume: implausible n_dims in " + path);
    vol.dims.resize(n_dims);
    for (int i = 0; i < n_dims; ++i) vol.dims[i] = get_le<uint32_t>(in);
    if (!in) throw IoError("volume: truncated header in " + path);
    vol.data.resize(vol.numel());
    if (vol.dtype == VolumeDtype::F64) {
        for (double& v : vol.data) {
            const uint64_t bits = get_le<uint64_t>(in);
            std::memcpy(&v, &bits, 8);
        }
    } else {
        for (double& v : vol.data) {
            const uint32_t bits = get_le<uint32_t>(in);
            float f;
            std::memcpy(&f, &bits, 4);
            v = f;
        }
    }
    if (!in) throw IoError("volume: truncated payload in " + path);

    std::ifstream sin(sidecar_path(path));
    if (!sin) throw IoError("volume: missing sidecar: " + sidecar_path(path));
    try {
        sin >> vol.sidecar;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("volume: sidecar parse error in " + sidecar_path(path) + ": " + e.what());
    }
    if (vol.sidecar.value("dims", std::vector<uint32_t>{}) != vol.dims)
        throw IoError("volume: sidecar dims disagree with header in " + path);
    return vol;
}

nlohmann::json acq_to_json(const AcqParams& acq) {
    return {{"tr_seconds", acq.tr_seconds},
            {"flip_angle_radians", acq.flip_angle_radians},
            {"r1_per_mM_per_second", acq.r1_per_mM_per_second},
            {"frame_interval_seconds", acq.frame_interval_seconds},
            {"n_frames", acq.n_frames},
            {"bolus_arrival_frame", acq.bolus_arrival_frame}};
}

AcqParams acq_from_json(const nlohmann::json& j) {
    AcqParams acq;
    acq.tr_seconds = j.at("tr_seconds").get<double>();
    acq.flip_angle_radians = j.at("flip_angle_radians").get<double>();
    acq.r1_per_mM_per_second = j.at("r1_per_mM_per_second").get<double>();
    acq.frame_interval_seconds = j.at("frame_interval_seconds").get<double>();
    acq.n_frames = j.at("n_frames").get<int>();
    acq.bolus_arrival_frame = j.value("bolus_arrival_frame", 0);
    return acq;
}

Volume volume_from_series(const DceSeries& series) {
    Volume vol;
    vol.dims = {static_cast<uint32_t>(series.acq.n_frames),
                static_cast<uint32_t>(series.height), static_cast<uint32_t>(series.width)};
    vol.data = series.data;
    vol.sidecar["kind"] = "series";
    vol.sidecar["units"] = "signal_arbitrary";
    vol.sidecar["acq"] = acq_to_json(series.acq);
    return vol;
}

DceSeries series_from_volume(const Volume& vol) {
    if (vol.dims.size() != 3) throw ShapeMismatch("series volume must be [frames, height, width]");
    if (!vol.sidecar.contains("acq"))
        throw IoError("series volume sidecar is missing acquisition parameters");
    const AcqParams acq = acq_from_json(vol.sidecar["acq"]);
    if (acq.n_frames != static_cast<int>(vol.dims[0]))
        throw ShapeMismatch("series volume frame count disagrees with sidecar acq");
    DceSeries series = DceSeries::create(acq, static_cast<int>(vol.dims[2]),
                                         static_cast<int>(vol.dims[1]));
    series.data = vol.data;
    return series;
}

Volume volume_from_pk(const PkMap& pk) {
    pk.validate();
    Volume vol;
    const int c = pk.n_params();
    vol.dims = {static_cast<uint32_t>(c), static_cast<uint32_t>(pk.height),
                static_cast<uint32_t>(pk.width)};
    vol.data.reserve(vol.numel());
    vol.data.insert(vol.data.end(), pk.ktrans_per_min.data.begin(), pk.ktrans_per_min.data.end());
    vol.data.insert(vol.data.end(), pk.vp.data.begin(), pk.vp.data.end());
    if (pk.ve) vol.data.insert(vol.data.end(), pk.ve->data.begin(), pk.ve->data.end());
    vol.sidecar["kind"] = "pk_map";
    vol.sidecar["model"] = to_string(pk.model);
    vol.sidecar["parameters"] = pk.model == TkModel::ETofts
                                    ? std::vector<std::string>{"ktrans", "vp", "ve"}
                                    : std::vector<std::string>{"ktrans", "vp"};
    vol.sidecar["units"] = {{"ktrans", "per_minute"}, {"vp", "fraction"}, {"ve", "fraction"}};
    return vol;
}

PkMap pk_from_volume(const Volume& vol) {
    if (vol.dims.size() != 3) throw ShapeMismatch("pk volume must be [params, height, width]");
    const TkModel model = tk_model_from_string(vol.sidecar.value("model", std::string()));
    const int c = static_cast<int>(vol.dims[0]);
    if (c != (model == TkModel::ETofts ? 3 : 2))
        throw ShapeMismatch("pk volume channel count disagrees with its model");
    const int h = static_cast<int>(vol.dims[1]);
    const int w = static_cast<int>(vol.dims[2]);
    PkMap pk = PkMap::create(model, w, h);
    const size_t plane = static_cast<size_t>(w) * h;
    std::copy_n(vol.data.begin(), plane, pk.ktrans_per_min.data.begin());
    std::copy_n(vol.data.begin() + plane, plane, pk.vp.data.begin());
    if (model == TkModel::ETofts)
        std::copy_n(vol.data.begin() + 2 * plane, plane, pk.ve->data.begin());
    return pk;
}

Volume volume_from_raster(const RasterD& r, const std::string& kind) {
    Volume vol;
    vol.dims = {static_cast<uint32_t>(r.height), static_cast<uint32_t>(r.width)};
    vol.data = r.data;
    vol.sidecar["kind"] = kind;
    return vol;
}

RasterD raster_from_volume(const Volume& vol) {
    if (vol.dims.size() != 2) throw ShapeMismatch("raster volume must be [height, width]");
    RasterD r(static_cast<int>(vol.dims[1]), static_cast<int>(vol.dims[0]));
    r.data = vol.data;
    return r;
}

Volume volume_from_mask(const RasterB& mask) {
    Volume vol;
    vol.dtype = VolumeDtype::F32;
    vol.dims = {static_cast<uint32_t>(mask.height), static_cast<uint32_t>(mask.width)};
    vol.data.resize(mask.data.size());
    for (size_t i = 0; i < mask.data.size(); ++i) vol.data[i] = mask.data[i] ? 1.0 : 0.0;
    vol.sidecar["kind"] = "mask";
    return vol;
}

RasterB mask_from_volume(const Volume& vol) {
    if (vol.dims.size() != 2) throw ShapeMismatch("mask volume must be [height, width]");
    RasterB m(static_cast<int>(vol.dims[1]), static_cast<int>(vol.dims[0]));
    for (size_t i = 0; i < vol.data.size(); ++i) m.data[i] = vol.data[i] != 0.0 ? 1 : 0;
    return m;
}

}  // namespace dce
