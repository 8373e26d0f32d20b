#include "dce/pipeline.hpp"

#include "dce/aif.hpp"
#include "dce/metrics.hpp"
#include "dce/plots.hpp"
#include "dce/training.hpp"
#include "dce/volume_io.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>

namespace fs = std::filesystem;

namespace dce {

namespace {

int run_guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 5;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

nlohmann::json range_to_json(const ValueRange& r) { return {{"lo", r.lo}, {"hi", r.hi}}; }

ValueRange range_from_json(const nlohmann::json& j, const ValueRange& d) {
    if (j.is_null()) return d;
    return {j.value("lo", d.lo), j.value("hi", d.hi)};
}

nlohmann::json aif_to_json(const AifParams& a) {
    return {{"bolus_arrival_seconds", a.bolus_arrival_seconds},
            {"peak_amplitude_mM", a.peak_amplitude_mM},
            {"bolus_width_seconds", a.bolus_width_seconds},
            {"recirculation_amplitude_mM", a.recirculation_amplitude_mM},
            {"washout_rate_per_s", a.washout_rate_per_s},
            {"tail_amplitude_mM", a.tail_amplitude_mM},
            {"tail_rate_per_s", a.tail_rate_per_s}};
}

AifParams aif_from_json(const nlohmann::json& j) {
    AifParams a;
    a.bolus_arrival_seconds = j.value("bolus_arrival_seconds", a.bolus_arrival_seconds);
    a.peak_amplitude_mM = j.value("peak_amplitude_mM", a.peak_amplitude_mM);
    a.bolus_width_seconds = j.value("bolus_width_seconds", a.bolus_width_seconds);
    a.recirculation_amplitude_mM = j.value("recirculation_amplitude_mM", a.recirculation_amplitude_mM);
    a.washout_rate_per_s = j.value("washout_rate_per_s", a.washout_rate_per_s);
    a.tail_amplitude_mM = j.value("tail_amplitude_mM", a.tail_amplitude_mM);
    a.tail_rate_per_s = j.value("tail_rate_per_s", a.tail_rate_per_s);
    return a;
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    return j;
}

PlasmaCurve load_aif(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open AIF file: " + path);
    return read_aif_csv(in);
}

std::string metric_value(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

nlohmann::json phantom_config_to_json(const PhantomConfig& cfg) {
    return {{"width", cfg.width},
            {"height", cfg.height},
            {"model", to_string(cfg.model)},
            {"n_regions", cfg.n_regions},
            {"ktrans_per_min", range_to_json(cfg.ktrans_per_min)},
            {"vp", range_to_json(cfg.vp)},
            {"ve", range_to_json(cfg.ve)},
            {"bg_ktrans_per_min", range_to_json(cfg.bg_ktrans_per_min)},
            {"bg_vp", range_to_json(cfg.bg_vp)},
            {"bg_ve", range_to_json(cfg.bg_ve)},
            {"t1_seconds", range_to_json(cfg.t1_seconds)},
            {"s0", range_to_json(cfg.s0)},
            {"acq", acq_to_json(cfg.acq)},
            {"aif", aif_to_json(cfg.aif)},
            {"hct", cfg.hct},
            {"noise_sigma", cfg.noise_sigma},
            {"seed", cfg.seed}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    PhantomConfig cfg;
    cfg.width = j.value("width", cfg.width);
    cfg.height = j.value("height", cfg.height);
    cfg.model = tk_model_from_string(j.value("model", std::string(to_string(cfg.model))));
    cfg.n_regions = j.value("n_regions", cfg.n_regions);
    cfg.ktrans_per_min = range_from_json(j.value("ktrans_per_min", nlohmann::json()), cfg.ktrans_per_min);
    cfg.vp = range_from_json(j.value("vp", nlohmann::json()), cfg.vp);
    cfg.ve = range_from_json(j.value("ve", nlohmann::json()), cfg.ve);
    cfg.bg_ktrans_per_min =
        range_from_json(j.value("bg_ktrans_per_min", nlohmann::json()), cfg.bg_ktrans_per_min);
    cfg.bg_vp = range_from_json(j.value("bg_vp", nlohmann::json()), cfg.bg_vp);
    cfg.bg_ve = range_from_json(j.value("bg_ve", nlohmann::json()), cfg.bg_ve);
    cfg.t1_seconds = range_from_json(j.value("t1_seconds", nlohmann::json()), cfg.t1_seconds);
    cfg.s0 = range_from_json(j.value("s0", nlohmann::json()), cfg.s0);
    if (j.contains("acq")) cfg.acq = acq_from_json(j["acq"]);
    if (j.contains("aif")) cfg.aif = aif_from_json(j["aif"]);
    cfg.hct = j.value("hct", cfg.hct);
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

int cmd_simulate(const SimulateArgs& args) {
    return run_guarded([&]() {
        PhantomConfig cfg;
        if (!args.config_path.empty()) cfg = phantom_config_from_json(load_json(args.config_path));
        if (args.seed) cfg.seed = *args.seed;
        PhantomOutput ph = generate_phantom(cfg);
        fs::create_directories(args.out_dir);
        const std::string d = args.out_dir + "/";

        Volume series = volume_from_series(ph.series);
        series.sidecar["model"] = to_string(cfg.model);
        series.sidecar["seed"] = cfg.seed;
        write_volume(d + "series.dcev", series);
        write_volume(d + "pk.dcev", volume_from_pk(ph.pk));
        write_volume(d + "t1.dcev", volume_from_raster(ph.aux.t1_seconds, "t1_seconds"));
        write_volume(d + "s0.dcev", volume_from_raster(ph.aux.s0, "s0"));
        write_volume(d + "mask.dcev", volume_from_mask(ph.aux.mask));
        RasterD labels(ph.labels.width, ph.labels.height);
        for (size_t i = 0; i < labels.data.size(); ++i)
            labels.data[i] = static_cast<double>(ph.labels.data[i]);
        write_volume(d + "labels.dcev", volume_from_raster(labels, "labels"));
        std::ofstream aif(d + "aif.csv");
        if (!aif) throw IoError("cannot open for writing: " + d + "aif.csv");
        write_aif_csv(aif, ph.cp);
        std::ofstream meta(d + "meta.json");
        if (!meta) throw IoError("cannot open for writing: " + d + "meta.json");
        meta << phantom_config_to_json(cfg).dump(2) << '\n';

        std::cout << "simulate seed=" << cfg.seed << " dims=" << cfg.acq.n_frames << 'x'
                  << cfg.height << 'x' << cfg.width << " model=" << to_string(cfg.model) << '\n';
        return 0;
    });
}

int cmd_fit(const FitArgs& args) {
    return run_guarded([&]() {
        DceSeries series = series_from_volume(read_volume(args.series));
        PlasmaCurve cp = load_aif(args.aif);
        AuxMaps aux;
        aux.t1_seconds = raster_from_volume(read_volume(args.t1));
        aux.s0 = raster_from_volume(read_volume(args.s0));
        aux.mask = mask_from_volume(read_volume(args.mask));
        FitConfig cfg;
        cfg.method = args.method;
        cfg.model = args.model;
        VolumeFitResult res = fit_volume(series, cp, aux, cfg);

        fs::create_directories(args.out_dir);
        const std::string d = args.out_dir + "/";
        write_volume(d + "pk.dcev", volume_from_pk(res.map));
        RasterD status(res.status.width, res.status.height);
        for (size_t i = 0; i < status.data.size(); ++i)
            status.data[i] = static_cast<double>(res.status.data[i]);
        write_volume(d + "status.dcev", volume_from_raster(status, "fit_status"));

        size_t n_masked = 0;
        std::map<int, size_t> status_counts;
        for (size_t i = 0; i < aux.mask.data.size(); ++i)
            if (aux.mask.data[i]) {
                ++n_masked;
                ++status_counts[static_cast<int>(res.status.data[i])];
            }
        nlohmann::json meta = {{"method", args.method == FitMethod::LLS ? "lls" : "nlls"},
                               {"model", to_string(args.model)},
                               {"n_masked", n_masked},
                               {"n_failed", res.n_failed},
                               {"status_counts", status_counts}};
        std::ofstream mout(d + "fit_meta.json");
        if (!mout) throw IoError("cannot open for writing: " + d + "fit_meta.json");
        mout << meta.dump(2) << '\n';

        std::cout << "fit method=" << meta["method"].get<std::string>()
                  << " model=" << to_string(args.model) << " masked=" << n_masked
                  << " failed=" << res.n_failed << '\n';
        if (n_masked == 0 || 2 * res.n_failed > n_masked) {
            std::cerr << "error: fit failed on too many voxels (" << res.n_failed << " of "
                      << n_masked << " masked)\n";
            return 4;
        }
        return 0;
    });
}

namespace {

Subject load_subject(const std::string& dir) {
    const std::string d = dir + "/";
    Subject s;
    s.series = series_from_volume(read_volume(d + "series.dcev"));
    if (!fs::exists(d + "pk.dcev"))
        throw ConfigError("missing label volume: " + d + "pk.dcev");
    s.pk = pk_from_volume(read_volume(d + "pk.dcev"));
    s.aux.t1_seconds = raster_from_volume(read_volume(d + "t1.dcev"));
    s.aux.s0 = raster_from_volume(read_volume(d + "s0.dcev"));
    s.aux.mask = mask_from_volume(read_volume(d + "mask.dcev"));
    s.cp = load_aif(d + "aif.csv");
    return s;
}

}  // namespace

int cmd_train(const TrainArgs& args) {
    return run_guarded([&]() {
        TrainConfig cfg = load_json(args.config_path).get<TrainConfig>();
        cfg.out_dir = args.out_dir;
        cfg.resume_from = args.resume;

        TrainDataset dataset;
        if (fs::exists(args.data_dir + "/series.dcev")) {
            dataset.push_back(load_subject(args.data_dir));
        } else {
            std::vector<std::string> dirs;
            if (!fs::is_directory(args.data_dir))
                throw IoError("data directory does not exist: " + args.data_dir);
            for (const auto& entry : fs::directory_iterator(args.data_dir))
                if (entry.is_directory() && fs::exists(entry.path() / "series.dcev"))
                    dirs.push_back(entry.path().string());
            std::sort(dirs.begin(), dirs.end());
            for (const std::string& dir : dirs) dataset.push_back(load_subject(dir));
        }
        if (dataset.empty())
            throw ConfigError("no subjects found under data directory: " + args.data_dir);

        TrainResult res = train(cfg, dataset);
        std::cout << "train mode=" << to_string(cfg.mode) << " subjects=" << dataset.size()
                  << " steps=" << res.history.size()
                  << " checkpoint=" << res.final_checkpoint << '\n';
        return 0;
    });
}

int cmd_infer(const InferArgs& args) {
    return run_guarded([&]() {
        Checkpoint ckpt = load_checkpoint(args.checkpoint);
        DceSeries series = series_from_volume(read_volume(args.series));
        RasterB mask;
        const bool has_mask = !args.mask.empty();
        if (has_mask) mask = mask_from_volume(read_volume(args.mask));
        InferResult res = infer(ckpt, series, has_mask ? &mask : nullptr);

        fs::create_directories(args.out_dir);
        const std::string d = args.out_dir + "/";
        write_volume(d + "pk.dcev", volume_from_pk(res.pk));
        std::ofstream aif(d + "aif_estimate.csv");
        if (!aif) throw IoError("cannot open for writing: " + d + "aif_estimate.csv");
        write_aif_csv(aif, res.cp);
        std::cout << "infer frames=" << series.acq.n_frames << " dims=" << series.height << 'x'
                  << series.width << '\n';
        return 0;
    });
}

int cmd_evaluate(const EvaluateArgs& args) {
    return run_guarded([&]() {
        PkMap pred = pk_from_volume(read_volume(args.pred));
        PkMap ref = pk_from_volume(read_volume(args.reference));
        RasterB mask = mask_from_volume(read_volume(args.mask));
        if (pred.model != ref.model)
            throw ConfigError("evaluate: prediction and reference use different TK models");
        if (pred.width != ref.width || pred.height != ref.height)
            throw ShapeMismatch("evaluate: prediction and reference dimensions disagree");

        const char* names[3] = {"ktrans", "vp", "ve"};
        const RasterD* pm[3] = {&pred.ktrans_per_min, &pred.vp, pred.ve ? &*pred.ve : nullptr};
        const RasterD* rm[3] = {&ref.ktrans_per_min, &ref.vp, ref.ve ? &*ref.ve : nullptr};

        std::ostringstream csv;
        csv << "parameter,metric,value,region_id\n";
        for (int i = 0; i < pred.n_params(); ++i) {
            double range = 0;
            for (size_t v = 0; v < mask.data.size(); ++v)
                if (mask.data[v]) range = std::max(range, rm[i]->data[v]);
            if (range <= 0) range = 1.0;  // degenerate all-zero reference
            csv << names[i] << ",psnr," << metric_value(psnr(*pm[i], *rm[i], range, mask))
                << ",\n";
            csv << names[i] << ",ssim," << metric_value(ssim(*pm[i], *rm[i], range, mask))
                << ",\n";
        }
        if (!args.regions.empty()) {
            RasterD labels = raster_from_volume(read_volume(args.regions));
            RegionSpec spec;
            spec.label_raster = Raster<int32_t>(labels.width, labels.height);
            for (size_t v = 0; v < labels.data.size(); ++v) {
                spec.label_raster.data[v] = static_cast<int32_t>(labels.data[v]);
                if (spec.label_raster.data[v] != 0)
                    spec.region_ids.insert(spec.label_raster.data[v]);
            }
            for (const auto& [region, means] : region_stats(pred, spec))
                for (size_t i = 0; i < means.size(); ++i)
                    csv << names[i] << ",region_mean," << metric_value(means[i]) << ',' << region
                        << '\n';
        }
        std::ofstream out(args.out_csv);
        if (!out) throw IoError("cannot open for writing: " + args.out_csv);
        out << csv.str();
        if (!out) throw IoError("csv write failed: " + args.out_csv);

        if (!args.plot.empty()) {
            PlasmaCurve truth, est;
            const bool overlay = !args.aif_true.empty() && !args.aif_estimate.empty();
            if (overlay) {
                truth = load_aif(args.aif_true);
                est = load_aif(args.aif_estimate);
            }
            write_evaluation_svg(args.plot, pred, overlay ? &truth : nullptr,
                                 overlay ? &est : nullptr);
        }
        std::cout << "evaluate model=" << to_string(pred.model) << " csv=" << args.out_csv
                  << '\n';
        return 0;
    });
}

}  // namespace dce
