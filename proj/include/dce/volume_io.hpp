#pragma once

#include "dce/core.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dce {

enum class VolumeDtype : uint8_t { F32 = 0, F64 = 1 };

// Minimal little-endian binary volume: magic "DCEV", u16 version, u8 dtype,
// u8 n_dims, u32 dims (slowest first), then the C-order payload. A JSON
// sidecar (same basename, ".json") carries acquisition metadata and units.
struct Volume {
    VolumeDtype dtype = VolumeDtype::F64;
    std::vector<uint32_t> dims;
    std::vector<double> data;  // always double in memory
    nlohmann::json sidecar;    // "dims" is filled in automatically on write

    size_t numel() const;
};

std::string sidecar_path(const std::string& volume_path);
void write_volume(const std::string& path, const Volume& vol);
Volume read_volume(const std::string& path);

// conversions between volumes and the in-memory domain types
Volume volume_from_series(const DceSeries& series);
DceSeries series_from_volume(const Volume& vol);
Volume volume_from_pk(const PkMap& pk);
PkMap pk_from_volume(const Volume& vol);
Volume volume_from_raster(const RasterD& r, const std::string& kind);
RasterD raster_from_volume(const Volume& vol);
Volume volume_from_mask(const RasterB& mask);
RasterB mask_from_volume(const Volume& vol);

nlohmann::json acq_to_json(const AcqParams& acq);
AcqParams acq_from_json(const nlohmann::json& j);

}  // namespace dce
