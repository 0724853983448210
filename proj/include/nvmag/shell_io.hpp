#pragma once

// File formats: the single-file contrast cube container, CSV map exports,
// 16-bit PGM renders with JSON sidecars, and JSON documents for calibration,
// fit results and sensitivity reports.

#include "nvmag/field_maps.hpp"
#include "nvmag/spectro_synth.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <string>

namespace nvmag {

// Cube container:
//   bytes 0..9   "ODMRCUBE1\n"
//   one line     JSON header, keys sorted, terminated by '\n'
//   payload      little-endian float32, index = f*H*W + y*W + x
// The payload starts at cube_payload_offset(); `created_utc` is the only
// field that differs between two writes of the same cube.
inline constexpr std::string_view kCubeMagic = "ODMRCUBE1\n";

/// UTC timestamp "YYYY-MM-DDTHH:MM:SSZ"; honours SOURCE_DATE_EPOCH.
std::string utc_timestamp();

nlohmann::json cube_header(const OdmrCube &cube, const std::string &created_utc);
void write_cube(const OdmrCube &cube, const std::filesystem::path &path);
OdmrCube read_cube(const std::filesystem::path &path);
std::size_t cube_payload_offset(const std::filesystem::path &path);

// maps -----------------------------------------------------------------------

/// "x,y,value" rows in row-major order; invalid pixels are written as nan.
void write_map_csv(const Image &values, const Mask *valid, const std::filesystem::path &path);
Image read_map_csv(const std::filesystem::path &path);
/// "x,y,bx,by,bz" in tesla.
void write_vector_csv(const VectorMaps &vm, const std::filesystem::path &path);

struct RenderOptions {
  double clip_low = 1.0;   ///< percentile
  double clip_high = 99.0; ///< percentile
  std::string unit = "T";
};

struct RenderSidecar {
  int width = 0;
  int height = 0;
  double min = 0; ///< value at pixel 0
  double max = 0; ///< value at pixel 65535
  std::string unit;

  double value(int pixel) const { return min + (max - min) * double(pixel) / 65535.0; }
};

/// Writes a P5 16-bit PGM (big-endian samples, maxval 65535) and a sidecar
/// `<path>.json`. Values are scaled linearly between the clip percentiles;
/// non-finite pixels render as 0. A constant map renders as 32768.
RenderSidecar render_map(const Image &values, const std::filesystem::path &path,
                         const RenderOptions &opts = {});
/// Raw 16-bit samples of a PGM written by render_map.
Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
read_pgm16(const std::filesystem::path &path);
RenderSidecar read_sidecar(const std::filesystem::path &path);

// documents -------------------------------------------------------------------

nlohmann::json calibration_to_json(const BiasCalibration &c);
BiasCalibration calibration_from_json(const nlohmann::json &doc);

/// Per-pixel fit diagnostics, one CSV row per pixel.
void write_fits_csv(const FrequencyMaps &maps, const std::filesystem::path &path);
FrequencyMaps read_fits_csv(const std::filesystem::path &path);

nlohmann::json sensitivity_to_json(const std::array<SensitivityReport, 4> &report);

nlohmann::json read_json_file(const std::filesystem::path &path);
void write_text_file(const std::filesystem::path &path, const std::string &text);

} // namespace nvmag
