#include "nvmag/shell_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

namespace nvmag {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  if (std::isnan(v))
    return "nan";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

double parse_double(std::string_view s) {
  if (s == "nan" || s == "NaN")
    return NAN;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw Error(Errc::IoError, "malformed number '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos)
      break;
    start = pos + 1;
  }
  return out;
}

std::ofstream open_out(const fs::path &path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream os(path, mode);
  if (!os)
    throw Error(Errc::IoError, "cannot open '" + path.string() + "' for writing");
  return os;
}

std::ifstream open_in(const fs::path &path, std::ios::openmode mode = std::ios::in) {
  std::ifstream is(path, mode);
  if (!is)
    throw Error(Errc::IoError, "cannot open '" + path.string() + "'");
  return is;
}

double percentile(std::vector<double> sorted, double p) {
  std::sort(sorted.begin(), sorted.end());
  const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * double(sorted.size() - 1);
  const auto lo = std::size_t(std::floor(rank));
  const auto hi = std::min(sorted.size() - 1, lo + 1);
  return sorted[lo] + (rank - double(lo)) * (sorted[hi] - sorted[lo]);
}

nlohmann::json vec_json(const Eigen::Ref<const Eigen::VectorXd> &v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k)
    a.push_back(v[k]);
  return a;
}

template <int N> Eigen::Matrix<double, N, 1> json_vec(const nlohmann::json &a) {
  Eigen::Matrix<double, N, 1> v;
  if (!a.is_array() || a.size() != std::size_t(N))
    throw Error(Errc::IoError, "expected an array of " + std::to_string(N) + " numbers");
  for (int k = 0; k < N; ++k)
    v[k] = a.at(std::size_t(k)).get<double>();
  return v;
}

} // namespace

std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char *env = std::getenv("SOURCE_DATE_EPOCH"))
    t = std::time_t(std::strtoll(env, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json cube_header(const OdmrCube &cube, const std::string &created_utc) {
  nlohmann::json h = {{"width", cube.width},
                      {"height", cube.height},
                      {"n_freq", cube.n_freq()},
                      {"frequencies_hz", cube.frequencies},
                      {"schedule", schedule_to_json(cube.schedule)},
                      {"ref_counts_mean", cube.ref_counts_mean},
                      {"created_utc", created_utc}};
  if (cube.rng_seed)
    h["rng_seed"] = *cube.rng_seed;
  return h;
}

void write_cube(const OdmrCube &cube, const fs::path &path) {
  cube.validate();
  auto os = open_out(path, std::ios::out | std::ios::binary | std::ios::trunc);
  os << kCubeMagic << cube_header(cube, utc_timestamp()).dump() << '\n';
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char *>(cube.contrast.data()),
             std::streamsize(cube.contrast.size() * sizeof(float)));
  } else {
    for (float v : cube.contrast) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      char b[4] = {char(bits & 0xff), char((bits >> 8) & 0xff), char((bits >> 16) & 0xff),
                   char((bits >> 24) & 0xff)};
      os.write(b, 4);
    }
  }
  if (!os)
    throw Error(Errc::IoError, "failed writing '" + path.string() + "'");
}

namespace {

struct CubePrefix {
  nlohmann::json header;
  std::size_t payload_offset = 0;
};

CubePrefix read_prefix(std::ifstream &is) {
  char magic[kCubeMagic.size()];
  if (!is.read(magic, std::streamsize(sizeof magic)) ||
      std::string_view(magic, sizeof magic) != kCubeMagic)
    throw Error(Errc::CorruptMagic, "not an ODMRCUBE1 file");
  std::string line;
  if (!std::getline(is, line))
    throw Error(Errc::HeaderMismatch, "missing cube header line");
  CubePrefix p;
  try {
    p.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::HeaderMismatch, std::string("cube header is not valid JSON: ") + e.what());
  }
  p.payload_offset = kCubeMagic.size() + line.size() + 1;
  return p;
}

} // namespace

std::size_t cube_payload_offset(const fs::path &path) {
  auto is = open_in(path, std::ios::in | std::ios::binary);
  return read_prefix(is).payload_offset;
}

OdmrCube read_cube(const fs::path &path) {
  auto is = open_in(path, std::ios::in | std::ios::binary);
  const CubePrefix prefix = read_prefix(is);
  const auto &h = prefix.header;

  OdmrCube cube;
  std::size_t n_freq = 0;
  try {
    cube.width = h.at("width").get<int>();
    cube.height = h.at("height").get<int>();
    n_freq = h.at("n_freq").get<std::size_t>();
    cube.frequencies = h.at("frequencies_hz").get<std::vector<double>>();
    cube.schedule = schedule_from_json(h.at("schedule"));
    cube.ref_counts_mean = h.at("ref_counts_mean").get<double>();
    if (h.contains("rng_seed"))
      cube.rng_seed = h.at("rng_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::HeaderMismatch, std::string("cube header is missing fields: ") + e.what());
  }
  if (cube.width <= 0 || cube.height <= 0 || n_freq != cube.frequencies.size())
    throw Error(Errc::HeaderMismatch, "cube header dimensions are inconsistent");

  const std::size_t expected = 4 * cube.plane() * n_freq;
  const auto file_size = std::size_t(fs::file_size(path));
  if (file_size < prefix.payload_offset || file_size - prefix.payload_offset != expected)
    throw Error(Errc::HeaderMismatch, "payload size disagrees with the header");

  cube.contrast.resize(cube.plane() * n_freq);
  is.read(reinterpret_cast<char *>(cube.contrast.data()), std::streamsize(expected));
  if (!is)
    throw Error(Errc::IoError, "failed reading cube payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (float &v : cube.contrast) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = ((bits & 0xff) << 24) | ((bits & 0xff00) << 8) | ((bits >> 8) & 0xff00) | (bits >> 24);
      v = std::bit_cast<float>(bits);
    }
  }
  cube.validate();
  return cube;
}

void write_map_csv(const Image &values, const Mask *valid, const fs::path &path) {
  auto os = open_out(path);
  os << "x,y,value\n";
  for (Eigen::Index y = 0; y < values.rows(); ++y)
    for (Eigen::Index x = 0; x < values.cols(); ++x) {
      const bool ok = !valid || (*valid)(y, x);
      os << x << ',' << y << ',' << format_double(ok ? values(y, x) : NAN) << '\n';
    }
  if (!os)
    throw Error(Errc::IoError, "failed writing '" + path.string() + "'");
}

Image read_map_csv(const fs::path &path) {
  auto is = open_in(path);
  std::string line;
  std::getline(is, line);
  if (line.rfind("x,y,", 0) != 0)
    throw Error(Errc::IoError, "'" + path.string() + "' is not an x,y,value map");
  std::vector<std::tuple<int, int, double>> rows;
  int w = 0, h = 0;
  while (std::getline(is, line)) {
    if (line.empty())
      continue;
    const auto cols = split(line, ',');
    if (cols.size() != 3)
      throw Error(Errc::IoError, "map rows must have three columns");
    const int x = int(parse_double(cols[0]));
    const int y = int(parse_double(cols[1]));
    if (x < 0 || y < 0)
      throw Error(Errc::IoError, "negative pixel index in map");
    rows.emplace_back(x, y, parse_double(cols[2]));
    w = std::max(w, x + 1);
    h = std::max(h, y + 1);
  }
  Image img = Image::Constant(h, w, NAN);
  for (const auto &[x, y, v] : rows)
    img(y, x) = v;
  return img;
}

void write_vector_csv(const VectorMaps &vm, const fs::path &path) {
  auto os = open_out(path);
  os << "x,y,bx,by,bz\n";
  for (int y = 0; y < vm.height; ++y)
    for (int x = 0; x < vm.width; ++x) {
      os << x << ',' << y;
      for (int k = 0; k < 3; ++k)
        os << ',' << format_double(vm.valid(y, x) ? vm.b[std::size_t(k)](y, x) : NAN);
      os << '\n';
    }
}

RenderSidecar render_map(const Image &values, const fs::path &path, const RenderOptions &opts) {
  std::vector<double> finite;
  for (Eigen::Index k = 0; k < values.size(); ++k)
    if (std::isfinite(values.data()[k]))
      finite.push_back(values.data()[k]);
  if (finite.empty())
    throw Error(Errc::AllInvalid, "map has no finite values to render");

  RenderSidecar side;
  side.width = int(values.cols());
  side.height = int(values.rows());
  side.unit = opts.unit;
  double lo = percentile(finite, opts.clip_low);
  double hi = percentile(finite, opts.clip_high);
  const bool degenerate = !(hi > lo);
  if (degenerate) {
    const double half = std::max(std::abs(lo), 1e-9) * 1e-3;
    side.min = lo - half;
    side.max = lo + half;
  } else {
    side.min = lo;
    side.max = hi;
  }

  auto os = open_out(path, std::ios::out | std::ios::binary | std::ios::trunc);
  os << "P5\n" << side.width << ' ' << side.height << "\n65535\n";
  for (Eigen::Index y = 0; y < values.rows(); ++y)
    for (Eigen::Index x = 0; x < values.cols(); ++x) {
      const double v = values(y, x);
      int code = 0;
      if (std::isfinite(v)) {
        code = degenerate ? 32768
                          : int(std::lround(std::clamp((v - lo) / (hi - lo), 0.0, 1.0) * 65535.0));
      }
      const char bytes[2] = {char((code >> 8) & 0xff), char(code & 0xff)};
      os.write(bytes, 2);
    }
  if (!os)
    throw Error(Errc::IoError, "failed writing '" + path.string() + "'");

  const nlohmann::json doc = {{"width", side.width},
                              {"height", side.height},
                              {"maxval", 65535},
                              {"min", side.min},
                              {"max", side.max},
                              {"unit", side.unit},
                              {"clip_percentiles", {opts.clip_low, opts.clip_high}},
                              {"invalid_pixel", 0},
                              {"mapping", "value = min + (max - min) * pixel / 65535"}};
  write_text_file(fs::path(path.string() + ".json"), doc.dump(2) + "\n");
  return side;
}

Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> read_pgm16(const fs::path &path) {
  auto is = open_in(path, std::ios::in | std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  is.get();
  if (magic != "P5" || maxval != 65535 || w <= 0 || h <= 0)
    throw Error(Errc::IoError, "not a 16-bit P5 PGM");
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      unsigned char b[2];
      if (!is.read(reinterpret_cast<char *>(b), 2))
        throw Error(Errc::IoError, "truncated PGM");
      img(y, x) = (int(b[0]) << 8) | int(b[1]);
    }
  return img;
}

RenderSidecar read_sidecar(const fs::path &path) {
  const auto doc = read_json_file(path);
  RenderSidecar s;
  s.width = doc.at("width").get<int>();
  s.height = doc.at("height").get<int>();
  s.min = doc.at("min").get<double>();
  s.max = doc.at("max").get<double>();
  s.unit = doc.at("unit").get<std::string>();
  return s;
}

nlohmann::json calibration_to_json(const BiasCalibration &c) {
  return {{"region", {{"x", c.region.x}, {"y", c.region.y}, {"w", c.region.w}, {"h", c.region.h}}},
          {"b0_t", vec_json(c.b0)},
          {"signs", {c.signs[0], c.signs[1], c.signs[2], c.signs[3]}},
          {"bias_projection_t", vec_json(c.bias_projection.p)},
          {"reference_hz", vec_json(c.reference.nu_lower)},
          {"amplitude", vec_json(c.amplitude)},
          {"gamma_hwhm_hz", vec_json(c.gamma_hwhm)},
          {"baseline", c.baseline},
          {"sign_residual_t", c.sign_residual},
          {"runner_up_residual_t", c.runner_up_residual}};
}

BiasCalibration calibration_from_json(const nlohmann::json &doc) {
  BiasCalibration c;
  try {
    const auto &r = doc.at("region");
    c.region = {r.at("x").get<int>(), r.at("y").get<int>(), r.at("w").get<int>(), r.at("h").get<int>()};
    c.b0 = json_vec<3>(doc.at("b0_t"));
    const auto signs = json_vec<4>(doc.at("signs"));
    c.signs = signs.cast<int>();
    c.bias_projection.p = json_vec<4>(doc.at("bias_projection_t"));
    c.bias_projection.signs = c.signs;
    c.reference.nu_lower = json_vec<4>(doc.at("reference_hz"));
    c.amplitude = json_vec<4>(doc.at("amplitude"));
    c.gamma_hwhm = json_vec<4>(doc.at("gamma_hwhm_hz"));
    c.baseline = doc.at("baseline").get<double>();
    c.sign_residual = doc.value("sign_residual_t", 0.0);
    c.runner_up_residual = doc.value("runner_up_residual_t", 0.0);
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::IoError, std::string("malformed calibration document: ") + e.what());
  }
  return c;
}

void write_fits_csv(const FrequencyMaps &maps, const fs::path &path) {
  auto os = open_out(path);
  os << "x,y,converged,assigned,n_iter,rss,baseline";
  for (const char *name : {"nu_hz", "amplitude", "gamma_hwhm_hz"})
    for (int i = 0; i < 4; ++i)
      os << ',' << name << '_' << i;
  os << '\n';
  for (int y = 0; y < maps.height; ++y)
    for (int x = 0; x < maps.width; ++x) {
      os << x << ',' << y << ',' << int(maps.converged(y, x)) << ',' << int(maps.assigned(y, x)) << ','
         << int(maps.n_iter(y, x)) << ',' << format_double(maps.rss(y, x)) << ','
         << format_double(maps.baseline(y, x));
      for (const auto *group : {&maps.nu, &maps.amplitude, &maps.gamma_hwhm})
        for (int i = 0; i < 4; ++i)
          os << ',' << format_double((*group)[std::size_t(i)](y, x));
      os << '\n';
    }
  if (!os)
    throw Error(Errc::IoError, "failed writing '" + path.string() + "'");
}

FrequencyMaps read_fits_csv(const fs::path &path) {
  auto is = open_in(path);
  std::string line;
  std::getline(is, line);
  if (line.rfind("x,y,converged,assigned", 0) != 0)
    throw Error(Errc::IoError, "'" + path.string() + "' is not a fits table");
  std::vector<std::vector<double>> rows;
  int w = 0, h = 0;
  while (std::getline(is, line)) {
    if (line.empty())
      continue;
    const auto cols = split(line, ',');
    if (cols.size() != 19)
      throw Error(Errc::IoError, "fits rows must have 19 columns");
    std::vector<double> v;
    for (auto c : cols)
      v.push_back(parse_double(c));
    w = std::max(w, int(v[0]) + 1);
    h = std::max(h, int(v[1]) + 1);
    rows.push_back(std::move(v));
  }
  FrequencyMaps m;
  m.width = w;
  m.height = h;
  for (int i = 0; i < 4; ++i) {
    m.nu[std::size_t(i)] = Image::Constant(h, w, NAN);
    m.amplitude[std::size_t(i)] = Image::Constant(h, w, NAN);
    m.gamma_hwhm[std::size_t(i)] = Image::Constant(h, w, NAN);
  }
  m.baseline = Image::Constant(h, w, NAN);
  m.rss = Image::Constant(h, w, NAN);
  m.n_iter = Image::Zero(h, w);
  m.converged = Mask::Constant(h, w, false);
  m.assigned = Mask::Constant(h, w, false);
  for (const auto &v : rows) {
    const int x = int(v[0]), y = int(v[1]);
    m.converged(y, x) = v[2] != 0;
    m.assigned(y, x) = v[3] != 0;
    m.n_iter(y, x) = v[4];
    m.rss(y, x) = v[5];
    m.baseline(y, x) = v[6];
    for (int i = 0; i < 4; ++i) {
      m.nu[std::size_t(i)](y, x) = v[std::size_t(7 + i)];
      m.amplitude[std::size_t(i)](y, x) = v[std::size_t(11 + i)];
      m.gamma_hwhm[std::size_t(i)](y, x) = v[std::size_t(15 + i)];
    }
  }
  return m;
}

nlohmann::json sensitivity_to_json(const std::array<SensitivityReport, 4> &report) {
  static constexpr const char *labels[4] = {"[111]", "[1-1-1]", "[-11-1]", "[-1-11]"};
  nlohmann::json doc = nlohmann::json::array();
  for (std::size_t i = 0; i < 4; ++i) {
    const auto &r = report[i];
    doc.push_back({{"orientation", labels[i]},
                   {"contrast", r.contrast},
                   {"gamma_fwhm_hz", r.gamma_fwhm},
                   {"t2star_s", r.t2star},
                   {"counts", r.counts},
                   {"t_o_s", r.overhead},
                   {"eta_t_per_sqrt_hz", r.eta},
                   {"eta_nt_per_sqrt_hz", r.eta * 1e9}});
  }
  return doc;
}

nlohmann::json read_json_file(const fs::path &path) {
  auto is = open_in(path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::IoError, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_text_file(const fs::path &path, const std::string &text) {
  auto os = open_out(path, std::ios::out | std::ios::trunc);
  os << text;
  if (!os)
    throw Error(Errc::IoError, "failed writing '" + path.string() + "'");
}

} // namespace nvmag
