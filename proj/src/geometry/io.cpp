#include "geodiff/io.hpp"

#include <png.h>

#include <Eigen/Geometry>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "geodiff/error.hpp"

namespace geodiff::io {

namespace {

Raster from_png_image(png_image& image, std::vector<std::uint8_t>& buffer) {
  const int h = static_cast<int>(image.height);
  const int w = static_cast<int>(image.width);
  Raster out(h, w, 3);
  for (std::size_t i = 0; i < out.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) out.data()[i * 3 + c] = buffer[i * 3 + c] / 255.0f;
  }
  return out;
}

Raster decode_png_impl(png_image& image) {
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ValidationError("png decode failed: " + msg);
  }
  return from_png_image(image, buffer);
}

Raster to_mask(const Raster& rgb) {
  Raster m(rgb.height(), rgb.width(), 1);
  for (std::size_t i = 0; i < m.pixel_count(); ++i) {
    const float lum = 0.299f * rgb.data()[i * 3] + 0.587f * rgb.data()[i * 3 + 1] + 0.114f * rgb.data()[i * 3 + 2];
    m.data()[i] = lum > 0.0f ? 1.0f : 0.0f;
  }
  return m;
}

std::uint8_t to_byte(float v) {
  if (!std::isfinite(v)) v = 0.0f;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

float read_le_float(const std::uint8_t* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                       (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

Eigen::Vector2d vec2(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 2) throw ValidationError(std::string(what) + " must be a 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}

Eigen::Vector3d vec3(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(std::string(what) + " must be a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

Raster decode_png(std::span<const std::uint8_t> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ValidationError(std::string("png decode failed: ") + image.message);
  }
  return decode_png_impl(image);
}

Raster read_png(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_png(bytes);
}

Raster read_mask_png(const std::filesystem::path& path) { return to_mask(read_png(path)); }
Raster decode_mask_png(std::span<const std::uint8_t> bytes) { return to_mask(decode_png(bytes)); }

std::vector<std::uint8_t> encode_png(const Raster& image) {
  png_image out;
  std::memset(&out, 0, sizeof(out));
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(image.width());
  out.height = static_cast<png_uint_32>(image.height());
  int channels = image.channels();
  switch (channels) {
    case 1: out.format = PNG_FORMAT_GRAY; break;
    case 3: out.format = PNG_FORMAT_RGB; break;
    case 4: out.format = PNG_FORMAT_RGBA; break;
    default: throw ValidationError("png output needs 1, 3 or 4 channels");
  }
  std::vector<std::uint8_t> pixels(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) pixels[i] = to_byte(image.data()[i]);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&out, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw RuntimeFailure(std::string("png encode failed: ") + out.message);
  }
  std::vector<std::uint8_t> bytes(size);
  if (!png_image_write_to_memory(&out, bytes.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw RuntimeFailure(std::string("png encode failed: ") + out.message);
  }
  bytes.resize(size);
  return bytes;
}

void write_png(const std::filesystem::path& path, const Raster& image) {
  const auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Raster decode_pfm(std::span<const std::uint8_t> bytes) {
  // Header: "Pf\n<w> <h>\n<scale>\n"; negative scale means little-endian.
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  const std::string magic = token();
  if (magic != "Pf") throw ValidationError("PFM depth must be single-channel (magic 'Pf')");
  int w = 0;
  int h = 0;
  double scale = 0.0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    throw ValidationError("malformed PFM header");
  }
  ++pos;  // single whitespace byte before the raster
  if (w < 1 || h < 1) throw ValidationError("PFM dimensions must be >= 1");
  if (scale >= 0.0) throw ValidationError("only little-endian PFM (negative scale) is supported");
  const std::size_t need = static_cast<std::size_t>(w) * h * 4;
  if (bytes.size() < pos + need) throw ValidationError("PFM raster is truncated");
  Raster out(h, w, 1);
  for (int row = 0; row < h; ++row) {
    const int y = h - 1 - row;
    for (int x = 0; x < w; ++x) {
      out.at(y, x) = read_le_float(bytes.data() + pos + (static_cast<std::size_t>(row) * w + x) * 4);
    }
  }
  return out;
}

Raster read_pfm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_pfm(bytes);
}

std::vector<std::uint8_t> encode_pfm(const Raster& depth) {
  if (depth.channels() != 1) throw ValidationError("PFM output needs a single-channel raster");
  std::ostringstream header;
  header << "Pf\n" << depth.width() << " " << depth.height() << "\n-1.0\n";
  const std::string hs = header.str();
  std::vector<std::uint8_t> out(hs.begin(), hs.end());
  out.reserve(out.size() + depth.size() * 4);
  for (int row = 0; row < depth.height(); ++row) {
    const int y = depth.height() - 1 - row;
    for (int x = 0; x < depth.width(); ++x) {
      const auto bits = std::bit_cast<std::uint32_t>(depth.at(y, x));
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xffu));
    }
  }
  return out;
}

void write_pfm(const std::filesystem::path& path, const Raster& depth) {
  const auto bytes = encode_pfm(depth);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = i;
  // Tolerate data URLs ("data:image/png;base64,....").
  if (const auto comma = text.find(','); text.starts_with("data:") && comma != std::string_view::npos) {
    text.remove_prefix(comma + 1);
  }
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (const char ch : text) {
    if (ch == '=' || std::isspace(static_cast<unsigned char>(ch))) continue;
    const int v = lookup[static_cast<unsigned char>(ch)];
    if (v < 0) throw ValidationError("invalid base64 payload");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xffu));
    }
  }
  return out;
}

nlohmann::json transform_to_json(const geometry::EditTransform& t) {
  using geometry::TransformKind;
  nlohmann::json params = nlohmann::json::object();
  switch (t.kind) {
    case TransformKind::translate2d:
      params["offset"] = {t.offset.x(), t.offset.y()};
      break;
    case TransformKind::scale2d:
      params["scale"] = {t.scale2.x(), t.scale2.y()};
      if (!t.auto_pivot) params["pivot"] = {t.pivot2.x(), t.pivot2.y()};
      break;
    case TransformKind::rigid3d: {
      nlohmann::json rows = nlohmann::json::array();
      for (int r = 0; r < 3; ++r) rows.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
      params["rotation"] = rows;
      params["translation"] = {t.translation.x(), t.translation.y(), t.translation.z()};
      if (!t.auto_pivot) params["pivot"] = {t.pivot3.x(), t.pivot3.y(), t.pivot3.z()};
      break;
    }
    case TransformKind::scale3d:
      params["scale"] = {t.scale3.x(), t.scale3.y(), t.scale3.z()};
      if (!t.auto_pivot) params["pivot"] = {t.pivot3.x(), t.pivot3.y(), t.pivot3.z()};
      break;
    default:
      break;
  }
  nlohmann::json depth;
  if (t.depth_source.kind == geometry::DepthSourceKind::file) {
    depth = {{"kind", "file"}, {"path", t.depth_source.path}};
  } else {
    depth = {{"kind", "constant"}, {"value", t.depth_source.constant_m}};
  }
  return {{"kind", geometry::to_string(t.kind)}, {"params", params}, {"depth_source", depth}};
}

geometry::EditTransform transform_from_json(const nlohmann::json& j) {
  using geometry::TransformKind;
  if (!j.is_object() || !j.contains("kind")) throw ValidationError("transform JSON needs a 'kind'");
  try {
    geometry::EditTransform t;
    t.kind = geometry::transform_kind_from_string(j.at("kind").get<std::string>());
    const nlohmann::json params = j.value("params", nlohmann::json::object());
    switch (t.kind) {
      case TransformKind::translate2d:
        t.offset = vec2(params.at("offset"), "offset");
        break;
      case TransformKind::scale2d:
        t.scale2 = vec2(params.at("scale"), "scale");
        if (params.contains("pivot")) {
          t.pivot2 = vec2(params["pivot"], "pivot");
        } else {
          t.auto_pivot = true;
        }
        break;
      case TransformKind::rigid3d:
        if (params.contains("rotation")) {
          const auto& rows = params["rotation"];
          if (!rows.is_array() || rows.size() != 3) throw ValidationError("rotation must be 3x3");
          for (int r = 0; r < 3; ++r) t.rotation.row(r) = vec3(rows[r], "rotation row").transpose();
        } else if (params.contains("axis")) {
          const Eigen::Vector3d axis = vec3(params["axis"], "axis");
          if (axis.norm() == 0.0) throw ValidationError("rotation axis must be nonzero");
          const double deg = params.value("angle_deg", 0.0);
          t.rotation = Eigen::AngleAxisd(deg * M_PI / 180.0, axis.normalized()).toRotationMatrix();
        }
        if (params.contains("translation")) t.translation = vec3(params["translation"], "translation");
        if (params.contains("pivot")) {
          t.pivot3 = vec3(params["pivot"], "pivot");
        } else {
          t.auto_pivot = true;
        }
        break;
      case TransformKind::scale3d:
        t.scale3 = vec3(params.at("scale"), "scale");
        if (params.contains("pivot")) {
          t.pivot3 = vec3(params["pivot"], "pivot");
        } else {
          t.auto_pivot = true;
        }
        break;
      default:
        break;
    }
    if (j.contains("depth_source")) {
      const auto& d = j["depth_source"];
      const std::string kind = d.is_string() ? d.get<std::string>() : d.value("kind", std::string("constant"));
      if (kind == "file") {
        t.depth_source.kind = geometry::DepthSourceKind::file;
        if (d.is_object()) t.depth_source.path = d.value("path", std::string());
      } else if (kind == "constant") {
        t.depth_source.kind = geometry::DepthSourceKind::constant;
        if (d.is_object()) t.depth_source.constant_m = d.value("value", 0.5);
      } else {
        throw ValidationError("depth_source kind must be 'file' or 'constant'");
      }
    }
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed transform JSON: ") + e.what());
  }
}

nlohmann::json intrinsics_to_json(const geometry::CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}

geometry::CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("intrinsics must be an object {fx, fy, cx, cy}");
  geometry::CameraIntrinsics k;
  try {
    k.fx = j.at("fx").get<double>();
    k.fy = j.at("fy").get<double>();
    k.cx = j.at("cx").get<double>();
    k.cy = j.at("cy").get<double>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("intrinsics need numeric fx, fy, cx, cy");
  }
  k.validate();
  return k;
}

}  // namespace geodiff::io
