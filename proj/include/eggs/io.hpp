// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"
#include "eggs/error.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace eggs {

static_assert(std::endian::native == std::endian::little,
              "binary formats are read and written in host order");

namespace fs = std::filesystem;

namespace detail {

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

template <class T>
void put(std::string& out, T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.append(b, sizeof(T));
}

template <class T>
T get(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

} // namespace detail

// ---------------------------------------------------------------------------
// PLY point clouds
// ---------------------------------------------------------------------------

namespace detail {

struct PlyProperty {
    std::string name;
    std::string type;
    bool is_list = false;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

struct PlyHeader {
    std::string format;
    std::vector<std::string> comments;
    std::vector<PlyElement> elements;
    std::size_t body_offset = 0;
};

inline std::size_t ply_type_size(const std::string& t) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "float" || t == "int32" || t == "uint32" ||
        t == "float32") {
        return 4;
    }
    if (t == "double" || t == "float64") return 8;
    return 0;
}

inline double ply_read_binary(const std::string& t, const char* p) {
    if (t == "char" || t == "int8") return detail::get<std::int8_t>(p);
    if (t == "uchar" || t == "uint8") return detail::get<std::uint8_t>(p);
    if (t == "short" || t == "int16") return detail::get<std::int16_t>(p);
    if (t == "ushort" || t == "uint16") return detail::get<std::uint16_t>(p);
    if (t == "int" || t == "int32") return detail::get<std::int32_t>(p);
    if (t == "uint" || t == "uint32") return detail::get<std::uint32_t>(p);
    if (t == "float" || t == "float32") return detail::get<float>(p);
    return detail::get<double>(p);
}

inline PlyHeader parse_ply_header(const std::string& bytes, const std::string& what) {
    if (bytes.rfind("ply\n", 0) != 0 && bytes.rfind("ply\r\n", 0) != 0) {
        throw ParseError(what + ": missing 'ply' magic");
    }
    PlyHeader h;
    std::size_t pos = 0;
    int line_no = 0;
    while (true) {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw ParseError(what + ": header has no end_header");
        std::string line = bytes.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = nl + 1;
        ++line_no;
        std::istringstream ls(line);
        std::string kw;
        ls >> kw;
        auto fail = [&](const std::string& msg) {
            throw ParseError(what + ": header line " + std::to_string(line_no) + ": " + msg);
        };
        if (kw == "ply" && line_no == 1) continue;
        if (kw == "end_header") break;
        if (kw == "format") {
            std::string version;
            ls >> h.format >> version;
            if (h.format != "ascii" && h.format != "binary_little_endian") {
                fail("unsupported format '" + h.format + "'");
            }
        } else if (kw == "comment" || kw == "obj_info") {
            std::string rest;
            std::getline(ls, rest);
            if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
            h.comments.push_back(rest);
        } else if (kw == "element") {
            PlyElement e;
            long long n = -1;
            ls >> e.name >> n;
            if (e.name.empty() || n < 0 || ls.fail()) fail("malformed element line");
            e.count = static_cast<std::size_t>(n);
            h.elements.push_back(e);
        } else if (kw == "property") {
            if (h.elements.empty()) fail("property before any element");
            PlyProperty p;
            ls >> p.type;
            if (p.type == "list") {
                std::string count_t, item_t;
                ls >> count_t >> item_t >> p.name;
                p.is_list = true;
                p.type = count_t + " " + item_t;
            } else {
                ls >> p.name;
                if (ply_type_size(p.type) == 0) fail("unknown property type '" + p.type + "'");
            }
            if (p.name.empty()) fail("property without a name");
            h.elements.back().props.push_back(p);
        } else if (!kw.empty()) {
            fail("unexpected keyword '" + kw + "'");
        }
    }
    if (h.format.empty()) throw ParseError(what + ": header has no format line");
    h.body_offset = pos;
    return h;
}

} // namespace detail

/// Reads `vertex` positions (x, y, z) and optional colors (red, green, blue)
/// from an ascii or binary_little_endian PLY file. Integer colors are scaled
/// by 1/255.
inline PointCloud read_ply_points(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    const std::string what = path.string();
    const auto h = detail::parse_ply_header(bytes, what);
    std::size_t offset = h.body_offset;
    std::istringstream ascii(h.format == "ascii" ? bytes.substr(offset) : std::string());
    for (const auto& e : h.elements) {
        const bool is_vertex = e.name == "vertex";
        if (!is_vertex) {
            // Elements ahead of the vertices must be skipped.
            if (h.format == "ascii") {
                std::string line;
                for (std::size_t k = 0; k < e.count; ++k) std::getline(ascii, line);
                continue;
            }
            std::size_t rec = 0;
            for (const auto& p : e.props) {
                if (p.is_list) throw ParseError(what + ": list property before vertex element");
                rec += detail::ply_type_size(p.type);
            }
            offset += rec * e.count;
            continue;
        }
        int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
        for (int k = 0; k < static_cast<int>(e.props.size()); ++k) {
            const auto& n = e.props[static_cast<std::size_t>(k)].name;
            if (e.props[static_cast<std::size_t>(k)].is_list) {
                throw ParseError(what + ": list property '" + n + "' in vertex element");
            }
            if (n == "x") ix = k;
            else if (n == "y") iy = k;
            else if (n == "z") iz = k;
            else if (n == "red") ir = k;
            else if (n == "green") ig = k;
            else if (n == "blue") ib = k;
        }
        if (ix < 0 || iy < 0 || iz < 0) throw ParseError(what + ": vertex element lacks x, y or z");
        const bool colors = ir >= 0 && ig >= 0 && ib >= 0;
        auto color_scale = [&](int k) {
            const auto& t = e.props[static_cast<std::size_t>(k)].type;
            return (t == "float" || t == "float32" || t == "double" || t == "float64") ? 1.0
                                                                                        : 1.0 / 255.0;
        };
        PointCloud pc;
        pc.positions.reserve(e.count);
        std::vector<double> vals(e.props.size());
        std::vector<std::size_t> sizes, offs;
        std::size_t rec = 0;
        for (const auto& p : e.props) {
            offs.push_back(rec);
            sizes.push_back(detail::ply_type_size(p.type));
            rec += sizes.back();
        }
        if (h.format == "binary_little_endian" && bytes.size() < offset + rec * e.count) {
            throw ParseError(what + ": file truncated inside vertex data");
        }
        for (std::size_t i = 0; i < e.count; ++i) {
            if (h.format == "ascii") {
                for (std::size_t k = 0; k < vals.size(); ++k) {
                    if (!(ascii >> vals[k])) {
                        throw ParseError(what + ": vertex " + std::to_string(i) +
                                         ": expected " + std::to_string(vals.size()) + " numbers");
                    }
                }
            } else {
                const char* base = bytes.data() + offset + i * rec;
                for (std::size_t k = 0; k < vals.size(); ++k) {
                    vals[k] = detail::ply_read_binary(e.props[k].type, base + offs[k]);
                }
            }
            const auto at = [&](int k) { return vals[static_cast<std::size_t>(k)]; };
            pc.positions.emplace_back(at(ix), at(iy), at(iz));
            if (!pc.positions.back().allFinite()) {
                throw ParseError(what + ": vertex " + std::to_string(i) + " is not finite");
            }
            if (colors) {
                pc.colors.emplace_back(at(ir) * color_scale(ir), at(ig) * color_scale(ig),
                                       at(ib) * color_scale(ib));
            }
        }
        return pc;
    }
    throw ParseError(what + ": no vertex element");
}

/// Binary PLY with float x, y, z and, when present, uchar red, green, blue.
inline void write_ply_points(const PointCloud& pc, const fs::path& path) {
    if (pc.has_colors() && pc.colors.size() != pc.size()) {
        throw ConfigError("write_ply_points: colors do not match positions");
    }
    std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " +
                      std::to_string(pc.size()) +
                      "\nproperty float x\nproperty float y\nproperty float z\n";
    if (pc.has_colors()) out += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out += "end_header\n";
    for (std::size_t i = 0; i < pc.size(); ++i) {
        for (int k = 0; k < 3; ++k) detail::put(out, static_cast<float>(pc.positions[i][k]));
        if (!pc.has_colors()) continue;
        for (int k = 0; k < 3; ++k) {
            const double v = std::nearbyint(std::clamp(pc.colors[i][k], 0.0, 1.0) * 255.0);
            detail::put(out, static_cast<std::uint8_t>(v));
        }
    }
    detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::vector<std::string> checkpoint_properties(int sh_degree) {
    std::vector<std::string> names = {"x", "y", "z", "scale_0", "scale_1", "scale_2",
                                      "rot_0", "rot_1", "rot_2", "rot_3", "opacity"};
    const int n = 3 * sh_basis_count(sh_degree);
    for (int k = 0; k < n; ++k) names.push_back("sh_" + std::to_string(k));
    return names;
}

} // namespace detail

/// Little-endian binary PLY; see docs/checkpoint.md. Values are stored as
/// f32, so only scenes already representable in f32 round-trip exactly.
inline std::string encode_checkpoint(const GaussianSet& scene) {
    scene.check_consistency();
    std::string out = "ply\nformat binary_little_endian 1.0\ncomment eggs_checkpoint_version " +
                      std::to_string(kCheckpointVersion) + "\ncomment sh_degree " +
                      std::to_string(scene.sh_degree()) + "\nelement gaussian " +
                      std::to_string(scene.size()) + "\n";
    for (const auto& n : detail::checkpoint_properties(scene.sh_degree())) {
        out += "property float " + n + "\n";
    }
    out += "property uchar type_spec\nend_header\n";
    for (std::size_t i = 0; i < scene.size(); ++i) {
        auto f = [&](double v) { detail::put(out, static_cast<float>(v)); };
        for (int k = 0; k < 3; ++k) f(scene.center[i][k]);
        for (int k = 0; k < 3; ++k) f(scene.log_scale[i][k]);
        for (int k = 0; k < 4; ++k) f(scene.rotation[i][k]);
        f(scene.opacity_logit[i]);
        for (double v : scene.sh_of(i)) f(v);
        detail::put(out, scene.type[i]);
    }
    return out;
}

inline GaussianSet decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    const auto h = detail::parse_ply_header(bytes, what);
    if (h.format != "binary_little_endian") throw ParseError(what + ": checkpoint must be binary");
    int version = -1, degree = -1;
    for (const auto& c : h.comments) {
        std::istringstream ls(c);
        std::string key;
        int v = -1;
        ls >> key >> v;
        if (key == "eggs_checkpoint_version") version = v;
        if (key == "sh_degree") degree = v;
    }
    if (version < 0) throw ParseError(what + ": not an eggs checkpoint (no version comment)");
    if (version != kCheckpointVersion) {
        throw ParseError(what + ": unsupported checkpoint version " + std::to_string(version));
    }
    if (degree < 0 || degree > kMaxShDegree) {
        throw ParseError(what + ": missing or invalid sh_degree comment");
    }
    if (h.elements.size() != 1 || h.elements[0].name != "gaussian") {
        throw ParseError(what + ": expected a single 'gaussian' element");
    }
    const auto& e = h.elements[0];
    auto names = detail::checkpoint_properties(degree);
    names.push_back("type_spec");
    if (e.props.size() != names.size()) {
        throw ParseError(what + ": property count does not match sh_degree " + std::to_string(degree));
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
        const std::string want_type = k + 1 == names.size() ? "uchar" : "float";
        if (e.props[k].name != names[k] || e.props[k].type != want_type) {
            throw ParseError(what + ": property " + std::to_string(k) + " should be '" + want_type +
                             " " + names[k] + "'");
        }
    }
    const std::size_t n_float = names.size() - 1;
    const std::size_t rec = 4 * n_float + 1;
    const std::size_t need = h.body_offset + rec * e.count;
    if (bytes.size() < need) {
        throw IntegrityError(what + ": truncated (" + std::to_string(bytes.size()) + " of " +
                             std::to_string(need) + " bytes)");
    }
    if (bytes.size() > need) throw IntegrityError(what + ": trailing bytes after the last record");
    GaussianSet scene(degree);
    std::vector<double> sh(static_cast<std::size_t>(scene.sh_stride()));
    for (std::size_t i = 0; i < e.count; ++i) {
        const char* p = bytes.data() + h.body_offset + i * rec;
        auto f = [&](std::size_t k) { return static_cast<double>(detail::get<float>(p + 4 * k)); };
        Gaussian g;
        g.center = Vec3(f(0), f(1), f(2));
        g.log_scale = Vec3(f(3), f(4), f(5));
        g.rotation = Vec4(f(6), f(7), f(8), f(9));
        g.opacity_logit = f(10);
        for (std::size_t k = 0; k < sh.size(); ++k) sh[k] = f(11 + k);
        g.sh = sh;
        const auto t = detail::get<std::uint8_t>(p + 4 * n_float);
        if (t > 1) {
            throw IntegrityError(what + ": record " + std::to_string(i) + " has type_spec " +
                                 std::to_string(t));
        }
        g.type = static_cast<GaussianType>(t);
        scene.push_back(g);
    }
    return scene;
}

inline void save_checkpoint(const GaussianSet& scene, const fs::path& path) {
    detail::write_file(path, encode_checkpoint(scene));
}

inline GaussianSet load_checkpoint(const fs::path& path) {
    return decode_checkpoint(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// PNG images
// ---------------------------------------------------------------------------

/// Value in [0, 1] to an 8-bit sample: clamp, scale, round half to even.
inline std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::nearbyint(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// 8-bit gray (1 channel) or RGB (3 channel) PNG.
inline void write_png(const ImageBuffer& img, const fs::path& path) {
    if (img.channels != 1 && img.channels != 3) {
        throw ConfigError("write_png: need 1 or 3 channels, got " + std::to_string(img.channels));
    }
    if (!img.all_finite()) throw ConfigError("write_png: image has non-finite values");
    std::vector<std::uint8_t> px(img.data.size());
    std::transform(img.data.begin(), img.data.end(), px.begin(), to_u8);
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&pi, path.string().c_str(), 0, px.data(), 0, nullptr)) {
        const std::string msg = pi.message;
        png_image_free(&pi);
        throw IoError("cannot write '" + path.string() + "': " + msg);
    }
}

/// Reads any PNG as 8-bit RGB scaled to [0, 1].
inline ImageBuffer read_png(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("image '" + path.string() + "' does not exist");
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.string().c_str())) {
        throw ParseError("cannot decode '" + path.string() + "': " + pi.message);
    }
    pi.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
        const std::string msg = pi.message;
        png_image_free(&pi);
        throw ParseError("cannot decode '" + path.string() + "': " + msg);
    }
    ImageBuffer img(static_cast<int>(pi.width), static_cast<int>(pi.height), 3);
    for (std::size_t k = 0; k < px.size(); ++k) img.data[k] = px[k] / 255.0;
    return img;
}

/// 16-bit linear gray PNG of depth / far, clamped to [0, 1].
inline void write_depth_png(const ImageBuffer& depth, double far, const fs::path& path) {
    if (depth.channels != 1) throw ConfigError("write_depth_png: depth must have one channel");
    if (!(far > 0.0)) throw ConfigError("write_depth_png: far must be positive");
    if (!depth.all_finite()) throw ConfigError("write_depth_png: depth has non-finite values");
    std::vector<std::uint16_t> px(depth.data.size());
    for (std::size_t k = 0; k < px.size(); ++k) {
        px[k] = static_cast<std::uint16_t>(
            std::nearbyint(std::clamp(depth.data[k] / far, 0.0, 1.0) * 65535.0));
    }
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(depth.width);
    pi.height = static_cast<png_uint_32>(depth.height);
    pi.format = PNG_FORMAT_LINEAR_Y;
    if (!png_image_write_to_file(&pi, path.string().c_str(), 0, px.data(), 0, nullptr)) {
        const std::string msg = pi.message;
        png_image_free(&pi);
        throw IoError("cannot write '" + path.string() + "': " + msg);
    }
}

inline ImageBuffer read_depth_png(const fs::path& path, double far) {
    if (!fs::exists(path)) throw IoError("depth image '" + path.string() + "' does not exist");
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.string().c_str())) {
        throw ParseError("cannot decode '" + path.string() + "': " + pi.message);
    }
    pi.format = PNG_FORMAT_LINEAR_Y;
    std::vector<std::uint16_t> px(PNG_IMAGE_SIZE(pi) / 2);
    if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
        const std::string msg = pi.message;
        png_image_free(&pi);
        throw ParseError("cannot decode '" + path.string() + "': " + msg);
    }
    ImageBuffer img(static_cast<int>(pi.width), static_cast<int>(pi.height), 1);
    for (std::size_t k = 0; k < px.size(); ++k) img.data[k] = px[k] / 65535.0 * far;
    return img;
}

// ---------------------------------------------------------------------------
// Scene manifests
// ---------------------------------------------------------------------------

constexpr int kManifestVersion = 1;

struct ManifestCamera {
    int id = 0;
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 1, height = 1;
    Mat4 world_to_camera = Mat4::Identity();
    double near = 0.01;
    double far = 100.0;
    std::string image;
    std::string depth;  ///< empty when absent

    bool operator==(const ManifestCamera&) const = default;
};

/// Paths are relative to the manifest directory unless absolute.
struct SceneManifest {
    std::string points;
    std::vector<ManifestCamera> cameras;
    std::optional<std::vector<int>> train;
    std::optional<std::vector<int>> test;

    bool operator==(const SceneManifest&) const = default;
};

namespace detail {

class FieldReader {
public:
    FieldReader(const nlohmann::json& j, std::string ctx, std::string what)
        : j_(j), ctx_(std::move(ctx)), what_(std::move(what)) {
        if (!j_.is_object()) fail("", "expected an object");
    }

    [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
        std::string where = ctx_;
        if (!field.empty()) where += where.empty() ? field : "." + field;
        throw ParseError(what_ + ": " + (where.empty() ? "" : where + ": ") + msg);
    }

    void only(std::initializer_list<const char*> allowed) const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::none_of(allowed.begin(), allowed.end(),
                             [&](const char* a) { return it.key() == a; })) {
                fail(it.key(), "unknown field");
            }
        }
    }

    bool has(const char* k) const { return j_.contains(k); }

    const nlohmann::json& at(const char* k) const {
        if (!j_.contains(k)) fail(k, "missing required field");
        return j_.at(k);
    }

    double number(const char* k) const {
        const auto& v = at(k);
        if (!v.is_number()) fail(k, "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(k, "expected a finite number");
        return d;
    }

    double number_or(const char* k, double dflt) const { return has(k) ? number(k) : dflt; }

    int integer(const char* k) const {
        const auto& v = at(k);
        if (!v.is_number_integer()) fail(k, "expected an integer");
        const auto i = v.get<long long>();
        if (i < INT32_MIN || i > INT32_MAX) fail(k, "integer out of range");
        return static_cast<int>(i);
    }

    std::string string(const char* k) const {
        const auto& v = at(k);
        if (!v.is_string()) fail(k, "expected a string");
        const auto s = v.get<std::string>();
        if (s.empty()) fail(k, "expected a non-empty string");
        return s;
    }

    std::vector<int> int_list(const char* k) const {
        const auto& v = at(k);
        if (!v.is_array()) fail(k, "expected an array of integers");
        std::vector<int> out;
        for (const auto& e : v) {
            if (!e.is_number_integer()) fail(k, "expected an array of integers");
            out.push_back(e.get<int>());
        }
        return out;
    }

private:
    const nlohmann::json& j_;
    std::string ctx_;
    std::string what_;
};

inline std::string line_col(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t k = 0; k < std::min(byte, text.size()); ++k) {
        if (text[k] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

} // namespace detail

/// Parses and validates manifest text; does not touch referenced files.
inline SceneManifest parse_manifest(const std::string& text, const std::string& what = "manifest") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(what + ": syntax error at " + detail::line_col(text, e.byte) + ": " +
                         e.what());
    }
    const detail::FieldReader root(j, "", what);
    root.only({"version", "points", "cameras", "split"});
    if (root.integer("version") != kManifestVersion) {
        root.fail("version", "unsupported manifest version " + std::to_string(root.integer("version")));
    }
    SceneManifest m;
    m.points = root.string("points");
    const auto& cams = root.at("cameras");
    if (!cams.is_array() || cams.empty()) root.fail("cameras", "expected a non-empty array");
    std::set<int> ids;
    for (std::size_t k = 0; k < cams.size(); ++k) {
        const detail::FieldReader r(cams[k], "cameras[" + std::to_string(k) + "]", what);
        r.only({"id", "fx", "fy", "cx", "cy", "width", "height", "world_to_camera", "near", "far",
                "image", "depth"});
        ManifestCamera c;
        c.id = r.integer("id");
        if (!ids.insert(c.id).second) r.fail("id", "duplicate camera id " + std::to_string(c.id));
        c.fx = r.number("fx");
        c.fy = r.number("fy");
        if (!(c.fx > 0.0)) r.fail("fx", "must be positive");
        if (!(c.fy > 0.0)) r.fail("fy", "must be positive");
        c.cx = r.number("cx");
        c.cy = r.number("cy");
        c.width = r.integer("width");
        c.height = r.integer("height");
        if (c.width <= 0) r.fail("width", "must be positive");
        if (c.height <= 0) r.fail("height", "must be positive");
        c.near = r.number_or("near", c.near);
        c.far = r.number_or("far", c.far);
        if (!(c.near > 0.0 && c.near < c.far)) r.fail("near", "need 0 < near < far");
        const auto& w = r.at("world_to_camera");
        if (!w.is_array() || w.size() != 16) r.fail("world_to_camera", "expected 16 numbers");
        for (int e = 0; e < 16; ++e) {
            const auto& v = w[static_cast<std::size_t>(e)];
            if (!v.is_number()) r.fail("world_to_camera", "expected 16 numbers");
            c.world_to_camera(e / 4, e % 4) = v.get<double>();
        }
        CameraView probe;
        probe.fx = c.fx;
        probe.fy = c.fy;
        probe.width = c.width;
        probe.height = c.height;
        probe.near = c.near;
        probe.far = c.far;
        probe.world_to_camera = c.world_to_camera;
        try {
            probe.validate(1e-4);
        } catch (const ConfigError& e) {
            r.fail("world_to_camera", e.what());
        }
        c.image = r.string("image");
        if (r.has("depth")) c.depth = r.string("depth");
        m.cameras.push_back(c);
    }
    if (root.has("split")) {
        const detail::FieldReader s(root.at("split"), "split", what);
        s.only({"train", "test"});
        auto check = [&](const char* key, std::optional<std::vector<int>>& dst) {
            if (!s.has(key)) return;
            dst = s.int_list(key);
            for (int id : *dst) {
                if (!ids.count(id)) s.fail(key, "unknown camera id " + std::to_string(id));
            }
        };
        check("train", m.train);
        check("test", m.test);
        if (m.train && m.train->empty()) s.fail("train", "must not be empty");
        if (m.train && m.test) {
            for (int id : *m.test) {
                if (std::count(m.train->begin(), m.train->end(), id)) {
                    s.fail("test", "camera " + std::to_string(id) + " is also in train");
                }
            }
        }
    }
    return m;
}

inline nlohmann::ordered_json manifest_to_json(const SceneManifest& m) {
    nlohmann::ordered_json j;
    j["version"] = kManifestVersion;
    j["points"] = m.points;
    j["cameras"] = nlohmann::ordered_json::array();
    for (const auto& c : m.cameras) {
        nlohmann::ordered_json cj;
        cj["id"] = c.id;
        cj["fx"] = c.fx;
        cj["fy"] = c.fy;
        cj["cx"] = c.cx;
        cj["cy"] = c.cy;
        cj["width"] = c.width;
        cj["height"] = c.height;
        std::vector<double> w(16);
        for (int e = 0; e < 16; ++e) w[static_cast<std::size_t>(e)] = c.world_to_camera(e / 4, e % 4);
        cj["world_to_camera"] = w;
        cj["near"] = c.near;
        cj["far"] = c.far;
        cj["image"] = c.image;
        if (!c.depth.empty()) cj["depth"] = c.depth;
        j["cameras"].push_back(cj);
    }
    if (m.train || m.test) {
        nlohmann::ordered_json s;
        if (m.train) s["train"] = *m.train;
        if (m.test) s["test"] = *m.test;
        j["split"] = s;
    }
    return j;
}

inline void write_manifest(const SceneManifest& m, const fs::path& path) {
    detail::write_file(path, manifest_to_json(m).dump(2) + "\n");
}

inline SceneManifest read_manifest(const fs::path& path) {
    return parse_manifest(detail::read_file(path), path.string());
}

struct LoadedScene {
    SceneManifest manifest;
    std::vector<CameraView> train;
    std::vector<CameraView> test;
    PointCloud points;

    const CameraView* find(int id) const {
        for (const auto* list : {&train, &test}) {
            for (const auto& v : *list) {
                if (v.id == id) return &v;
            }
        }
        return nullptr;
    }
};

/// Accepts a manifest file or a directory holding `manifest.json`. Images
/// are decoded and checked against the camera sizes. Cameras outside an
/// explicit split are ignored; without a split every camera trains.
inline LoadedScene load_scene(const fs::path& manifest_or_dir) {
    fs::path path = manifest_or_dir;
    if (fs::is_directory(path)) path /= "manifest.json";
    if (!fs::exists(path)) throw IoError("manifest '" + path.string() + "' does not exist");
    LoadedScene s;
    s.manifest = read_manifest(path);
    const fs::path base = path.parent_path();
    const std::string what = path.string();
    auto resolve = [&](const std::string& rel, const std::string& field) {
        const fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : base / rel;
        if (!fs::exists(p)) {
            throw ParseError(what + ": " + field + ": referenced file '" + p.string() +
                             "' does not exist");
        }
        return p;
    };
    s.points = read_ply_points(resolve(s.manifest.points, "points"));
    for (std::size_t k = 0; k < s.manifest.cameras.size(); ++k) {
        const auto& c = s.manifest.cameras[k];
        const std::string ctx = "cameras[" + std::to_string(k) + "]";
        CameraView v;
        v.id = c.id;
        v.fx = c.fx;
        v.fy = c.fy;
        v.cx = c.cx;
        v.cy = c.cy;
        v.width = c.width;
        v.height = c.height;
        v.world_to_camera = c.world_to_camera;
        v.near = c.near;
        v.far = c.far;
        const fs::path img_path = resolve(c.image, ctx + ".image");
        try {
            v.gt_image = read_png(img_path);
        } catch (const Error& e) {
            throw ParseError(what + ": " + ctx + ".image: " + e.what());
        }
        if (v.gt_image->width != c.width || v.gt_image->height != c.height) {
            throw ParseError(what + ": " + ctx + ".image: '" + img_path.string() + "' is " +
                             std::to_string(v.gt_image->width) + "x" +
                             std::to_string(v.gt_image->height) + ", camera says " +
                             std::to_string(c.width) + "x" + std::to_string(c.height));
        }
        if (!c.depth.empty()) {
            const fs::path d_path = resolve(c.depth, ctx + ".depth");
            try {
                v.gt_depth = read_depth_png(d_path, c.far);
            } catch (const Error& e) {
                throw ParseError(what + ": " + ctx + ".depth: " + e.what());
            }
            if (v.gt_depth->width != c.width || v.gt_depth->height != c.height) {
                throw ParseError(what + ": " + ctx + ".depth: size does not match the camera");
            }
        }
        const auto in = [&](const std::optional<std::vector<int>>& l) {
            return l && std::find(l->begin(), l->end(), c.id) != l->end();
        };
        if (in(s.manifest.test)) s.test.push_back(std::move(v));
        else if (!s.manifest.train || in(s.manifest.train)) s.train.push_back(std::move(v));
    }
    if (s.train.empty()) throw ParseError(what + ": no training cameras");
    return s;
}

} // namespace eggs
