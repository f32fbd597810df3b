// io.hpp - file formats: the CRV1 grid container (volumes, labelmaps, 3D and 2D fields), ASCII
// PLY meshes and sphere maps, metric reports, loss traces, label group files and bundle directories.
//
// CRV1 layout (all integers little-endian):
//   "CRV1" | u32 header length | header text | payload
// The header is key=value lines in a fixed order: kind, dtype, dims, channels, spacing (3D kinds
// only), sha256. The payload is f32 or i32, x fastest, channels interleaved per element.
#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "fields.hpp"
#include "metrics.hpp"
#include "optimize.hpp"
#include "sphere.hpp"
#include "synth.hpp"
#include "volume.hpp"

namespace corvol {

inline constexpr std::string_view kCrvMagic = "CRV1";
inline constexpr std::size_t kMaxHeaderBytes = 4096;
inline constexpr std::size_t kMaxElements = std::size_t{1} << 28;

// ---------------------------------------------------------------------------------------------
// Small helpers: digests, number formatting, whole-file IO.
// ---------------------------------------------------------------------------------------------
inline std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256: digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

// Shortest representation that reads back to the same value.
template <class F> std::string format_number(F v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

template <class T> bool parse_number(std::string_view s, T &out) {
    if (s == "nan" && std::is_floating_point_v<T>) {
        out = std::numeric_limits<T>::quiet_NaN();
        return true;
    }
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path &path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("write to '" + path.string() + "' failed");
}

inline std::string file_digest(const std::filesystem::path &path) { return sha256_hex(read_file(path)); }

// Rounds every component to the nearest f32, the precision the containers store.
inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
inline DeformationField3 quantize_f32(DeformationField3 f) {
    for (auto &p : f.u.data()) p = {to_f32(p.x), to_f32(p.y), to_f32(p.z)};
    return f;
}
inline DeformationField2 quantize_f32(DeformationField2 f) {
    for (auto &p : f.u.data()) p = {to_f32(p.x), to_f32(p.y)};
    return f;
}

// ---------------------------------------------------------------------------------------------
// CRV1 container.
// ---------------------------------------------------------------------------------------------
enum class CrvKind { Volume, Labels, Field3, Field2 };

inline const char *kind_name(CrvKind k) {
    switch (k) {
    case CrvKind::Volume: return "volume";
    case CrvKind::Labels: return "labels";
    case CrvKind::Field3: return "field3";
    case CrvKind::Field2: return "field2";
    }
    return "?";
}

struct CrvHeader {
    CrvKind kind = CrvKind::Volume;
    std::vector<int> dims; // 3 entries, or 2 (width, height) for field2
    int channels = 1;
    Vec3 spacing{1.0, 1.0, 1.0};
};

namespace detail {
inline bool is_3d(CrvKind k) { return k != CrvKind::Field2; }
inline bool is_int(CrvKind k) { return k == CrvKind::Labels; }
inline int expected_channels(CrvKind k) {
    switch (k) {
    case CrvKind::Field3: return 3;
    case CrvKind::Field2: return 2;
    default: return 1;
    }
}

inline void put_u32(std::string &s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline std::uint32_t get_u32(std::string_view s, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
    return v;
}

[[noreturn]] inline void crv_fail(const std::string &name, std::size_t offset, const std::string &rule) {
    throw InputError("'" + name + "': offset " + std::to_string(offset) + ": " + rule);
}

inline std::string encode_crv(const CrvHeader &h, const std::string &payload) {
    std::string text = "kind=" + std::string(kind_name(h.kind)) + "\n";
    text += std::string("dtype=") + (is_int(h.kind) ? "i32" : "f32") + "\n";
    text += "dims=";
    for (std::size_t i = 0; i < h.dims.size(); ++i) text += (i ? " " : "") + std::to_string(h.dims[i]);
    text += "\nchannels=" + std::to_string(h.channels) + "\n";
    if (is_3d(h.kind)) {
        text += "spacing=" + format_number(h.spacing.x) + " " + format_number(h.spacing.y) + " " +
                format_number(h.spacing.z) + "\n";
    }
    // The digest covers the header lines above it as well as the payload, so no header edit goes unnoticed.
    text += "sha256=" + sha256_hex(text + payload) + "\n";
    std::string out(kCrvMagic);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    out += payload;
    return out;
}

// Parses and checks everything except the payload values; returns the payload view.
inline std::string_view decode_crv(std::string_view bytes, CrvKind want, const std::string &name, CrvHeader &h) {
    if (bytes.size() < 8) crv_fail(name, 0, "file shorter than the 8-byte preamble");
    if (bytes.substr(0, 4) != kCrvMagic) crv_fail(name, 0, "bad magic (expected CRV1)");
    const std::uint32_t hlen = get_u32(bytes, 4);
    if (hlen > kMaxHeaderBytes) crv_fail(name, 4, "header length " + std::to_string(hlen) + " exceeds limit");
    if (hlen > bytes.size() - 8) crv_fail(name, 4, "header length runs past end of file");
    const std::string_view text = bytes.substr(8, hlen);

    std::vector<std::string> order = {"kind", "dtype", "dims", "channels"};
    if (is_3d(want)) order.push_back("spacing");
    order.push_back("sha256");
    std::size_t pos = 0, off = 8, sha_line = 0;
    std::map<std::string, std::string_view> kv;
    for (const auto &key : order) {
        if (key == "sha256") sha_line = pos;
        const std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) crv_fail(name, off + pos, "header missing key '" + key + "'");
        const std::string_view line = text.substr(pos, nl - pos);
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos || line.substr(0, eq) != key) {
            crv_fail(name, off + pos, "expected header key '" + key + "'");
        }
        kv[key] = line.substr(eq + 1);
        pos = nl + 1;
    }
    if (pos != text.size()) crv_fail(name, off + pos, "unexpected trailing header text");

    if (kv["kind"] != kind_name(want)) {
        crv_fail(name, 8, "kind '" + std::string(kv["kind"]) + "' where '" + kind_name(want) + "' was expected");
    }
    h.kind = want;
    if (kv["dtype"] != (is_int(want) ? "i32" : "f32")) crv_fail(name, 8, "dtype does not match kind");
    const auto dims = split_ws(kv["dims"]);
    const std::size_t nd = is_3d(want) ? 3 : 2;
    if (dims.size() != nd) crv_fail(name, 8, "dims must list " + std::to_string(nd) + " integers");
    h.dims.clear();
    std::size_t count = 1;
    for (auto d : dims) {
        int v = 0;
        if (!parse_number(d, v) || v < 1 || v > 65536) crv_fail(name, 8, "dims entry '" + std::string(d) + "' invalid");
        h.dims.push_back(v);
        count *= static_cast<std::size_t>(v);
        if (count > kMaxElements) crv_fail(name, 8, "dims describe too many elements");
    }
    if (!parse_number(kv["channels"], h.channels) || h.channels != expected_channels(want)) {
        crv_fail(name, 8, "channels must be " + std::to_string(expected_channels(want)) + " for " + kind_name(want));
    }
    if (is_3d(want)) {
        const auto sp = split_ws(kv["spacing"]);
        double s[3] = {};
        if (sp.size() != 3) crv_fail(name, 8, "spacing must list 3 numbers");
        for (int a = 0; a < 3; ++a) {
            if (!parse_number(sp[static_cast<std::size_t>(a)], s[a]) || !std::isfinite(s[a]) || !(s[a] > 0.0)) {
                crv_fail(name, 8, "spacing must be finite and positive");
            }
        }
        h.spacing = {s[0], s[1], s[2]};
    }
    const std::size_t payload_off = 8 + hlen;
    const std::size_t expect = count * static_cast<std::size_t>(h.channels) * 4;
    const std::string_view payload = bytes.substr(payload_off);
    if (payload.size() != expect) {
        crv_fail(name, payload_off, "payload has " + std::to_string(payload.size()) + " bytes, dims require " +
                                        std::to_string(expect));
    }
    if (sha256_hex(std::string(text.substr(0, sha_line)) + std::string(payload)) != kv["sha256"]) {
        crv_fail(name, payload_off, "checksum mismatch over header and payload");
    }
    return payload;
}

inline void put_f32(std::string &s, double v) { put_u32(s, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

inline double get_f32(std::string_view p, std::size_t i, const std::string &name, std::size_t base) {
    const float f = std::bit_cast<float>(get_u32(p, 4 * i));
    if (!std::isfinite(f)) crv_fail(name, base + 4 * i, "non-finite payload value");
    return static_cast<double>(f);
}

inline std::size_t payload_offset(std::string_view bytes) { return 8 + get_u32(bytes, 4); }
} // namespace detail

inline std::string encode_volume(const Volume3 &v) {
    validate(v);
    std::string p;
    p.reserve(v.size() * 4);
    for (double x : v.grid.data()) detail::put_f32(p, x);
    const auto &e = v.extent();
    return detail::encode_crv({CrvKind::Volume, {e.nx, e.ny, e.nz}, 1, v.spacing}, p);
}

inline Volume3 decode_volume(std::string_view bytes, const std::string &name = "volume") {
    CrvHeader h;
    const auto p = detail::decode_crv(bytes, CrvKind::Volume, name, h);
    const std::size_t base = detail::payload_offset(bytes);
    Volume3 v(Extent3{h.dims[0], h.dims[1], h.dims[2]}, 0.0, h.spacing);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::get_f32(p, i, name, base);
    validate(v, name);
    return v;
}

inline std::string encode_labels(const LabelMap3 &lm) {
    validate(lm);
    std::string p;
    p.reserve(lm.size() * 4);
    for (auto l : lm.labels.data()) detail::put_u32(p, static_cast<std::uint32_t>(l));
    const auto &e = lm.extent();
    return detail::encode_crv({CrvKind::Labels, {e.nx, e.ny, e.nz}, 1, lm.spacing}, p);
}

inline LabelMap3 decode_labels(std::string_view bytes, const std::string &name = "labels") {
    CrvHeader h;
    const auto p = detail::decode_crv(bytes, CrvKind::Labels, name, h);
    Grid3<std::int32_t> g(Extent3{h.dims[0], h.dims[1], h.dims[2]});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<std::int32_t>(detail::get_u32(p, 4 * i));
    LabelMap3 lm = make_labelmap(std::move(g), h.spacing);
    validate(lm, name);
    return lm;
}

inline std::string encode_field(const DeformationField3 &f, Vec3 spacing = {1.0, 1.0, 1.0}) {
    std::string p;
    p.reserve(f.u.size() * 12);
    for (const auto &d : f.u.data()) {
        if (!is_finite(d)) throw NumericalError("field3: non-finite displacement");
        detail::put_f32(p, d.x), detail::put_f32(p, d.y), detail::put_f32(p, d.z);
    }
    const auto &e = f.extent();
    return detail::encode_crv({CrvKind::Field3, {e.nx, e.ny, e.nz}, 3, spacing}, p);
}

inline DeformationField3 decode_field3(std::string_view bytes, const std::string &name = "field3") {
    CrvHeader h;
    const auto p = detail::decode_crv(bytes, CrvKind::Field3, name, h);
    const std::size_t base = detail::payload_offset(bytes);
    DeformationField3 f{Grid3<Vec3>(Extent3{h.dims[0], h.dims[1], h.dims[2]})};
    for (std::size_t i = 0; i < f.u.size(); ++i) {
        f.u[i] = {detail::get_f32(p, 3 * i, name, base), detail::get_f32(p, 3 * i + 1, name, base),
                  detail::get_f32(p, 3 * i + 2, name, base)};
    }
    return f;
}

inline std::string encode_field(const DeformationField2 &f) {
    std::string p;
    p.reserve(f.u.size() * 8);
    for (const auto &d : f.u.data()) {
        if (!is_finite(d)) throw NumericalError("field2: non-finite displacement");
        detail::put_f32(p, d.x), detail::put_f32(p, d.y);
    }
    const auto &e = f.extent();
    return detail::encode_crv({CrvKind::Field2, {e.width, e.height}, 2, {}}, p);
}

inline DeformationField2 decode_field2(std::string_view bytes, const std::string &name = "field2") {
    CrvHeader h;
    const auto p = detail::decode_crv(bytes, CrvKind::Field2, name, h);
    const std::size_t base = detail::payload_offset(bytes);
    DeformationField2 f{Grid2<Vec2>(Extent2{h.dims[0], h.dims[1]})};
    for (std::size_t i = 0; i < f.u.size(); ++i) {
        f.u[i] = {detail::get_f32(p, 2 * i, name, base), detail::get_f32(p, 2 * i + 1, name, base)};
    }
    return f;
}

inline void write_volume(const std::filesystem::path &path, const Volume3 &v) { write_file(path, encode_volume(v)); }
inline Volume3 read_volume(const std::filesystem::path &path) { return decode_volume(read_file(path), path.string()); }
inline void write_labels(const std::filesystem::path &path, const LabelMap3 &lm) {
    write_file(path, encode_labels(lm));
}
inline LabelMap3 read_labels(const std::filesystem::path &path) {
    return decode_labels(read_file(path), path.string());
}
inline void write_field(const std::filesystem::path &path, const DeformationField3 &f) {
    write_file(path, encode_field(f));
}
inline void write_field(const std::filesystem::path &path, const DeformationField2 &f) {
    write_file(path, encode_field(f));
}
inline DeformationField3 read_field3(const std::filesystem::path &path) {
    return decode_field3(read_file(path), path.string());
}
inline DeformationField2 read_field2(const std::filesystem::path &path) {
    return decode_field2(read_file(path), path.string());
}

// ---------------------------------------------------------------------------------------------
// ASCII PLY. Vertex properties: x y z, then one float per descriptor, then an optional int `label`
// carrying parcels. Faces: `property list uchar int vertex_indices`.
// ---------------------------------------------------------------------------------------------
inline std::string encode_ply(const std::vector<Vec3> &verts, const std::vector<Triangle> &tris,
                              const std::vector<std::string> &names = {},
                              const std::vector<std::vector<double>> &channels = {},
                              const std::vector<std::int32_t> &labels = {}) {
    std::string s = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(verts.size()) + "\n";
    s += "property float x\nproperty float y\nproperty float z\n";
    for (const auto &n : names) s += "property float " + n + "\n";
    if (!labels.empty()) s += "property int label\n";
    s += "element face " + std::to_string(tris.size()) + "\nproperty list uchar int vertex_indices\nend_header\n";
    for (std::size_t i = 0; i < verts.size(); ++i) {
        s += format_number(static_cast<float>(verts[i].x)) + " " + format_number(static_cast<float>(verts[i].y)) +
             " " + format_number(static_cast<float>(verts[i].z));
        for (const auto &c : channels) s += " " + format_number(static_cast<float>(c[i]));
        if (!labels.empty()) s += " " + std::to_string(labels[i]);
        s += "\n";
    }
    for (const auto &t : tris) {
        s += "3 " + std::to_string(t[0]) + " " + std::to_string(t[1]) + " " + std::to_string(t[2]) + "\n";
    }
    return s;
}

struct PlyData {
    std::vector<Vec3> verts;
    std::vector<Triangle> tris;
    std::vector<std::string> names;              // extra float properties in file order
    std::vector<std::vector<double>> channels;   // channel-major
    std::vector<std::int32_t> labels;            // from an int property named `label`
};

inline PlyData decode_ply(std::string_view text, const std::string &name = "ply") {
    std::size_t pos = 0, lineno = 0;
    auto fail = [&](const std::string &rule) -> void {
        throw InputError("'" + name + "': line " + std::to_string(lineno) + " (offset " + std::to_string(pos) +
                         "): " + rule);
    };
    auto next_line = [&](std::string_view &line) {
        if (pos >= text.size()) return false;
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        line = text.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        pos = nl + 1;
        ++lineno;
        return true;
    };

    std::string_view line;
    if (!next_line(line) || line != "ply") fail("missing 'ply' magic");
    if (!next_line(line) || split_ws(line) != std::vector<std::string_view>{"format", "ascii", "1.0"}) {
        fail("only 'format ascii 1.0' is supported");
    }
    enum class Elem { None, Vertex, Face, Other };
    Elem cur = Elem::None;
    std::size_t nv = 0, nf = 0;
    bool have_v = false, have_f = false, face_list = false;
    struct Prop {
        std::string name;
        bool is_int;
        bool single = false; // values round to f32 so a read/write cycle is a fixed point
    };
    std::vector<Prop> props;
    for (;;) {
        if (!next_line(line)) fail("header not terminated by end_header");
        const auto tok = split_ws(line);
        if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
        if (tok[0] == "end_header") break;
        if (tok[0] == "element") {
            if (tok.size() != 3) fail("malformed element line");
            std::size_t n = 0;
            if (!parse_number(tok[2], n) || n > 50'000'000) fail("bad element count");
            if (tok[1] == "vertex") {
                if (have_v || have_f) fail("vertex element must come first and only once");
                cur = Elem::Vertex, nv = n, have_v = true;
            } else if (tok[1] == "face") {
                if (!have_v || have_f) fail("face element must follow the vertex element once");
                cur = Elem::Face, nf = n, have_f = true;
            } else {
                fail("unsupported element '" + std::string(tok[1]) + "'");
            }
            continue;
        }
        if (tok[0] == "property") {
            if (cur == Elem::Vertex) {
                if (tok.size() != 3) fail("malformed vertex property");
                const auto t = tok[1];
                const bool is_float = t == "float" || t == "double" || t == "float32" || t == "float64";
                const bool is_int = t == "int" || t == "int32" || t == "uint" || t == "uint32" || t == "short" ||
                                    t == "ushort" || t == "uchar" || t == "char" || t == "int8" || t == "uint8" ||
                                    t == "int16" || t == "uint16";
                if (!is_float && !is_int) fail("unsupported property type '" + std::string(t) + "'");
                for (const auto &p : props)
                    if (p.name == tok[2]) fail("duplicate vertex property '" + std::string(tok[2]) + "'");
                props.push_back({std::string(tok[2]), is_int, t == "float" || t == "float32"});
            } else if (cur == Elem::Face) {
                if (tok.size() != 5 || tok[1] != "list" || (tok[4] != "vertex_indices" && tok[4] != "vertex_index")) {
                    fail("face element needs 'property list <count> <index> vertex_indices'");
                }
                if (face_list) fail("face element has more than one property");
                face_list = true;
            } else {
                fail("property outside an element");
            }
            continue;
        }
        fail("unrecognised header line");
    }
    if (!have_v || !have_f || !face_list) fail("header must declare vertex and face elements");
    int ix = -1, iy = -1, iz = -1, ilabel = -1;
    PlyData d;
    std::vector<int> chan_of(props.size(), -1);
    for (std::size_t k = 0; k < props.size(); ++k) {
        const auto &p = props[k];
        if (p.name == "x") ix = static_cast<int>(k);
        else if (p.name == "y") iy = static_cast<int>(k);
        else if (p.name == "z") iz = static_cast<int>(k);
        else if (p.name == "label" && p.is_int) ilabel = static_cast<int>(k);
        else {
            chan_of[k] = static_cast<int>(d.names.size());
            d.names.push_back(p.name);
        }
    }
    if (ix < 0 || iy < 0 || iz < 0) fail("vertex element lacks x, y or z");
    // Every vertex and face needs at least two bytes, which bounds honest counts by the file size.
    if (nv > text.size() / 2 || nf > text.size() / 2) fail("element counts exceed what the file can hold");
    d.verts.reserve(nv);
    d.channels.assign(d.names.size(), {});
    for (auto &c : d.channels) c.reserve(nv);
    if (ilabel >= 0) d.labels.reserve(nv);
    for (std::size_t i = 0; i < nv; ++i) {
        if (!next_line(line)) fail("file ends inside the vertex list");
        const auto tok = split_ws(line);
        if (tok.size() != props.size()) fail("vertex " + std::to_string(i) + " has the wrong number of values");
        double xyz[3] = {};
        for (std::size_t k = 0; k < props.size(); ++k) {
            double v = 0.0;
            if (props[k].is_int) {
                std::int64_t iv = 0;
                if (!parse_number(tok[k], iv) || iv < std::numeric_limits<std::int32_t>::min() ||
                    iv > std::numeric_limits<std::int32_t>::max()) {
                    fail("vertex " + std::to_string(i) + ": bad integer '" + std::string(tok[k]) + "'");
                }
                v = static_cast<double>(iv);
            } else if (!parse_number(tok[k], v) || !std::isfinite(v)) {
                fail("vertex " + std::to_string(i) + ": bad number '" + std::string(tok[k]) + "'");
            } else if (props[k].single) {
                v = to_f32(v);
                if (!std::isfinite(v)) fail("vertex " + std::to_string(i) + ": '" + std::string(tok[k]) + "' overflows float");
            }
            if (static_cast<int>(k) == ix) xyz[0] = v;
            else if (static_cast<int>(k) == iy) xyz[1] = v;
            else if (static_cast<int>(k) == iz) xyz[2] = v;
            else if (static_cast<int>(k) == ilabel) d.labels.push_back(static_cast<std::int32_t>(v));
            else d.channels[static_cast<std::size_t>(chan_of[k])].push_back(v);
        }
        d.verts.push_back({xyz[0], xyz[1], xyz[2]});
    }
    d.tris.reserve(nf);
    for (std::size_t f = 0; f < nf; ++f) {
        if (!next_line(line)) fail("file ends inside the face list");
        const auto tok = split_ws(line);
        int n = 0;
        if (tok.empty() || !parse_number(tok[0], n)) fail("face " + std::to_string(f) + ": bad vertex count");
        if (n != 3) fail("face " + std::to_string(f) + " has " + std::to_string(n) + " vertices; only triangles are supported");
        if (tok.size() != 4) fail("face " + std::to_string(f) + " has the wrong number of values");
        Triangle t{};
        for (int k = 0; k < 3; ++k) {
            std::int64_t iv = 0;
            if (!parse_number(tok[static_cast<std::size_t>(k + 1)], iv) || iv < 0 || static_cast<std::size_t>(iv) >= nv) {
                fail("face " + std::to_string(f) + ": vertex index out of range");
            }
            t[static_cast<std::size_t>(k)] = static_cast<std::int32_t>(iv);
        }
        d.tris.push_back(t);
    }
    while (next_line(line)) {
        if (!split_ws(line).empty()) fail("unexpected data after the face list");
    }
    return d;
}

inline std::string encode_mesh(const CorticalMesh &m) {
    validate(m);
    return encode_ply(m.verts, m.tris, m.descriptor_names, m.descriptors, m.parcels);
}

inline CorticalMesh decode_mesh(std::string_view text, const std::string &name = "mesh") {
    PlyData d = decode_ply(text, name);
    CorticalMesh m;
    m.verts = std::move(d.verts);
    m.tris = std::move(d.tris);
    m.descriptor_names = std::move(d.names);
    m.descriptors = std::move(d.channels);
    m.parcels = std::move(d.labels);
    validate(m, "'" + name + "'");
    return m;
}

inline std::string encode_sphere(const SphereMap &sm) {
    validate(sm);
    return encode_ply(sm.sverts, sm.tris);
}

inline SphereMap decode_sphere(std::string_view text, const std::string &name = "sphere") {
    PlyData d = decode_ply(text, name);
    if (!d.names.empty() || !d.labels.empty()) {
        throw InputError("'" + name + "': sphere map must carry only x, y, z vertex properties");
    }
    SphereMap sm{std::move(d.verts), std::move(d.tris)};
    validate(sm, "'" + name + "'");
    return sm;
}

inline void write_mesh(const std::filesystem::path &p, const CorticalMesh &m) { write_file(p, encode_mesh(m)); }
inline CorticalMesh read_mesh(const std::filesystem::path &p) { return decode_mesh(read_file(p), p.string()); }
inline void write_sphere(const std::filesystem::path &p, const SphereMap &s) { write_file(p, encode_sphere(s)); }
inline SphereMap read_sphere(const std::filesystem::path &p) { return decode_sphere(read_file(p), p.string()); }

// Warped copy of a mesh file's geometry, keeping its per-vertex properties.
inline CorticalMesh warp_mesh(CorticalMesh m, const DeformationField3 &phi) {
    m.verts = warp_vertices(m.verts, phi);
    return m;
}

// ---------------------------------------------------------------------------------------------
// Bundle directories: image.vol, optional labels.lab, optional mesh.ply + sphere.ply.
// ---------------------------------------------------------------------------------------------
inline SubjectBundle read_bundle(const std::filesystem::path &dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw InputError("bundle '" + dir.string() + "' is not a directory");
    SubjectBundle b;
    b.image = read_volume(dir / "image.vol");
    if (fs::exists(dir / "labels.lab")) b.labels = read_labels(dir / "labels.lab");
    const bool has_mesh = fs::exists(dir / "mesh.ply"), has_sphere = fs::exists(dir / "sphere.ply");
    if (has_mesh != has_sphere) {
        throw InputError("bundle '" + dir.string() + "': " + (has_mesh ? "mesh.ply without sphere.ply" : "sphere.ply without mesh.ply"));
    }
    if (has_mesh) {
        b.mesh = read_mesh(dir / "mesh.ply");
        b.sphere = read_sphere(dir / "sphere.ply");
    }
    validate(b, "bundle '" + dir.string() + "'");
    return b;
}

inline void write_bundle(const std::filesystem::path &dir, const SubjectBundle &b) {
    std::filesystem::create_directories(dir);
    write_volume(dir / "image.vol", b.image);
    if (b.labels) write_labels(dir / "labels.lab", *b.labels);
    if (b.mesh && b.sphere) {
        write_mesh(dir / "mesh.ply", *b.mesh);
        write_sphere(dir / "sphere.ply", *b.sphere);
    }
}

// ---------------------------------------------------------------------------------------------
// Label groups file: `subcortical <ids...>` and `cortical <hemisphere> <ids...>` lines; # comments.
// ---------------------------------------------------------------------------------------------
inline LabelGroups decode_groups(std::string_view text, const std::string &name = "groups") {
    LabelGroups g;
    std::size_t lineno = 0, pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        if (auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
        const auto tok = split_ws(line);
        if (tok.empty()) continue;
        auto fail = [&](const std::string &rule) {
            throw InputError("'" + name + "': line " + std::to_string(lineno) + ": " + rule);
        };
        auto ids = [&](std::size_t from) {
            std::vector<std::int32_t> out;
            for (std::size_t k = from; k < tok.size(); ++k) {
                std::int32_t v = 0;
                if (!parse_number(tok[k], v) || v == 0) fail("label id '" + std::string(tok[k]) + "' invalid");
                out.push_back(v);
            }
            return out;
        };
        if (tok[0] == "subcortical") {
            auto v = ids(1);
            g.subcortical.insert(g.subcortical.end(), v.begin(), v.end());
        } else if (tok[0] == "cortical") {
            if (tok.size() < 2) fail("cortical line needs a hemisphere name");
            g.cortical.emplace_back(std::string(tok[1]), ids(2));
        } else {
            fail("expected 'subcortical' or 'cortical'");
        }
    }
    return g;
}

inline std::string encode_groups(const LabelGroups &g) {
    std::string s = "subcortical";
    for (auto l : g.subcortical) s += " " + std::to_string(l);
    s += "\n";
    for (const auto &[hemi, ids] : g.cortical) {
        s += "cortical " + hemi;
        for (auto l : ids) s += " " + std::to_string(l);
        s += "\n";
    }
    return s;
}

inline LabelGroups read_groups(const std::filesystem::path &p) { return decode_groups(read_file(p), p.string()); }

// ---------------------------------------------------------------------------------------------
// Metric report: fixed-order key=value text.
// ---------------------------------------------------------------------------------------------
inline std::string encode_report(const MetricReport &r) {
    std::string s;
    s += "dice_mean=" + format_number(r.dice_mean) + "\n";
    s += "dice_cortical_mean=" + format_number(r.dice_cortical_mean) + "\n";
    s += "dice_subcortical_mean=" + format_number(r.dice_subcortical_mean) + "\n";
    s += "dice_cc=" + format_number(r.dice_cc) + "\n";
    s += "pct_folds=" + format_number(r.pct_folds) + "\n";
    s += "sd_log_detj=" + format_number(r.sd_log_detj) + "\n";
    s += "detj_clamped=" + std::to_string(r.detj_clamped) + "\n";
    s += "skipped_labels=";
    for (std::size_t i = 0; i < r.skipped_labels.size(); ++i) s += (i ? " " : "") + std::to_string(r.skipped_labels[i]);
    s += "\n";
    for (const auto &[l, d] : r.dice_per_label) s += "dice." + std::to_string(l) + "=" + format_number(d) + "\n";
    return s;
}

inline MetricReport decode_report(std::string_view text, const std::string &name = "report") {
    MetricReport r;
    std::size_t pos = 0, lineno = 0;
    auto fail = [&](const std::string &rule) {
        throw InputError("'" + name + "': line " + std::to_string(lineno) + ": " + rule);
    };
    const std::vector<std::string> fixed = {"dice_mean", "dice_cortical_mean", "dice_subcortical_mean", "dice_cc",
                                            "pct_folds", "sd_log_detj",        "detj_clamped",          "skipped_labels"};
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        const std::size_t k = lineno++;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) fail("expected key=value");
        const std::string_view key = line.substr(0, eq), val = line.substr(eq + 1);
        if (k < fixed.size() && key != fixed[k]) fail("expected key '" + fixed[k] + "'");
        double v = 0.0;
        if (k < fixed.size()) {
            if (key == "skipped_labels") {
                for (auto t : split_ws(val)) {
                    std::int32_t l = 0;
                    if (!parse_number(t, l)) fail("bad label id");
                    r.skipped_labels.push_back(l);
                }
            } else if (key == "detj_clamped") {
                if (!parse_number(val, r.detj_clamped)) fail("bad count");
            } else {
                if (!parse_number(val, v)) fail("bad number");
                (key == "dice_mean"               ? r.dice_mean
                 : key == "dice_cortical_mean"    ? r.dice_cortical_mean
                 : key == "dice_subcortical_mean" ? r.dice_subcortical_mean
                 : key == "dice_cc"               ? r.dice_cc
                 : key == "pct_folds"             ? r.pct_folds
                                                  : r.sd_log_detj) = v;
            }
        } else {
            std::int32_t l = 0;
            if (key.substr(0, 5) != "dice." || !parse_number(key.substr(5), l)) fail("expected dice.<label>");
            if (!parse_number(val, v)) fail("bad number");
            r.dice_per_label[l] = v;
        }
    }
    if (lineno < fixed.size()) fail("report is truncated");
    return r;
}

// Loss trace: one whitespace-separated row per recorded iteration.
inline std::string encode_trace(const std::vector<TraceEntry> &trace) {
    std::string s = "level iteration total sim_vol sim_sph cons reg_vol reg_sph structural\n";
    for (const auto &t : trace) {
        const auto &r = t.report;
        s += std::to_string(t.level) + " " + std::to_string(t.iteration);
        for (double v : {r.total, r.sim_vol, r.sim_sph, r.cons, r.reg_vol, r.reg_sph, r.structural}) {
            s += " " + format_number(v);
        }
        s += "\n";
    }
    return s;
}

} // namespace corvol
