#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "corvol/io.hpp"

using namespace corvol;
namespace fs = std::filesystem;

namespace {
Volume3 random_f32_volume(Extent3 e, std::uint64_t seed) {
    Volume3 v(e, 0.0, {1.0, 1.25, 0.7});
    std::mt19937_64 rng(seed);
    for (auto &x : v.grid.data()) x = to_f32(std::uniform_real_distribution<double>(-5, 5)(rng));
    return v;
}

SubjectBundle small_phantom() {
    PhantomParams p;
    p.size = 24;
    p.mesh_subdiv = 2;
    return make_phantom(p);
}

CorticalMesh quantized(CorticalMesh m) {
    for (auto &v : m.verts) v = {to_f32(v.x), to_f32(v.y), to_f32(v.z)};
    for (auto &c : m.descriptors)
        for (auto &x : c) x = to_f32(x);
    return m;
}

std::string error_of(const std::function<void()> &f) {
    try {
        f();
    } catch (const InputError &e) {
        return e.what();
    }
    return "";
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("corvol_io_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Random byte flips, truncations and insertions; every outcome must be a value or an InputError.
template <class F> void fuzz(const std::string &valid, F decode, std::uint64_t seed, int rounds) {
    std::mt19937_64 rng(seed);
    int rejected = 0;
    for (int r = 0; r < rounds; ++r) {
        std::string s = valid;
        const int edits = 1 + static_cast<int>(rng() % 4);
        for (int k = 0; k < edits && !s.empty(); ++k) {
            const std::size_t at = rng() % s.size();
            switch (rng() % 4) {
            case 0: s[at] = static_cast<char>(rng()); break;
            case 1: s.resize(at); break;
            case 2: s.insert(at, 1, static_cast<char>(rng())); break;
            default: s[at] = "0123456789 \n-.e+"[rng() % 17]; break;
            }
        }
        try {
            decode(s);
        } catch (const InputError &) {
            ++rejected;
        }
    }
    EXPECT_GT(rejected, 0);
}
} // namespace

TEST(Numbers, ShortestRoundTrip) {
    for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, 123456789.0}) {
        double back = 0;
        ASSERT_TRUE(parse_number(format_number(v), back));
        EXPECT_EQ(back, v);
    }
    EXPECT_EQ(format_number(0.5), "0.5");
    EXPECT_EQ(format_number(std::nan("")), "nan");
    double x = 0;
    EXPECT_FALSE(parse_number("1.5x", x));
    EXPECT_FALSE(parse_number("", x));
    int i = 0;
    EXPECT_FALSE(parse_number("2.5", i));
}

TEST(Crv, VolumeRoundTripIsBitExact) {
    const auto v = random_f32_volume({7, 5, 3}, 1);
    const std::string bytes = encode_volume(v);
    const auto back = decode_volume(bytes);
    EXPECT_EQ(back, v);
    EXPECT_EQ(encode_volume(back), bytes);
    EXPECT_EQ(encode_volume(v), bytes);
    EXPECT_EQ(bytes.substr(0, 4), "CRV1");
}

TEST(Crv, HeaderLayout) {
    const auto bytes = encode_volume(random_f32_volume({2, 3, 4}, 2));
    const std::uint32_t hlen = static_cast<std::uint8_t>(bytes[4]) | static_cast<std::uint8_t>(bytes[5]) << 8;
    const std::string header = bytes.substr(8, hlen);
    EXPECT_EQ(header.substr(0, header.find("sha256=")), "kind=volume\ndtype=f32\ndims=2 3 4\nchannels=1\nspacing=1 1.25 0.7\n");
    EXPECT_EQ(bytes.size(), 8 + hlen + 2 * 3 * 4 * 4u);
    // first payload value, little-endian f32
    const auto v = decode_volume(bytes);
    float f;
    std::memcpy(&f, bytes.data() + 8 + hlen, 4);
    EXPECT_EQ(static_cast<double>(f), v[0]);
}

TEST(Crv, LabelsAndFields) {
    Grid3<std::int32_t> g({5, 4, 3});
    std::mt19937_64 rng(3);
    for (auto &x : g.data()) x = static_cast<std::int32_t>(rng() % 7) - 1;
    const auto lm = make_labelmap(g, {2, 2, 2});
    const auto lb = encode_labels(lm);
    EXPECT_EQ(decode_labels(lb), lm);
    EXPECT_EQ(encode_labels(decode_labels(lb)), lb);

    DeformationField3 f{Grid3<Vec3>({4, 3, 2})};
    for (auto &x : f.u.data()) x = {to_f32(0.1 * (rng() % 100)), -1.5, to_f32(1.0 / 3.0)};
    const auto fb = encode_field(f, {1, 1, 2});
    EXPECT_EQ(decode_field3(fb), f);
    EXPECT_EQ(encode_field(decode_field3(fb), {1, 1, 2}), fb);
    EXPECT_EQ(quantize_f32(f), f);

    DeformationField2 f2{Grid2<Vec2>({8, 4})};
    for (auto &x : f2.u.data()) x = {to_f32(0.01 * (rng() % 100)), 0.25};
    const auto f2b = encode_field(f2);
    EXPECT_EQ(decode_field2(f2b), f2);
    EXPECT_EQ(encode_field(decode_field2(f2b)), f2b);
    // kinds are not interchangeable
    EXPECT_THROW(decode_field2(fb), InputError);
    EXPECT_THROW(decode_volume(lb), InputError);
}

TEST(Crv, RejectionsNameFileOffsetAndRule) {
    const auto good = encode_volume(random_f32_volume({3, 3, 3}, 4));
    auto msg = error_of([&] { decode_volume("CRV2" + good.substr(4), "a.vol"); });
    EXPECT_NE(msg.find("'a.vol'"), std::string::npos);
    EXPECT_NE(msg.find("offset 0"), std::string::npos);
    EXPECT_NE(msg.find("magic"), std::string::npos);

    msg = error_of([&] { decode_volume(good.substr(0, good.size() - 3), "a.vol"); });
    EXPECT_NE(msg.find("payload"), std::string::npos) << msg;

    // NaN in the payload: rewrite one value and fix up the checksum so only the value is wrong
    auto v = random_f32_volume({3, 3, 3}, 4);
    std::string bad = good;
    const std::size_t off = detail::payload_offset(bad) + 4 * 5;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(bad.data() + off, &nan, 4);
    const std::string payload = bad.substr(detail::payload_offset(bad));
    const auto sha = bad.find("sha256=") + 7;
    bad.replace(sha, 64, sha256_hex(bad.substr(8, sha - 7 - 8) + payload));
    msg = error_of([&] { decode_volume(bad, "n.vol"); });
    EXPECT_NE(msg.find("offset " + std::to_string(off)), std::string::npos) << msg;
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;

    std::string flipped = good;
    flipped.back() ^= 1;
    EXPECT_NE(error_of([&] { decode_volume(flipped); }).find("checksum"), std::string::npos);

    // a header edit that still parses is caught too
    std::string respaced = good;
    respaced.replace(respaced.find("1.25 0.7"), 8, "1.26 0.7");
    EXPECT_NE(error_of([&] { decode_volume(respaced); }).find("checksum"), std::string::npos);
}

TEST(Crv, Fuzz) {
    const auto vol = encode_volume(random_f32_volume({4, 3, 2}, 5));
    fuzz(vol, [](const std::string &s) { decode_volume(s); }, 1, 3000);
    DeformationField2 f2{Grid2<Vec2>({4, 2}, {0.5, 0.25})};
    fuzz(encode_field(f2), [](const std::string &s) { decode_field2(s); }, 2, 2000);
    Grid3<std::int32_t> g({3, 3, 3}, 2);
    fuzz(encode_labels(make_labelmap(g)), [](const std::string &s) { decode_labels(s); }, 3, 2000);
}

TEST(Ply, MeshAndSphereRoundTrip) {
    const auto b = small_phantom();
    const auto m = quantized(*b.mesh);
    const auto text = encode_mesh(m);
    EXPECT_EQ(decode_mesh(text), m);
    EXPECT_EQ(encode_mesh(decode_mesh(text)), text);
    EXPECT_NE(text.find("property float sulc\nproperty float curv\nproperty int label\n"), std::string::npos);

    SphereMap s = *b.sphere;
    const auto st = encode_sphere(s);
    const auto back = decode_sphere(st);
    EXPECT_EQ(back.tris, s.tris);
    for (std::size_t i = 0; i < s.sverts.size(); ++i) EXPECT_LT(norm(back.sverts[i] - s.sverts[i]), 1e-7);
    EXPECT_EQ(encode_sphere(back), st);
}

TEST(Ply, IcospherePairLoadsAsGenusZero) {
    PhantomParams p;
    p.size = 24;
    const auto b = make_phantom(p);
    TempDir dir;
    write_bundle(dir.path, b);
    const auto m = read_mesh(dir.path / "mesh.ply");
    const auto s = read_sphere(dir.path / "sphere.ply");
    EXPECT_EQ(m.verts.size(), 642u);
    EXPECT_EQ(check_closed_manifold(s.sverts.size(), s.tris, "s").euler, 2);
    EXPECT_NO_THROW(validate_pair(m, s));
}

TEST(Ply, SphereVertexOffTheSphereIsNamed) {
    auto s = make_icosphere(1);
    std::string text = encode_ply(s.sverts, s.tris);
    s.sverts[7] = s.sverts[7] * 1.1;
    text = encode_ply(s.sverts, s.tris);
    const auto msg = error_of([&] { decode_sphere(text, "sphere.ply"); });
    EXPECT_NE(msg.find("vertex 7"), std::string::npos) << msg;
    EXPECT_NE(msg.find("sphere.ply"), std::string::npos) << msg;
}

TEST(Ply, Rejections) {
    const auto s = make_icosphere(0);
    const auto good = encode_ply(s.sverts, s.tris);
    // quad face
    std::string quad = good;
    const auto f = quad.find("3 0 11 5");
    ASSERT_NE(f, std::string::npos);
    quad.replace(f, 8, "4 0 11 5 1");
    auto msg = error_of([&] { decode_sphere(quad, "q.ply"); });
    EXPECT_NE(msg.find("line"), std::string::npos) << msg;
    // a face pointing past the vertex list
    std::string idx = good;
    idx.replace(idx.find("3 0 11 5"), 8, "3 0 11 12");
    EXPECT_THROW(decode_sphere(idx), InputError);
    // binary formats are not accepted
    std::string bin = good;
    bin.replace(bin.find("ascii"), 5, "binary_little_endian");
    EXPECT_THROW(decode_sphere(bin), InputError);
    // open mesh
    auto open = s;
    open.tris.pop_back();
    EXPECT_THROW(decode_sphere(encode_ply(open.sverts, open.tris)), InputError);
    // descriptors on a sphere file
    EXPECT_THROW(decode_sphere(encode_ply(s.sverts, s.tris, {"sulc"}, {std::vector<double>(12, 0.0)})), InputError);
}

TEST(Ply, Fuzz) {
    const auto b = small_phantom();
    CorticalMesh m = quantized(*b.mesh);
    // keep the fixture small so every mutation gets parsed quickly
    const auto s = make_icosphere(1);
    m.verts.resize(s.sverts.size());
    m.tris = s.tris;
    for (auto &c : m.descriptors) c.resize(s.sverts.size());
    m.parcels.resize(s.sverts.size());
    fuzz(encode_mesh(m), [](const std::string &t) { decode_mesh(t); }, 4, 3000);
    fuzz(encode_sphere(s), [](const std::string &t) { decode_sphere(t); }, 5, 3000);
}

TEST(Bundle, RoundTripAndPairing) {
    const auto b = small_phantom();
    TempDir dir;
    write_bundle(dir.path / "b", b);
    const auto back = read_bundle(dir.path / "b");
    EXPECT_EQ(back.image.extent(), b.image.extent());
    EXPECT_EQ(back.labels, b.labels);
    EXPECT_EQ(back.mesh->tris, b.mesh->tris);
    // writing what was read reproduces the files byte for byte
    write_bundle(dir.path / "c", back);
    for (auto name : {"image.vol", "labels.lab", "mesh.ply", "sphere.ply"})
        EXPECT_EQ(read_file(dir.path / "b" / name), read_file(dir.path / "c" / name)) << name;

    fs::remove(dir.path / "c" / "sphere.ply");
    EXPECT_NE(error_of([&] { read_bundle(dir.path / "c"); }).find("mesh.ply without sphere.ply"), std::string::npos);
    EXPECT_THROW(read_bundle(dir.path / "missing"), InputError);
    fs::create_directories(dir.path / "d");
    write_volume(dir.path / "d" / "image.vol", b.image);
    const auto only = read_bundle(dir.path / "d");
    EXPECT_FALSE(only.labels || only.mesh || only.sphere);
}

TEST(Groups, ParseAndRoundTrip) {
    const auto g = decode_groups("# groups\nsubcortical 1 2 3\ncortical lh 4 5  # left\n\ncortical rh 6\n");
    EXPECT_EQ(g.subcortical, (std::vector<std::int32_t>{1, 2, 3}));
    ASSERT_EQ(g.cortical.size(), 2u);
    EXPECT_EQ(g.cortical[0].first, "lh");
    EXPECT_EQ(g.cortical[1].second, (std::vector<std::int32_t>{6}));
    const auto again = decode_groups(encode_groups(g));
    EXPECT_EQ(again.subcortical, g.subcortical);
    EXPECT_EQ(again.cortical, g.cortical);
    EXPECT_NE(error_of([] { decode_groups("subcortical 1\nthalamus 2\n", "g.txt"); }).find("line 2"), std::string::npos);
    EXPECT_THROW(decode_groups("subcortical 1 x\n"), InputError);
    EXPECT_THROW(decode_groups("cortical\n"), InputError);
}

TEST(Report, FixedOrderRoundTrip) {
    MetricReport r;
    r.dice_per_label = {{1, 0.5}, {4, 1.0 / 3.0}};
    r.skipped_labels = {7};
    r.dice_mean = 0.41666666666666669;
    r.dice_subcortical_mean = 0.5;
    r.pct_folds = 0.125;
    r.sd_log_detj = 0.0123;
    r.detj_clamped = 2;
    const auto text = encode_report(r);
    EXPECT_EQ(text.substr(0, text.find("dice.")),
              "dice_mean=0.4166666666666667\ndice_cortical_mean=nan\ndice_subcortical_mean=0.5\ndice_cc=nan\n"
              "pct_folds=0.125\nsd_log_detj=0.0123\ndetj_clamped=2\nskipped_labels=7\n");
    const auto back = decode_report(text);
    EXPECT_EQ(encode_report(back), text);
    EXPECT_EQ(back.dice_per_label, r.dice_per_label);
    EXPECT_THROW(decode_report("dice_cc=1\n"), InputError);
    EXPECT_THROW(decode_report(text.substr(0, 40)), InputError);
}

TEST(Trace, Format) {
    std::vector<TraceEntry> t(2);
    t[0].level = 2;
    t[0].report.total = 1.5;
    t[1].iteration = 3;
    t[1].report.cons = 0.25;
    EXPECT_EQ(encode_trace(t), "level iteration total sim_vol sim_sph cons reg_vol reg_sph structural\n"
                               "2 0 1.5 0 0 0 0 0 0\n0 3 0 0 0 0.25 0 0 0\n");
}

TEST(Files, MissingFileIsAnInputError) {
    EXPECT_THROW(read_file("/nonexistent/corvol/file.vol"), InputError);
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
