#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "gsq/container.h"
#include "gsq/grid.h"

using namespace gsq;

namespace {

CodeStream random_stream(uint64_t seed, int g_res, int k, int depth, int n, int m) {
    std::mt19937_64 rng(seed);
    CodeStream cs;
    cs.grid_resolution = g_res;
    cs.block_size = k;
    cs.blocks_per_axis = g_res / k;
    cs.rvq_depth = depth;
    cs.codebook_size = n;
    cs.codebook_hash = rng();
    const int64_t b3 = static_cast<int64_t>(cs.blocks_per_axis) * cs.blocks_per_axis *
                       cs.blocks_per_axis;
    std::set<int64_t> indices;
    std::uniform_int_distribution<int64_t> pick(0, b3 - 1);
    while (static_cast<int>(indices.size()) < m) indices.insert(pick(rng));
    std::uniform_int_distribution<int> code(0, n - 1);
    for (int64_t idx : indices) {
        CodeStream::BlockCodes blk;
        blk.block_index = idx;
        for (int d = 0; d < depth; ++d) {
            blk.geo.push_back(code(rng));
            blk.tex.push_back(code(rng));
        }
        cs.blocks.push_back(std::move(blk));
    }
    return cs;
}

bool streams_equal(const CodeStream& a, const CodeStream& b) {
    if (a.grid_resolution != b.grid_resolution || a.block_size != b.block_size ||
        a.blocks_per_axis != b.blocks_per_axis || a.rvq_depth != b.rvq_depth ||
        a.codebook_size != b.codebook_size || a.codebook_hash != b.codebook_hash ||
        a.blocks.size() != b.blocks.size())
        return false;
    for (size_t i = 0; i < a.blocks.size(); ++i)
        if (a.blocks[i].block_index != b.blocks[i].block_index ||
            a.blocks[i].geo != b.blocks[i].geo || a.blocks[i].tex != b.blocks[i].tex)
            return false;
    return true;
}

CodebookPack random_pack(uint64_t seed, int depth, int n, int dim) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    CodebookPack pack;
    for (RvqCodec* codec : {&pack.geometry, &pack.texture}) {
        for (int d = 0; d < depth; ++d) {
            Codebook cb;
            cb.entries = Eigen::MatrixXd(n, dim);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dim; ++j)
                    cb.entries(i, j) = static_cast<double>(static_cast<float>(g(rng)));
            cb.frozen = true;
            codec->stages.push_back(std::move(cb));
        }
    }
    return pack;
}

} // namespace

TEST_CASE("bit packing round trip is MSB-first and exact") {
    BitWriter bw;
    bw.write(0b101, 3);
    bw.write(0b0110, 4);
    bw.write(0x3FF, 10);
    const auto bytes = bw.finish();
    REQUIRE(bytes.size() == 3); // 17 bits -> 3 bytes
    CHECK(bytes[0] == 0b10101101); // 101 0110 1...

    BitReader br(bytes.data(), bytes.size());
    CHECK(br.read(3) == 0b101);
    CHECK(br.read(4) == 0b0110);
    CHECK(br.read(10) == 0x3FF);
    CHECK_THROWS_AS(br.read(8), CorruptStreamError);
}

TEST_CASE("storage accounting formulas") {
    StorageParams p;
    p.blocks_per_axis = 32;
    p.rvq_depth = 4;
    p.codebook_size = 1024;
    p.count = 100;
    CHECK(storage_bits(p, StorageMode::Icgs) == 9500);

    StorageParams tiny;
    tiny.blocks_per_axis = 2;
    tiny.rvq_depth = 1;
    tiny.codebook_size = 2;
    tiny.count = 1;
    CHECK(storage_bits(tiny, StorageMode::Icgs) == 5);

    StorageParams base;
    base.grid_resolution = 32;
    base.count = 1;
    base.sh_dim = 3;
    CHECK(storage_bits(base, StorageMode::Grid3dgs) == 367);
}

TEST_CASE("scene payload matches the accounting formula exactly") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 4;
        const int g_res = k * (2 + static_cast<int>(rng() % 7)); // B in 2..8
        const int depth = 1 + static_cast<int>(rng() % 5);
        const int n = 2 << (rng() % 9);
        const int b3 = (g_res / k) * (g_res / k) * (g_res / k);
        const int m = 1 + static_cast<int>(rng() % std::min<int>(b3, 80));
        const CodeStream cs = random_stream(rng(), g_res, k, depth, n, m);

        const auto bytes = write_scene_bytes(cs);
        StorageParams p;
        p.blocks_per_axis = cs.blocks_per_axis;
        p.rvq_depth = depth;
        p.codebook_size = n;
        p.count = m;
        const int64_t bits = storage_bits(p, StorageMode::Icgs);
        CHECK(payload_bits(cs) == bits);
        CHECK(static_cast<int64_t>(bytes.size()) - 28 == (bits + 7) / 8);

        const CodeStream back = read_scene_bytes(bytes);
        CHECK(streams_equal(cs, back));
    }
}

TEST_CASE("concrete storage anchor: D=4 N=1024 B=32 M=100 -> 1188 payload bytes") {
    const CodeStream cs = random_stream(99, 128, 4, 4, 1024, 100);
    REQUIRE(cs.blocks_per_axis == 32);
    const auto bytes = write_scene_bytes(cs);
    CHECK(payload_bits(cs) == 9500);
    CHECK(bytes.size() - 28 == 1188);
}

TEST_CASE("header-only file for an empty stream") {
    CodeStream cs;
    cs.grid_resolution = 32;
    cs.block_size = 4;
    cs.blocks_per_axis = 8;
    cs.rvq_depth = 4;
    cs.codebook_size = 256;
    const auto bytes = write_scene_bytes(cs);
    CHECK(bytes.size() == 28);
    const CodeStream back = read_scene_bytes(bytes);
    CHECK(back.blocks.empty());
}

TEST_CASE("scene stream corruption is rejected") {
    const CodeStream cs = random_stream(7, 32, 4, 2, 16, 10);
    auto bytes = write_scene_bytes(cs);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(read_scene_bytes(bad_magic), CorruptStreamError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 1);
    CHECK_THROWS_AS(read_scene_bytes(truncated), CorruptStreamError);

    auto extended = bytes;
    extended.push_back(0);
    CHECK_THROWS_AS(read_scene_bytes(extended), CorruptStreamError);

    // Non-increasing block indices are rejected at write time.
    CodeStream swapped = cs;
    std::swap(swapped.blocks[0], swapped.blocks[1]);
    CHECK_THROWS_AS(write_scene_bytes(swapped), CorruptStreamError);

    // A code beyond N is rejected (N chosen off a power of two).
    CodeStream offpow = random_stream(8, 32, 4, 2, 11, 10);
    offpow.blocks[0].geo[0] = 11;
    CHECK_THROWS_AS(write_scene_bytes(offpow), CorruptStreamError);
}

TEST_CASE("codebook pack round trip and hashing") {
    const CodebookPack pack = random_pack(3, 3, 16, 8);
    const auto bytes = write_codebook_pack_bytes(pack);
    CHECK(bytes.size() == 4 + 16 + 2ull * 3 * 16 * 8 * 4);

    const CodebookPack back = read_codebook_pack_bytes(bytes);
    CHECK(codebook_pack_hash(back) == codebook_pack_hash(pack));
    CHECK((back.geometry.stages[0].entries - pack.geometry.stages[0].entries).norm() == 0.0);
    CHECK(back.geometry.stages[0].frozen);

    // Binding check.
    CodeStream cs = random_stream(5, 32, 4, 3, 16, 4);
    cs.codebook_hash = codebook_pack_hash(pack);
    check_codebook_binding(cs, pack);
    const CodebookPack other = random_pack(4, 3, 16, 8);
    CHECK_THROWS_AS(check_codebook_binding(cs, other), WrongCodebookError);
}

TEST_CASE("fnv1a64 reference values") {
    // Standard FNV-1a test vectors.
    const uint8_t empty[1] = {0};
    CHECK(fnv1a64(empty, 0) == 14695981039346656037ull);
    const uint8_t a[1] = {'a'};
    CHECK(fnv1a64(a, 1) == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("ply round trip at 32-bit precision") {
    Scene scene;
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int i = 0; i < 25; ++i) {
        Gaussian g;
        // float32-representable inputs so raw fields round-trip exactly
        g.mu = Vec3(static_cast<float>(u(rng)), static_cast<float>(u(rng)),
                    static_cast<float>(u(rng)));
        g.sh = Eigen::Vector3d(static_cast<float>(u(rng) - 0.5), static_cast<float>(u(rng)),
                               static_cast<float>(u(rng)));
        g.rot = quat_normalize(Vec4(u(rng), u(rng) - 0.5, u(rng), u(rng) - 0.5));
        g.scale = Vec3(u(rng) * 0.05 + 1e-3, u(rng) * 0.05 + 1e-3, u(rng) * 0.05 + 1e-3);
        g.opacity_logit = static_cast<float>(u(rng) * 4 - 1);
        scene.gaussians.push_back(g);
    }
    const std::string path = "test_scene.ply";
    write_ply(scene, path);
    std::vector<std::string> warnings;
    const Scene back = read_ply(path, &warnings);
    CHECK(warnings.empty());
    REQUIRE(back.gaussians.size() == scene.gaussians.size());
    for (size_t i = 0; i < scene.gaussians.size(); ++i) {
        const Gaussian& a = scene.gaussians[i];
        const Gaussian& b = back.gaussians[i];
        CHECK((a.mu - b.mu).norm() == 0.0);
        CHECK((a.sh - b.sh).norm() == 0.0);
        CHECK(a.opacity_logit == b.opacity_logit);
        // Scales pass through log/exp at float precision.
        CHECK((a.scale - b.scale).cwiseQuotient(a.scale).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((a.rot - b.rot).cwiseAbs().maxCoeff() < 1e-7);
    }
    std::remove(path.c_str());
}

TEST_CASE("ply import validates fields and warns about higher bands") {
    // A file with only x, y, z must name the first missing field.
    const std::string path = "test_bad.ply";
    {
        std::ofstream os(path, std::ios::binary);
        os << "ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n";
        const float xyz[3] = {0, 0, 0};
        os.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
    try {
        read_ply(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("f_dc_0") != std::string::npos);
    }
    std::remove(path.c_str());

    // f_rest_* fields import with a warning and are dropped.
    const std::string path2 = "test_rest.ply";
    {
        std::ofstream os(path2, std::ios::binary);
        os << "ply\nformat binary_little_endian 1.0\nelement vertex 1\n";
        for (const char* f : {"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0",
                              "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
                              "rot_2", "rot_3"})
            os << "property float " << f << "\n";
        os << "end_header\n";
        std::vector<float> rec(15, 0.5f);
        os.write(reinterpret_cast<const char*>(rec.data()), rec.size() * sizeof(float));
    }
    std::vector<std::string> warnings;
    const Scene s = read_ply(path2, &warnings);
    REQUIRE(s.gaussians.size() == 1);
    CHECK(warnings.size() == 1);
    CHECK(s.gaussians[0].sh.size() == 3);
    std::remove(path2.c_str());
}

TEST_CASE("scene files contain no codebook bytes") {
    // The whole payload is block indices + codes; its size has no dependence
    // on the codebook contents, only on (B, D, N, M).
    const CodeStream cs = random_stream(21, 32, 4, 4, 1024, 25);
    const auto bytes = write_scene_bytes(cs);
    StorageParams p;
    p.blocks_per_axis = cs.blocks_per_axis;
    p.rvq_depth = cs.rvq_depth;
    p.codebook_size = cs.codebook_size;
    p.count = cs.block_count();
    CHECK(static_cast<int64_t>(bytes.size()) ==
          28 + (storage_bits(p, StorageMode::Icgs) + 7) / 8);
}
