#include "gsq/container.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "gsq/grid.h"

namespace gsq {

void BitWriter::write(uint64_t value, int bits) {
    if (bits < 0 || bits > 64) throw PreconditionError("BitWriter: bad bit count");
    for (int i = bits - 1; i >= 0; --i) {
        const int offset = static_cast<int>(bits_ % 8);
        if (offset == 0) bytes_.push_back(0);
        if ((value >> i) & 1u) bytes_.back() |= static_cast<uint8_t>(1u << (7 - offset));
        ++bits_;
    }
}

std::vector<uint8_t> BitWriter::finish() { return std::move(bytes_); }

uint64_t BitReader::read(int bits) {
    if (bits < 0 || bits > 64) throw PreconditionError("BitReader: bad bit count");
    if (bits_ + bits > static_cast<int64_t>(size_) * 8)
        throw CorruptStreamError("bitstream: truncated payload");
    uint64_t value = 0;
    for (int i = 0; i < bits; ++i) {
        const size_t byte = static_cast<size_t>(bits_ / 8);
        const int offset = static_cast<int>(bits_ % 8);
        value = (value << 1) | ((data_[byte] >> (7 - offset)) & 1u);
        ++bits_;
    }
    return value;
}

uint64_t fnv1a64(const uint8_t* data, size_t size) {
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < size; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

int64_t storage_bits(const StorageParams& p, StorageMode mode) {
    if (p.count < 0) throw PreconditionError("storage_bits: negative count");
    if (mode == StorageMode::Icgs) {
        const int per_block = 2 * p.rvq_depth * code_bits(p.codebook_size) +
                              block_index_bits(p.blocks_per_axis);
        return p.count * per_block;
    }
    const int index_bits = static_cast<int>(
        std::ceil(3.0 * std::log2(static_cast<double>(p.grid_resolution))));
    const int attr_scalars = p.sh_dim + 4 + 3 + 1;
    return p.count * (index_bits + 32 * attr_scalars);
}

int64_t payload_bits(const CodeStream& codes) {
    StorageParams p;
    p.blocks_per_axis = codes.blocks_per_axis;
    p.rvq_depth = codes.rvq_depth;
    p.codebook_size = codes.codebook_size;
    p.count = codes.block_count();
    return storage_bits(p, StorageMode::Icgs);
}

namespace {

constexpr uint16_t kSceneVersion = 1;

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(const std::vector<uint8_t>& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw CorruptStreamError("container: truncated header");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in[pos + i]) << (8 * i);
    pos += sizeof(T);
    return v;
}

void put_f32_le(std::vector<uint8_t>& out, float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    put_le<uint32_t>(out, u);
}

float get_f32_le(const std::vector<uint8_t>& in, size_t& pos) {
    const uint32_t u = get_le<uint32_t>(in, pos);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

void validate_stream(const CodeStream& codes) {
    if (codes.block_size < 1 || codes.grid_resolution < 1 ||
        codes.grid_resolution % codes.block_size != 0 ||
        codes.blocks_per_axis != codes.grid_resolution / codes.block_size)
        throw PreconditionError("scene stream: inconsistent grid/block parameters");
    if (codes.rvq_depth < 1 || codes.codebook_size < 1)
        throw PreconditionError("scene stream: bad codec parameters");
    const int64_t b3 = static_cast<int64_t>(codes.blocks_per_axis) * codes.blocks_per_axis *
                       codes.blocks_per_axis;
    int64_t prev = -1;
    for (const auto& blk : codes.blocks) {
        if (blk.block_index <= prev)
            throw CorruptStreamError("scene stream: block indices not strictly increasing");
        if (blk.block_index >= b3)
            throw CorruptStreamError("scene stream: block index out of range");
        prev = blk.block_index;
        if (static_cast<int>(blk.geo.size()) != codes.rvq_depth ||
            static_cast<int>(blk.tex.size()) != codes.rvq_depth)
            throw PreconditionError("scene stream: code count mismatch");
        for (int c : blk.geo)
            if (c < 0 || c >= codes.codebook_size)
                throw CorruptStreamError("scene stream: geometry code out of range");
        for (int c : blk.tex)
            if (c < 0 || c >= codes.codebook_size)
                throw CorruptStreamError("scene stream: texture code out of range");
    }
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::vector<uint8_t>& bytes, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("write failure for " + path);
}

} // namespace

std::vector<uint8_t> write_scene_bytes(const CodeStream& codes) {
    validate_stream(codes);
    std::vector<uint8_t> out;
    out.insert(out.end(), {'G', 'S', 'Q', '1'});
    put_le<uint16_t>(out, kSceneVersion);
    put_le<uint16_t>(out, static_cast<uint16_t>(codes.grid_resolution));
    put_le<uint8_t>(out, static_cast<uint8_t>(codes.block_size));
    put_le<uint16_t>(out, static_cast<uint16_t>(codes.blocks_per_axis));
    put_le<uint8_t>(out, static_cast<uint8_t>(codes.rvq_depth));
    put_le<uint32_t>(out, static_cast<uint32_t>(codes.codebook_size));
    put_le<uint32_t>(out, static_cast<uint32_t>(codes.block_count()));
    put_le<uint64_t>(out, codes.codebook_hash);

    BitWriter bw;
    const int idx_bits = block_index_bits(codes.blocks_per_axis);
    const int cbits = code_bits(codes.codebook_size);
    for (const auto& blk : codes.blocks) {
        bw.write(static_cast<uint64_t>(blk.block_index), idx_bits);
        for (int c : blk.geo) bw.write(static_cast<uint64_t>(c), cbits);
        for (int c : blk.tex) bw.write(static_cast<uint64_t>(c), cbits);
    }
    const std::vector<uint8_t> payload = bw.finish();
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

CodeStream read_scene_bytes(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "GSQ1", 4) != 0)
        throw CorruptStreamError("scene stream: bad magic");
    size_t pos = 4;
    const uint16_t version = get_le<uint16_t>(bytes, pos);
    if (version != kSceneVersion) throw CorruptStreamError("scene stream: unsupported version");
    CodeStream codes;
    codes.grid_resolution = get_le<uint16_t>(bytes, pos);
    codes.block_size = get_le<uint8_t>(bytes, pos);
    codes.blocks_per_axis = get_le<uint16_t>(bytes, pos);
    codes.rvq_depth = get_le<uint8_t>(bytes, pos);
    codes.codebook_size = static_cast<int>(get_le<uint32_t>(bytes, pos));
    const uint32_t m = get_le<uint32_t>(bytes, pos);
    codes.codebook_hash = get_le<uint64_t>(bytes, pos);

    if (codes.block_size < 1 || codes.grid_resolution < 1 ||
        codes.grid_resolution % codes.block_size != 0 ||
        codes.blocks_per_axis != codes.grid_resolution / codes.block_size ||
        codes.rvq_depth < 1 || codes.codebook_size < 1)
        throw CorruptStreamError("scene stream: inconsistent header");

    const int idx_bits = block_index_bits(codes.blocks_per_axis);
    const int cbits = code_bits(codes.codebook_size);
    const int64_t bits = static_cast<int64_t>(m) *
                         (idx_bits + 2 * codes.rvq_depth * cbits);
    const size_t expect_payload = static_cast<size_t>((bits + 7) / 8);
    if (bytes.size() != pos + expect_payload)
        throw CorruptStreamError("scene stream: payload size mismatch");

    BitReader br(bytes.data() + pos, expect_payload);
    for (uint32_t i = 0; i < m; ++i) {
        CodeStream::BlockCodes blk;
        blk.block_index = static_cast<int64_t>(br.read(idx_bits));
        blk.geo.resize(codes.rvq_depth);
        blk.tex.resize(codes.rvq_depth);
        for (int d = 0; d < codes.rvq_depth; ++d) blk.geo[d] = static_cast<int>(br.read(cbits));
        for (int d = 0; d < codes.rvq_depth; ++d) blk.tex[d] = static_cast<int>(br.read(cbits));
        codes.blocks.push_back(std::move(blk));
    }
    validate_stream(codes);
    return codes;
}

void write_scene_file(const CodeStream& codes, const std::string& path) {
    write_file_bytes(write_scene_bytes(codes), path);
}

CodeStream read_scene_file(const std::string& path) {
    return read_scene_bytes(read_file_bytes(path));
}

namespace {

void append_codec_entries(std::vector<uint8_t>& out, const RvqCodec& codec) {
    for (const Codebook& cb : codec.stages)
        for (int n = 0; n < cb.size(); ++n)
            for (int c = 0; c < cb.dim(); ++c)
                put_f32_le(out, static_cast<float>(cb.entries(n, c)));
}

std::vector<uint8_t> pack_entry_payload(const CodebookPack& pack) {
    std::vector<uint8_t> payload;
    append_codec_entries(payload, pack.geometry);
    append_codec_entries(payload, pack.texture);
    return payload;
}

void validate_pack(const CodebookPack& pack) {
    if (pack.geometry.depth() < 1 || pack.texture.depth() < 1)
        throw PreconditionError("codebook pack: empty codec");
    if (pack.geometry.depth() != pack.texture.depth())
        throw PreconditionError("codebook pack: heads must share the RVQ depth");
    if (pack.geometry.dim() != pack.texture.dim())
        throw PreconditionError("codebook pack: heads must share the embedding dimension");
    for (const RvqCodec* codec : {&pack.geometry, &pack.texture})
        for (const Codebook& cb : codec->stages) {
            if (cb.size() != codec->stages.front().size() || cb.dim() != codec->dim())
                throw PreconditionError("codebook pack: ragged stages");
            if (!cb.entries.allFinite())
                throw PreconditionError("codebook pack: non-finite entries");
        }
}

} // namespace

uint64_t codebook_pack_hash(const CodebookPack& pack) {
    const std::vector<uint8_t> payload = pack_entry_payload(pack);
    return fnv1a64(payload.data(), payload.size());
}

std::vector<uint8_t> write_codebook_pack_bytes(const CodebookPack& pack) {
    validate_pack(pack);
    std::vector<uint8_t> out;
    out.insert(out.end(), {'G', 'S', 'C', '1'});
    put_le<uint32_t>(out, static_cast<uint32_t>(pack.geometry.dim()));
    put_le<uint32_t>(out, static_cast<uint32_t>(pack.geometry.depth()));
    put_le<uint32_t>(out, static_cast<uint32_t>(pack.geometry.stages.front().size()));
    put_le<uint32_t>(out, static_cast<uint32_t>(pack.texture.stages.front().size()));
    const std::vector<uint8_t> payload = pack_entry_payload(pack);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

CodebookPack read_codebook_pack_bytes(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "GSC1", 4) != 0)
        throw CorruptStreamError("codebook pack: bad magic");
    size_t pos = 4;
    const int d_e = static_cast<int>(get_le<uint32_t>(bytes, pos));
    const int depth = static_cast<int>(get_le<uint32_t>(bytes, pos));
    const int n_geo = static_cast<int>(get_le<uint32_t>(bytes, pos));
    const int n_tex = static_cast<int>(get_le<uint32_t>(bytes, pos));
    if (d_e < 1 || depth < 1 || n_geo < 1 || n_tex < 1)
        throw CorruptStreamError("codebook pack: bad header");
    const size_t expect = pos + 4ull * d_e * depth * (static_cast<size_t>(n_geo) + n_tex);
    if (bytes.size() != expect) throw CorruptStreamError("codebook pack: payload size mismatch");

    CodebookPack pack;
    auto read_codec = [&](int n_entries, const std::string& head) {
        RvqCodec codec;
        for (int d = 0; d < depth; ++d) {
            Codebook cb;
            cb.entries = Eigen::MatrixXd(n_entries, d_e);
            cb.id = head + "/" + std::to_string(d);
            cb.frozen = true;
            for (int n = 0; n < n_entries; ++n)
                for (int c = 0; c < d_e; ++c) cb.entries(n, c) = get_f32_le(bytes, pos);
            codec.stages.push_back(std::move(cb));
        }
        return codec;
    };
    pack.geometry = read_codec(n_geo, "geo");
    pack.texture = read_codec(n_tex, "tex");
    return pack;
}

void write_codebook_pack_file(const CodebookPack& pack, const std::string& path) {
    write_file_bytes(write_codebook_pack_bytes(pack), path);
}

CodebookPack read_codebook_pack_file(const std::string& path) {
    return read_codebook_pack_bytes(read_file_bytes(path));
}

void check_codebook_binding(const CodeStream& codes, const CodebookPack& pack) {
    const uint64_t h = codebook_pack_hash(pack);
    if (h != codes.codebook_hash) {
        std::ostringstream os;
        os << "wrong codebook pack: scene expects hash " << std::hex << codes.codebook_hash
           << ", pack has " << h;
        throw WrongCodebookError(os.str());
    }
}

namespace {

const char* kRequiredPlyFields[] = {"x",       "y",       "z",       "f_dc_0",  "f_dc_1",
                                    "f_dc_2",  "opacity", "scale_0", "scale_1", "scale_2",
                                    "rot_0",   "rot_1",   "rot_2",   "rot_3"};

} // namespace

void write_ply(const Scene& scene, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("write_ply: cannot open " + path);
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "element vertex " << scene.gaussians.size() << "\n";
    for (const char* f : kRequiredPlyFields) os << "property float " << f << "\n";
    os << "end_header\n";
    for (const Gaussian& g : scene.gaussians) {
        float rec[14];
        rec[0] = static_cast<float>(g.mu.x());
        rec[1] = static_cast<float>(g.mu.y());
        rec[2] = static_cast<float>(g.mu.z());
        for (int i = 0; i < 3; ++i) rec[3 + i] = static_cast<float>(g.sh[i]);
        rec[6] = static_cast<float>(g.opacity_logit);
        for (int i = 0; i < 3; ++i) rec[7 + i] = static_cast<float>(std::log(g.scale[i]));
        for (int i = 0; i < 4; ++i) rec[10 + i] = static_cast<float>(g.rot[i]);
        os.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
    if (!os) throw FormatError("write_ply: write failure for " + path);
}

Scene read_ply(const std::string& path, std::vector<std::string>* warnings) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("read_ply: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != "ply") throw FormatError("read_ply: not a PLY file");
    if (!std::getline(is, line) || line.rfind("format binary_little_endian", 0) != 0)
        throw FormatError("read_ply: only binary little-endian PLY is supported");

    size_t vertex_count = 0;
    std::vector<std::string> props;
    bool in_vertex = false;
    bool saw_vertex = false;
    while (std::getline(is, line)) {
        if (line == "end_header") break;
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "comment") continue;
        if (tok == "element") {
            std::string name;
            ls >> name >> vertex_count;
            if (name != "vertex") {
                if (!saw_vertex) throw FormatError("read_ply: first element must be vertex");
                in_vertex = false;
                continue;
            }
            in_vertex = true;
            saw_vertex = true;
        } else if (tok == "property" && in_vertex) {
            std::string type, name;
            ls >> type >> name;
            if (type == "list") throw FormatError("read_ply: list properties are unsupported");
            if (type != "float" && type != "float32")
                throw FormatError("read_ply: only float properties are supported, got " + type);
            props.push_back(name);
        }
    }
    if (!saw_vertex) throw FormatError("read_ply: missing vertex element");

    std::map<std::string, int> index;
    for (size_t i = 0; i < props.size(); ++i) index[props[i]] = static_cast<int>(i);
    for (const char* f : kRequiredPlyFields)
        if (index.find(f) == index.end())
            throw FormatError(std::string("read_ply: missing required field ") + f);

    bool has_rest = false;
    for (const std::string& p : props)
        if (p.rfind("f_rest_", 0) == 0) has_rest = true;
    if (has_rest && warnings)
        warnings->push_back("f_rest_* fields present: higher SH bands are dropped");

    Scene scene;
    scene.gaussians.reserve(vertex_count);
    std::vector<float> rec(props.size());
    for (size_t v = 0; v < vertex_count; ++v) {
        is.read(reinterpret_cast<char*>(rec.data()),
                static_cast<std::streamsize>(rec.size() * sizeof(float)));
        if (!is) throw FormatError("read_ply: truncated vertex data");
        Gaussian g;
        g.mu = Vec3(rec[index["x"]], rec[index["y"]], rec[index["z"]]);
        g.sh = Eigen::Vector3d(rec[index["f_dc_0"]], rec[index["f_dc_1"]], rec[index["f_dc_2"]]);
        g.opacity_logit = rec[index["opacity"]];
        g.scale = Vec3(std::exp(static_cast<double>(rec[index["scale_0"]])),
                       std::exp(static_cast<double>(rec[index["scale_1"]])),
                       std::exp(static_cast<double>(rec[index["scale_2"]])));
        g.rot = Vec4(rec[index["rot_0"]], rec[index["rot_1"]], rec[index["rot_2"]],
                     rec[index["rot_3"]]);
        scene.gaussians.push_back(std::move(g));
    }

    // Bounds are not part of the interchange format; use a padded tight box.
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (const Gaussian& g : scene.gaussians) {
        lo = lo.cwiseMin(g.mu);
        hi = hi.cwiseMax(g.mu);
    }
    if (scene.gaussians.empty()) {
        lo = Vec3::Zero();
        hi = Vec3::Ones();
    }
    const double span = std::max((hi - lo).maxCoeff(), 1e-3);
    scene.bounds.lo = lo - Vec3::Constant(0.005 * span);
    scene.bounds.hi = hi + Vec3::Constant(0.005 * span);
    return scene;
}

} // namespace gsq
