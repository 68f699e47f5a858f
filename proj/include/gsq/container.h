#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gsq/gauss.h"
#include "gsq/rvq.h"

namespace gsq {

// Discrete representation of one scene: per-block geometry and texture codes
// plus the header parameters needed to decode.
struct CodeStream {
    int grid_resolution = 0; // G
    int block_size = 0;      // K
    int blocks_per_axis = 0; // B = G/K
    int rvq_depth = 0;       // D
    int codebook_size = 0;   // N
    uint64_t codebook_hash = 0;

    struct BlockCodes {
        int64_t block_index = 0;
        std::vector<int> geo;
        std::vector<int> tex;
    };
    std::vector<BlockCodes> blocks; // strictly increasing block_index

    int block_count() const { return static_cast<int>(blocks.size()); }
};

// The shared embedding tables: geometry codec then texture codec.
struct CodebookPack {
    RvqCodec geometry;
    RvqCodec texture;
};

// MSB-first bit packing.
class BitWriter {
public:
    void write(uint64_t value, int bits);
    // Zero-pads to a byte boundary and returns the buffer.
    std::vector<uint8_t> finish();
    int64_t bits_written() const { return bits_; }

private:
    std::vector<uint8_t> bytes_;
    int64_t bits_ = 0;
};

class BitReader {
public:
    BitReader(const uint8_t* data, size_t size) : data_(data), size_(size) {}
    uint64_t read(int bits);
    int64_t bits_read() const { return bits_; }

private:
    const uint8_t* data_;
    size_t size_;
    int64_t bits_ = 0;
};

uint64_t fnv1a64(const uint8_t* data, size_t size);

enum class StorageMode { Icgs, Grid3dgs };

struct StorageParams {
    int grid_resolution = 0; // G
    int block_size = 0;      // K
    int blocks_per_axis = 0; // B
    int rvq_depth = 0;       // D
    int codebook_size = 0;   // N
    int64_t count = 0;       // M (blocks) for Icgs, occupied cells for Grid3dgs
    int sh_dim = 3;          // k, used by the Grid3dgs baseline accounting
};

// Icgs: M*(2*D*ceil(log2 N) + ceil(3*log2 B)). Grid3dgs: per occupied cell,
// ceil(3*log2 G) index bits plus 32 bits per attribute scalar
// (k + 4 + 3 + 1 scalars).
int64_t storage_bits(const StorageParams& p, StorageMode mode);

// .gsq scene archive. Header: magic "GSQ1", little-endian u16 version, u16 G,
// u8 K, u16 B, u8 D, u32 N, u32 M, u64 codebook hash. Payload: per block,
// the block index (ceil(3*log2 B) bits) then D geometry codes then D texture
// codes (ceil(log2 N) bits each), MSB-first, zero-padded to a byte boundary.
std::vector<uint8_t> write_scene_bytes(const CodeStream& codes);
CodeStream read_scene_bytes(const std::vector<uint8_t>& bytes);
void write_scene_file(const CodeStream& codes, const std::string& path);
CodeStream read_scene_file(const std::string& path);

// Payload size of the stream as stored (excludes the header).
int64_t payload_bits(const CodeStream& codes);

// .gsc codebook pack: magic "GSC1", little-endian u32 d_e, u32 D, u32 N_geo,
// u32 N_tex, then geometry and texture entries as float32 (stage-major,
// entry-major). The pack hash is 64-bit FNV-1a over the entry payload.
std::vector<uint8_t> write_codebook_pack_bytes(const CodebookPack& pack);
CodebookPack read_codebook_pack_bytes(const std::vector<uint8_t>& bytes);
void write_codebook_pack_file(const CodebookPack& pack, const std::string& path);
CodebookPack read_codebook_pack_file(const std::string& path);
uint64_t codebook_pack_hash(const CodebookPack& pack);

// Binds a stream to a pack; throws WrongCodebookError on mismatch.
void check_codebook_binding(const CodeStream& codes, const CodebookPack& pack);

// Standard 3DGS splat PLY (binary little-endian): x, y, z, f_dc_0..2,
// opacity (logit), scale_0..2 (log-scale), rot_0..3 (w,x,y,z). Any f_rest_*
// fields are skipped with a warning. Missing required fields raise
// FormatError naming the first missing one.
void write_ply(const Scene& scene, const std::string& path);
Scene read_ply(const std::string& path, std::vector<std::string>* warnings = nullptr);

} // namespace gsq
