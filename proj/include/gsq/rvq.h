#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gsq/errors.h"

namespace gsq {

// One embedding table. Rows are entries; `frozen` tables reject mutation.
struct Codebook {
    Eigen::MatrixXd entries; // N x d_e
    std::string id;
    bool frozen = false;

    int size() const { return static_cast<int>(entries.rows()); }
    int dim() const { return static_cast<int>(entries.cols()); }
};

// EMA accumulators paired with a codebook during training.
struct EmaState {
    Eigen::VectorXd counts; // N
    Eigen::MatrixXd sums;   // N x d_e
};

// Residual quantizer: D stages sharing one embedding dimension. Stage
// codebooks assembled by this artifact reserve entry 0 as the zero vector (a
// "skip" code), which guarantees that adding a stage never increases the
// residual norm.
struct RvqCodec {
    std::vector<Codebook> stages;

    int depth() const { return static_cast<int>(stages.size()); }
    int dim() const { return stages.empty() ? 0 : stages.front().dim(); }
    // ceil(log2 N) summed over stages.
    int bits_per_input() const;
};

// Resets entry 0 to the zero vector (the reserved skip code).
void pin_zero_entry(Codebook& cb);

int code_bits(int codebook_size);

// Nearest entry under squared Euclidean distance; ties break to the lowest
// index.
std::pair<int, Eigen::VectorXd> vq_nearest(const Eigen::VectorXd& x, const Codebook& cb);

// Stage-by-stage residual encoding (r_0 = x; i_m = nearest(r_{m-1});
// r_m = r_{m-1} - e_{i_m}).
std::vector<int> rvq_encode(const Eigen::VectorXd& x, const RvqCodec& codec);

// Sum of the selected embeddings. Out-of-range codes raise
// CorruptStreamError.
Eigen::VectorXd rvq_decode(const std::vector<int>& codes, const RvqCodec& codec);

// Reconstruction truncated to the first `depth` stages (for monotonicity
// checks).
Eigen::VectorXd rvq_decode_prefix(const std::vector<int>& codes, const RvqCodec& codec, int depth);

// Lloyd's algorithm with k-means++ seeding (or the given initial centroids),
// deterministic for a fixed seed. Empty clusters are re-seeded to the point
// farthest from its assigned centroid. Returns the best iterate by objective.
Codebook kmeans_fit(const std::vector<Eigen::VectorXd>& points, int n_entries, int iters,
                    uint64_t seed, const std::optional<Eigen::MatrixXd>& init = std::nullopt);

// Sum of squared distances from each point to its nearest entry.
double kmeans_objective(const std::vector<Eigen::VectorXd>& points, const Codebook& cb);

// counts <- decay*counts + n; sums <- decay*sums + batch mass;
// entry = sums / max(counts, eps). Entries with zero accumulated mass keep
// their previous value.
void ema_update(Codebook& cb, EmaState& state, const std::vector<Eigen::VectorXd>& batch,
                const std::vector<int>& assignments, double decay);

// ||x - x_hat||^2 averaged over dimensions. The gradient contract (flows to
// x only, straight-through past the quantizer) lives in the training graph.
double commitment_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& x_hat);

} // namespace gsq
