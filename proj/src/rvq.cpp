#include "gsq/rvq.h"

#include <cmath>
#include <limits>
#include <random>

namespace gsq {

int code_bits(int codebook_size) {
    if (codebook_size < 1) throw PreconditionError("code_bits: codebook size must be >= 1");
    return codebook_size == 1
               ? 0
               : static_cast<int>(std::ceil(std::log2(static_cast<double>(codebook_size))));
}

int RvqCodec::bits_per_input() const {
    int bits = 0;
    for (const Codebook& cb : stages) bits += code_bits(cb.size());
    return bits;
}

void pin_zero_entry(Codebook& cb) {
    if (cb.frozen) throw FrozenCodebookError("pin_zero_entry: codebook is frozen");
    cb.entries.row(0).setZero();
}

std::pair<int, Eigen::VectorXd> vq_nearest(const Eigen::VectorXd& x, const Codebook& cb) {
    if (x.size() != cb.dim())
        throw PreconditionError("vq_nearest: dimension mismatch");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < cb.size(); ++i) {
        const double d = (cb.entries.row(i).transpose() - x).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return {best, cb.entries.row(best).transpose()};
}

std::vector<int> rvq_encode(const Eigen::VectorXd& x, const RvqCodec& codec) {
    if (x.size() != codec.dim()) throw PreconditionError("rvq_encode: dimension mismatch");
    std::vector<int> codes;
    codes.reserve(codec.stages.size());
    Eigen::VectorXd residual = x;
    for (const Codebook& cb : codec.stages) {
        auto [idx, e] = vq_nearest(residual, cb);
        codes.push_back(idx);
        residual -= e;
    }
    return codes;
}

Eigen::VectorXd rvq_decode_prefix(const std::vector<int>& codes, const RvqCodec& codec,
                                  int depth) {
    if (static_cast<int>(codes.size()) != codec.depth())
        throw CorruptStreamError("rvq_decode: code count does not match codec depth");
    if (depth < 0 || depth > codec.depth())
        throw PreconditionError("rvq_decode_prefix: bad depth");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(codec.dim());
    for (int m = 0; m < depth; ++m) {
        const Codebook& cb = codec.stages[m];
        if (codes[m] < 0 || codes[m] >= cb.size())
            throw CorruptStreamError("rvq_decode: code out of range");
        out += cb.entries.row(codes[m]).transpose();
    }
    return out;
}

Eigen::VectorXd rvq_decode(const std::vector<int>& codes, const RvqCodec& codec) {
    return rvq_decode_prefix(codes, codec, codec.depth());
}

double kmeans_objective(const std::vector<Eigen::VectorXd>& points, const Codebook& cb) {
    double total = 0.0;
    for (const auto& p : points) {
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < cb.size(); ++i)
            best = std::min(best, (cb.entries.row(i).transpose() - p).squaredNorm());
        total += best;
    }
    return total;
}

namespace {

Eigen::MatrixXd kmeans_pp_seed(const std::vector<Eigen::VectorXd>& points, int n_entries,
                               std::mt19937_64& rng) {
    const int dim = static_cast<int>(points.front().size());
    Eigen::MatrixXd centroids(n_entries, dim);
    std::uniform_int_distribution<size_t> first(0, points.size() - 1);
    centroids.row(0) = points[first(rng)].transpose();
    std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
    for (int k = 1; k < n_entries; ++k) {
        double total = 0.0;
        for (size_t i = 0; i < points.size(); ++i) {
            const double d = (points[i] - centroids.row(k - 1).transpose()).squaredNorm();
            d2[i] = std::min(d2[i], d);
            total += d2[i];
        }
        size_t chosen = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng);
            for (size_t i = 0; i < points.size(); ++i) {
                r -= d2[i];
                if (r <= 0.0) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = first(rng);
        }
        centroids.row(k) = points[chosen].transpose();
    }
    return centroids;
}

} // namespace

Codebook kmeans_fit(const std::vector<Eigen::VectorXd>& points, int n_entries, int iters,
                    uint64_t seed, const std::optional<Eigen::MatrixXd>& init) {
    if (n_entries <= 0) throw PreconditionError("kmeans_fit: N must be positive");
    if (points.empty()) throw PreconditionError("kmeans_fit: needs at least one point");
    const int dim = static_cast<int>(points.front().size());
    std::mt19937_64 rng(seed);

    Eigen::MatrixXd centroids;
    if (init) {
        if (init->rows() != n_entries || init->cols() != dim)
            throw PreconditionError("kmeans_fit: bad initial centroid shape");
        centroids = *init;
    } else {
        centroids = kmeans_pp_seed(points, n_entries, rng);
    }

    Codebook best;
    best.entries = centroids;
    double best_obj = kmeans_objective(points, best);

    std::vector<int> assign(points.size(), 0);
    for (int it = 0; it < iters; ++it) {
        // Assignment step.
        for (size_t i = 0; i < points.size(); ++i) {
            int a = 0;
            double d_best = std::numeric_limits<double>::infinity();
            for (int k = 0; k < n_entries; ++k) {
                const double d = (points[i] - centroids.row(k).transpose()).squaredNorm();
                if (d < d_best) {
                    d_best = d;
                    a = k;
                }
            }
            assign[i] = a;
        }
        // Update step.
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n_entries, dim);
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(n_entries);
        for (size_t i = 0; i < points.size(); ++i) {
            sums.row(assign[i]) += points[i].transpose();
            counts[assign[i]] += 1.0;
        }
        for (int k = 0; k < n_entries; ++k)
            if (counts[k] > 0.0) centroids.row(k) = sums.row(k) / counts[k];
        // Re-seed empty clusters to the point farthest from its centroid.
        for (int k = 0; k < n_entries; ++k) {
            if (counts[k] > 0.0) continue;
            size_t far_i = 0;
            double far_d = -1.0;
            for (size_t i = 0; i < points.size(); ++i) {
                const double d = (points[i] - centroids.row(assign[i]).transpose()).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far_i = i;
                }
            }
            centroids.row(k) = points[far_i].transpose();
        }
        Codebook cand;
        cand.entries = centroids;
        const double obj = kmeans_objective(points, cand);
        if (obj <= best_obj) {
            best_obj = obj;
            best.entries = centroids;
        }
    }
    return best;
}

void ema_update(Codebook& cb, EmaState& state, const std::vector<Eigen::VectorXd>& batch,
                const std::vector<int>& assignments, double decay) {
    if (cb.frozen) throw FrozenCodebookError("ema_update: codebook is frozen");
    if (!(decay > 0.0 && decay < 1.0)) throw PreconditionError("ema_update: decay must be in (0,1)");
    if (batch.size() != assignments.size())
        throw PreconditionError("ema_update: batch/assignment size mismatch");
    if (state.counts.size() != cb.size()) {
        state.counts = Eigen::VectorXd::Zero(cb.size());
        state.sums = Eigen::MatrixXd::Zero(cb.size(), cb.dim());
    }
    if (batch.empty()) return;

    Eigen::VectorXd n = Eigen::VectorXd::Zero(cb.size());
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(cb.size(), cb.dim());
    for (size_t i = 0; i < batch.size(); ++i) {
        const int a = assignments[i];
        if (a < 0 || a >= cb.size()) throw PreconditionError("ema_update: assignment out of range");
        n[a] += 1.0;
        s.row(a) += batch[i].transpose();
    }
    constexpr double kEps = 1e-8;
    for (int k = 0; k < cb.size(); ++k) {
        state.counts[k] = decay * state.counts[k] + n[k];
        state.sums.row(k) = decay * state.sums.row(k) + s.row(k);
        if (n[k] > 0.0)
            cb.entries.row(k) = state.sums.row(k) / std::max(state.counts[k], kEps);
    }
}

double commitment_loss(const Eigen::VectorXd& x, const Eigen::VectorXd& x_hat) {
    if (x.size() != x_hat.size()) throw PreconditionError("commitment_loss: dimension mismatch");
    return (x - x_hat).squaredNorm() / static_cast<double>(x.size());
}

} // namespace gsq
