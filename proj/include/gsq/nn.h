#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gsq/errors.h"

namespace gsq::nn {

using Mat = Eigen::MatrixXd;

// Named trainable tensor. Gradients accumulate across backward sweeps until
// the optimizer consumes them.
struct Param {
    std::string name;
    Mat value;
    Mat grad;
    // AdamW moments.
    Mat m;
    Mat v;

    void zero_grad() { grad.setZero(); }
};

class ParamStore {
public:
    // Creates the parameter if absent; throws if present with another shape.
    Param& create(const std::string& name, int rows, int cols);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    void zero_grads();
    size_t size() const { return params_.size(); }
    // Deterministic (name-ordered) iteration.
    std::map<std::string, Param>& all() { return params_; }
    const std::map<std::string, Param>& all() const { return params_; }

    double grad_global_norm() const;

private:
    std::map<std::string, Param> params_;
};

// Uniform Glorot initialization, deterministic for a fixed generator state.
void init_xavier(Mat& m, std::mt19937_64& rng, double gain = 1.0);

// Define-by-run reverse-mode tape over matrix-valued nodes, rebuilt every
// forward pass; node handles are indices. backward() zeroes node gradients,
// seeds the loss with 1 and sweeps in reverse creation order, then flushes
// leaf gradients into their bound parameters (accumulating).
class Graph {
public:
    int constant(Mat v);
    int input(Mat v); // differentiable leaf without a parameter binding
    int param(Param& p);

    int matmul(int a, int b);
    int add(int a, int b);
    int sub(int a, int b);
    int add_rowvec(int a, int bias); // bias shape [1, cols]
    int scale(int a, double s);
    int wsum(const std::vector<std::pair<int, double>>& terms);
    int concat_cols(const std::vector<int>& parts);
    int concat_rows(const std::vector<int>& parts);
    int slice_cols(int a, int start, int len);
    // out.row(i) = concat of a.row(j) for j in plan[i]; every row of the plan
    // must have the same length.
    int gather_concat(int a, std::vector<std::vector<int>> plan);
    // out.row(i) = sum of w * a.row(j) over (j, w) in plan[i]; empty rows give
    // zeros.
    int gather_weighted(int a, std::vector<std::vector<std::pair<int, double>>> plan);
    int silu(int a);
    int exp(int a);
    int clamp(int a, double lo, double hi);
    // Rows are quaternions (w,x,y,z): normalize and flip to w >= 0.
    int quat_head(int a);
    // Straight-through: the value is replaced wholesale (same shape) while
    // the gradient passes to `a` unchanged as long as *gate is true
    // (gate == nullptr means always).
    int st_replace(int a, Mat replacement, const bool* gate = nullptr);

    // Scalar losses, mean-reduced over elements with nonzero weight. An empty
    // weight matrix means all-ones.
    int huber_loss(int pred, Mat target, double delta, Mat weights = Mat());
    int bce_logits_loss(int pred, Mat target, Mat weights = Mat());
    int mse_loss(int pred, Mat target, Mat weights = Mat());

    const Mat& value(int id) const { return nodes_[id].value; }
    const Mat& grad_of(int id) const { return nodes_[id].grad; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    size_t size() const { return nodes_.size(); }

    void backward(int loss);

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        Param* bound = nullptr;
        std::function<void(Graph&)> back;
    };
    std::vector<Node> nodes_;

    int emplace(Mat value, bool needs_grad, std::function<void(Graph&)> back = nullptr,
                Param* bound = nullptr);
    void accum(int id, const Mat& g);
    friend struct GraphAccess;
};

// x W + b.
int linear(Graph& g, int x, Param& w, Param& b);

// Two strided 3D convolutions reducing each K^3 block of cell features to one
// block vector (4^3 -> 2^3 -> 1). `slot_source[b][o]` is the row of
// `cell_feats` occupying offset o of block b (x-fastest order) or -1 for an
// empty cell, which reads the learnable pad row instead.
struct Conv3Params {
    Param* w1;
    Param* b1;
    Param* w2;
    Param* b2;
    Param* pad;
};
int conv3_block_reduce(Graph& g, int cell_feats, const std::vector<std::vector<int>>& slot_source,
                       const Conv3Params& p);

// Residual stack of sparse 3x3x3 neighborhood convolutions over block
// features. `neighbors[b][n]` indexes the block row providing neighbor n of
// block b (fixed 27-offset order) or -1 where the neighbor is absent, which
// reads that layer's pad row. Depth 0 is the identity.
struct SparseMixLayer {
    Param* w;
    Param* b;
    Param* pad;
};
int sparse_unet_mix(Graph& g, int block_feats,
                    const std::vector<std::array<int, 27>>& neighbors,
                    const std::vector<SparseMixLayer>& layers);

// Canonical 27-neighbor offset order shared by plan builders.
std::array<std::array<int, 3>, 27> neighbor_offsets27();

// Dynamic Huber threshold: delta <- m*delta + (1-m)*percentile90(|r|).
struct HuberState {
    double delta = 1.0;
    double momentum = 0.9;

    void update(std::vector<double> abs_residuals);
};

double percentile(std::vector<double> values, double q);

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip_max_norm = 1.0;
};

// Decoupled-weight-decay Adam with global-norm gradient clipping. A step with
// any non-finite gradient is skipped and counted.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    void step(ParamStore& params);
    AdamWConfig& config() { return cfg_; }
    int skipped_steps() const { return skipped_steps_; }
    int64_t steps_taken() const { return t_; }

private:
    AdamWConfig cfg_;
    int64_t t_ = 0;
    int skipped_steps_ = 0;
};

// "GSQW" checkpoint: little-endian u32 count, then per parameter u32 name
// length, name bytes, u32 rank, u32 extents, float32 data.
void save_checkpoint(const ParamStore& params, const std::string& path);
void load_checkpoint(ParamStore& params, const std::string& path);

struct GradCheckReport {
    int checked = 0;
    int failed = 0;
    double max_rel_err = 0.0;
    std::vector<std::string> failures;

    bool ok() const { return failed == 0; }
};

// Central finite differences (h = 1e-3) against the tape, on up to
// `max_coords` randomly sampled coordinates per parameter.
GradCheckReport grad_check(ParamStore& params, const std::vector<std::string>& param_names,
                           const std::function<double(bool)>& loss_fn, double tol = 1e-4,
                           double h = 1e-3, int max_coords = 24, uint64_t seed = 0);

} // namespace gsq::nn
