#include "gsq/nn.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>

namespace gsq::nn {

Param& ParamStore::create(const std::string& name, int rows, int cols) {
    auto it = params_.find(name);
    if (it != params_.end()) {
        if (it->second.value.rows() != rows || it->second.value.cols() != cols)
            throw ConfigError("parameter shape conflict for " + name);
        return it->second;
    }
    Param p;
    p.name = name;
    p.value = Mat::Zero(rows, cols);
    p.grad = Mat::Zero(rows, cols);
    p.m = Mat::Zero(rows, cols);
    p.v = Mat::Zero(rows, cols);
    return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
}

void ParamStore::zero_grads() {
    for (auto& [name, p] : params_) p.zero_grad();
}

double ParamStore::grad_global_norm() const {
    double sq = 0.0;
    for (const auto& [name, p] : params_) sq += p.grad.squaredNorm();
    return std::sqrt(sq);
}

void init_xavier(Mat& m, std::mt19937_64& rng, double gain) {
    const double a = gain * std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
}

int Graph::emplace(Mat value, bool needs_grad, std::function<void(Graph&)> back, Param* bound) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.bound = bound;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

void Graph::accum(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
}

int Graph::constant(Mat v) { return emplace(std::move(v), false); }

int Graph::input(Mat v) { return emplace(std::move(v), true); }

int Graph::param(Param& p) { return emplace(p.value, true, nullptr, &p); }

int Graph::matmul(int a, int b) {
    Mat v = nodes_[a].value * nodes_[b].value;
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, b, id](Graph& g) {
            const Mat& go = g.nodes_[id].grad;
            if (g.nodes_[a].needs_grad) g.accum(a, go * g.nodes_[b].value.transpose());
            if (g.nodes_[b].needs_grad) g.accum(b, g.nodes_[a].value.transpose() * go);
        };
    return id;
}

int Graph::add(int a, int b) {
    Mat v = nodes_[a].value + nodes_[b].value;
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, b, id](Graph& g) {
            g.accum(a, g.nodes_[id].grad);
            g.accum(b, g.nodes_[id].grad);
        };
    return id;
}

int Graph::sub(int a, int b) {
    Mat v = nodes_[a].value - nodes_[b].value;
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, b, id](Graph& g) {
            g.accum(a, g.nodes_[id].grad);
            g.accum(b, -g.nodes_[id].grad);
        };
    return id;
}

int Graph::add_rowvec(int a, int bias) {
    if (nodes_[bias].value.rows() != 1 || nodes_[bias].value.cols() != nodes_[a].value.cols())
        throw PreconditionError("add_rowvec: bias shape mismatch");
    Mat v = nodes_[a].value.rowwise() + nodes_[bias].value.row(0);
    const bool ng = nodes_[a].needs_grad || nodes_[bias].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, bias, id](Graph& g) {
            const Mat& go = g.nodes_[id].grad;
            g.accum(a, go);
            if (g.nodes_[bias].needs_grad) g.accum(bias, go.colwise().sum());
        };
    return id;
}

int Graph::scale(int a, double s) {
    Mat v = nodes_[a].value * s;
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, s, id](Graph& g) { g.accum(a, g.nodes_[id].grad * s); };
    return id;
}

int Graph::wsum(const std::vector<std::pair<int, double>>& terms) {
    if (terms.empty()) throw PreconditionError("wsum: empty term list");
    Mat v = nodes_[terms[0].first].value * terms[0].second;
    bool ng = nodes_[terms[0].first].needs_grad;
    for (size_t i = 1; i < terms.size(); ++i) {
        v += nodes_[terms[i].first].value * terms[i].second;
        ng = ng || nodes_[terms[i].first].needs_grad;
    }
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [terms, id](Graph& g) {
            for (const auto& [t, w] : terms) g.accum(t, g.nodes_[id].grad * w);
        };
    return id;
}

int Graph::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw PreconditionError("concat_cols: empty list");
    const Eigen::Index rows = nodes_[parts[0]].value.rows();
    Eigen::Index cols = 0;
    bool ng = false;
    for (int p : parts) {
        if (nodes_[p].value.rows() != rows) throw PreconditionError("concat_cols: row mismatch");
        cols += nodes_[p].value.cols();
        ng = ng || nodes_[p].needs_grad;
    }
    Mat v(rows, cols);
    Eigen::Index off = 0;
    for (int p : parts) {
        v.middleCols(off, nodes_[p].value.cols()) = nodes_[p].value;
        off += nodes_[p].value.cols();
    }
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [parts, id](Graph& g) {
            Eigen::Index off = 0;
            for (int p : parts) {
                const Eigen::Index w = g.nodes_[p].value.cols();
                g.accum(p, g.nodes_[id].grad.middleCols(off, w));
                off += w;
            }
        };
    return id;
}

int Graph::concat_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw PreconditionError("concat_rows: empty list");
    const Eigen::Index cols = nodes_[parts[0]].value.cols();
    Eigen::Index rows = 0;
    bool ng = false;
    for (int p : parts) {
        if (nodes_[p].value.cols() != cols) throw PreconditionError("concat_rows: col mismatch");
        rows += nodes_[p].value.rows();
        ng = ng || nodes_[p].needs_grad;
    }
    Mat v(rows, cols);
    Eigen::Index off = 0;
    for (int p : parts) {
        v.middleRows(off, nodes_[p].value.rows()) = nodes_[p].value;
        off += nodes_[p].value.rows();
    }
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [parts, id](Graph& g) {
            Eigen::Index off = 0;
            for (int p : parts) {
                const Eigen::Index h = g.nodes_[p].value.rows();
                g.accum(p, g.nodes_[id].grad.middleRows(off, h));
                off += h;
            }
        };
    return id;
}

int Graph::slice_cols(int a, int start, int len) {
    Mat v = nodes_[a].value.middleCols(start, len);
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, start, len, id](Graph& g) {
            Mat full = Mat::Zero(g.nodes_[a].value.rows(), g.nodes_[a].value.cols());
            full.middleCols(start, len) = g.nodes_[id].grad;
            g.accum(a, full);
        };
    return id;
}

int Graph::gather_concat(int a, std::vector<std::vector<int>> plan) {
    if (plan.empty()) throw PreconditionError("gather_concat: empty plan");
    const size_t fan = plan[0].size();
    const Eigen::Index d = nodes_[a].value.cols();
    Mat v(static_cast<Eigen::Index>(plan.size()), static_cast<Eigen::Index>(fan) * d);
    for (size_t r = 0; r < plan.size(); ++r) {
        if (plan[r].size() != fan) throw PreconditionError("gather_concat: ragged plan");
        for (size_t j = 0; j < fan; ++j) v.block(r, j * d, 1, d) = nodes_[a].value.row(plan[r][j]);
    }
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng) {
        auto shared = std::make_shared<std::vector<std::vector<int>>>(std::move(plan));
        nodes_[id].back = [a, shared, d, fan, id](Graph& g) {
            Mat ga = Mat::Zero(g.nodes_[a].value.rows(), d);
            const Mat& go = g.nodes_[id].grad;
            for (size_t r = 0; r < shared->size(); ++r)
                for (size_t j = 0; j < fan; ++j)
                    ga.row((*shared)[r][j]) += go.block(r, j * d, 1, d);
            g.accum(a, ga);
        };
    }
    return id;
}

int Graph::gather_weighted(int a, std::vector<std::vector<std::pair<int, double>>> plan) {
    const Eigen::Index d = nodes_[a].value.cols();
    Mat v = Mat::Zero(static_cast<Eigen::Index>(plan.size()), d);
    for (size_t r = 0; r < plan.size(); ++r)
        for (const auto& [j, w] : plan[r]) v.row(r) += w * nodes_[a].value.row(j);
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng) {
        auto shared =
            std::make_shared<std::vector<std::vector<std::pair<int, double>>>>(std::move(plan));
        nodes_[id].back = [a, shared, d, id](Graph& g) {
            Mat ga = Mat::Zero(g.nodes_[a].value.rows(), d);
            const Mat& go = g.nodes_[id].grad;
            for (size_t r = 0; r < shared->size(); ++r)
                for (const auto& [j, w] : (*shared)[r]) ga.row(j) += w * go.row(r);
            g.accum(a, ga);
        };
    }
    return id;
}

int Graph::silu(int a) {
    const Mat& x = nodes_[a].value;
    Mat sig = (1.0 + (-x.array()).exp()).inverse().matrix();
    Mat v = x.cwiseProduct(sig);
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng) {
        auto s = std::make_shared<Mat>(std::move(sig));
        nodes_[id].back = [a, s, id](Graph& g) {
            const Mat& x = g.nodes_[a].value;
            Mat d = s->array() * (1.0 + x.array() * (1.0 - s->array()));
            g.accum(a, g.nodes_[id].grad.cwiseProduct(d));
        };
    }
    return id;
}

int Graph::exp(int a) {
    Mat v = nodes_[a].value.array().exp().matrix();
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(v, ng);
    if (ng)
        nodes_[id].back = [a, id](Graph& g) {
            g.accum(a, g.nodes_[id].grad.cwiseProduct(g.nodes_[id].value));
        };
    return id;
}

int Graph::clamp(int a, double lo, double hi) {
    Mat v = nodes_[a].value.cwiseMax(lo).cwiseMin(hi);
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng)
        nodes_[id].back = [a, lo, hi, id](Graph& g) {
            const Mat& x = g.nodes_[a].value;
            Mat m = ((x.array() >= lo) && (x.array() <= hi)).cast<double>();
            g.accum(a, g.nodes_[id].grad.cwiseProduct(m.matrix()));
        };
    return id;
}

int Graph::quat_head(int a) {
    const Mat& x = nodes_[a].value;
    if (x.cols() != 4) throw PreconditionError("quat_head: expects 4 columns");
    Mat v(x.rows(), 4);
    Eigen::VectorXd inv_norm(x.rows());
    Eigen::VectorXd sign(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double n = x.row(r).norm();
        if (n <= 1e-12) throw NumericError("quat_head: near-zero quaternion");
        inv_norm[r] = 1.0 / n;
        sign[r] = x(r, 0) * inv_norm[r] < 0.0 ? -1.0 : 1.0;
        v.row(r) = sign[r] * inv_norm[r] * x.row(r);
    }
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(v), ng);
    if (ng) {
        auto inv = std::make_shared<Eigen::VectorXd>(std::move(inv_norm));
        auto sgn = std::make_shared<Eigen::VectorXd>(std::move(sign));
        nodes_[id].back = [a, inv, sgn, id](Graph& g) {
            const Mat& x = g.nodes_[a].value;
            const Mat& go = g.nodes_[id].grad;
            Mat ga(x.rows(), 4);
            for (Eigen::Index r = 0; r < x.rows(); ++r) {
                const Eigen::RowVector4d u = x.row(r) * (*inv)[r]; // unit, pre-flip
                const Eigen::RowVector4d gr = go.row(r);
                ga.row(r) = (*sgn)[r] * (*inv)[r] * (gr - u * gr.dot(u));
            }
            g.accum(a, ga);
        };
    }
    return id;
}

int Graph::st_replace(int a, Mat replacement, const bool* gate) {
    if (replacement.rows() != nodes_[a].value.rows() ||
        replacement.cols() != nodes_[a].value.cols())
        throw PreconditionError("st_replace: shape mismatch");
    const bool ng = nodes_[a].needs_grad;
    int id = emplace(std::move(replacement), ng);
    if (ng)
        nodes_[id].back = [a, gate, id](Graph& g) {
            if (gate == nullptr || *gate) g.accum(a, g.nodes_[id].grad);
        };
    return id;
}

namespace {

Mat ones_like(const Mat& m) { return Mat::Ones(m.rows(), m.cols()); }

double weight_total(const Mat& w) {
    const double t = w.sum();
    if (t <= 0.0) throw PreconditionError("loss: weight matrix sums to zero");
    return t;
}

} // namespace

int Graph::huber_loss(int pred, Mat target, double delta, Mat weights) {
    if (delta <= 0.0) throw PreconditionError("huber_loss: delta must be positive");
    const Mat& p = nodes_[pred].value;
    if (weights.size() == 0) weights = ones_like(p);
    if (p.rows() != target.rows() || p.cols() != target.cols())
        throw PreconditionError("huber_loss: shape mismatch");
    const double total_w = weight_total(weights);
    Mat r = p - target;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
        const double a = std::abs(r(i));
        loss += weights(i) * (a <= delta ? 0.5 * a * a : delta * (a - 0.5 * delta));
    }
    loss /= total_w;
    const bool ng = nodes_[pred].needs_grad;
    int id = emplace(Mat::Constant(1, 1, loss), ng);
    if (ng) {
        auto rr = std::make_shared<Mat>(std::move(r));
        auto ww = std::make_shared<Mat>(std::move(weights));
        nodes_[id].back = [pred, rr, ww, delta, total_w, id](Graph& g) {
            const double go = g.nodes_[id].grad(0, 0);
            Mat ga(rr->rows(), rr->cols());
            for (Eigen::Index i = 0; i < rr->size(); ++i) {
                const double v = (*rr)(i);
                const double d = std::abs(v) <= delta ? v : delta * (v > 0 ? 1.0 : -1.0);
                ga(i) = go * (*ww)(i)*d / total_w;
            }
            g.accum(pred, ga);
        };
    }
    return id;
}

int Graph::bce_logits_loss(int pred, Mat target, Mat weights) {
    const Mat& l = nodes_[pred].value;
    if (weights.size() == 0) weights = ones_like(l);
    if (l.rows() != target.rows() || l.cols() != target.cols())
        throw PreconditionError("bce_logits_loss: shape mismatch");
    const double total_w = weight_total(weights);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < l.size(); ++i) {
        const double x = l(i), t = target(i);
        // max(x,0) - x*t + log(1 + exp(-|x|))
        loss += weights(i) * (std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))));
    }
    loss /= total_w;
    const bool ng = nodes_[pred].needs_grad;
    int id = emplace(Mat::Constant(1, 1, loss), ng);
    if (ng) {
        auto tt = std::make_shared<Mat>(std::move(target));
        auto ww = std::make_shared<Mat>(std::move(weights));
        nodes_[id].back = [pred, tt, ww, total_w, id](Graph& g) {
            const double go = g.nodes_[id].grad(0, 0);
            const Mat& l = g.nodes_[pred].value;
            Mat ga(l.rows(), l.cols());
            for (Eigen::Index i = 0; i < l.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-l(i)));
                ga(i) = go * (*ww)(i) * (s - (*tt)(i)) / total_w;
            }
            g.accum(pred, ga);
        };
    }
    return id;
}

int Graph::mse_loss(int pred, Mat target, Mat weights) {
    const Mat& p = nodes_[pred].value;
    if (weights.size() == 0) weights = ones_like(p);
    if (p.rows() != target.rows() || p.cols() != target.cols())
        throw PreconditionError("mse_loss: shape mismatch");
    const double total_w = weight_total(weights);
    Mat r = p - target;
    const double loss = r.cwiseProduct(r).cwiseProduct(weights).sum() / total_w;
    const bool ng = nodes_[pred].needs_grad;
    int id = emplace(Mat::Constant(1, 1, loss), ng);
    if (ng) {
        auto rr = std::make_shared<Mat>(std::move(r));
        auto ww = std::make_shared<Mat>(std::move(weights));
        nodes_[id].back = [pred, rr, ww, total_w, id](Graph& g) {
            const double go = g.nodes_[id].grad(0, 0);
            g.accum(pred, (2.0 * go / total_w) * rr->cwiseProduct(*ww));
        };
    }
    return id;
}

void Graph::backward(int loss) {
    if (nodes_[loss].value.size() != 1)
        throw PreconditionError("backward: loss must be a scalar node");
    for (Node& n : nodes_)
        if (n.grad.size() != 0) n.grad.setZero();
    nodes_[loss].grad = Mat::Constant(1, 1, 1.0);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.back) n.back(*this);
    }
    for (Node& n : nodes_)
        if (n.bound != nullptr && n.grad.size() != 0) n.bound->grad += n.grad;
}

int linear(Graph& g, int x, Param& w, Param& b) {
    return g.add_rowvec(g.matmul(x, g.param(w)), g.param(b));
}

int conv3_block_reduce(Graph& g, int cell_feats, const std::vector<std::vector<int>>& slot_source,
                       const Conv3Params& p) {
    const int n_cells = static_cast<int>(g.value(cell_feats).rows());
    const int pad_row = n_cells;
    int base = g.concat_rows({cell_feats, g.param(*p.pad)});

    constexpr int kK = 4;
    for (const auto& slots : slot_source)
        if (slots.size() != kK * kK * kK)
            throw PreconditionError("conv3_block_reduce: slot plan must have K^3 entries");

    auto offset_of = [](int x, int y, int z) { return x + kK * (y + kK * z); };
    // Stage 1: each 2x2x2 child cell gathers its 8 source slots.
    std::vector<std::vector<int>> plan1;
    plan1.reserve(slot_source.size() * 8);
    for (const auto& slots : slot_source) {
        for (int cz = 0; cz < 2; ++cz)
            for (int cy = 0; cy < 2; ++cy)
                for (int cx = 0; cx < 2; ++cx) {
                    std::vector<int> row;
                    row.reserve(8);
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const int src = slots[offset_of(2 * cx + dx, 2 * cy + dy, 2 * cz + dz)];
                                row.push_back(src < 0 ? pad_row : src);
                            }
                    plan1.push_back(std::move(row));
                }
    }
    int h = g.silu(g.add_rowvec(g.matmul(g.gather_concat(base, std::move(plan1)), g.param(*p.w1)),
                                g.param(*p.b1)));
    // Stage 2: each block gathers its 8 child cells (contiguous rows).
    std::vector<std::vector<int>> plan2;
    plan2.reserve(slot_source.size());
    for (size_t b = 0; b < slot_source.size(); ++b) {
        std::vector<int> row(8);
        for (int j = 0; j < 8; ++j) row[j] = static_cast<int>(b) * 8 + j;
        plan2.push_back(std::move(row));
    }
    return g.add_rowvec(g.matmul(g.gather_concat(h, std::move(plan2)), g.param(*p.w2)),
                        g.param(*p.b2));
}

std::array<std::array<int, 3>, 27> neighbor_offsets27() {
    std::array<std::array<int, 3>, 27> out{};
    int i = 0;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) out[i++] = {dx, dy, dz};
    return out;
}

int sparse_unet_mix(Graph& g, int block_feats,
                    const std::vector<std::array<int, 27>>& neighbors,
                    const std::vector<SparseMixLayer>& layers) {
    int x = block_feats;
    const int n_blocks = static_cast<int>(g.value(block_feats).rows());
    if (static_cast<int>(neighbors.size()) != n_blocks)
        throw PreconditionError("sparse_unet_mix: neighbor plan size mismatch");
    for (const SparseMixLayer& layer : layers) {
        int act = g.silu(x);
        int base = g.concat_rows({act, g.param(*layer.pad)});
        std::vector<std::vector<int>> plan;
        plan.reserve(neighbors.size());
        for (const auto& nb : neighbors) {
            std::vector<int> row(27);
            for (int j = 0; j < 27; ++j) row[j] = nb[j] < 0 ? n_blocks : nb[j];
            plan.push_back(std::move(row));
        }
        int mix = g.add_rowvec(g.matmul(g.gather_concat(base, std::move(plan)), g.param(*layer.w)),
                               g.param(*layer.b));
        x = g.add(x, mix);
    }
    return x;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw PreconditionError("percentile: empty sample");
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

void HuberState::update(std::vector<double> abs_residuals) {
    if (abs_residuals.empty()) return;
    const double p90 = percentile(std::move(abs_residuals), 0.9);
    delta = momentum * delta + (1.0 - momentum) * p90;
}

void AdamW::step(ParamStore& params) {
    double sq = 0.0;
    bool finite = true;
    for (const auto& [name, p] : params.all()) {
        if (!p.grad.allFinite()) {
            finite = false;
            break;
        }
        sq += p.grad.squaredNorm();
    }
    if (!finite) {
        ++skipped_steps_;
        return;
    }
    const double norm = std::sqrt(sq);
    const double clip = cfg_.clip_max_norm > 0.0 && norm > cfg_.clip_max_norm
                            ? cfg_.clip_max_norm / norm
                            : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
        const Mat g = p.grad * clip;
        p.m = cfg_.beta1 * p.m + (1.0 - cfg_.beta1) * g;
        p.v = cfg_.beta2 * p.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
        const Mat m_hat = p.m / bc1;
        const Mat v_hat = p.v / bc2;
        p.value -= cfg_.lr * (m_hat.array() / (v_hat.array().sqrt() + cfg_.eps)).matrix();
        if (cfg_.weight_decay > 0.0) p.value -= cfg_.lr * cfg_.weight_decay * p.value;
    }
}

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    // Little-endian host assumed (x86-64 / aarch64 little).
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CorruptStreamError("checkpoint: truncated file");
    return v;
}

} // namespace

void save_checkpoint(const ParamStore& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("save_checkpoint: cannot open " + path);
    os.write("GSQW", 4);
    write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, p] : params.all()) {
        write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint32_t>(os, 2);
        write_pod<uint32_t>(os, static_cast<uint32_t>(p.value.rows()));
        write_pod<uint32_t>(os, static_cast<uint32_t>(p.value.cols()));
        for (Eigen::Index r = 0; r < p.value.rows(); ++r)
            for (Eigen::Index c = 0; c < p.value.cols(); ++c)
                write_pod<float>(os, static_cast<float>(p.value(r, c)));
    }
    if (!os) throw FormatError("save_checkpoint: write failure for " + path);
}

void load_checkpoint(ParamStore& params, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GSQW", 4) != 0)
        throw CorruptStreamError("load_checkpoint: bad magic");
    const uint32_t count = read_pod<uint32_t>(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_pod<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CorruptStreamError("load_checkpoint: truncated name");
        const uint32_t rank = read_pod<uint32_t>(is);
        if (rank != 2) throw CorruptStreamError("load_checkpoint: unsupported rank");
        const uint32_t rows = read_pod<uint32_t>(is);
        const uint32_t cols = read_pod<uint32_t>(is);
        Param& p = params.create(name, static_cast<int>(rows), static_cast<int>(cols));
        for (uint32_t r = 0; r < rows; ++r)
            for (uint32_t c = 0; c < cols; ++c) p.value(r, c) = read_pod<float>(is);
        p.m.setZero();
        p.v.setZero();
        p.grad.setZero();
    }
}

GradCheckReport grad_check(ParamStore& params, const std::vector<std::string>& param_names,
                           const std::function<double(bool)>& loss_fn, double tol, double h,
                           int max_coords, uint64_t seed) {
    GradCheckReport report;
    params.zero_grads();
    loss_fn(true);
    std::map<std::string, Mat> analytic;
    for (const std::string& name : param_names) analytic[name] = params.at(name).grad;

    std::mt19937_64 rng(seed);
    for (const std::string& name : param_names) {
        Param& p = params.at(name);
        const Eigen::Index n = p.value.size();
        std::vector<Eigen::Index> coords(n);
        for (Eigen::Index i = 0; i < n; ++i) coords[i] = i;
        if (n > max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords);
        }
        for (Eigen::Index idx : coords) {
            const double orig = p.value(idx);
            p.value(idx) = orig + h;
            const double up = loss_fn(false);
            p.value(idx) = orig - h;
            const double down = loss_fn(false);
            p.value(idx) = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = analytic[name](idx);
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
            report.max_rel_err = std::max(report.max_rel_err, rel);
            ++report.checked;
            if (rel > tol) {
                ++report.failed;
                if (report.failures.size() < 16)
                    report.failures.push_back(name + "[" + std::to_string(idx) + "] fd=" +
                                              std::to_string(fd) + " ad=" + std::to_string(an));
            }
        }
    }
    return report;
}

} // namespace gsq::nn
