#pragma once
#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qrouted/stategraph.hpp"

namespace qrouted::nn {

using Mat = Eigen::MatrixXd;

class Tape;

// Handle into a tape. Overloaded operators build the computation graph, so
// forward code reads like Eigen expressions.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;
};

// Reverse-mode tape over dense matrices. One tape per forward/backward pass;
// nodes are created in topological order and walked backwards.
class Tape {
public:
    struct Node {
        Mat val;
        Mat grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Tape&, const Node&)> back;
    };

    Var constant(Mat v);
    Var leaf(Mat v);  // gradient-tracked input

    const Mat& value(Var v) const { return nodes_[v.idx].val; }
    const Mat& grad(Var v);  // zeros if the node is off the gradient path

    // Seeds d(loss)/d(loss)=1 and walks the nodes in reverse. loss must be 1x1.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }

    // --- plumbing for the op free functions ---
    Var push(Mat val, bool requires_grad, std::function<void(Tape&, const Node&)> back);
    bool wants_grad(int idx) const { return nodes_[idx].requires_grad; }
    bool needs_grad(Var v) const { return nodes_[v.idx].requires_grad; }
    void add_grad(int idx, const Mat& g);
    // direct accumulation target for scatter-style backwards; nullptr if the
    // node does not require gradients
    Mat* grad_sink(int idx);
    const Mat& val_of(int idx) const { return nodes_[idx].val; }

private:
    Mat& ensure_grad(int idx);
    std::vector<Node> nodes_;
};

// elementwise / structural ops
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator*(double c, Var a);
Var matmul(Var a, Var b);     // A * B
Var matmul_nt(Var a, Var b);  // A * B^T
Var add_rowvec(Var x, Var v); // broadcast 1xd over rows
Var mul_rowvec(Var x, Var v);
Var relu(Var a);
Var elu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var sum(Var a);   // 1x1
Var mean(Var a);  // 1x1
Var square(Var a);
Var min_elem(Var a, Var b);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, int start, int n);
Var gather_rows(Var x, std::vector<int> idx);
Var select_per_row(Var x, std::vector<int> col_of_row);  // n x 1

// per-row softmax / masked log-softmax over action logits
Var softmax_rows(Var x, std::vector<double>* sums_out = nullptr);
Var masked_log_softmax_rows(Var logits, const Mat& mask01);

// attention primitives over edge lists grouped (non-decreasing) by destination
Var headwise_rowsum(Var x, int heads);  // E x (H*hd) -> E x H
Var segment_softmax(Var scores, std::vector<int> seg, int n_seg,
                    std::vector<double>* sums_out = nullptr);
Var headwise_weighted_segment_sum(Var msgs, Var alpha, std::vector<int> seg, int n_seg);
Var head_average(Var x, int heads);  // n x (H*hd) -> n x hd
Var rows_scale(Var x, Var s);        // n x d scaled per row by s (n x 1)

// ---------------------------------------------------------------------------

// Named dense parameters. std::map keeps iteration (and checkpoints)
// deterministic.
struct ParamStore {
    std::map<std::string, Mat> values;

    Mat& at(const std::string& name);
    const Mat& at(const std::string& name) const;
    void add(const std::string& name, Mat m);
    bool has(const std::string& name) const { return values.count(name) > 0; }
    std::size_t parameter_count() const;
};

using GradMap = std::map<std::string, Mat>;

// Bridges a ParamStore into one tape: every parameter becomes a single leaf,
// reused across the pass, and gradients are collected back by name.
class ParamBinder {
public:
    ParamBinder(Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store) {}
    Var operator()(const std::string& name);
    void collect(GradMap& grads) const;
    Tape* tape() const { return tape_; }

private:
    Tape* tape_;
    const ParamStore* store_;
    std::map<std::string, Var> bound_;
};

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the stream is derived from (seed, name)
// so initialization does not depend on registration order.
void init_uniform_fanin(ParamStore& store, const std::string& name, int rows, int cols,
                        std::uint64_t seed);
void init_zeros(ParamStore& store, const std::string& name, int rows, int cols);

class Adam {
public:
    explicit Adam(double lr = 3e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(ParamStore& params, const GradMap& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, Mat> m_, v_;
};

// ---------------------------------------------------------------------------

// Two-layer perceptron (optionally deeper): affine stacks with ReLU between
// layers and a linear head.
struct MlpSpec {
    std::vector<int> dims;  // {in, hidden..., out}
};

void init_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec,
              std::uint64_t seed);
Var mlp_forward(ParamBinder& p, const std::string& prefix, const MlpSpec& spec, Var x);

// ---------------------------------------------------------------------------

struct HanConfig {
    int n_experts = 1;
    int hidden = 64;
    int heads = 4;
    int layers = 2;

    int arrived_dim() const { return HeteroGraph::arrived_dim(n_experts); }
    void validate() const;
};

// Several decision graphs merged into one block-diagonal multigraph so a
// whole replay batch runs through shared GEMMs. Edge lists are grouped by
// destination row.
struct GraphBatch {
    int n_graphs = 0;
    int n_experts = 0;
    Mat arrived;  // B x (4+2N)
    Mat expert;   // (B*N) x 3
    Mat running;  // sumR x 6
    Mat waiting;  // sumW x 6
    std::vector<int> run_src, run_dst;
    std::vector<int> wait_src, wait_dst;
    std::vector<int> arr2exp_src, arr2exp_dst;
    std::vector<int> exp2arr_src, exp2arr_dst;

    static GraphBatch from_graphs(std::span<const HeteroGraph> graphs);
    static GraphBatch from_graph(const HeteroGraph& graph);
};

struct AttnStats {
    std::vector<double> softmax_sums;  // one per (destination, head) softmax
};

void init_han(ParamStore& store, const HanConfig& cfg, std::uint64_t seed);

// Node-level attention per edge type, semantic attention across types, ELU;
// heads concatenated in all but the final layer, averaged there. Returns the
// arrived-node embeddings, (B x hidden) regardless of graph sizes.
Var han_encode(ParamBinder& p, const HanConfig& cfg, const GraphBatch& batch,
               AttnStats* stats = nullptr);

// Single-relation node-level attention (exposed for tests): aggregates
// src->dst messages into one embedding per destination. Destinations without
// any neighbor of this type get a zero row.
Var edge_type_attention(ParamBinder& p, const std::string& prefix, Var src_nodes, Var dst_nodes,
                        const std::vector<int>& src_idx, const std::vector<int>& dst_idx,
                        int n_dst, int heads, int head_dim, bool average_heads,
                        AttnStats* stats = nullptr);

// Semantic attention: softmax-weighted fusion of per-type embeddings.
Var semantic_attention(ParamBinder& p, const std::string& prefix, std::span<const Var> type_embeds,
                       AttnStats* stats = nullptr);

// ---------------------------------------------------------------------------

// Checkpoints: <stem>.json manifest (names, shapes, caller metadata) plus
// <stem>.bin with the arrays as little-endian float32 in manifest order.
void save_params(const ParamStore& store, const std::filesystem::path& stem,
                 const nlohmann::json& extra_manifest);
ParamStore load_params(const std::filesystem::path& stem, nlohmann::json* manifest_out = nullptr);

}  // namespace qrouted::nn
