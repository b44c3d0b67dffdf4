#include "qrouted/neural.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "qrouted/rng.hpp"

namespace qrouted::nn {

namespace {

void check_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw std::invalid_argument("vars belong to different tapes");
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

// ---------------------------------------------------------------------- Tape

Var Tape::constant(Mat v) { return push(std::move(v), false, nullptr); }

Var Tape::leaf(Mat v) { return push(std::move(v), true, nullptr); }

Var Tape::push(Mat val, bool requires_grad, std::function<void(Tape&, const Node&)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Mat& Tape::ensure_grad(int idx) {
    Node& n = nodes_[idx];
    if (!n.grad_alloc) {
        n.grad = Mat::Zero(n.val.rows(), n.val.cols());
        n.grad_alloc = true;
    }
    return n.grad;
}

void Tape::add_grad(int idx, const Mat& g) {
    if (!nodes_[idx].requires_grad) return;
    ensure_grad(idx) += g;
}

Mat* Tape::grad_sink(int idx) {
    if (!nodes_[idx].requires_grad) return nullptr;
    return &ensure_grad(idx);
}

const Mat& Tape::grad(Var v) {
    return ensure_grad(v.idx);
}

void Tape::backward(Var loss) {
    const Node& ln = nodes_[loss.idx];
    if (ln.val.rows() != 1 || ln.val.cols() != 1)
        throw std::invalid_argument("backward needs a scalar loss");
    if (!std::isfinite(ln.val(0, 0))) throw std::runtime_error("non-finite loss");
    if (!ln.requires_grad) return;
    ensure_grad(loss.idx)(0, 0) = 1.0;
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.grad_alloc && n.back) n.back(*this, n);
    }
}

// ----------------------------------------------------------------------- ops

namespace {

Var elementwise_binary(Var a, Var b, Mat val,
                       std::function<void(Tape&, const Mat&, int, int)> back) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    bool req = t.needs_grad(a) || t.needs_grad(b);
    int pa = a.idx, pb = b.idx;
    return t.push(std::move(val), req,
                  req ? [back, pa, pb](Tape& t2, const Tape::Node& n) { back(t2, n.grad, pa, pb); }
                      : std::function<void(Tape&, const Tape::Node&)>(nullptr));
}

}  // namespace

Var operator+(Var a, Var b) {
    return elementwise_binary(a, b, a.tape->value(a) + b.tape->value(b),
                              [](Tape& t, const Mat& g, int pa, int pb) {
                                  t.add_grad(pa, g);
                                  t.add_grad(pb, g);
                              });
}

Var operator-(Var a, Var b) {
    return elementwise_binary(a, b, a.tape->value(a) - b.tape->value(b),
                              [](Tape& t, const Mat& g, int pa, int pb) {
                                  t.add_grad(pa, g);
                                  t.add_grad(pb, -g);
                              });
}

Var operator*(Var a, Var b) {
    return elementwise_binary(a, b, a.tape->value(a).cwiseProduct(b.tape->value(b)),
                              [](Tape& t, const Mat& g, int pa, int pb) {
                                  t.add_grad(pa, g.cwiseProduct(t.val_of(pb)));
                                  t.add_grad(pb, g.cwiseProduct(t.val_of(pa)));
                              });
}

Var operator*(double c, Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    return t.push(c * t.value(a), t.needs_grad(a),
                  [c, pa](Tape& t2, const Tape::Node& n) { t2.add_grad(pa, c * n.grad); });
}

Var matmul(Var a, Var b) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    int pa = a.idx, pb = b.idx;
    return t.push(t.value(a) * t.value(b), t.needs_grad(a) || t.needs_grad(b),
                  [pa, pb](Tape& t2, const Tape::Node& n) {
                      if (Mat* ga = t2.grad_sink(pa)) ga->noalias() += n.grad * t2.val_of(pb).transpose();
                      if (Mat* gb = t2.grad_sink(pb)) gb->noalias() += t2.val_of(pa).transpose() * n.grad;
                  });
}

Var matmul_nt(Var a, Var b) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    int pa = a.idx, pb = b.idx;
    return t.push(t.value(a) * t.value(b).transpose(), t.needs_grad(a) || t.needs_grad(b),
                  [pa, pb](Tape& t2, const Tape::Node& n) {
                      if (Mat* ga = t2.grad_sink(pa)) ga->noalias() += n.grad * t2.val_of(pb);
                      if (Mat* gb = t2.grad_sink(pb)) gb->noalias() += n.grad.transpose() * t2.val_of(pa);
                  });
}

Var add_rowvec(Var x, Var v) {
    check_same_tape(x, v);
    Tape& t = *x.tape;
    if (t.value(v).rows() != 1 || t.value(v).cols() != t.value(x).cols())
        throw std::invalid_argument("add_rowvec: shape mismatch");
    Mat val = t.value(x);
    val.rowwise() += t.value(v).row(0);
    int px = x.idx, pv = v.idx;
    return t.push(std::move(val), t.needs_grad(x) || t.needs_grad(v),
                  [px, pv](Tape& t2, const Tape::Node& n) {
                      t2.add_grad(px, n.grad);
                      t2.add_grad(pv, n.grad.colwise().sum());
                  });
}

Var mul_rowvec(Var x, Var v) {
    check_same_tape(x, v);
    Tape& t = *x.tape;
    if (t.value(v).rows() != 1 || t.value(v).cols() != t.value(x).cols())
        throw std::invalid_argument("mul_rowvec: shape mismatch");
    Mat val = t.value(x).array().rowwise() * t.value(v).row(0).array();
    int px = x.idx, pv = v.idx;
    return t.push(std::move(val), t.needs_grad(x) || t.needs_grad(v),
                  [px, pv](Tape& t2, const Tape::Node& n) {
                      t2.add_grad(px, n.grad.array().rowwise() * t2.val_of(pv).row(0).array());
                      t2.add_grad(pv, (n.grad.cwiseProduct(t2.val_of(px))).colwise().sum());
                  });
}

Var relu(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    return t.push(t.value(a).cwiseMax(0.0), t.needs_grad(a),
                  [pa](Tape& t2, const Tape::Node& n) {
                      Mat m = (t2.val_of(pa).array() > 0.0).cast<double>();
                      t2.add_grad(pa, n.grad.cwiseProduct(m));
                  });
}

Var elu(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val = t.value(a).unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
    return t.push(std::move(val), t.needs_grad(a), [pa](Tape& t2, const Tape::Node& n) {
        const Mat& x = t2.val_of(pa);
        const Mat& y = n.val;
        Mat d = (x.array() > 0.0).select(Mat::Ones(x.rows(), x.cols()), y.array() + 1.0);
        t2.add_grad(pa, n.grad.cwiseProduct(d));
    });
}

Var tanh(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val = t.value(a).array().tanh();
    return t.push(std::move(val), t.needs_grad(a), [pa](Tape& t2, const Tape::Node& n) {
        t2.add_grad(pa, n.grad.cwiseProduct((1.0 - n.val.array().square()).matrix()));
    });
}

Var exp(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val = t.value(a).array().exp();
    return t.push(std::move(val), t.needs_grad(a), [pa](Tape& t2, const Tape::Node& n) {
        t2.add_grad(pa, n.grad.cwiseProduct(n.val));
    });
}

Var log(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val = t.value(a).array().log();
    return t.push(std::move(val), t.needs_grad(a), [pa](Tape& t2, const Tape::Node& n) {
        t2.add_grad(pa, n.grad.cwiseQuotient(t2.val_of(pa)));
    });
}

Var sum(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val(1, 1);
    val(0, 0) = t.value(a).sum();
    return t.push(std::move(val), t.needs_grad(a), [pa](Tape& t2, const Tape::Node& n) {
        const Mat& x = t2.val_of(pa);
        t2.add_grad(pa, Mat::Constant(x.rows(), x.cols(), n.grad(0, 0)));
    });
}

Var mean(Var a) {
    const Mat& x = a.tape->value(a);
    double inv = 1.0 / static_cast<double>(x.size());
    return inv * sum(a);
}

Var square(Var a) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val = t.value(a).array().square();
    return t.push(std::move(val), t.needs_grad(a), [pa](Tape& t2, const Tape::Node& n) {
        t2.add_grad(pa, 2.0 * n.grad.cwiseProduct(t2.val_of(pa)));
    });
}

Var min_elem(Var a, Var b) {
    return elementwise_binary(a, b, a.tape->value(a).cwiseMin(b.tape->value(b)),
                              [](Tape& t, const Mat& g, int pa, int pb) {
                                  const Mat& av = t.val_of(pa);
                                  const Mat& bv = t.val_of(pb);
                                  Mat take_a = (av.array() <= bv.array()).cast<double>();
                                  t.add_grad(pa, g.cwiseProduct(take_a));
                                  t.add_grad(pb, g.cwiseProduct((1.0 - take_a.array()).matrix()));
                              });
}

namespace {

Var hcat2(Var a, Var b) {
    check_same_tape(a, b);
    Tape& t = *a.tape;
    const Mat& av = t.value(a);
    const Mat& bv = t.value(b);
    if (av.rows() != bv.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Mat val(av.rows(), av.cols() + bv.cols());
    val << av, bv;
    int pa = a.idx, pb = b.idx;
    int ca = static_cast<int>(av.cols());
    return t.push(std::move(val), t.needs_grad(a) || t.needs_grad(b),
                  [pa, pb, ca](Tape& t2, const Tape::Node& n) {
                      t2.add_grad(pa, n.grad.leftCols(ca));
                      t2.add_grad(pb, n.grad.rightCols(n.grad.cols() - ca));
                  });
}

}  // namespace

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
    Var out = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out = hcat2(out, parts[i]);
    return out;
}

Var slice_cols(Var a, int start, int n) {
    Tape& t = *a.tape;
    int pa = a.idx;
    Mat val = t.value(a).middleCols(start, n);
    return t.push(std::move(val), t.needs_grad(a), [pa, start, n](Tape& t2, const Tape::Node& nd) {
        if (Mat* g = t2.grad_sink(pa)) g->middleCols(start, n) += nd.grad;
    });
}

Var gather_rows(Var x, std::vector<int> idx) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    Mat val(static_cast<int>(idx.size()), xv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) val.row(i) = xv.row(idx[i]);
    int px = x.idx;
    return t.push(std::move(val), t.needs_grad(x),
                  [px, idx = std::move(idx)](Tape& t2, const Tape::Node& n) {
                      Mat* g = t2.grad_sink(px);
                      if (!g) return;
                      for (std::size_t i = 0; i < idx.size(); ++i)
                          g->row(idx[i]) += n.grad.row(i);
                  });
}

Var select_per_row(Var x, std::vector<int> col_of_row) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    if (static_cast<int>(col_of_row.size()) != xv.rows())
        throw std::invalid_argument("select_per_row: index count mismatch");
    Mat val(xv.rows(), 1);
    for (int i = 0; i < xv.rows(); ++i) val(i, 0) = xv(i, col_of_row[i]);
    int px = x.idx;
    return t.push(std::move(val), t.needs_grad(x),
                  [px, cols = std::move(col_of_row)](Tape& t2, const Tape::Node& n) {
                      Mat* g = t2.grad_sink(px);
                      if (!g) return;
                      for (std::size_t i = 0; i < cols.size(); ++i)
                          (*g)(static_cast<int>(i), cols[i]) += n.grad(static_cast<int>(i), 0);
                  });
}

Var softmax_rows(Var x, std::vector<double>* sums_out) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    Mat val(xv.rows(), xv.cols());
    for (int i = 0; i < xv.rows(); ++i) {
        double m = xv.row(i).maxCoeff();
        Eigen::RowVectorXd e = (xv.row(i).array() - m).exp();
        double s = e.sum();
        val.row(i) = e / s;
        if (sums_out) sums_out->push_back(val.row(i).sum());
    }
    int px = x.idx;
    return t.push(std::move(val), t.needs_grad(x), [px](Tape& t2, const Tape::Node& n) {
        const Mat& p = n.val;
        Eigen::VectorXd dot = (p.cwiseProduct(n.grad)).rowwise().sum();
        Mat dx = p.cwiseProduct(n.grad - dot.replicate(1, p.cols()));
        t2.add_grad(px, dx);
    });
}

Var masked_log_softmax_rows(Var logits, const Mat& mask01) {
    Tape& t = *logits.tape;
    const Mat& z = t.value(logits);
    if (mask01.rows() != z.rows() || mask01.cols() != z.cols())
        throw std::invalid_argument("mask shape mismatch");
    Mat val = Mat::Zero(z.rows(), z.cols());
    for (int i = 0; i < z.rows(); ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < z.cols(); ++j)
            if (mask01(i, j) != 0.0) m = std::max(m, z(i, j));
        if (!std::isfinite(m)) throw std::invalid_argument("row with no valid action");
        double acc = 0.0;
        for (int j = 0; j < z.cols(); ++j)
            if (mask01(i, j) != 0.0) acc += std::exp(z(i, j) - m);
        double lse = m + std::log(acc);
        for (int j = 0; j < z.cols(); ++j)
            if (mask01(i, j) != 0.0) val(i, j) = z(i, j) - lse;
    }
    int pz = logits.idx;
    Mat mask = mask01;
    return t.push(std::move(val), t.needs_grad(logits),
                  [pz, mask](Tape& t2, const Tape::Node& n) {
                      Mat p = n.val.array().exp().matrix().cwiseProduct(mask);
                      Mat d = n.grad.cwiseProduct(mask);
                      Eigen::VectorXd rows = d.rowwise().sum();
                      Mat dz = (d - p.cwiseProduct(rows.replicate(1, p.cols()))).cwiseProduct(mask);
                      t2.add_grad(pz, dz);
                  });
}

Var headwise_rowsum(Var x, int heads) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    if (xv.cols() % heads != 0) throw std::invalid_argument("columns not divisible by heads");
    int hd = static_cast<int>(xv.cols()) / heads;
    Mat val(xv.rows(), heads);
    for (int h = 0; h < heads; ++h) val.col(h) = xv.middleCols(h * hd, hd).rowwise().sum();
    int px = x.idx;
    return t.push(std::move(val), t.needs_grad(x), [px, heads, hd](Tape& t2, const Tape::Node& n) {
        Mat* g = t2.grad_sink(px);
        if (!g) return;
        for (int h = 0; h < heads; ++h)
            g->middleCols(h * hd, hd).colwise() += n.grad.col(h);
    });
}

Var segment_softmax(Var scores, std::vector<int> seg, int n_seg, std::vector<double>* sums_out) {
    Tape& t = *scores.tape;
    const Mat& s = t.value(scores);
    if (static_cast<int>(seg.size()) != s.rows())
        throw std::invalid_argument("segment_softmax: segment count mismatch");
    for (std::size_t i = 1; i < seg.size(); ++i)
        if (seg[i] < seg[i - 1]) throw std::invalid_argument("segments must be grouped");
    Mat val = Mat::Zero(s.rows(), s.cols());
    for (std::size_t lo = 0; lo < seg.size();) {
        std::size_t hi = lo;
        while (hi < seg.size() && seg[hi] == seg[lo]) ++hi;
        for (int c = 0; c < s.cols(); ++c) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t i = lo; i < hi; ++i) m = std::max(m, s(i, c));
            double acc = 0.0;
            for (std::size_t i = lo; i < hi; ++i) acc += std::exp(s(i, c) - m);
            double total = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                val(i, c) = std::exp(s(i, c) - m) / acc;
                total += val(i, c);
            }
            if (sums_out) sums_out->push_back(total);
        }
        lo = hi;
    }
    int ps = scores.idx;
    return t.push(std::move(val), t.needs_grad(scores),
                  [ps, seg = std::move(seg)](Tape& t2, const Tape::Node& n) {
                      Mat* g = t2.grad_sink(ps);
                      if (!g) return;
                      const Mat& a = n.val;
                      for (std::size_t lo = 0; lo < seg.size();) {
                          std::size_t hi = lo;
                          while (hi < seg.size() && seg[hi] == seg[lo]) ++hi;
                          for (int c = 0; c < a.cols(); ++c) {
                              double dot = 0.0;
                              for (std::size_t i = lo; i < hi; ++i) dot += a(i, c) * n.grad(i, c);
                              for (std::size_t i = lo; i < hi; ++i)
                                  (*g)(static_cast<int>(i), c) += a(i, c) * (n.grad(i, c) - dot);
                          }
                          lo = hi;
                      }
                  });
}

Var headwise_weighted_segment_sum(Var msgs, Var alpha, std::vector<int> seg, int n_seg) {
    check_same_tape(msgs, alpha);
    Tape& t = *msgs.tape;
    const Mat& m = t.value(msgs);
    const Mat& a = t.value(alpha);
    int heads = static_cast<int>(a.cols());
    if (m.cols() % heads != 0) throw std::invalid_argument("columns not divisible by heads");
    int hd = static_cast<int>(m.cols()) / heads;
    if (a.rows() != m.rows() || static_cast<int>(seg.size()) != m.rows())
        throw std::invalid_argument("weighted segment sum: shape mismatch");
    Mat val = Mat::Zero(n_seg, m.cols());
    for (int e = 0; e < m.rows(); ++e)
        for (int h = 0; h < heads; ++h)
            val.row(seg[e]).segment(h * hd, hd) += a(e, h) * m.row(e).segment(h * hd, hd);
    int pm = msgs.idx, pa = alpha.idx;
    return t.push(std::move(val), t.needs_grad(msgs) || t.needs_grad(alpha),
                  [pm, pa, heads, hd, seg = std::move(seg)](Tape& t2, const Tape::Node& n) {
                      const Mat& mv = t2.val_of(pm);
                      const Mat& av = t2.val_of(pa);
                      Mat* gm = t2.grad_sink(pm);
                      Mat* ga = t2.grad_sink(pa);
                      for (std::size_t e = 0; e < seg.size(); ++e) {
                          int r = static_cast<int>(e);
                          for (int h = 0; h < heads; ++h) {
                              auto gout = n.grad.row(seg[e]).segment(h * hd, hd);
                              if (gm) gm->row(r).segment(h * hd, hd) += av(r, h) * gout;
                              if (ga)
                                  (*ga)(r, h) += mv.row(r).segment(h * hd, hd).dot(gout);
                          }
                      }
                  });
}

Var head_average(Var x, int heads) {
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    if (xv.cols() % heads != 0) throw std::invalid_argument("columns not divisible by heads");
    int hd = static_cast<int>(xv.cols()) / heads;
    Mat val = Mat::Zero(xv.rows(), hd);
    for (int h = 0; h < heads; ++h) val += xv.middleCols(h * hd, hd);
    val /= static_cast<double>(heads);
    int px = x.idx;
    return t.push(std::move(val), t.needs_grad(x), [px, heads, hd](Tape& t2, const Tape::Node& n) {
        Mat* g = t2.grad_sink(px);
        if (!g) return;
        Mat d = n.grad / static_cast<double>(heads);
        for (int h = 0; h < heads; ++h) g->middleCols(h * hd, hd) += d;
    });
}

Var rows_scale(Var x, Var s) {
    check_same_tape(x, s);
    Tape& t = *x.tape;
    const Mat& xv = t.value(x);
    const Mat& sv = t.value(s);
    if (sv.cols() != 1 || sv.rows() != xv.rows())
        throw std::invalid_argument("rows_scale: scale must be n x 1");
    Mat val = xv.array().colwise() * sv.col(0).array();
    int px = x.idx, ps = s.idx;
    return t.push(std::move(val), t.needs_grad(x) || t.needs_grad(s),
                  [px, ps](Tape& t2, const Tape::Node& n) {
                      const Mat& xv2 = t2.val_of(px);
                      const Mat& sv2 = t2.val_of(ps);
                      t2.add_grad(px, (n.grad.array().colwise() * sv2.col(0).array()).matrix());
                      t2.add_grad(ps, n.grad.cwiseProduct(xv2).rowwise().sum());
                  });
}

// ----------------------------------------------------------------- ParamStore

Mat& ParamStore::at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Mat& ParamStore::at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

void ParamStore::add(const std::string& name, Mat m) {
    if (!values.emplace(name, std::move(m)).second)
        throw std::invalid_argument("duplicate parameter: " + name);
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : values) n += static_cast<std::size_t>(m.size());
    return n;
}

Var ParamBinder::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_->leaf(store_->at(name));
    bound_.emplace(name, v);
    return v;
}

void ParamBinder::collect(GradMap& grads) const {
    for (const auto& [name, var] : bound_) {
        const Mat& g = tape_->grad(var);
        auto it = grads.find(name);
        if (it == grads.end())
            grads.emplace(name, g);
        else
            it->second += g;
    }
}

void init_uniform_fanin(ParamStore& store, const std::string& name, int rows, int cols,
                        std::uint64_t seed) {
    Rng rng(mix_seed(seed, fnv1a(name)));
    double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(-bound, bound);
    store.add(name, std::move(m));
}

void init_zeros(ParamStore& store, const std::string& name, int rows, int cols) {
    store.add(name, Mat::Zero(rows, cols));
}

void Adam::step(ParamStore& params, const GradMap& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
        Mat& p = params.at(name);
        auto mit = m_.find(name);
        if (mit == m_.end()) {
            mit = m_.emplace(name, Mat::Zero(p.rows(), p.cols())).first;
            v_.emplace(name, Mat::Zero(p.rows(), p.cols()));
        }
        Mat& m = mit->second;
        Mat& v = v_.at(name);
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
        Mat mhat = m / bc1;
        Mat vhat = v / bc2;
        p.array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
}

// ------------------------------------------------------------------------ MLP

void init_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec,
              std::uint64_t seed) {
    if (spec.dims.size() < 2) throw std::invalid_argument("mlp needs at least one layer");
    for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
        init_uniform_fanin(store, prefix + "." + std::to_string(l) + ".W", spec.dims[l + 1],
                           spec.dims[l], seed);
        init_zeros(store, prefix + "." + std::to_string(l) + ".b", 1, spec.dims[l + 1]);
    }
}

Var mlp_forward(ParamBinder& p, const std::string& prefix, const MlpSpec& spec, Var x) {
    Var h = x;
    for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
        std::string base = prefix + "." + std::to_string(l);
        h = add_rowvec(matmul_nt(h, p(base + ".W")), p(base + ".b"));
        if (l + 2 < spec.dims.size()) h = relu(h);
    }
    return h;
}

// ------------------------------------------------------------------------ HAN

void HanConfig::validate() const {
    if (n_experts < 1) throw std::invalid_argument("n_experts must be >= 1");
    if (hidden < 1 || heads < 1 || layers < 1) throw std::invalid_argument("bad HAN dims");
    if (hidden % heads != 0) throw std::invalid_argument("hidden must be divisible by heads");
}

GraphBatch GraphBatch::from_graphs(std::span<const HeteroGraph> graphs) {
    if (graphs.empty()) throw std::invalid_argument("empty graph batch");
    GraphBatch b;
    b.n_graphs = static_cast<int>(graphs.size());
    b.n_experts = graphs[0].n_experts;
    const int N = b.n_experts;
    int total_run = 0, total_wait = 0;
    for (const auto& g : graphs) {
        if (g.n_experts != N) throw std::invalid_argument("mixed expert counts in batch");
        total_run += static_cast<int>(g.running.rows());
        total_wait += static_cast<int>(g.waiting.rows());
    }
    b.arrived.resize(b.n_graphs, HeteroGraph::arrived_dim(N));
    b.expert.resize(b.n_graphs * N, HeteroGraph::kExpertDim);
    b.running.resize(total_run, RequestFeatures::kDim);
    b.waiting.resize(total_wait, RequestFeatures::kDim);
    int rr = 0, wr = 0;
    for (int g = 0; g < b.n_graphs; ++g) {
        const HeteroGraph& hg = graphs[g];
        b.arrived.row(g) = hg.arrived.transpose();
        b.expert.middleRows(g * N, N) = hg.expert;
        for (int i = 0; i < hg.running.rows(); ++i) {
            b.running.row(rr) = hg.running.row(i);
            b.run_src.push_back(rr);
            b.run_dst.push_back(g * N + hg.running_owner[i]);
            ++rr;
        }
        for (int i = 0; i < hg.waiting.rows(); ++i) {
            b.waiting.row(wr) = hg.waiting.row(i);
            b.wait_src.push_back(wr);
            b.wait_dst.push_back(g * N + hg.waiting_owner[i]);
            ++wr;
        }
        for (int n = 0; n < N; ++n) {
            b.arr2exp_src.push_back(g);
            b.arr2exp_dst.push_back(g * N + n);
            b.exp2arr_src.push_back(g * N + n);
            b.exp2arr_dst.push_back(g);
        }
    }
    return b;
}

GraphBatch GraphBatch::from_graph(const HeteroGraph& graph) {
    return from_graphs(std::span<const HeteroGraph>(&graph, 1));
}

namespace {

const char* kRelations[] = {"run2exp", "wait2exp", "arr2exp", "exp2arr"};
const char* kNodeTypes[] = {"arrived", "expert", "running", "waiting"};

int input_dim(const HanConfig& cfg, const std::string& type) {
    if (type == "arrived") return cfg.arrived_dim();
    if (type == "expert") return HeteroGraph::kExpertDim;
    return RequestFeatures::kDim;
}

}  // namespace

void init_han(ParamStore& store, const HanConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    for (const char* type : kNodeTypes) {
        init_uniform_fanin(store, std::string("han.in.") + type + ".W", cfg.hidden,
                           input_dim(cfg, type), seed);
        init_zeros(store, std::string("han.in.") + type + ".b", 1, cfg.hidden);
    }
    for (int l = 0; l < cfg.layers; ++l) {
        bool avg = l == cfg.layers - 1;
        int hd = avg ? cfg.hidden : cfg.hidden / cfg.heads;
        std::string L = "han.l" + std::to_string(l);
        for (const char* type : kNodeTypes)
            init_uniform_fanin(store, L + ".self." + type + ".W", cfg.hidden, cfg.hidden, seed);
        for (const char* rel : kRelations) {
            std::string base = L + ".rel." + rel;
            init_uniform_fanin(store, base + ".W", cfg.heads * hd, cfg.hidden, seed);
            init_uniform_fanin(store, base + ".a_src", 1, cfg.heads * hd, seed);
            init_uniform_fanin(store, base + ".a_dst", 1, cfg.heads * hd, seed);
        }
        for (const char* type : {"expert", "arrived"}) {
            std::string base = L + ".sem." + std::string(type);
            init_uniform_fanin(store, base + ".W", cfg.hidden, cfg.hidden, seed);
            init_zeros(store, base + ".b", 1, cfg.hidden);
            init_uniform_fanin(store, base + ".q", 1, cfg.hidden, seed);
        }
    }
}

Var edge_type_attention(ParamBinder& p, const std::string& prefix, Var src_nodes, Var dst_nodes,
                        const std::vector<int>& src_idx, const std::vector<int>& dst_idx,
                        int n_dst, int heads, int head_dim, bool average_heads, AttnStats* stats) {
    Tape& t = *dst_nodes.tape;
    int out_width = average_heads ? head_dim : heads * head_dim;
    if (src_idx.empty()) return t.constant(Mat::Zero(n_dst, out_width));
    Var W = p(prefix + ".W");
    Var a_src = p(prefix + ".a_src");
    Var a_dst = p(prefix + ".a_dst");
    Var msg_src = matmul_nt(src_nodes, W);
    Var msg_dst = matmul_nt(dst_nodes, W);
    Var gs = gather_rows(msg_src, src_idx);
    Var gd = gather_rows(msg_dst, dst_idx);
    Var scores = elu(headwise_rowsum(mul_rowvec(gs, a_src), heads) +
                     headwise_rowsum(mul_rowvec(gd, a_dst), heads));
    Var alpha = segment_softmax(scores, dst_idx, n_dst, stats ? &stats->softmax_sums : nullptr);
    Var out = headwise_weighted_segment_sum(gs, alpha, dst_idx, n_dst);
    return average_heads ? head_average(out, heads) : out;
}

Var semantic_attention(ParamBinder& p, const std::string& prefix, std::span<const Var> type_embeds,
                       AttnStats* stats) {
    if (type_embeds.empty()) throw std::invalid_argument("semantic_attention with no types");
    Var W = p(prefix + ".W");
    Var b = p(prefix + ".b");
    Var q = p(prefix + ".q");
    std::vector<Var> scores;
    scores.reserve(type_embeds.size());
    for (Var z : type_embeds)
        scores.push_back(matmul_nt(tanh(add_rowvec(matmul_nt(z, W), b)), q));
    Var beta = softmax_rows(concat_cols(scores), stats ? &stats->softmax_sums : nullptr);
    Var out = rows_scale(type_embeds[0], slice_cols(beta, 0, 1));
    for (std::size_t r = 1; r < type_embeds.size(); ++r)
        out = out + rows_scale(type_embeds[r], slice_cols(beta, static_cast<int>(r), 1));
    return out;
}

Var han_encode(ParamBinder& p, const HanConfig& cfg, const GraphBatch& batch, AttnStats* stats) {
    cfg.validate();
    Tape& t = *p.tape();
    auto project = [&](const Mat& feats, const std::string& type) {
        return add_rowvec(matmul_nt(t.constant(feats), p("han.in." + type + ".W")),
                          p("han.in." + type + ".b"));
    };
    Var h_arr = project(batch.arrived, "arrived");
    Var h_exp = project(batch.expert, "expert");
    Var h_run = project(batch.running, "running");
    Var h_wait = project(batch.waiting, "waiting");
    const int n_exp_rows = static_cast<int>(batch.expert.rows());
    const int n_arr_rows = batch.n_graphs;

    for (int l = 0; l < cfg.layers; ++l) {
        bool avg = l == cfg.layers - 1;
        int hd = avg ? cfg.hidden : cfg.hidden / cfg.heads;
        std::string L = "han.l" + std::to_string(l);

        Var z_run = edge_type_attention(p, L + ".rel.run2exp", h_run, h_exp, batch.run_src,
                                        batch.run_dst, n_exp_rows, cfg.heads, hd, avg, stats);
        Var z_wait = edge_type_attention(p, L + ".rel.wait2exp", h_wait, h_exp, batch.wait_src,
                                         batch.wait_dst, n_exp_rows, cfg.heads, hd, avg, stats);
        Var z_arr2exp = edge_type_attention(p, L + ".rel.arr2exp", h_arr, h_exp,
                                            batch.arr2exp_src, batch.arr2exp_dst, n_exp_rows,
                                            cfg.heads, hd, avg, stats);
        Var z_exp_self = matmul_nt(h_exp, p(L + ".self.expert.W"));
        std::vector<Var> exp_types = {z_exp_self, z_run, z_wait, z_arr2exp};
        Var new_exp = elu(semantic_attention(p, L + ".sem.expert", exp_types, stats));

        Var z_exp2arr = edge_type_attention(p, L + ".rel.exp2arr", h_exp, h_arr,
                                            batch.exp2arr_src, batch.exp2arr_dst, n_arr_rows,
                                            cfg.heads, hd, avg, stats);
        Var z_arr_self = matmul_nt(h_arr, p(L + ".self.arrived.W"));
        std::vector<Var> arr_types = {z_arr_self, z_exp2arr};
        Var new_arr = elu(semantic_attention(p, L + ".sem.arrived", arr_types, stats));

        Var new_run = elu(matmul_nt(h_run, p(L + ".self.running.W")));
        Var new_wait = elu(matmul_nt(h_wait, p(L + ".self.waiting.W")));

        h_arr = new_arr;
        h_exp = new_exp;
        h_run = new_run;
        h_wait = new_wait;
    }
    return h_arr;
}

// ---------------------------------------------------------------- checkpoints

void save_params(const ParamStore& store, const std::filesystem::path& stem,
                 const nlohmann::json& extra_manifest) {
    nlohmann::ordered_json manifest;
    for (auto it = extra_manifest.begin(); it != extra_manifest.end(); ++it)
        manifest[it.key()] = it.value();
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (const auto& [name, m] : store.values)
        params.push_back({{"name", name},
                          {"rows", static_cast<int>(m.rows())},
                          {"cols", static_cast<int>(m.cols())}});
    manifest["params"] = std::move(params);

    std::filesystem::path json_path = stem;
    json_path += ".json";
    std::filesystem::path bin_path = stem;
    bin_path += ".bin";
    std::ofstream jf(json_path);
    if (!jf) throw std::runtime_error("cannot write manifest: " + json_path.string());
    jf << manifest.dump(2) << '\n';

    std::ofstream bf(bin_path, std::ios::binary);
    if (!bf) throw std::runtime_error("cannot write checkpoint: " + bin_path.string());
    for (const auto& [name, m] : store.values) {
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < m.cols(); ++j) {
                float f = static_cast<float>(m(i, j));
                bf.write(reinterpret_cast<const char*>(&f), sizeof(float));
            }
    }
}

ParamStore load_params(const std::filesystem::path& stem, nlohmann::json* manifest_out) {
    std::filesystem::path json_path = stem;
    json_path += ".json";
    std::filesystem::path bin_path = stem;
    bin_path += ".bin";
    std::ifstream jf(json_path);
    if (!jf) throw std::runtime_error("cannot open manifest: " + json_path.string());
    nlohmann::json manifest = nlohmann::json::parse(jf);
    std::ifstream bf(bin_path, std::ios::binary);
    if (!bf) throw std::runtime_error("cannot open checkpoint: " + bin_path.string());

    ParamStore store;
    for (const auto& entry : manifest.at("params")) {
        int rows = entry.at("rows").get<int>();
        int cols = entry.at("cols").get<int>();
        Mat m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) {
                float f;
                bf.read(reinterpret_cast<char*>(&f), sizeof(float));
                if (!bf) throw std::runtime_error("checkpoint truncated: " + bin_path.string());
                m(i, j) = static_cast<double>(f);
            }
        store.add(entry.at("name").get<std::string>(), std::move(m));
    }
    if (manifest_out) *manifest_out = std::move(manifest);
    return store;
}

}  // namespace qrouted::nn
