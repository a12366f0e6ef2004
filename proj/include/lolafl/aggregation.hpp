#pragma once

// Server-side aggregation of per-device layers.
//
// hm_aggregate inverts each local operator, averages the inverses with
// sample-share weights and inverts again. Because every local inverse is
// I + α_k R_k, the result equals the operator built from the pooled features
// of the participating devices. cm-based aggregation skips the operators and
// exchanges truncated SVD factors of the feature covariances instead.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "lolafl/errors.hpp"
#include "lolafl/linalg.hpp"
#include "lolafl/redunet.hpp"

namespace lolafl {

/// Feature covariances R = Z Zᵀ and Rʲ = Z Πʲ Zᵀ together with the sample
/// counts they were built from.
struct CovariancePair {
    Matrix R;
    std::vector<Matrix> Rj;
    std::size_t samples = 0;
    std::vector<std::size_t> class_counts;

    int num_classes() const noexcept { return static_cast<int>(Rj.size()); }
    Index dim() const noexcept { return R.rows(); }
};

inline CovariancePair local_covariances(const Matrix& z, const MembershipSet& pi) {
    if (static_cast<std::size_t>(z.cols()) != pi.size()) {
        throw ShapeMismatch("membership size does not match feature count");
    }
    CovariancePair out;
    out.R = gram(z);
    out.samples = pi.size();
    out.class_counts = pi.counts();
    out.Rj.reserve(static_cast<std::size_t>(pi.num_classes()));
    for (int j = 0; j < pi.num_classes(); ++j) {
        const auto cols = pi.members(j);
        out.Rj.push_back(gram(gather_columns(z, cols)));
    }
    return out;
}

/// Element-wise sum in device order. Equals the covariances of the pooled
/// features.
inline CovariancePair sum_covariances(std::span<const CovariancePair> parts) {
    if (parts.empty()) throw ShapeMismatch("sum_covariances: no inputs");
    CovariancePair total = parts.front();
    for (std::size_t k = 1; k < parts.size(); ++k) {
        const auto& p = parts[k];
        if (p.dim() != total.dim() || p.num_classes() != total.num_classes()) {
            throw ShapeMismatch("sum_covariances: device " + std::to_string(k) +
                                " has mismatched dimension or class count");
        }
        total.R += p.R;
        for (std::size_t j = 0; j < total.Rj.size(); ++j) {
            total.Rj[j] += p.Rj[j];
            total.class_counts[j] += p.class_counts[j];
        }
        total.samples += p.samples;
    }
    return total;
}

/// ω_k = m_k/m and ω_kʲ = n_kʲ/nʲ over the devices passed in. Devices missing
/// class j get ω_kʲ = 0.
struct AggregationWeights {
    std::vector<double> device;
    std::vector<std::vector<double>> per_class; // [device][class]

    static AggregationWeights from_counts(std::span<const std::size_t> samples,
                                          std::span<const std::vector<std::size_t>> class_counts) {
        if (samples.size() != class_counts.size() || samples.empty()) {
            throw ShapeMismatch("aggregation weights: inconsistent device lists");
        }
        const std::size_t classes = class_counts.front().size();
        AggregationWeights w;
        const double m = static_cast<double>(std::accumulate(samples.begin(), samples.end(),
                                                             std::size_t{0}));
        std::vector<double> n(classes, 0.0);
        for (const auto& cc : class_counts) {
            if (cc.size() != classes) throw ShapeMismatch("aggregation weights: class count");
            for (std::size_t j = 0; j < classes; ++j) n[j] += static_cast<double>(cc[j]);
        }
        w.device.resize(samples.size());
        w.per_class.assign(samples.size(), std::vector<double>(classes, 0.0));
        for (std::size_t k = 0; k < samples.size(); ++k) {
            w.device[k] = m > 0 ? static_cast<double>(samples[k]) / m : 0.0;
            for (std::size_t j = 0; j < classes; ++j) {
                w.per_class[k][j] = n[j] > 0 ? static_cast<double>(class_counts[k][j]) / n[j] : 0.0;
            }
        }
        return w;
    }

    static AggregationWeights from_layers(std::span<const LayerParams> locals) {
        std::vector<std::size_t> samples;
        std::vector<std::vector<std::size_t>> counts;
        for (const auto& l : locals) {
            samples.push_back(l.coeffs.samples);
            counts.push_back(l.coeffs.class_counts);
        }
        return from_counts(samples, counts);
    }
};

namespace detail {

inline Mcr2Coefficients pooled_coefficients(std::span<const LayerParams> locals) {
    const auto& first = locals.front();
    std::vector<std::size_t> counts(first.coeffs.class_counts.size(), 0);
    for (const auto& l : locals) {
        if (l.dim() != first.dim() || l.num_classes() != first.num_classes() ||
            l.coeffs.class_counts.size() != counts.size()) {
            throw ShapeMismatch("local layers disagree on dimension or class count");
        }
        if (l.coeffs.eps != first.coeffs.eps) {
            throw ShapeMismatch("local layers were built with different eps");
        }
        for (std::size_t j = 0; j < counts.size(); ++j) counts[j] += l.coeffs.class_counts[j];
    }
    return Mcr2Coefficients::make(first.dim(), counts, first.coeffs.eps);
}

inline void check_weights(std::span<const LayerParams> locals, const AggregationWeights& w) {
    if (locals.empty()) throw ShapeMismatch("no local layers to aggregate");
    if (w.device.size() != locals.size() || w.per_class.size() != locals.size()) {
        throw ShapeMismatch("weights do not match the number of local layers");
    }
}

} // namespace detail

/// Ē = (Σ ω_k E_k⁻¹)⁻¹, C̄ʲ = (Σ ω_kʲ (C_kʲ)⁻¹)⁻¹.
inline LayerParams hm_aggregate(std::span<const LayerParams> locals, const AggregationWeights& w) {
    detail::check_weights(locals, w);
    LayerParams out;
    out.coeffs = detail::pooled_coefficients(locals);
    const Index d = locals.front().dim();
    Matrix acc = Matrix::Zero(d, d);
    for (std::size_t k = 0; k < locals.size(); ++k) {
        if (w.device[k] == 0.0) continue;
        acc += w.device[k] * spd_inverse(symmetrize(locals[k].E), "local E");
    }
    out.E = spd_inverse(symmetrize(acc), "aggregated E");
    const int classes = locals.front().num_classes();
    out.C.reserve(static_cast<std::size_t>(classes));
    for (int j = 0; j < classes; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        acc.setZero();
        bool any = false;
        for (std::size_t k = 0; k < locals.size(); ++k) {
            const double wk = w.per_class[k][jj];
            if (wk == 0.0) continue;
            acc += wk * spd_inverse(symmetrize(locals[k].C[jj]), "local C");
            any = true;
        }
        out.C.push_back(any ? spd_inverse(symmetrize(acc), "aggregated C")
                            : Matrix(Matrix::Identity(d, d)));
    }
    return out;
}

inline LayerParams hm_aggregate(std::span<const LayerParams> locals) {
    return hm_aggregate(locals, AggregationWeights::from_layers(locals));
}

/// Weighted arithmetic mean of the local operators.
inline LayerParams fedavg_aggregate(std::span<const LayerParams> locals,
                                    const AggregationWeights& w) {
    detail::check_weights(locals, w);
    LayerParams out;
    out.coeffs = detail::pooled_coefficients(locals);
    const Index d = locals.front().dim();
    out.E = Matrix::Zero(d, d);
    for (std::size_t k = 0; k < locals.size(); ++k) out.E += w.device[k] * locals[k].E;
    const int classes = locals.front().num_classes();
    for (int j = 0; j < classes; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        Matrix acc = Matrix::Zero(d, d);
        double mass = 0.0;
        for (std::size_t k = 0; k < locals.size(); ++k) {
            const double wk = w.per_class[k][jj];
            if (wk == 0.0) continue;
            acc += wk * locals[k].C[jj];
            mass += wk;
        }
        out.C.push_back(mass > 0.0 ? acc : Matrix(Matrix::Identity(d, d)));
    }
    return out;
}

inline LayerParams fedavg_aggregate(std::span<const LayerParams> locals) {
    return fedavg_aggregate(locals, AggregationWeights::from_layers(locals));
}

/// Leading singular triples of a square matrix. U and V hold the retained
/// left/right singular vectors as columns.
struct LowRankFactors {
    Index dim = 0;
    std::vector<double> sigma;
    Matrix U;
    Matrix V;
    // Retained fraction of the singular-value mass; not carried on the wire.
    double remaining = std::numeric_limits<double>::quiet_NaN();

    Index rank() const noexcept { return static_cast<Index>(sigma.size()); }

    /// Number of real values sent for this matrix: s + 2·s·d.
    std::size_t parameter_count() const noexcept {
        const auto s = static_cast<std::size_t>(rank());
        return s + 2 * s * static_cast<std::size_t>(dim);
    }
};

namespace detail {

// Relative slack on the cumulative-mass comparison so that thresholds such as
// 0.9 are met by sums like 0.7 + 0.2 that round just below them.
inline constexpr double kRetentionSlack = 1e-12;

inline bool nearly_symmetric(const Matrix& m) {
    const double scale = m.norm();
    return (m - m.transpose()).norm() <= 1e-12 * std::max(scale, 1.0);
}

// Flips (u, v) so the largest-magnitude entry of u is positive; ties resolve to
// the lowest index.
inline void fix_signs(Matrix& u, Matrix& v) {
    for (Index i = 0; i < u.cols(); ++i) {
        Index arg = 0;
        double best = -1.0;
        for (Index r = 0; r < u.rows(); ++r) {
            const double a = std::abs(u(r, i));
            if (a > best) {
                best = a;
                arg = r;
            }
        }
        if (u(arg, i) < 0.0) {
            u.col(i) = -u.col(i);
            v.col(i) = -v.col(i);
        }
    }
}

} // namespace detail

/// Keeps the minimal number s of singular triples whose singular values carry
/// at least a fraction beta0 of the total. A zero matrix yields s = 0.
inline LowRankFactors truncated_svd(const Matrix& m, double beta0) {
    if (!(beta0 > 0.0 && beta0 <= 1.0)) throw DomainError("beta0 must lie in (0, 1]");
    if (m.rows() != m.cols()) throw ShapeMismatch("truncated_svd expects a square matrix");
    const Index d = m.rows();

    Vector sv;
    Matrix left;
    Matrix right;
    if (detail::nearly_symmetric(m)) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m));
        if (es.info() != Eigen::Success) throw NumericalFailure("eigendecomposition failed");
        const Vector& lam = es.eigenvalues();
        std::vector<Index> order(static_cast<std::size_t>(d));
        std::iota(order.begin(), order.end(), Index{0});
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
            return std::abs(lam(a)) > std::abs(lam(b));
        });
        sv.resize(d);
        left.resize(d, d);
        right.resize(d, d);
        for (Index i = 0; i < d; ++i) {
            const Index src = order[static_cast<std::size_t>(i)];
            sv(i) = std::abs(lam(src));
            left.col(i) = es.eigenvectors().col(src);
            right.col(i) = lam(src) < 0.0 ? Vector(-left.col(i)) : Vector(left.col(i));
        }
    } else {
        Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
        sv = svd.singularValues();
        left = svd.matrixU();
        right = svd.matrixV();
    }

    LowRankFactors f;
    f.dim = d;
    const double total = sv.sum();
    if (!(total > 0.0)) {
        f.U.resize(d, 0);
        f.V.resize(d, 0);
        f.remaining = 1.0;
        return f;
    }
    const double target = beta0 * total * (1.0 - detail::kRetentionSlack);
    double cum = 0.0;
    Index s = 0;
    while (s < d) {
        cum += sv(s);
        ++s;
        if (cum >= target) break;
    }
    f.sigma.assign(sv.data(), sv.data() + s);
    f.U = left.leftCols(s);
    f.V = right.leftCols(s);
    detail::fix_signs(f.U, f.V);
    f.remaining = cum / total;
    return f;
}

/// Σᵢ σᵢ uᵢ vᵢᵀ.
inline Matrix reconstruct(const LowRankFactors& f) {
    const Index s = f.rank();
    if (f.U.rows() != f.dim || f.V.rows() != f.dim || f.U.cols() != s || f.V.cols() != s) {
        throw ShapeMismatch("low-rank factors have inconsistent shapes");
    }
    if (s == 0) return Matrix::Zero(f.dim, f.dim);
    const Eigen::Map<const Vector> sig(f.sigma.data(), s);
    return f.U * sig.asDiagonal() * f.V.transpose();
}

/// Mean of s/d over the given factor sets.
inline double compression_rate(std::span<const LowRankFactors> factors) {
    if (factors.empty()) throw DomainError("compression_rate: no factors");
    double acc = 0.0;
    for (const auto& f : factors) {
        acc += f.dim > 0 ? static_cast<double>(f.rank()) / static_cast<double>(f.dim) : 0.0;
    }
    return acc / static_cast<double>(factors.size());
}

namespace detail {

// Symmetrizes, clamps negative eigenvalues to zero, and inverts I + a·R.
inline Matrix shifted_inverse_clamped(const Matrix& r, double a, const char* what) {
    Matrix sym = symmetrize(r);
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw NumericalFailure("eigendecomposition failed");
    if (es.eigenvalues().minCoeff() < 0.0) {
        const Vector lam = es.eigenvalues().cwiseMax(0.0);
        sym = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
        sym = symmetrize(sym);
    }
    Matrix m = a * sym;
    m.diagonal().array() += 1.0;
    return spd_inverse(m, what);
}

} // namespace detail

/// Layer operators from (aggregated) covariances: E = (I + αR̄)⁻¹,
/// Cʲ = (I + αʲR̄ʲ)⁻¹; Cʲ = I for classes without samples.
inline LayerParams params_from_covariances(const CovariancePair& rbar,
                                           const Mcr2Coefficients& coeffs) {
    if (rbar.dim() != coeffs.dim || rbar.num_classes() != coeffs.num_classes()) {
        throw ShapeMismatch("covariances do not match coefficients");
    }
    LayerParams p;
    p.coeffs = coeffs;
    const Index d = rbar.dim();
    p.E = detail::shifted_inverse_clamped(rbar.R, coeffs.alpha, "E");
    for (int j = 0; j < coeffs.num_classes(); ++j) {
        const auto jj = static_cast<std::size_t>(j);
        if (!coeffs.present(j)) {
            p.C.push_back(Matrix::Identity(d, d));
            continue;
        }
        p.C.push_back(detail::shifted_inverse_clamped(rbar.Rj[jj], *coeffs.class_alpha[jj], "C"));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Wire format for LowRankFactors (little-endian):
//   [u32 d][u32 s][s × f64 σ][s·d × f64 u-vectors][s·d × f64 v-vectors]
// Vectors are written one after another, each as d consecutive entries.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double x) {
    const auto bits = std::bit_cast<std::uint64_t>(x);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw TruncatedFile("low-rank payload truncated");
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(in[pos + b]) << (8 * b);
    pos += 4;
    return v;
}

inline double get_f64(std::span<const std::uint8_t> in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw TruncatedFile("low-rank payload truncated");
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(in[pos + b]) << (8 * b);
    pos += 8;
    return std::bit_cast<double>(v);
}

} // namespace detail

/// Header size of one serialized factor set.
inline constexpr std::size_t kFactorHeaderBytes = 8;

/// σ, then the u-vectors, then the v-vectors, as one flat parameter list.
inline std::vector<double> factor_parameters(const LowRankFactors& f) {
    std::vector<double> out;
    out.reserve(f.parameter_count());
    out.insert(out.end(), f.sigma.begin(), f.sigma.end());
    for (Index i = 0; i < f.rank(); ++i)
        for (Index r = 0; r < f.dim; ++r) out.push_back(f.U(r, i));
    for (Index i = 0; i < f.rank(); ++i)
        for (Index r = 0; r < f.dim; ++r) out.push_back(f.V(r, i));
    return out;
}

inline LowRankFactors factors_from_parameters(Index dim, Index rank,
                                              std::span<const double> params) {
    const auto s = static_cast<std::size_t>(rank);
    const auto d = static_cast<std::size_t>(dim);
    if (params.size() != s + 2 * s * d) throw ShapeMismatch("parameter list has wrong length");
    LowRankFactors f;
    f.dim = dim;
    f.sigma.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(s));
    f.U.resize(dim, rank);
    f.V.resize(dim, rank);
    std::size_t pos = s;
    for (Index i = 0; i < rank; ++i)
        for (Index r = 0; r < dim; ++r) f.U(r, i) = params[pos++];
    for (Index i = 0; i < rank; ++i)
        for (Index r = 0; r < dim; ++r) f.V(r, i) = params[pos++];
    return f;
}

inline std::vector<std::uint8_t> serialize(const LowRankFactors& f) {
    std::vector<std::uint8_t> out;
    out.reserve(kFactorHeaderBytes + 8 * f.parameter_count());
    detail::put_u32(out, static_cast<std::uint32_t>(f.dim));
    detail::put_u32(out, static_cast<std::uint32_t>(f.rank()));
    for (double x : factor_parameters(f)) detail::put_f64(out, x);
    return out;
}

/// Parses one factor set starting at `pos`; advances `pos` past it.
inline LowRankFactors deserialize(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    const auto d = detail::get_u32(bytes, pos);
    const auto s = detail::get_u32(bytes, pos);
    if (s > d) throw ShapeMismatch("low-rank payload: rank exceeds dimension");
    std::vector<double> params(static_cast<std::size_t>(s) + 2ull * s * d);
    for (auto& x : params) x = detail::get_f64(bytes, pos);
    return factors_from_parameters(static_cast<Index>(d), static_cast<Index>(s), params);
}

inline LowRankFactors deserialize(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto f = deserialize(bytes, pos);
    if (pos != bytes.size()) throw ShapeMismatch("low-rank payload has trailing bytes");
    return f;
}

} // namespace lolafl
