#pragma once

// Coding-rate mathematics and forward-only layer construction.
//
// Features are stored column-major: one unit-norm column per sample. A layer
// holds the expansion operator E = (I + αZZᵀ)⁻¹ and one compression operator
// Cʲ = (I + αʲZΠʲZᵀ)⁻¹ per class. Training moves every column along
// E z − Cʲ z for its own class j and re-projects onto the sphere. Inference
// replaces the known class by a softmax estimate built from ‖Cʲ z‖.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lolafl/errors.hpp"
#include "lolafl/linalg.hpp"

namespace lolafl {

inline constexpr double kZeroColumnTol = 1e-12;
inline constexpr double kUnitNormTol = 1e-9;

// Default hyperparameters used by the experiments.
inline constexpr double kDefaultLearningRate = 0.1;
inline constexpr double kDefaultPrecision = 1.0;
inline constexpr double kDefaultSoftmaxScale = 500.0;

/// d×m matrix whose columns all have unit Euclidean norm.
class Features {
public:
    Features() = default;

    /// Wraps a matrix that is already column-normalized. Throws DomainError if
    /// any column deviates from unit norm by more than `tol`.
    static Features from_unit_columns(Matrix z, double tol = kUnitNormTol) {
        for (Index i = 0; i < z.cols(); ++i) {
            const double n = z.col(i).norm();
            if (std::abs(n - 1.0) > tol) {
                throw DomainError("column " + std::to_string(i) + " has norm " +
                                  std::to_string(n) + ", expected 1");
            }
        }
        return Features(std::move(z));
    }

    const Matrix& matrix() const noexcept { return data_; }
    Index dim() const noexcept { return data_.rows(); }
    Index size() const noexcept { return data_.cols(); }

private:
    explicit Features(Matrix z) : data_(std::move(z)) {}
    friend Features project_to_sphere(Matrix x);

    Matrix data_;
};

/// Scales every column of `x` to unit norm. Throws ZeroColumn if a column has
/// norm below 1e-12.
inline Features project_to_sphere(Matrix x) {
    for (Index i = 0; i < x.cols(); ++i) {
        const double n = x.col(i).norm();
        if (!(n >= kZeroColumnTol)) {
            throw ZeroColumn("column " + std::to_string(i) + " has (near-)zero norm");
        }
        x.col(i) /= n;
    }
    return Features(std::move(x));
}

inline Vector project_to_sphere(const Vector& v) {
    const double n = v.norm();
    if (!(n >= kZeroColumnTol)) {
        throw ZeroColumn("vector has (near-)zero norm");
    }
    return v / n;
}

/// Class membership of m samples, kept as labels rather than m×m diagonals.
class MembershipSet {
public:
    MembershipSet() = default;

    MembershipSet(std::vector<int> labels, int num_classes)
        : labels_(std::move(labels)), num_classes_(num_classes),
          counts_(static_cast<std::size_t>(std::max(num_classes, 0)), 0) {
        if (num_classes < 1) {
            throw DomainError("class count must be positive");
        }
        for (int y : labels_) {
            if (y < 0 || y >= num_classes_) {
                throw DomainError("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes_) + ")");
            }
            ++counts_[static_cast<std::size_t>(y)];
        }
    }

    int num_classes() const noexcept { return num_classes_; }
    std::size_t size() const noexcept { return labels_.size(); }
    const std::vector<int>& labels() const noexcept { return labels_; }
    int label(std::size_t i) const { return labels_.at(i); }
    std::size_t count(int j) const { return counts_.at(static_cast<std::size_t>(j)); }
    const std::vector<std::size_t>& counts() const noexcept { return counts_; }

    /// Sample indices belonging to class j, ascending.
    std::vector<Index> members(int j) const {
        std::vector<Index> out;
        out.reserve(count(j));
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            if (labels_[i] == j) out.push_back(static_cast<Index>(i));
        }
        return out;
    }

    /// Materialized m×m diagonal 0/1 matrix Πʲ.
    Matrix indicator(int j) const {
        const auto m = static_cast<Index>(labels_.size());
        Matrix pi = Matrix::Zero(m, m);
        for (Index i = 0; i < m; ++i) {
            if (labels_[static_cast<std::size_t>(i)] == j) pi(i, i) = 1.0;
        }
        return pi;
    }

private:
    std::vector<int> labels_;
    int num_classes_ = 0;
    std::vector<std::size_t> counts_;
};

/// Columns of `z` listed in `cols`, in order.
inline Matrix gather_columns(const Matrix& z, std::span<const Index> cols) {
    Matrix out(z.rows(), static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = z.col(cols[c]);
    return out;
}

/// Coefficients α = d/(mε²), αʲ = d/(nⱼε²), γʲ = nⱼ/m. Classes with nⱼ = 0
/// carry no αʲ and γʲ = 0.
struct Mcr2Coefficients {
    double eps = kDefaultPrecision;
    Index dim = 0;
    std::size_t samples = 0;
    std::vector<std::size_t> class_counts;
    double alpha = 0.0;
    std::vector<std::optional<double>> class_alpha;
    std::vector<double> gamma;

    static Mcr2Coefficients make(Index dim, std::span<const std::size_t> counts, double eps) {
        if (!(eps > 0.0)) throw DomainError("precision eps must be positive");
        if (dim < 1) throw DimensionError("feature dimension must be positive");
        Mcr2Coefficients c;
        c.eps = eps;
        c.dim = dim;
        c.class_counts.assign(counts.begin(), counts.end());
        for (auto n : counts) c.samples += n;
        const double d = static_cast<double>(dim);
        const double e2 = eps * eps;
        c.alpha = c.samples > 0 ? d / (static_cast<double>(c.samples) * e2) : 0.0;
        c.class_alpha.resize(counts.size());
        c.gamma.assign(counts.size(), 0.0);
        for (std::size_t j = 0; j < counts.size(); ++j) {
            if (counts[j] == 0) continue;
            c.class_alpha[j] = d / (static_cast<double>(counts[j]) * e2);
            c.gamma[j] = static_cast<double>(counts[j]) / static_cast<double>(c.samples);
        }
        return c;
    }

    static Mcr2Coefficients make(Index dim, const MembershipSet& pi, double eps) {
        return make(dim, pi.counts(), eps);
    }

    int num_classes() const noexcept { return static_cast<int>(class_counts.size()); }
    bool present(int j) const { return class_counts.at(static_cast<std::size_t>(j)) > 0; }
};

/// One ReduNet layer.
struct LayerParams {
    Matrix E;
    std::vector<Matrix> C;
    Mcr2Coefficients coeffs;

    int num_classes() const noexcept { return static_cast<int>(C.size()); }
    Index dim() const noexcept { return E.rows(); }
};

namespace detail {

inline void check_membership(const Matrix& z, const MembershipSet& pi) {
    if (static_cast<std::size_t>(z.cols()) != pi.size()) {
        throw ShapeMismatch("membership has " + std::to_string(pi.size()) +
                            " labels but features have " + std::to_string(z.cols()) +
                            " columns");
    }
}

// ½ log det(I + a·Z Zᵀ), evaluated on whichever Gram matrix is smaller.
inline double half_logdet_shifted_gram(const Matrix& z, double a) {
    if (z.cols() == 0 || a == 0.0) return 0.0;
    if (z.cols() < z.rows()) {
        Matrix g = a * (z.transpose() * z);
        g.diagonal().array() += 1.0;
        return 0.5 * spd_logdet(g);
    }
    Matrix g = a * gram(z);
    g.diagonal().array() += 1.0;
    return 0.5 * spd_logdet(g);
}

inline Matrix shifted_inverse(const Matrix& r, double a, const char* what) {
    Matrix m = a * r;
    m.diagonal().array() += 1.0;
    return spd_inverse(m, what);
}

} // namespace detail

/// R(Z, ε) = ½ log det(I + αZZᵀ) in nats, α = d/(mε²).
inline double coding_rate(const Matrix& z, double eps) {
    if (!(eps > 0.0)) throw DomainError("precision eps must be positive");
    if (z.cols() == 0) return 0.0;
    const double alpha =
        static_cast<double>(z.rows()) / (static_cast<double>(z.cols()) * eps * eps);
    return detail::half_logdet_shifted_gram(z, alpha);
}

/// Rc(Z, ε | Π) = Σⱼ (γʲ/2) log det(I + αʲ Z Πʲ Zᵀ). Empty classes contribute 0.
inline double coding_rate_classwise(const Matrix& z, const MembershipSet& pi, double eps) {
    detail::check_membership(z, pi);
    const auto coeffs = Mcr2Coefficients::make(z.rows(), pi, eps);
    double total = 0.0;
    for (int j = 0; j < pi.num_classes(); ++j) {
        if (!coeffs.present(j)) continue;
        const auto cols = pi.members(j);
        const Matrix zj = gather_columns(z, cols);
        total += coeffs.gamma[static_cast<std::size_t>(j)] *
                 detail::half_logdet_shifted_gram(zj, *coeffs.class_alpha[static_cast<std::size_t>(j)]);
    }
    return total;
}

/// ΔR = R − Rc.
inline double rate_reduction(const Matrix& z, const MembershipSet& pi, double eps) {
    return coding_rate(z, eps) - coding_rate_classwise(z, pi, eps);
}

/// Layer operators from local or pooled features. A class without samples
/// gets Cʲ = I.
inline LayerParams layer_params(const Matrix& z, const MembershipSet& pi, double eps) {
    detail::check_membership(z, pi);
    LayerParams p;
    p.coeffs = Mcr2Coefficients::make(z.rows(), pi, eps);
    const Index d = z.rows();
    p.E = detail::shifted_inverse(gram(z), p.coeffs.alpha, "E");
    p.C.reserve(static_cast<std::size_t>(pi.num_classes()));
    for (int j = 0; j < pi.num_classes(); ++j) {
        if (!p.coeffs.present(j)) {
            p.C.push_back(Matrix::Identity(d, d));
            continue;
        }
        const auto cols = pi.members(j);
        const Matrix zj = gather_columns(z, cols);
        p.C.push_back(detail::shifted_inverse(
            gram(zj), *p.coeffs.class_alpha[static_cast<std::size_t>(j)], "C"));
    }
    return p;
}

/// E Z − Σⱼ Cʲ Z Πʲ: every column is pushed by E and pulled by its own class
/// operator.
inline Matrix expansion_compression_step(const Matrix& z, const LayerParams& params,
                                         const MembershipSet& pi) {
    detail::check_membership(z, pi);
    if (params.num_classes() != pi.num_classes() || params.dim() != z.rows()) {
        throw ShapeMismatch("layer parameters do not match features/membership");
    }
    Matrix step = params.E * z;
    for (int j = 0; j < pi.num_classes(); ++j) {
        const auto cols = pi.members(j);
        if (cols.empty()) continue;
        const Matrix pulled = params.C[static_cast<std::size_t>(j)] * gather_columns(z, cols);
        for (std::size_t c = 0; c < cols.size(); ++c) {
            step.col(cols[c]) -= pulled.col(static_cast<Index>(c));
        }
    }
    return step;
}

/// ∂ΔR/∂Z = α(E Z − Σⱼ Cʲ Z Πʲ), using γʲαʲ = α.
inline Matrix rate_reduction_gradient(const Matrix& z, const MembershipSet& pi, double eps) {
    const auto params = layer_params(z, pi, eps);
    return params.coeffs.alpha * expansion_compression_step(z, params, pi);
}

/// Z' = P(Z + η(E Z − Σⱼ Cʲ Z Πʲ)). The fixed rate η already absorbs α.
inline Features transform_train(const Matrix& z, const LayerParams& params,
                                const MembershipSet& pi, double eta) {
    if (!(eta >= 0.0)) throw DomainError("learning rate must be non-negative");
    Matrix next = z;
    if (eta > 0.0) next += eta * expansion_compression_step(z, params, pi);
    return project_to_sphere(std::move(next));
}

inline Features transform_train(const Features& z, const LayerParams& params,
                                const MembershipSet& pi, double eta) {
    return transform_train(z.matrix(), params, pi, eta);
}

/// Softmax of −λ·norms, evaluated with the max subtracted.
inline Vector softmin_weights(const Vector& norms, double lambda) {
    Vector logits = -lambda * norms;
    const double top = logits.maxCoeff();
    Vector w = (logits.array() - top).exp();
    return w / w.sum();
}

/// π̂ʲ(z) ∝ exp(−λ‖Cʲ z‖).
inline Vector estimate_membership(const Vector& z, const LayerParams& params, double lambda) {
    if (!(lambda > 0.0)) throw DomainError("softmax scale must be positive");
    if (z.size() != params.dim()) throw ShapeMismatch("feature vector dimension mismatch");
    Vector norms(params.num_classes());
    for (int j = 0; j < params.num_classes(); ++j) {
        norms(j) = (params.C[static_cast<std::size_t>(j)] * z).norm();
    }
    return softmin_weights(norms, lambda);
}

/// z' = P(z + η(E z − Σⱼ γʲ Cʲ z π̂ʲ)) with a caller-supplied membership vector.
inline Vector transform_infer(const Vector& z, const LayerParams& params, const Vector& membership,
                              double eta) {
    if (!(eta >= 0.0)) throw DomainError("learning rate must be non-negative");
    if (membership.size() != params.num_classes()) {
        throw ShapeMismatch("membership vector length mismatch");
    }
    if (eta == 0.0) return project_to_sphere(z);
    Vector step = params.E * z;
    for (int j = 0; j < params.num_classes(); ++j) {
        const double w = params.coeffs.gamma[static_cast<std::size_t>(j)] * membership(j);
        if (w == 0.0) continue;
        step -= w * (params.C[static_cast<std::size_t>(j)] * z);
    }
    return project_to_sphere(Vector(z + eta * step));
}

inline Vector transform_infer(const Vector& z, const LayerParams& params, double lambda,
                              double eta) {
    return transform_infer(z, params, estimate_membership(z, params, lambda), eta);
}

/// Index of the largest entry; ties go to the lowest index.
inline int argmax_lowest(const Vector& v) {
    int best = 0;
    for (int j = 1; j < v.size(); ++j) {
        if (v(j) > v(best)) best = j;
    }
    return best;
}

/// Normalizes `x`, runs it through the network and returns argmax π̂ at the
/// last layer. π̂ is recomputed from the current feature at every layer.
inline int classify(const Vector& x, std::span<const LayerParams> network, double lambda,
                    double eta = kDefaultLearningRate) {
    if (network.empty()) throw DomainError("network has no layers");
    Vector z = project_to_sphere(x);
    Vector membership;
    for (std::size_t l = 0; l < network.size(); ++l) {
        membership = estimate_membership(z, network[l], lambda);
        if (l + 1 < network.size()) z = transform_infer(z, network[l], membership, eta);
    }
    return argmax_lowest(membership);
}

/// Batched inference through one layer. Returns π̂ as a J×n matrix; when
/// `next` is non-null it receives the transformed, re-projected features.
inline Matrix infer_layer(const Matrix& z, const LayerParams& params, double lambda, double eta,
                          Matrix* next = nullptr) {
    if (z.rows() != params.dim()) throw ShapeMismatch("feature dimension mismatch");
    const int classes = params.num_classes();
    const Index n = z.cols();
    std::vector<Matrix> compressed;
    compressed.reserve(static_cast<std::size_t>(classes));
    Matrix norms(classes, n);
    for (int j = 0; j < classes; ++j) {
        compressed.push_back(params.C[static_cast<std::size_t>(j)] * z);
        norms.row(j) = compressed.back().colwise().norm();
    }
    Matrix membership(classes, n);
    for (Index i = 0; i < n; ++i) membership.col(i) = softmin_weights(norms.col(i), lambda);
    if (next != nullptr) {
        Matrix step = params.E * z;
        for (int j = 0; j < classes; ++j) {
            const double g = params.coeffs.gamma[static_cast<std::size_t>(j)];
            if (g == 0.0) continue;
            step -= (compressed[static_cast<std::size_t>(j)].array().rowwise() *
                     (g * membership.row(j)).array())
                        .matrix();
        }
        *next = project_to_sphere(Matrix(z + eta * step)).matrix();
    }
    return membership;
}

} // namespace lolafl
