#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sfbs/errors.hpp"

namespace sfbs {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;

/// Dimensions of a product space H (+) G_1 (+) ... (+) G_q.
class SpaceSpec {
public:
    SpaceSpec() = default;

    explicit SpaceSpec(std::vector<Index> dims) : dims_(std::move(dims)) {
        if (dims_.empty()) throw StructuralError("SpaceSpec: at least one block is required");
        for (Index d : dims_) {
            if (d < 1) throw StructuralError("SpaceSpec: block dimensions must be >= 1");
        }
        offsets_.resize(dims_.size());
        std::exclusive_scan(dims_.begin(), dims_.end(), offsets_.begin(), Index{0});
    }

    static SpaceSpec single(Index dim) { return SpaceSpec({dim}); }

    std::size_t blocks() const noexcept { return dims_.size(); }
    Index dim(std::size_t k) const { return dims_.at(k); }
    Index offset(std::size_t k) const { return offsets_.at(k); }
    Index total_dim() const noexcept {
        return dims_.empty() ? 0 : offsets_.back() + dims_.back();
    }
    const std::vector<Index>& dims() const noexcept { return dims_; }

    friend bool operator==(const SpaceSpec& a, const SpaceSpec& b) { return a.dims_ == b.dims_; }

private:
    std::vector<Index> dims_;
    std::vector<Index> offsets_;
};

/// A point of a product space, stored contiguously; block k is a segment view.
template <typename Scalar>
class BlockVector {
public:
    BlockVector() = default;

    explicit BlockVector(SpaceSpec space)
        : space_(std::move(space)), data_(Vector<Scalar>::Zero(space_.total_dim())) {}

    BlockVector(SpaceSpec space, Vector<Scalar> data) : space_(std::move(space)), data_(std::move(data)) {
        if (data_.size() != space_.total_dim()) {
            throw StructuralError("BlockVector: data length does not match the space");
        }
        if (!data_.allFinite()) throw StructuralError("BlockVector: entries must be finite");
    }

    static BlockVector from_blocks(const std::vector<Vector<Scalar>>& blocks) {
        std::vector<Index> dims;
        dims.reserve(blocks.size());
        for (const auto& b : blocks) dims.push_back(b.size());
        BlockVector out{SpaceSpec(dims)};
        for (std::size_t k = 0; k < blocks.size(); ++k) out.block(k) = blocks[k];
        return out;
    }

    const SpaceSpec& space() const noexcept { return space_; }
    const Vector<Scalar>& data() const noexcept { return data_; }
    Vector<Scalar>& data() noexcept { return data_; }

    auto block(std::size_t k) { return data_.segment(space_.offset(k), space_.dim(k)); }
    auto block(std::size_t k) const { return data_.segment(space_.offset(k), space_.dim(k)); }

    BlockVector& operator+=(const BlockVector& other) {
        require_same_space(other);
        data_ += other.data_;
        return *this;
    }
    BlockVector& operator-=(const BlockVector& other) {
        require_same_space(other);
        data_ -= other.data_;
        return *this;
    }
    BlockVector& operator*=(Scalar s) {
        data_ *= s;
        return *this;
    }
    /// this += alpha * x
    BlockVector& axpy(Scalar alpha, const BlockVector& x) {
        require_same_space(x);
        data_ += alpha * x.data_;
        return *this;
    }

    friend BlockVector operator+(BlockVector a, const BlockVector& b) { return a += b; }
    friend BlockVector operator-(BlockVector a, const BlockVector& b) { return a -= b; }
    friend BlockVector operator*(Scalar s, BlockVector a) { return a *= s; }

    Scalar squared_norm() const { return data_.squaredNorm(); }
    Scalar norm() const { return data_.norm(); }

private:
    void require_same_space(const BlockVector& other) const {
        if (!(space_ == other.space_)) throw StructuralError("BlockVector: spaces differ");
    }

    SpaceSpec space_;
    Vector<Scalar> data_;
};

template <typename Scalar>
Scalar inner(const SpaceSpec& space, const BlockVector<Scalar>& x, const BlockVector<Scalar>& y) {
    if (!(x.space() == space) || !(y.space() == space)) {
        throw StructuralError("inner: operands do not conform to the space");
    }
    return x.data().dot(y.data());
}

/// Bounded linear map between finite-dimensional spaces, stored densely with its adjoint.
template <typename Scalar>
class LinearMap {
public:
    LinearMap() = default;

    explicit LinearMap(Matrix<Scalar> matrix) : matrix_(std::move(matrix)), adjoint_(matrix_.transpose()) {
        if (!matrix_.allFinite()) throw StructuralError("LinearMap: entries must be finite");
    }

    static LinearMap identity(Index n) { return LinearMap(Matrix<Scalar>::Identity(n, n)); }

    Index rows() const noexcept { return matrix_.rows(); }
    Index cols() const noexcept { return matrix_.cols(); }
    const Matrix<Scalar>& matrix() const noexcept { return matrix_; }
    const Matrix<Scalar>& adjoint_matrix() const noexcept { return adjoint_; }

    Vector<Scalar> apply(const Vector<Scalar>& x) const {
        if (x.size() != cols()) throw StructuralError("LinearMap::apply: dimension mismatch");
        return matrix_ * x;
    }
    Vector<Scalar> apply_adjoint(const Vector<Scalar>& y) const {
        if (y.size() != rows()) throw StructuralError("LinearMap::apply_adjoint: dimension mismatch");
        return adjoint_ * y;
    }
    LinearMap adjoint() const { return LinearMap(adjoint_); }

private:
    Matrix<Scalar> matrix_;
    Matrix<Scalar> adjoint_;
};

/// Symmetric positive-definite metric operator with square root and inverse cached at construction.
template <typename Scalar>
class SpdMetric {
public:
    SpdMetric() = default;

    explicit SpdMetric(Matrix<Scalar> matrix) : matrix_(std::move(matrix)) {
        if (matrix_.rows() != matrix_.cols() || matrix_.rows() == 0) {
            throw StructuralError("SpdMetric: matrix must be square and nonempty");
        }
        const Scalar scale = std::max(Scalar(1), matrix_.cwiseAbs().maxCoeff());
        if ((matrix_ - matrix_.transpose()).cwiseAbs().maxCoeff() > Scalar(1e-12) * scale) {
            throw ParameterError("SpdMetric: matrix is not symmetric");
        }
        const Matrix<Scalar> sym = Scalar(0.5) * (matrix_ + matrix_.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(sym);
        if (eig.info() != Eigen::Success) throw ParameterError("SpdMetric: eigendecomposition failed");
        const Vector<Scalar>& ev = eig.eigenvalues();
        min_eig_ = ev.minCoeff();
        max_eig_ = ev.maxCoeff();
        if (!(min_eig_ > Scalar(0))) throw ParameterError("SpdMetric: matrix is not positive definite");
        const Matrix<Scalar>& Q = eig.eigenvectors();
        sqrt_ = Q * ev.cwiseSqrt().asDiagonal() * Q.transpose();
        inv_ = Q * ev.cwiseInverse().asDiagonal() * Q.transpose();
        inv_sqrt_ = Q * ev.cwiseSqrt().cwiseInverse().asDiagonal() * Q.transpose();
        const Matrix<Scalar> off = sym - Matrix<Scalar>(sym.diagonal().asDiagonal());
        diagonal_ = off.cwiseAbs().maxCoeff() == Scalar(0);
        scalar_ = diagonal_ && (sym.diagonal().array() == sym(0, 0)).all();
    }

    static SpdMetric identity(Index n) { return SpdMetric(Matrix<Scalar>::Identity(n, n)); }
    static SpdMetric scaled_identity(Index n, Scalar s) {
        return SpdMetric(Matrix<Scalar>(s * Matrix<Scalar>::Identity(n, n)));
    }
    static SpdMetric diagonal(const Vector<Scalar>& d) { return SpdMetric(Matrix<Scalar>(d.asDiagonal())); }

    Index dim() const noexcept { return matrix_.rows(); }
    const Matrix<Scalar>& matrix() const noexcept { return matrix_; }
    const Matrix<Scalar>& sqrt_matrix() const noexcept { return sqrt_; }
    const Matrix<Scalar>& inverse_matrix() const noexcept { return inv_; }
    const Matrix<Scalar>& inverse_sqrt_matrix() const noexcept { return inv_sqrt_; }
    Scalar min_eigenvalue() const noexcept { return min_eig_; }
    /// Operator norm ||U||.
    Scalar max_eigenvalue() const noexcept { return max_eig_; }
    bool is_diagonal() const noexcept { return diagonal_; }
    /// True when U = s * Id.
    bool is_scalar() const noexcept { return scalar_; }
    Scalar scalar_value() const { return matrix_(0, 0); }

    Vector<Scalar> apply(const Vector<Scalar>& x) const {
        require(x);
        return matrix_ * x;
    }
    Vector<Scalar> apply_inverse(const Vector<Scalar>& x) const {
        require(x);
        return inv_ * x;
    }
    /// The metric U^{-1}, itself SPD.
    SpdMetric inverse() const { return SpdMetric(Matrix<Scalar>(Scalar(0.5) * (inv_ + inv_.transpose()))); }

    void require(const Vector<Scalar>& x) const {
        if (x.size() != dim()) throw StructuralError("SpdMetric: dimension mismatch");
    }

private:
    Matrix<Scalar> matrix_;
    Matrix<Scalar> sqrt_;
    Matrix<Scalar> inv_;
    Matrix<Scalar> inv_sqrt_;
    Scalar min_eig_{0};
    Scalar max_eig_{0};
    bool diagonal_{false};
    bool scalar_{false};
};

/// ||x||_U = sqrt(<x, U x>).
template <typename Scalar>
Scalar metric_norm(const SpdMetric<Scalar>& U, const Vector<Scalar>& x) {
    U.require(x);
    return std::sqrt(x.dot(U.matrix() * x));
}

/// U^{1/2} x.
template <typename Scalar>
Vector<Scalar> metric_sqrt_apply(const SpdMetric<Scalar>& U, const Vector<Scalar>& x) {
    U.require(x);
    return U.sqrt_matrix() * x;
}

struct PowerIterationOptions {
    double tol = 1e-10;
    int max_iter = 100000;
    std::uint64_t restart_seed = 0x5eed5eedULL;
};

namespace detail {

// Power iteration on A = L^T L from a unit start vector. Stops once the
// eigen-residual ||A v - rho v|| <= tol * rho, which places an eigenvalue of A
// within tol * rho of rho.
template <typename Scalar>
Scalar power_iterate(const Matrix<Scalar>& L, Vector<Scalar> v, Scalar tol, int max_iter, bool& converged) {
    converged = false;
    Scalar rho = 0;
    for (int it = 0; it < max_iter; ++it) {
        const Vector<Scalar> Lv = L * v;
        const Vector<Scalar> Av = L.transpose() * Lv;
        rho = Lv.squaredNorm();
        const Scalar residual = (Av - rho * v).norm();
        if (residual <= tol * rho || rho == Scalar(0)) {
            converged = true;
            return rho;
        }
        v = Av / Av.norm();
    }
    return rho;
}

}  // namespace detail

/// Spectral norm ||L|| by power iteration on L^T L.
///
/// Starts from the normalized all-ones vector. If the converged value falls
/// below the computable lower bound max(max column norm, ||L||_F / sqrt(rank bound)),
/// the start was (numerically) orthogonal to the top singular subspace and the
/// iteration is restarted from a seeded random vector.
template <typename Scalar>
Scalar operator_norm(const LinearMap<Scalar>& L, const PowerIterationOptions& opts = {}) {
    if (!(opts.tol > 0)) throw ParameterError("operator_norm: tol must be positive");
    const Matrix<Scalar>& M = L.matrix();
    if (M.size() == 0) return Scalar(0);
    const Scalar fro = M.norm();
    if (fro == Scalar(0)) return Scalar(0);
    const Scalar col_bound = M.colwise().norm().maxCoeff();
    const Scalar rank_bound = fro / std::sqrt(Scalar(std::min(M.rows(), M.cols())));
    const Scalar lower = std::max(col_bound, rank_bound);
    const Scalar tol = Scalar(opts.tol);

    bool converged = false;
    Vector<Scalar> start = Vector<Scalar>::Ones(M.cols()).normalized();
    Scalar rho = detail::power_iterate<Scalar>(M, start, tol, opts.max_iter, converged);
    Scalar sigma = std::sqrt(rho);
    if (!converged || sigma < lower * (Scalar(1) - tol)) {
        std::mt19937_64 rng(opts.restart_seed);
        std::normal_distribution<double> normal;
        for (Index i = 0; i < start.size(); ++i) start(i) = Scalar(normal(rng));
        start.normalize();
        rho = detail::power_iterate<Scalar>(M, start, tol, opts.max_iter, converged);
        sigma = std::sqrt(rho);
    }
    if (!converged) {
        throw ConvergenceError("operator_norm: power iteration did not converge", double(sigma));
    }
    return std::clamp(sigma, lower, fro);
}

template <typename Scalar>
Scalar operator_norm(const Matrix<Scalar>& M, const PowerIterationOptions& opts = {}) {
    return operator_norm(LinearMap<Scalar>(M), opts);
}

}  // namespace sfbs
