#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfn/mask.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

/// Whole-image mean absolute error on the percent scale.
inline double l1_metric(const Tensor& pred, const Tensor& target) {
    detail::check_same_shape(pred, target, "l1_metric");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
        acc += std::fabs(pred.data()[i] - target.data()[i]);
    }
    return 100.0 * acc / static_cast<double>(pred.numel());
}

/// Unknown pixels within Chebyshev distance n of the nearest known pixel.
struct BoundaryBand {
    int h = 0;
    int w = 0;
    int n = 0;
    std::vector<std::uint8_t> band;
    std::int64_t count = 0;
};

inline BoundaryBand boundary_band(const Mask& mask, int n) {
    if (n < 1) throw ContractError("boundary_band: n must be >= 1");
    const std::int64_t total = std::int64_t{mask.h} * mask.w;
    const std::int64_t unknown = mask.unknown_count();
    if (unknown == 0 || unknown == total) {
        throw ContractError("boundary_band: mask must contain both known and "
                            "unknown pixels");
    }
    // Multi-source BFS from the known region; 8-connectivity makes the
    // distance Chebyshev, so this equals dilation of the known region.
    std::vector<int> dist(static_cast<std::size_t>(total), -1);
    std::deque<std::int64_t> queue;
    for (std::int64_t i = 0; i < total; ++i) {
        if (mask.grid[static_cast<std::size_t>(i)] == 1) {
            dist[static_cast<std::size_t>(i)] = 0;
            queue.push_back(i);
        }
    }
    while (!queue.empty()) {
        const std::int64_t p = queue.front();
        queue.pop_front();
        const int d = dist[static_cast<std::size_t>(p)];
        if (d >= n) continue;
        const std::int64_t y = p / mask.w, x = p % mask.w;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                if (dy == 0 && dx == 0) continue;
                const std::int64_t ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= mask.h || nx < 0 || nx >= mask.w) continue;
                const std::int64_t q = ny * mask.w + nx;
                if (dist[static_cast<std::size_t>(q)] < 0) {
                    dist[static_cast<std::size_t>(q)] = d + 1;
                    queue.push_back(q);
                }
            }
        }
    }
    BoundaryBand out;
    out.h = mask.h;
    out.w = mask.w;
    out.n = n;
    out.band.assign(static_cast<std::size_t>(total), 0);
    for (std::int64_t i = 0; i < total; ++i) {
        if (mask.grid[static_cast<std::size_t>(i)] == 0 &&
            dist[static_cast<std::size_t>(i)] > 0 &&
            dist[static_cast<std::size_t>(i)] <= n) {
            out.band[static_cast<std::size_t>(i)] = 1;
            ++out.count;
        }
    }
    return out;
}

/// Boundary Pixels Error: L1 error over the band, per channel, normalized
/// by band pixel count and reported on the percent scale. Only band pixels
/// participate, bit for bit.
inline double bpe(const Tensor& pred, const Tensor& target, const Mask& mask,
                  int n) {
    detail::check_same_shape(pred, target, "bpe");
    Shape s = pred.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3 || s[1] != mask.h || s[2] != mask.w) {
        throw ShapeError("bpe: prediction " + shape_str(pred.shape()) +
                         " does not match mask " + std::to_string(mask.h) + "x" +
                         std::to_string(mask.w));
    }
    const auto band = boundary_band(mask, n);
    if (band.count == 0) throw ContractError("bpe: boundary band is empty");
    const std::int64_t C = s[0];
    const std::int64_t plane = std::int64_t{mask.h} * mask.w;
    double acc = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        const double* p = pred.raw() + c * plane;
        const double* t = target.raw() + c * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            if (band.band[static_cast<std::size_t>(i)]) {
                acc += std::fabs(t[i] - p[i]);
            }
        }
    }
    return 100.0 * acc / static_cast<double>(band.count * C);
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues within
/// -1e-10 of zero are clamped to zero.
inline std::vector<double> matrix_sqrt_psd(const std::vector<double>& s,
                                           int dim) {
    if (dim < 1 || s.size() != static_cast<std::size_t>(dim) * dim) {
        throw ContractError("matrix_sqrt_psd: bad dimensions");
    }
    double scale = 1.0;
    for (double v : s) scale = std::max(scale, std::fabs(v));
    for (int i = 0; i < dim; ++i) {
        for (int j = i + 1; j < dim; ++j) {
            const double a = s[static_cast<std::size_t>(i) * dim + j];
            const double b = s[static_cast<std::size_t>(j) * dim + i];
            if (std::fabs(a - b) > 1e-9 * scale) {
                throw ContractError("matrix_sqrt_psd: input is not symmetric");
            }
        }
    }
    Eigen::MatrixXd m(dim, dim);
    for (int i = 0; i < dim; ++i) {
        for (int j = 0; j < dim; ++j) {
            // Symmetrize so the solver sees an exactly symmetric matrix.
            m(i, j) = 0.5 * (s[static_cast<std::size_t>(i) * dim + j] +
                             s[static_cast<std::size_t>(j) * dim + i]);
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
    if (solver.info() != Eigen::Success) {
        throw ContractError("matrix_sqrt_psd: eigendecomposition failed");
    }
    Eigen::VectorXd evals = solver.eigenvalues();
    for (int i = 0; i < dim; ++i) {
        if (evals(i) < -1e-10 * scale) {
            throw ContractError("matrix_sqrt_psd: input has eigenvalue " +
                                std::to_string(evals(i)) + " below tolerance");
        }
        evals(i) = std::sqrt(std::max(0.0, evals(i)));
    }
    Eigen::MatrixXd r = solver.eigenvectors() * evals.asDiagonal() *
                        solver.eigenvectors().transpose();
    std::vector<double> out(static_cast<std::size_t>(dim) * dim);
    for (int i = 0; i < dim; ++i) {
        for (int j = 0; j < dim; ++j) {
            out[static_cast<std::size_t>(i) * dim + j] = r(i, j);
        }
    }
    return out;
}

namespace detail {

struct Gaussian {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

inline Gaussian fit_gaussian(const std::vector<std::vector<double>>& samples,
                             double ridge) {
    const int n = static_cast<int>(samples.size());
    const int dim = static_cast<int>(samples[0].size());
    Gaussian g;
    g.mean = Eigen::VectorXd::Zero(dim);
    for (const auto& v : samples) {
        if (static_cast<int>(v.size()) != dim) {
            throw ContractError("frechet_feature_distance: ragged sample set");
        }
        for (int i = 0; i < dim; ++i) g.mean(i) += v[static_cast<std::size_t>(i)];
    }
    g.mean /= static_cast<double>(n);
    g.cov = Eigen::MatrixXd::Zero(dim, dim);
    if (n > 1) {
        for (const auto& v : samples) {
            Eigen::VectorXd d(dim);
            for (int i = 0; i < dim; ++i) {
                d(i) = v[static_cast<std::size_t>(i)] - g.mean(i);
            }
            g.cov += d * d.transpose();
        }
        g.cov /= static_cast<double>(n - 1);
    }
    if (n < dim + 1) {
        g.cov += ridge * Eigen::MatrixXd::Identity(dim, dim);
    }
    return g;
}

inline std::vector<double> to_rowmajor(const Eigen::MatrixXd& m) {
    std::vector<double> out(static_cast<std::size_t>(m.rows()) *
                            static_cast<std::size_t>(m.cols()));
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) {
            out[static_cast<std::size_t>(i) * m.cols() + j] = m(i, j);
        }
    }
    return out;
}

inline Eigen::MatrixXd from_rowmajor(const std::vector<double>& v, int dim) {
    Eigen::MatrixXd m(dim, dim);
    for (int i = 0; i < dim; ++i) {
        for (int j = 0; j < dim; ++j) {
            m(i, j) = v[static_cast<std::size_t>(i) * dim + j];
        }
    }
    return m;
}

}  // namespace detail

/// Frechet distance between Gaussian fits of two embedding sets:
/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)). The product square root
/// is evaluated through the symmetric form sqrt(Sa)^T Sb sqrt(Sa).
inline double frechet_feature_distance(
    const std::vector<std::vector<double>>& a,
    const std::vector<std::vector<double>>& b, double ridge = 1e-6) {
    if (a.empty() || b.empty()) {
        throw ContractError("frechet_feature_distance: empty sample set");
    }
    if (a[0].size() != b[0].size() || a[0].empty()) {
        throw ContractError("frechet_feature_distance: dimension mismatch");
    }
    const int dim = static_cast<int>(a[0].size());
    auto ga = detail::fit_gaussian(a, ridge);
    auto gb = detail::fit_gaussian(b, ridge);

    const Eigen::MatrixXd sa_sqrt = detail::from_rowmajor(
        matrix_sqrt_psd(detail::to_rowmajor(ga.cov), dim), dim);
    Eigen::MatrixXd inner = sa_sqrt * gb.cov * sa_sqrt;
    const Eigen::MatrixXd inner_sqrt = detail::from_rowmajor(
        matrix_sqrt_psd(detail::to_rowmajor(inner), dim), dim);

    const double mean_term = (ga.mean - gb.mean).squaredNorm();
    const double trace_term =
        ga.cov.trace() + gb.cov.trace() - 2.0 * inner_sqrt.trace();
    return std::max(0.0, mean_term + trace_term);
}

/// Per-bucket evaluation results mirroring the layout of the quantitative
/// comparison tables: mean l1, mean BPE and the Frechet feature distance
/// for each populated decile bucket.
struct MetricsReport {
    struct Bucket {
        std::int64_t count = 0;
        double l1 = 0.0;
        double bpe = 0.0;
        double ffd = 0.0;
    };
    int band_n = 0;
    std::array<std::optional<Bucket>, 5> buckets;

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& b : buckets) {
            if (b) n += b->count;
        }
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (std::size_t i = 0; i < buckets.size(); ++i) {
            if (!buckets[i]) continue;
            arr.push_back({{"bucket", i},
                           {"count", buckets[i]->count},
                           {"l1", buckets[i]->l1},
                           {"bpe", buckets[i]->bpe},
                           {"ffd", buckets[i]->ffd}});
        }
        return {{"band_n", band_n}, {"buckets", arr}};
    }

    std::string to_table() const {
        char line[160];
        std::string out =
            "bucket    count        l1       bpe       ffd\n";
        for (std::size_t i = 0; i < buckets.size(); ++i) {
            if (!buckets[i]) continue;
            std::snprintf(line, sizeof line, "0.%zu     %7lld  %8.4f  %8.4f  %8.4f\n",
                          i + 1, static_cast<long long>(buckets[i]->count),
                          buckets[i]->l1, buckets[i]->bpe, buckets[i]->ffd);
            out += line;
        }
        return out;
    }
};

using Embedder = std::function<std::vector<double>(const Tensor&)>;

/// Per-bucket means of l1 and BPE plus a per-bucket Frechet distance
/// between prediction and target embeddings. Buckets with no samples stay
/// absent from the report.
inline MetricsReport evaluate_set(const std::vector<Tensor>& predictions,
                                  const std::vector<Tensor>& targets,
                                  const std::vector<Mask>& masks, int n,
                                  const Embedder& embedder) {
    if (predictions.size() != targets.size() ||
        predictions.size() != masks.size()) {
        throw ContractError("evaluate_set: misaligned inputs");
    }
    if (predictions.empty()) {
        throw ContractError("evaluate_set: empty evaluation set");
    }
    MetricsReport report;
    report.band_n = n;
    std::array<std::vector<std::vector<double>>, 5> pred_embeds, target_embeds;
    std::array<double, 5> l1_acc{}, bpe_acc{};
    std::array<std::int64_t, 5> counts{};

    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const int b = bucket_of(masks[i]);
        l1_acc[static_cast<std::size_t>(b)] += l1_metric(predictions[i], targets[i]);
        bpe_acc[static_cast<std::size_t>(b)] += bpe(predictions[i], targets[i], masks[i], n);
        pred_embeds[static_cast<std::size_t>(b)].push_back(embedder(predictions[i]));
        target_embeds[static_cast<std::size_t>(b)].push_back(embedder(targets[i]));
        counts[static_cast<std::size_t>(b)] += 1;
    }
    for (std::size_t b = 0; b < 5; ++b) {
        if (counts[b] == 0) continue;
        MetricsReport::Bucket bucket;
        bucket.count = counts[b];
        bucket.l1 = l1_acc[b] / static_cast<double>(counts[b]);
        bucket.bpe = bpe_acc[b] / static_cast<double>(counts[b]);
        bucket.ffd = frechet_feature_distance(pred_embeds[b], target_embeds[b]);
        report.buckets[b] = bucket;
    }
    return report;
}

}  // namespace dfn
