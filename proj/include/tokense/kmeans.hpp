#pragma once

#include "tokense/common.hpp"
#include "tokense/rng.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

namespace tokense {

struct KMeansOptions {
  int max_iter = 50;
  std::uint64_t seed = 0;
};

struct Assignment {
  std::vector<int> index;
  std::vector<float> sq_dist;
};

// Nearest centroid per row (ties break toward the lower index).
inline Assignment assign_nearest(const MatF& data, const MatF& centroids) {
  Assignment a;
  const auto n = data.rows();
  a.index.assign(static_cast<std::size_t>(n), 0);
  a.sq_dist.assign(static_cast<std::size_t>(n), 0.0f);
  if (n == 0) return a;
  const Eigen::VectorXf cn = centroids.rowwise().squaredNorm();
  const Eigen::VectorXf xn = data.rowwise().squaredNorm();
  constexpr Eigen::Index kBlock = 4096;
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index len = std::min(kBlock, n - start);
    MatF dots = data.middleRows(start, len) * centroids.transpose();
    for (Eigen::Index i = 0; i < len; ++i) {
      int best = 0;
      float best_d = std::numeric_limits<float>::infinity();
      for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
        const float d = cn(k) - 2.0f * dots(i, k);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(k);
        }
      }
      a.index[static_cast<std::size_t>(start + i)] = best;
      a.sq_dist[static_cast<std::size_t>(start + i)] = std::max(0.0f, best_d + xn(start + i));
    }
  }
  return a;
}

inline std::size_t count_distinct_rows(const MatF& data) {
  std::unordered_set<std::string> rows;
  const auto bytes = static_cast<std::size_t>(data.cols()) * sizeof(float);
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    std::string key(bytes, '\0');
    std::memcpy(key.data(), data.row(i).data(), bytes);
    rows.insert(std::move(key));
  }
  return rows.size();
}

// Lloyd's k-means with k-means++ seeding. Empty clusters are re-seeded from
// the point farthest from its centroid, so every centroid ends up used.
inline MatF kmeans(const MatF& data, int k, const KMeansOptions& opt = {}) {
  if (k <= 0) throw Error("codec", "k-means requires k >= 1");
  if (data.rows() == 0) throw Error("codec", "k-means on empty data");
  const std::size_t distinct = count_distinct_rows(data);
  if (static_cast<std::size_t>(k) > distinct)
    throw Error("codec", "codebook size " + std::to_string(k) + " exceeds the number of distinct training points (" +
                             std::to_string(distinct) + ")");
  const auto n = data.rows();
  const auto d = data.cols();
  Rng rng(opt.seed);

  MatF c(k, d);
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index first = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)));
  c.row(0) = data.row(first);
  for (int j = 1; j < k; ++j) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      best[static_cast<std::size_t>(i)] = std::min<double>(best[static_cast<std::size_t>(i)],
                                                           (data.row(i) - c.row(j - 1)).squaredNorm());
      total += best[static_cast<std::size_t>(i)];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= best[static_cast<std::size_t>(i)];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
      // Never duplicate an existing centroid.
      if (best[static_cast<std::size_t>(pick)] <= 0.0) {
        for (Eigen::Index i = 0; i < n; ++i)
          if (best[static_cast<std::size_t>(i)] > 0.0) {
            pick = i;
            break;
          }
      }
    }
    c.row(j) = data.row(pick);
  }

  auto reseed_empty = [&](Assignment& a) {
    bool changed = false;
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int idx : a.index) ++counts[static_cast<std::size_t>(idx)];
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < a.sq_dist.size(); ++i) {
        const bool donor_ok = counts[static_cast<std::size_t>(a.index[i])] > 1;
        const bool far_ok = counts[static_cast<std::size_t>(a.index[far])] > 1;
        if ((donor_ok && !far_ok) || (donor_ok == far_ok && a.sq_dist[i] > a.sq_dist[far])) far = i;
      }
      --counts[static_cast<std::size_t>(a.index[far])];
      ++counts[static_cast<std::size_t>(j)];
      a.index[far] = j;
      a.sq_dist[far] = 0.0f;
      c.row(j) = data.row(static_cast<Eigen::Index>(far));
      changed = true;
    }
    return changed;
  };

  Assignment a = assign_nearest(data, c);
  for (int iter = 0; iter < opt.max_iter; ++iter) {
    reseed_empty(a);
    MatD sums = MatD::Zero(k, d);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int j = a.index[static_cast<std::size_t>(i)];
      sums.row(j) += data.row(i).cast<double>();
      ++counts[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < k; ++j)
      if (counts[static_cast<std::size_t>(j)] > 0)
        c.row(j) = (sums.row(j) / counts[static_cast<std::size_t>(j)]).cast<float>();
    Assignment next = assign_nearest(data, c);
    const bool stable = next.index == a.index;
    a = std::move(next);
    if (stable) break;
  }
  // Final usage repair: a reseeded centroid sits exactly on a data point.
  for (int guard = 0; guard < k && reseed_empty(a); ++guard) a = assign_nearest(data, c);
  return c;
}

}  // namespace tokense
