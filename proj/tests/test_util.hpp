#pragma once

// Shared helpers for the unit tests and the acceptance binary. Everything
// here is an independent reference: dense Kronecker algebra, brute-force
// cosine means, finite differences. None of it calls the library's own
// versions of the quantity being checked.

#include "gatoms/common.hpp"
#include "gatoms/ekfac.hpp"
#include "gatoms/kfac_stats.hpp"
#include "gatoms/tensor_file.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace testutil {

using gatoms::Matrix;
using gatoms::RowMatrix;
using gatoms::Vector;

// A fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gatoms_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<unsigned char> ReadBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void WriteBytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline RowMatrix Gaussian(std::int64_t rows, std::int64_t cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  RowMatrix m(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

// Random symmetric positive definite matrix with a spread of eigenvalues.
inline RowMatrix RandomSpd(std::int64_t n, std::mt19937_64& rng, double ridge = 0.05) {
  const RowMatrix g = Gaussian(n, n, rng);
  RowMatrix s = g * g.transpose() / static_cast<double>(n);
  s.diagonal().array() += ridge;
  return s;
}

// Kronecker product with row-major vectorization: vec_r(X^T G Y) =
// kron(X, Y)^T vec_r(G).
inline Matrix Kron(const Matrix& x, const Matrix& y) {
  Matrix k(x.rows() * y.rows(), x.cols() * y.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) k.block(i * y.rows(), j * y.cols(), y.rows(), y.cols()) = x(i, j) * y;
  return k;
}

// KFAC statistics built directly from explicit factor matrices.
inline gatoms::KfacStats StatsFromFactors(const gatoms::ModuleRegistry& registry,
                                          const std::vector<std::pair<RowMatrix, RowMatrix>>& a_s,
                                          std::int64_t tokens = 1000) {
  gatoms::KfacStats stats;
  stats.registry = registry;
  stats.token_count = tokens;
  for (const auto& [a, s] : a_s) stats.modules.push_back({a, s});
  return stats;
}

// Dense oracle for unproject(project(g)) on one module: the orthogonal
// projector onto the retained Kronecker eigenvectors.
inline Vector DenseRoundTrip(const gatoms::ModuleBasis& mb, const Vector& g) {
  const Matrix full = Kron(mb.q_out, mb.q_in);  // columns are eigen-pairs, row-major index
  Matrix u(full.rows(), static_cast<Eigen::Index>(mb.topk.size()));
  for (std::size_t c = 0; c < mb.topk.size(); ++c) u.col(static_cast<Eigen::Index>(c)) = full.col(mb.topk[c]);
  return u * (u.transpose() * g);
}

// Mean cosine over ordered pairs a != b, computed from scratch.
inline double BruteCoherence(const RowMatrix& raw, const std::vector<std::int64_t>& docs) {
  double sum = 0.0;
  long pairs = 0;
  for (auto a : docs) {
    for (auto b : docs) {
      if (a == b) continue;
      ++pairs;
      double dot = 0, na = 0, nb = 0;
      for (Eigen::Index j = 0; j < raw.cols(); ++j) {
        dot += raw(a, j) * raw(b, j);
        na += raw(a, j) * raw(a, j);
        nb += raw(b, j) * raw(b, j);
      }
      if (na > 0 && nb > 0) sum += dot / std::sqrt(na * nb);
    }
  }
  return sum / static_cast<double>(pairs);
}

// Largest |cosine| pairs first; returns one cosine per matched truth atom.
inline std::vector<double> GreedyMatch(const RowMatrix& truth, const RowMatrix& learned) {
  const Eigen::Index t = truth.rows(), l = learned.rows();
  Matrix cos(t, l);
  for (Eigen::Index i = 0; i < t; ++i)
    for (Eigen::Index j = 0; j < l; ++j) {
      const double n = truth.row(i).norm() * learned.row(j).norm();
      cos(i, j) = n > 0 ? std::abs(truth.row(i).dot(learned.row(j))) / n : 0.0;
    }
  std::vector<double> out(static_cast<std::size_t>(t), 0.0);
  std::vector<bool> used_t(t, false), used_l(l, false);
  for (Eigen::Index step = 0; step < std::min(t, l); ++step) {
    double best = -1;
    Eigen::Index bi = 0, bj = 0;
    for (Eigen::Index i = 0; i < t; ++i)
      for (Eigen::Index j = 0; j < l; ++j)
        if (!used_t[i] && !used_l[j] && cos(i, j) > best) best = cos(i, j), bi = i, bj = j;
    used_t[bi] = used_l[bj] = true;
    out[static_cast<std::size_t>(bi)] = best;
  }
  return out;
}

struct PlantedData {
  RowMatrix atoms;  // K x p, unit rows
  RowMatrix x;      // N x p
};

// Each row is a sparse combination of `sparsity` planted unit atoms with
// magnitudes in [0.5, 1.5] and random signs, plus N(0, noise^2) noise.
inline PlantedData MakePlanted(int k, int p, int n, int sparsity, double noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PlantedData d;
  d.atoms = Gaussian(k, p, rng);
  for (int i = 0; i < k; ++i) d.atoms.row(i).normalize();
  d.x = RowMatrix::Zero(n, p);
  std::uniform_real_distribution<double> mag(0.5, 1.5);
  std::normal_distribution<double> eps(0.0, noise);
  std::vector<int> order(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int r = 0; r < n; ++r) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < sparsity; ++s) {
      const double sign = (rng() & 1) ? 1.0 : -1.0;
      d.x.row(r) += sign * mag(rng) * d.atoms.row(order[static_cast<std::size_t>(s)]);
    }
    for (int j = 0; j < p; ++j) d.x(r, j) += eps(rng);
  }
  return d;
}

}  // namespace testutil
