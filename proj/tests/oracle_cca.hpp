#pragma once

// Direct CCA / PWCCA on plain arrays: Cholesky whitening and a cyclic Jacobi
// eigensolver, sharing nothing with the library's Eigen-based route.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat centred(const Eigen::MatrixXd& m) {
  const std::size_t n = m.rows(), d = m.cols();
  Mat out = zeros(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += m(i, j);
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) out[i][j] = m(i, j) - mean;
  }
  return out;
}

inline Mat cross(const Mat& a, const Mat& b, double reg) {
  const std::size_t n = a.size(), p = a[0].size(), q = b[0].size();
  Mat c = zeros(p, q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += a[t][i] * b[t][j];
      c[i][j] = s / (n - 1) + (i == j ? reg : 0.0);
    }
  return c;
}

inline Mat cholesky(const Mat& a) {
  const std::size_t n = a.size();
  Mat l = zeros(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j][j];
    for (std::size_t k = 0; k < j; ++k) d -= l[j][k] * l[j][k];
    l[j][j] = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i][j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      l[i][j] = s / l[j][j];
    }
  }
  return l;
}

// Solves L z = b for each column of b.
inline Mat forward(const Mat& l, const Mat& b) {
  const std::size_t n = l.size(), m = b[0].size();
  Mat z = zeros(n, m);
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      double s = b[i][c];
      for (std::size_t k = 0; k < i; ++k) s -= l[i][k] * z[k][c];
      z[i][c] = s / l[i][i];
    }
  return z;
}

// Solves L^T z = b for each column of b.
inline Mat backward_t(const Mat& l, const Mat& b) {
  const std::size_t n = l.size(), m = b[0].size();
  Mat z = zeros(n, m);
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t i = n; i-- > 0;) {
      double s = b[i][c];
      for (std::size_t k = i + 1; k < n; ++k) s -= l[k][i] * z[k][c];
      z[i][c] = s / l[i][i];
    }
  return z;
}

inline Mat transpose(const Mat& a) {
  Mat t = zeros(a[0].size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

inline Mat multiply(const Mat& a, const Mat& b) {
  Mat c = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Cyclic Jacobi: eigenvalues (descending) and column eigenvectors of a symmetric matrix.
inline void jacobi_eigen(Mat a, std::vector<double>& values, Mat& vectors) {
  const std::size_t n = a.size();
  Mat v = zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-300) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  values.clear();
  vectors = zeros(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    values.push_back(a[order[c]][order[c]]);
    for (std::size_t k = 0; k < n; ++k) vectors[k][c] = v[k][order[c]];
  }
}

struct DirectResult {
  std::vector<double> rho;
  double pwcca = 0.0;
};

inline DirectResult direct_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double reg) {
  const Mat xc = centred(x), yc = centred(y);
  const std::size_t n = xc.size(), dx = x.cols(), dy = y.cols(), m = std::min(dx, dy);
  const Mat lx = cholesky(cross(xc, xc, reg)), ly = cholesky(cross(yc, yc, reg));
  // K = Lx^-1 Cxy Ly^-T
  const Mat k = transpose(forward(ly, transpose(forward(lx, cross(xc, yc, 0.0)))));
  // Right singular vectors from K^T K; left ones by U = K V / sigma.
  std::vector<double> ev;
  Mat vv;
  jacobi_eigen(multiply(transpose(k), k), ev, vv);
  DirectResult r;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double sigma = std::sqrt(std::max(ev[i], 0.0));
    r.rho.push_back(std::min(sigma, 1.0));
    Mat vcol = zeros(dy, 1), ucol = zeros(dx, 1);
    for (std::size_t j = 0; j < dy; ++j) vcol[j][0] = vv[j][i];
    for (std::size_t a = 0; a < dx; ++a)
      for (std::size_t j = 0; j < dy; ++j) ucol[a][0] += k[a][j] * vcol[j][0] / sigma;
    const Mat wa = backward_t(lx, ucol), wb = backward_t(ly, vcol);
    std::vector<double> h(n, 0.0), g(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t a = 0; a < dx; ++a) h[t] += xc[t][a] * wa[a][0];
      for (std::size_t j = 0; j < dy; ++j) g[t] += yc[t][j] * wb[j][0];
    }
    double hg = 0.0, hh = 0.0, gg = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      hg += h[t] * g[t];
      hh += h[t] * h[t];
      gg += g[t] * g[t];
    }
    const double emp = std::min(1.0, std::abs(hg) / std::sqrt(hh * gg));
    double alpha = 0.0;
    for (std::size_t a = 0; a < dx; ++a) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += h[t] * xc[t][a];
      alpha += std::abs(s);
    }
    num += alpha * emp;
    den += alpha;
  }
  r.pwcca = num / den;
  return r;
}

}  // namespace oracle
