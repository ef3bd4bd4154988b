#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "parec/matrix.hpp"
#include "parec/model.hpp"

namespace parec {

/// Causal n x n grid for export. When row_normalized, every non-zero row has
/// been divided by its maximum so the largest entry is exactly 1.
struct HeatGrid {
  Matrix values;
  bool row_normalized = false;
};

namespace detail {

inline void row_max_normalize(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double mx = m.row(i).maxCoeff();
    if (mx > 0.0) m.row(i) /= mx;
  }
}

}  // namespace detail

/// Correlation between positional embeddings: exp(P P^T / sqrt(d)), future
/// positions zeroed, each row divided by its maximum value.
inline HeatGrid positional_correlation(const Matrix& P) {
  require(P.rows() >= 1 && P.cols() >= 1, "positional_correlation: empty embedding matrix");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(P.cols()));
  Matrix c = ((P * P.transpose()) * inv_sqrt_d).array().exp();
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = i + 1; j < c.cols(); ++j) c(i, j) = 0.0;
  detail::row_max_normalize(c);
  return {std::move(c), true};
}

/// Learned attention of one block (1-based) of a positional or factorized
/// model: masked_softmax(R / sqrt(d)) with logits R or R1 R2^T, rows divided
/// by their maxima unless the raw row-stochastic matrix is requested.
inline HeatGrid attention_map(const ModelParams& params, int block, bool row_max_normalize = true) {
  require(block >= 1 && block <= params.dims.blocks, "attention_map: block out of range");
  const auto& b = params.blocks[static_cast<std::size_t>(block - 1)];
  Matrix logits;
  switch (params.spec.kind) {
    case AttentionKind::positional: logits = b.R; break;
    case AttentionKind::factorized: logits.noalias() = b.R1 * b.R2.transpose(); break;
    default:
      throw std::invalid_argument(
          "attention_map: only positional/factorized models have an input-independent map");
  }
  logits *= 1.0 / std::sqrt(static_cast<double>(params.dims.d));
  Matrix a = masked_softmax_rows_value(logits, true);
  if (row_max_normalize) detail::row_max_normalize(a);
  return {std::move(a), row_max_normalize};
}

/// Mean attention mass within the band |i - j| <= width, averaged over rows.
/// Expects a row-stochastic causal matrix (raw attention_map output).
inline double band_concentration(const Matrix& a, int width) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Eigen::Index lo = std::max<Eigen::Index>(0, i - width);
    total += a.row(i).segment(lo, i - lo + 1).sum();
  }
  return total / static_cast<double>(a.rows());
}

enum class GridFormat { csv, pgm };

/// csv: full-precision decimals, one row per line. pgm: 8-bit grayscale P2,
/// pixel = round(255 * cell), directly viewable.
inline void export_grid(const HeatGrid& grid, const std::string& path, GridFormat format) {
  require(grid.values.size() > 0, "export_grid: empty grid");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_grid: cannot write " + path);
  const Matrix& m = grid.values;
  if (format == GridFormat::csv) {
    char buf[40];
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
        out << buf << (j + 1 < m.cols() ? "," : "");
      }
      out << '\n';
    }
  } else {
    out << "P2\n" << m.cols() << ' ' << m.rows() << "\n255\n";
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        long v = std::lround(255.0 * m(i, j));
        v = std::clamp(v, 0L, 255L);
        out << v << (j + 1 < m.cols() ? " " : "");
      }
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("export_grid: write failed for " + path);
}

inline Matrix import_grid_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("import_grid_csv: cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t next = line.find(',', pos);
      if (next == std::string::npos) next = line.size();
      row.push_back(std::stod(line.substr(pos, next - pos)));
      pos = next + 1;
    }
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), "import_grid_csv: empty file");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].size() == rows[0].size(), "import_grid_csv: ragged rows");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

}  // namespace parec
