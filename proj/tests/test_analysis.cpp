#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "parec/analysis.hpp"
#include "parec/rng.hpp"

using namespace parec;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

/// Independent re-implementation of the correlation recipe, written directly
/// from its published step list: dot products, scale by 1/sqrt(d), exp,
/// keep the lower triangle, divide each row by its maximum.
Matrix correlation_oracle(const Matrix& P) {
  const Eigen::Index n = P.rows();
  Matrix c(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) c(i, j) = P.row(i).dot(P.row(j));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      c(i, j) = std::exp(c(i, j) / std::sqrt(static_cast<double>(P.cols())));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) c(i, j) = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) mx = std::max(mx, c(i, j));
    for (Eigen::Index j = 0; j < n; ++j) c(i, j) /= mx;
  }
  return c;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double sd = 1.0) {
  Matrix m(r, c);
  std::mt19937_64 rng(seed);
  fill_normal(m, rng, sd);
  return m;
}

}  // namespace

TEST_CASE("positional correlation") {
  SECTION("zero embeddings give an all-ones lower triangle") {
    HeatGrid g = positional_correlation(Matrix::Zero(5, 8));
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j <= i; ++j) CHECK(g.values(i, j) == 1.0);
      for (int j = i + 1; j < 5; ++j) CHECK(g.values(i, j) == 0.0);
    }
  }
  SECTION("orthogonal rows with unit self-product") {
    const int n = 4, d = 4;
    Matrix P = Matrix::Zero(n, d);
    for (int i = 0; i < n; ++i) P(i, i) = std::sqrt(std::sqrt(static_cast<double>(d)));
    // P_i . P_i = sqrt(d)  =>  exp(1) on the diagonal, exp(0) = 1 elsewhere
    HeatGrid g = positional_correlation(P);
    for (int i = 0; i < n; ++i) {
      CHECK(g.values(i, i) == 1.0);  // row max is the diagonal
      for (int j = 0; j < i; ++j) CHECK(g.values(i, j) == Approx(1.0 / std::exp(1.0)).epsilon(1e-12));
    }
  }
  SECTION("matches the independent oracle on random embeddings") {
    for (int trial = 0; trial < 20; ++trial) {
      Matrix P = random_matrix(12, 6, 100 + static_cast<std::uint64_t>(trial), 0.8);
      HeatGrid g = positional_correlation(P);
      Matrix want = correlation_oracle(P);
      CHECK((g.values - want).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
  SECTION("empty embedding is an error") {
    CHECK_THROWS_AS(positional_correlation(Matrix()), std::invalid_argument);
  }
}

TEST_CASE("attention maps") {
  Dims dims{8, 6, 2, 10};
  SECTION("fresh positional model maps to constant rows") {
    auto params = init_params(spec_from_variant("parec"), dims, 1);
    HeatGrid g = attention_map(params, 1);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j <= i; ++j) CHECK(g.values(i, j) == 1.0);
  }
  SECTION("factorized map with identity R2 equals the positional map") {
    AttentionSpec fact = spec_from_variant("fparec");
    fact.k = dims.n;
    auto pf = init_params(fact, dims, 2);
    std::mt19937_64 rng(3);
    fill_normal(pf.blocks[0].R1, rng, 0.9);
    pf.blocks[0].R2 = Matrix::Identity(dims.n, dims.n);
    auto pp = init_params(spec_from_variant("parec"), dims, 2);
    pp.blocks[0].R = pf.blocks[0].R1;
    CHECK(attention_map(pf, 1).values == attention_map(pp, 1).values);
  }
  SECTION("raw maps are row-stochastic; normalized rows peak at exactly 1") {
    AttentionSpec fact = spec_from_variant("fparec");
    fact.k = 3;
    auto params = init_params(fact, dims, 4);
    std::mt19937_64 rng(5);
    fill_normal(params.blocks[1].R1, rng, 1.0);
    fill_normal(params.blocks[1].R2, rng, 1.0);
    HeatGrid raw = attention_map(params, 2, false);
    HeatGrid norm = attention_map(params, 2, true);
    for (int i = 0; i < 6; ++i) {
      CHECK(std::abs(raw.values.row(i).head(i + 1).sum() - 1.0) <= 1e-12);
      CHECK(norm.values.row(i).maxCoeff() == 1.0);
      for (int j = i + 1; j < 6; ++j) CHECK(norm.values(i, j) == 0.0);
    }
    CHECK(!raw.row_normalized);
    CHECK(norm.row_normalized);
  }
  SECTION("dot-product and fixed variants are refused") {
    auto dp = init_params(spec_from_variant("sasrec"), dims, 6);
    CHECK_THROWS_AS(attention_map(dp, 1), std::invalid_argument);
    auto fx = init_params(spec_from_variant("fixed-average"), dims, 7);
    CHECK_THROWS_AS(attention_map(fx, 1), std::invalid_argument);
    auto pr = init_params(spec_from_variant("parec"), dims, 8);
    CHECK_THROWS_AS(attention_map(pr, 3), std::invalid_argument);
  }
}

TEST_CASE("band concentration orders diffuse vs peaked attention") {
  Matrix diffuse = fixed_pattern_matrix(FixedPattern::average, 30);
  Matrix peaked = fixed_pattern_matrix(FixedPattern::exponential, 30);
  CHECK(band_concentration(peaked, 5) > band_concentration(diffuse, 5));
}

TEST_CASE("grid export") {
  fs::path dir = fs::temp_directory_path() / "parec_test_grids";
  fs::create_directories(dir);

  SECTION("pgm hand case") {
    HeatGrid g;
    g.values = Matrix(2, 2);
    g.values << 1.0, 0.0, 0.5, 1.0;
    g.row_normalized = true;
    const std::string path = (dir / "t.pgm").string();
    export_grid(g, path, GridFormat::pgm);
    std::ifstream in(path);
    std::string magic;
    int w, h, maxv, p00, p01, p10, p11;
    in >> magic >> w >> h >> maxv >> p00 >> p01 >> p10 >> p11;
    CHECK(magic == "P2");
    CHECK(w == 2);
    CHECK(h == 2);
    CHECK(maxv == 255);
    CHECK(p00 == 255);
    CHECK(p01 == 0);
    CHECK(p10 == 128);  // round(255 * 0.5)
    CHECK(p11 == 255);
  }
  SECTION("csv round trip is exact") {
    HeatGrid g;
    g.values = random_matrix(7, 7, 200);
    const std::string path = (dir / "t.csv").string();
    export_grid(g, path, GridFormat::csv);
    Matrix back = import_grid_csv(path);
    CHECK(back == g.values);
  }
  SECTION("attention map round trip reproduces the softmax up to row scale") {
    Dims dims{8, 6, 1, 10};
    auto params = init_params(spec_from_variant("parec"), dims, 9);
    std::mt19937_64 rng(10);
    fill_normal(params.blocks[0].R, rng, 1.2);
    export_grid(attention_map(params, 1), (dir / "a.csv").string(), GridFormat::csv);
    Matrix back = import_grid_csv((dir / "a.csv").string());
    Matrix want = masked_softmax_rows_value(
        Matrix(params.blocks[0].R / std::sqrt(8.0)), true);
    for (int i = 0; i < 6; ++i) {
      const double scale = want.row(i).maxCoeff();
      for (int j = 0; j <= i; ++j)
        CHECK(back(i, j) * scale == Approx(want(i, j)).margin(1e-15));
    }
  }
  SECTION("unwritable path errors") {
    HeatGrid g;
    g.values = Matrix::Ones(2, 2);
    CHECK_THROWS_AS(export_grid(g, "", GridFormat::csv), std::runtime_error);
    CHECK_THROWS_AS(export_grid(g, "/nonexistent_dir_xyz/a.csv", GridFormat::csv),
                    std::runtime_error);
  }
}
