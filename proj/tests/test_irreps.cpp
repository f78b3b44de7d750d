#include <catch2/catch_amalgamated.hpp>

#include "deqh/irreps.hpp"
#include "oracles.hpp"

using namespace deqh;
using namespace deqh::so3;
using Catch::Matchers::WithinAbs;

TEST_CASE("IrrepSpec canonical order and dimensions", "[irreps]") {
  IrrepSpec spec{{2, 4}, {0, 16}, {1, 8}, {0, 3}};
  REQUIRE(spec.num_segments() == 4);
  CHECK(spec.segments()[0].l == 0);
  CHECK(spec.segments()[0].mul == 16);  // stable within l
  CHECK(spec.segments()[1].mul == 3);
  CHECK(spec.segments()[2].l == 1);
  CHECK(spec.segments()[3].l == 2);
  CHECK(spec.flat_dim() == 16 + 3 + 8 * 3 + 4 * 5);
  CHECK_THROWS_AS(IrrepSpec({{-1, 2}}), contract_error);
  CHECK_THROWS_AS(IrrepSpec({{1, 0}}), contract_error);
}

TEST_CASE("real spherical harmonics: fixed values", "[irreps]") {
  Rng rng(7);
  for (int i = 0; i < 5; ++i) {
    Vec3 u = rng.normal_matrix(3, 1);
    u.normalize();
    CHECK_THAT(real_sph_harm(0, 0, u), WithinAbs(0.28209479177387814, 1e-14));
  }
  CHECK_THAT(real_sph_harm(1, 0, Vec3(0, 0, 1)), WithinAbs(std::sqrt(3.0 / (4.0 * M_PI)), 1e-14));
}

TEST_CASE("real spherical harmonics: addition theorem", "[irreps]") {
  Rng rng(11);
  for (int l = 0; l <= 4; ++l) {
    Vec3 u = rng.normal_matrix(3, 1);
    u.normalize();
    double s = 0.0;
    for (int m = -l; m <= l; ++m) s += std::pow(real_sph_harm(l, m, u), 2);
    CHECK_THAT(s, WithinAbs((2.0 * l + 1.0) / (4.0 * M_PI), 1e-12));
  }
}

TEST_CASE("real spherical harmonics: input validation", "[irreps]") {
  CHECK_THROWS_AS(real_sph_harm(1, 2, Vec3(0, 0, 1)), contract_error);
  CHECK_THROWS_AS(real_sph_harm(1, 0, Vec3(0, 0, 2)), contract_error);
  // within 1e-6 of unit: normalized internally
  double v = real_sph_harm(1, 0, Vec3(0, 0, 1.0 + 5e-7));
  CHECK_THAT(v, WithinAbs(std::sqrt(3.0 / (4.0 * M_PI)), 1e-9));
}

TEST_CASE("real spherical harmonics match the (c2r) combination of complex ones", "[irreps]") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 u = rng.normal_matrix(3, 1);
    u.normalize();
    for (int l = 0; l <= 4; ++l)
      for (int m = -l; m <= l; ++m)
        REQUIRE_THAT(real_sph_harm(l, m, u),
                     WithinAbs(oracle::sph_harm_real_via_c2r(l, m, u), 1e-12));
  }
}

TEST_CASE("real spherical harmonics: unit L2 norm by quadrature", "[irreps]") {
  for (auto [l, m] : std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, -1}, {3, 2}, {4, -4}}) {
    double n2 = oracle::sphere_integral(
        [&](const Vec3& u) { return std::pow(real_sph_harm(l, m, u), 2); });
    CHECK_THAT(n2, WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("wigner_3j: fixed values and selection rules", "[irreps]") {
  CHECK(wigner_3j(1, 1, 1, 0, 0, 0) == 0.0);  // odd parity, exact zero
  CHECK_THAT(wigner_3j(0, 0, 0, 0, 0, 0), WithinAbs(1.0, 1e-15));
  CHECK_THAT(wigner_3j(1, 1, 0, 0, 0, 0), WithinAbs(-1.0 / std::sqrt(3.0), 1e-14));
  CHECK(wigner_3j(1, 2, 5, 0, 0, 0) == 0.0);    // triangle violation
  CHECK(wigner_3j(2, 2, 2, 1, 0, 0) == 0.0);    // m-sum violation
  CHECK_THROWS_AS(wigner_3j(-1, 0, 1, 0, 0, 0), contract_error);
}

TEST_CASE("wigner_3j matches the independent Racah oracle", "[irreps]") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    int l1 = rng.uniform_int(0, 4), l2 = rng.uniform_int(0, 4);
    int l3 = rng.uniform_int(std::abs(l1 - l2), l1 + l2);
    int m1 = rng.uniform_int(-l1, l1), m2 = rng.uniform_int(-l2, l2);
    int m3 = -m1 - m2;
    if (std::abs(m3) > l3) continue;
    REQUIRE_THAT(wigner_3j(l1, l2, l3, m1, m2, m3),
                 WithinAbs(oracle::wigner_3j(l1, l2, l3, m1, m2, m3), 1e-13));
  }
}

TEST_CASE("clebsch_gordan: scalar and vector channels", "[irreps]") {
  const CGTensor& t000 = clebsch_gordan(0, 0, 0);
  REQUIRE(t000.coeffs.size() == 1);
  CHECK_THAT(t000.coeff(0, 0, 0), WithinAbs(1.0, 1e-14));

  // 1x1->0 is proportional to delta_{m1,m2}
  const CGTensor& t110 = clebsch_gordan(1, 1, 0);
  double diag = t110.coeff(0, 0, 0);
  CHECK(std::abs(diag) > 0.1);
  for (int m1 = -1; m1 <= 1; ++m1)
    for (int m2 = -1; m2 <= 1; ++m2) {
      if (m1 == m2)
        CHECK_THAT(t110.coeff(m1, m2, 0), WithinAbs(diag, 1e-14));
      else
        CHECK_THAT(t110.coeff(m1, m2, 0), WithinAbs(0.0, 1e-14));
    }

  // triangle violation: all-zero tensor
  const CGTensor& tbad = clebsch_gordan(1, 1, 3);
  for (double c : tbad.coeffs) CHECK(c == 0.0);
  CHECK_THROWS_AS(clebsch_gordan(-1, 0, 1), contract_error);
}

TEST_CASE("clebsch_gordan: 1x1->1 acts as the cross product", "[irreps]") {
  // Real m ordering is (-1,0,1) <-> (y,z,x).
  const CGTensor& t = clebsch_gordan(1, 1, 1);
  Rng rng(23);
  auto to_xyz = [](const Vec& m) { return Vec3(m[2], m[0], m[1]); };
  auto to_m = [](const Vec3& v) { return Vec((Vec(3) << v.y(), v.z(), v.x()).finished()); };
  Vec3 a(rng.normal(), rng.normal(), rng.normal()), b(rng.normal(), rng.normal(), rng.normal());
  Vec am = to_m(a), bm = to_m(b);
  Vec out = Vec::Zero(3);
  for (const auto& e : t.nnz) out[e.m3] += e.v * am[e.m1] * bm[e.m2];
  Vec3 cross = a.cross(b);
  Vec3 got = to_xyz(out);
  double scale = got.norm() / cross.norm();
  CHECK(scale > 1e-3);
  CHECK((got / scale - cross).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("clebsch_gordan: orthogonality for all l <= 4", "[irreps]") {
  for (int l1 = 0; l1 <= 4; ++l1)
    for (int l2 = 0; l2 <= 4; ++l2)
      for (int l3 = std::abs(l1 - l2); l3 <= std::min(4, l1 + l2); ++l3)
        for (int l3p = std::abs(l1 - l2); l3p <= std::min(4, l1 + l2); ++l3p) {
          const CGTensor& a = clebsch_gordan(l1, l2, l3);
          const CGTensor& b = clebsch_gordan(l1, l2, l3p);
          for (int m3 = -l3; m3 <= l3; ++m3)
            for (int m3p = -l3p; m3p <= l3p; ++m3p) {
              double s = 0.0;
              for (int m1 = -l1; m1 <= l1; ++m1)
                for (int m2 = -l2; m2 <= l2; ++m2)
                  s += a.coeff(m1, m2, m3) * b.coeff(m1, m2, m3p);
              double expect = (l3 == l3p && m3 == m3p) ? 1.0 : 0.0;
              REQUIRE_THAT(s, WithinAbs(expect, 1e-12));
            }
        }
}

TEST_CASE("wigner_d: identity, orthogonality, homomorphism", "[irreps]") {
  Rng rng(29);
  for (int l = 0; l <= 4; ++l) {
    Mat d = wigner_d(l, Rotation::identity());
    CHECK((d - Mat::Identity(2 * l + 1, 2 * l + 1)).cwiseAbs().maxCoeff() < 1e-13);
  }
  for (int trial = 0; trial < 10; ++trial) {
    Rotation r1 = Rotation::random(rng), r2 = Rotation::random(rng);
    Rotation r12 = r1 * r2;
    for (int l = 0; l <= 4; ++l) {
      Mat d1 = wigner_d(l, r1), d2 = wigner_d(l, r2), d12 = wigner_d(l, r12);
      CHECK((d1 * d1.transpose() - Mat::Identity(2 * l + 1, 2 * l + 1)).cwiseAbs().maxCoeff() <
            1e-12);
      CHECK((d12 - d1 * d2).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("wigner_d at l=1 is R in the (y,z,x) ordering", "[irreps]") {
  Rng rng(31);
  Mat p = Mat::Zero(3, 3);  // (m=-1,0,1) <- (y,z,x)
  p(0, 1) = 1;
  p(1, 2) = 1;
  p(2, 0) = 1;
  for (int trial = 0; trial < 20; ++trial) {
    Rotation r = Rotation::random(rng);
    Mat d = wigner_d(1, r);
    CHECK((d - p * r.matrix() * p.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("spherical-harmonic equivariance Y(Ru) = D(R) Y(u)", "[irreps]") {
  Rng rng(37);
  for (int trial = 0; trial < 100; ++trial) {
    int l = rng.uniform_int(0, 4);
    Rotation r = Rotation::random(rng);
    Vec3 u = rng.normal_matrix(3, 1);
    u.normalize();
    Vec3 ru = r.matrix() * u;
    Mat d = wigner_d(l, r);
    Vec yu(2 * l + 1), yru(2 * l + 1);
    for (int m = -l; m <= l; ++m) {
      yu[m + l] = real_sph_harm(l, m, u);
      yru[m + l] = real_sph_harm(l, m, ru);
    }
    REQUIRE((yru - d * yu).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("tensor_product: scalar coupling is the identity", "[irreps]") {
  Rng rng(41);
  IrrepSpec xs{{0, 2}, {1, 1}, {2, 1}};
  IrrepsVector x(xs, rng.normal_matrix(xs.flat_dim(), 1));
  IrrepSpec ys{{0, 1}};
  IrrepsVector y(ys, Vec::Ones(1));
  auto paths = tensor_product_paths(xs, ys, xs);
  std::vector<double> w(paths.size(), 1.0);
  IrrepsVector out = tensor_product(x, y, w, xs);
  CHECK((out.data - x.data).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("tensor_product: v x v scalar channel is |v|^2 up to a constant", "[irreps]") {
  Rng rng(43);
  IrrepSpec vs{{1, 1}};
  IrrepsVector v(vs, rng.normal_matrix(3, 1));
  IrrepSpec os{{0, 1}};
  IrrepsVector out = tensor_product(v, v, {1.0}, os);
  // oracle: direct CG contraction
  const CGTensor& t = clebsch_gordan(1, 1, 0);
  double expect = 0.0;
  for (int m1 = -1; m1 <= 1; ++m1)
    for (int m2 = -1; m2 <= 1; ++m2) expect += t.coeff(m1, m2, 0) * v.data[m1 + 1] * v.data[m2 + 1];
  CHECK_THAT(out.data[0], WithinAbs(expect, 1e-14));
  double ratio = out.data[0] / v.data.squaredNorm();
  CHECK(std::abs(ratio) > 1e-3);  // proportional to |v|^2 with a fixed constant
  IrrepsVector v2(vs, 2.0 * v.data);
  IrrepsVector out2 = tensor_product(v2, v2, {1.0}, os);
  CHECK_THAT(out2.data[0], WithinAbs(4.0 * out.data[0], 1e-12));
}

TEST_CASE("tensor_product: equivariance under random rotations", "[irreps]") {
  Rng rng(47);
  IrrepSpec xs{{0, 1}, {1, 1}, {2, 1}};
  IrrepSpec ys{{0, 1}, {1, 1}};
  IrrepSpec os{{0, 1}, {1, 1}, {2, 1}, {3, 1}};
  auto paths = tensor_product_paths(xs, ys, os);
  std::vector<double> w(paths.size());
  for (size_t p = 0; p < paths.size(); ++p) w[p] = 0.3 + 0.1 * static_cast<double>(p);
  for (int trial = 0; trial < 20; ++trial) {
    IrrepsVector x(xs, rng.normal_matrix(xs.flat_dim(), 1));
    IrrepsVector y(ys, rng.normal_matrix(ys.flat_dim(), 1));
    Rotation r = Rotation::random(rng);
    IrrepsVector dx(xs, wigner_d_spec(xs, r) * x.data);
    IrrepsVector dy(ys, wigner_d_spec(ys, r) * y.data);
    Vec lhs = tensor_product(dx, dy, w, os).data;
    Vec rhs = wigner_d_spec(os, r) * tensor_product(x, y, w, os).data;
    REQUIRE((lhs - rhs).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("tensor_product: weight shape mismatch rejected", "[irreps]") {
  IrrepSpec xs{{0, 1}};
  IrrepsVector x(xs, Vec::Ones(1));
  CHECK_THROWS_AS(tensor_product(x, x, {1.0, 2.0}, xs), contract_error);
}

TEST_CASE("tensor_expansion: scalar block and triangle check", "[irreps]") {
  Vec w(1);
  w << 1.75;
  Mat b = tensor_expansion(w, 0, 0, 0);
  REQUIRE(b.rows() == 1);
  CHECK_THAT(b(0, 0), WithinAbs(1.75, 1e-15));
  CHECK_THROWS_AS(tensor_expansion(Vec::Ones(7), 1, 1, 3), contract_error);
  CHECK_THROWS_AS(tensor_expansion(Vec::Ones(3), 1, 1, 3), contract_error);
}

TEST_CASE("tensor_expansion: contract-then-expand returns w exactly", "[irreps]") {
  Rng rng(53);
  for (auto [l1, l2, l3] :
       std::vector<std::array<int, 3>>{{1, 1, 0}, {1, 1, 1}, {1, 1, 2}, {2, 1, 1}, {2, 2, 4}}) {
    Vec w = rng.normal_matrix(2 * l3 + 1, 1);
    Mat block = tensor_expansion(w, l1, l2, l3);
    const CGTensor& cg = clebsch_gordan(l1, l2, l3);
    Vec back = Vec::Zero(2 * l3 + 1);
    for (const auto& e : cg.nnz) back[e.m3] += e.v * block(e.m1, e.m2);
    REQUIRE((back - w).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("tensor_expansion: 1x1 block of a degree-1 vector matches the CG sum", "[irreps]") {
  Rng rng(59);
  Vec w = rng.normal_matrix(3, 1);
  Mat block = tensor_expansion(w, 1, 1, 1);
  const CGTensor& cg = clebsch_gordan(1, 1, 1);
  for (int m1 = -1; m1 <= 1; ++m1)
    for (int m2 = -1; m2 <= 1; ++m2) {
      double expect = 0.0;
      for (int m3 = -1; m3 <= 1; ++m3) expect += cg.coeff(m1, m2, m3) * w[m3 + 1];
      REQUIRE_THAT(block(m1 + 1, m2 + 1), WithinAbs(expect, 1e-14));
    }
  // antisymmetric structure (cross-product channel)
  CHECK((block + block.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tensor_expansion is the adjoint of the unit-weight tensor product", "[irreps]") {
  Rng rng(61);
  for (auto [l1, l2, l3] : std::vector<std::array<int, 3>>{{1, 1, 2}, {2, 1, 2}, {2, 2, 0}}) {
    IrrepSpec s1{{l1, 1}}, s2{{l2, 1}}, s3{{l3, 1}};
    IrrepsVector x(s1, rng.normal_matrix(2 * l1 + 1, 1));
    IrrepsVector y(s2, rng.normal_matrix(2 * l2 + 1, 1));
    Vec w = rng.normal_matrix(2 * l3 + 1, 1);
    Vec tp = tensor_product(x, y, {1.0}, s3).data;
    Mat outer = x.data * y.data.transpose();
    double lhs = tp.dot(w);
    double rhs = (outer.array() * tensor_expansion(w, l1, l2, l3).array()).sum();
    REQUIRE_THAT(lhs, WithinAbs(rhs, 1e-12));
  }
}

TEST_CASE("rotation validation", "[irreps]") {
  Mat3 improper = -Mat3::Identity();
  CHECK_THROWS_AS(Rotation(improper), contract_error);
  Mat3 notorth = Mat3::Identity() * 1.001;
  CHECK_THROWS_AS(Rotation(notorth), contract_error);
}

TEST_CASE("cg table csv dump", "[irreps]") {
  std::string path = "cg_tables_test.csv";
  dump_cg_csv(2, path);
  std::ifstream f(path);
  REQUIRE(f.good());
  std::string header;
  std::getline(f, header);
  CHECK(header == "l1,l2,l3,m1,m2,m3,value");
  int lines = 0;
  std::string line;
  while (std::getline(f, line)) ++lines;
  CHECK(lines > 10);
  std::remove(path.c_str());
}
