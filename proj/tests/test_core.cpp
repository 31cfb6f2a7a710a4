#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "patchsmith/common.hpp"
#include "patchsmith/rng.hpp"
#include "patchsmith/tensor.hpp"

using namespace patchsmith;

TEST_CASE("tensor shape and access") {
  Tensor t({3, 4, 5}, 0.5);
  REQUIRE(t.numel() == 60);
  REQUIRE(t.rank() == 3);
  t.at(2, 3, 4) = 9.0;
  REQUIRE(t[t.numel() - 1] == 9.0);
  REQUIRE(t.at(0, 0, 0) == 0.5);

  REQUIRE_THROWS_AS(Tensor({3, 0}), std::invalid_argument);
  REQUIRE_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("tensor digest distinguishes values and shapes") {
  Tensor a = Tensor::from_data({4}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({4}, {1, 2, 3, 5});
  Tensor c = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  REQUIRE(tensor_digest(a) != tensor_digest(b));
  REQUIRE(tensor_digest(a) != tensor_digest(c));
  REQUIRE(tensor_digest(a) == tensor_digest(Tensor::from_data({4}, {1, 2, 3, 4})));
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.0, 1.0, -1.5, 0.1, 1e-300, 3.141592653589793, 1e17, -7.25e-9}) {
    std::string s = format_double(v);
    REQUIRE(std::stod(s) == v);
  }
}

TEST_CASE("rng determinism and seed separation") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 100; ++i) {
    double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && (va == vb);
    any_diff = any_diff || (va != vc);
    REQUIRE(va >= 0.0);
    REQUIRE(va < 1.0);
  }
  REQUIRE(all_equal);
  REQUIRE(any_diff);

  REQUIRE(derive_seed(7, 1) != derive_seed(7, 2));
  REQUIRE(derive_seed(7, 1) != derive_seed(8, 1));
  REQUIRE(derive_seed(7, 1) == derive_seed(7, 1));
}

TEST_CASE("rng normal moments") {
  Rng r(1234);
  const int n = 200000;
  double sum = 0, sum2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    sum += v;
    sum2 += v * v;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  // MC standard errors: mean ~ 1/sqrt(n), var ~ sqrt(2/n).
  REQUIRE(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n)));
  REQUIRE(std::abs(var - 1.0) < 4.0 * std::sqrt(2.0 / n));
}

TEST_CASE("rng permutation is a permutation") {
  Rng r(5);
  auto p = r.permutation(17);
  std::vector<bool> seen(17, false);
  for (int v : p) {
    REQUIRE(v >= 0);
    REQUIRE(v < 17);
    REQUIRE(!seen[static_cast<std::size_t>(v)]);
    seen[static_cast<std::size_t>(v)] = true;
  }
}

TEST_CASE("text file round trip") {
  auto dir = std::filesystem::temp_directory_path() / "patchsmith_core_test";
  std::filesystem::create_directories(dir);
  auto p = dir / "x.txt";
  write_text_file(p, "hello\nworld\n");
  REQUIRE(read_text_file(p) == "hello\nworld\n");
  REQUIRE_THROWS_AS(read_text_file(dir / "missing.txt"), MissingAsset);
  std::filesystem::remove_all(dir);
}
