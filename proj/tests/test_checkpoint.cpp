#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstdint>
#include <fstream>

#include "evanet/checkpoint.hpp"
#include "testutil.hpp"

using namespace evanet;

TEST_CASE("checkpoint round-trips bit-exactly") {
  testutil::TempDir tmp("evaw");
  Rng rng(2024);
  NamedTensors saved;
  saved.emplace_back("weights.w1", Tensor::uniform({7, 3}, -5.0, 5.0, rng));
  saved.emplace_back("weights.b1", Tensor::from_data({4}, {0.0, -0.0, 1e-300, 3.141592653589793}));
  saved.emplace_back("scalar", Tensor::scalar(-123.456789));

  const std::string path = tmp.file("model.evaw");
  save_checkpoint(path, saved);
  NamedTensors loaded = load_checkpoint(path);

  REQUIRE(loaded.size() == saved.size());
  for (std::size_t i = 0; i < saved.size(); ++i) {
    CHECK(loaded[i].first == saved[i].first);
    REQUIRE(loaded[i].second.shape() == saved[i].second.shape());
    for (std::size_t j = 0; j < saved[i].second.numel(); ++j) {
      const auto a = std::bit_cast<std::uint64_t>(saved[i].second.values()[j]);
      const auto b = std::bit_cast<std::uint64_t>(loaded[i].second.values()[j]);
      CHECK(a == b);
    }
  }
}

TEST_CASE("checkpoint loader rejects bad inputs") {
  testutil::TempDir tmp("evaw-bad");

  SUBCASE("unknown magic") {
    const std::string path = tmp.file("bad_magic.evaw");
    std::ofstream(path, std::ios::binary) << "NOPE\x01\x00";
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  }
  SUBCASE("unknown version") {
    const std::string path = tmp.file("bad_version.evaw");
    std::ofstream(path, std::ios::binary) << "EVAW\x07\x00";
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  }
  SUBCASE("truncated payload reports an offset") {
    const std::string path = tmp.file("trunc.evaw");
    NamedTensors one;
    one.emplace_back("t", Tensor::ones({4}));
    save_checkpoint(path, one);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() - 5);
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("offset"), ParseError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.evaw")), IoError);
  }
}
