#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tvc/io.hpp"
#include "tvc/simgen.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace tvc;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("tvc_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

DatasetBundle small_bundle(std::uint64_t seed) {
  SimDesign d;
  d.scenario = Scenario::Linear;
  d.strategy = 'b';
  d.shape = {4, 4};
  d.n_train = 5;
  d.n_test = 2;
  d.seed = seed;
  SimDataset sim = generate(d);
  DatasetBundle b;
  b.data = std::move(sim.data);
  b.intercept_true = std::move(sim.intercept_true);
  b.slope_true = std::move(sim.slope_true);
  b.effect_true = std::move(sim.effect_true);
  b.generation = {{"scenario", "4"}, {"seed", seed}};
  return b;
}

bool files_equal(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return !sa.empty() && sa == sb;
}

Chain tiny_chain(const Dataset& ds, std::uint64_t seed, Index iters = 6) {
  ModelConfig cfg;
  cfg.rank = 1;
  cfg.iterations = iters;
  cfg.threads = 1;
  return run_chain(cfg, ds, seed);
}

}  // namespace

TEST_CASE("dataset round trip is bit-identical") {
  TempDir tmp;
  DatasetBundle b = small_bundle(71);
  save_dataset(tmp.str("ds"), b);
  DatasetBundle r = load_dataset(tmp.str("ds"));

  REQUIRE(r.data.n_subjects() == b.data.n_subjects());
  for (Index i = 0; i < b.data.n_subjects(); ++i) {
    CHECK((r.data.x[static_cast<std::size_t>(i)].vec() -
           b.data.x[static_cast<std::size_t>(i)].vec()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((r.data.y[static_cast<std::size_t>(i)].vec() -
           b.data.y[static_cast<std::size_t>(i)].vec()).cwiseAbs().maxCoeff() == 0.0);
    CHECK((r.effect_true[static_cast<std::size_t>(i)].vec() -
           b.effect_true[static_cast<std::size_t>(i)].vec()).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(r.data.train_idx == b.data.train_idx);
  CHECK(r.data.test_idx == b.data.test_idx);
  CHECK(r.generation.at("scenario") == "4");
}

TEST_CASE("missing subject file is reported by name") {
  TempDir tmp;
  save_dataset(tmp.str("ds"), small_bundle(72));
  fs::remove(tmp.path / "ds" / "x_0003.bin");
  try {
    load_dataset(tmp.str("ds"));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("x_0003.bin") != std::string::npos);
  }
}

TEST_CASE("payload size mismatch and non-finite payloads are distinct diagnostics") {
  TempDir tmp;
  save_dataset(tmp.str("ds"), small_bundle(73));
  // truncate one file
  {
    fs::resize_file(tmp.path / "ds" / "y_0001.bin", 64);
    try {
      load_dataset(tmp.str("ds"));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("size mismatch") != std::string::npos);
    }
  }
  // rewrite with a NaN
  {
    TempDir tmp2;
    save_dataset(tmp2.str("ds"), small_bundle(74));
    std::fstream f(tmp2.path / "ds" / "y_0000.bin",
                   std::ios::binary | std::ios::in | std::ios::out);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    f.write(reinterpret_cast<const char*>(&nan), 8);
    f.close();
    CHECK_THROWS_AS(load_dataset(tmp2.str("ds")), DataError);
  }
}

TEST_CASE("a voxel that is zero for every subject never enters the group mask") {
  TempDir tmp;
  DatasetBundle b = small_bundle(75);
  for (auto& x : b.data.x) x[5] = 0.0;
  b.data.subject_mask.clear();  // re-derive from the zero pattern
  b.data.finalize();
  save_dataset(tmp.str("ds"), b);
  DatasetBundle r = load_dataset(tmp.str("ds"));
  for (double tau : {0.1, 0.5, 1.0}) {
    const MaskSet m = build_group_mask(r.data, tau);
    CHECK(m.group[5] == 0);
  }
}

TEST_CASE("chain save/load round trip") {
  TempDir tmp;
  DatasetBundle b = small_bundle(76);
  Chain chain = tiny_chain(b.data, 77);
  save_chain(tmp.str("c1.bin"), chain);
  Chain back = load_chain(tmp.str("c1.bin"));
  save_chain(tmp.str("c2.bin"), back);
  CHECK(files_equal(tmp.str("c1.bin"), tmp.str("c2.bin")));
  CHECK(back.states.size() == chain.states.size());
  CHECK(back.seed == chain.seed);
  CHECK(back.sigma2_phi2_final == chain.sigma2_phi2_final);
  CHECK((back.traces - chain.traces).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.states.back().state.atoms == chain.states.back().state.atoms);
}

TEST_CASE("an empty chain is loadable") {
  TempDir tmp;
  Chain chain;
  chain.config = ModelConfig{};
  chain.shape = {2, 2};
  chain.seed = 1;
  chain.traces.resize(0, 0);
  save_chain(tmp.str("empty.bin"), chain);
  Chain back = load_chain(tmp.str("empty.bin"));
  CHECK(back.states.empty());
}

TEST_CASE("corruption is detected, not silently truncated") {
  TempDir tmp;
  DatasetBundle b = small_bundle(78);
  Chain chain = tiny_chain(b.data, 79);
  save_chain(tmp.str("c.bin"), chain);

  // trailing garbage
  {
    fs::copy_file(tmp.str("c.bin"), tmp.str("trail.bin"));
    std::ofstream f(tmp.str("trail.bin"), std::ios::binary | std::ios::app);
    f.put('x');
    f.close();
    CHECK_THROWS_AS(load_chain(tmp.str("trail.bin")), DataError);
  }
  // flipped payload byte
  {
    fs::copy_file(tmp.str("c.bin"), tmp.str("flip.bin"));
    std::fstream f(tmp.str("flip.bin"), std::ios::binary | std::ios::in | std::ios::out);
    const auto size = fs::file_size(tmp.str("flip.bin"));
    f.seekp(static_cast<std::streamoff>(size / 2));
    f.put('\x5a');
    f.close();
    try {
      load_chain(tmp.str("flip.bin"));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK((msg.find("integrity") != std::string::npos || msg.find("parse") != std::string::npos));
    }
  }
}

TEST_CASE("chain version mismatch refuses with both versions printed") {
  TempDir tmp;
  DatasetBundle b = small_bundle(80);
  Chain chain = tiny_chain(b.data, 81, 4);
  save_chain(tmp.str("c.bin"), chain);
  // patch "version":1 to "version":9 inside the header (same byte length)
  std::fstream f(tmp.str("c.bin"), std::ios::binary | std::ios::in | std::ios::out);
  std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto pos = content.find("\"version\":1");
  REQUIRE(pos != std::string::npos);
  f.seekp(static_cast<std::streamoff>(pos + std::string("\"version\":").size()));
  f.put('9');
  f.close();
  try {
    load_chain(tmp.str("c.bin"));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("9") != std::string::npos);
    CHECK(msg.find("1") != std::string::npos);
  }
}

TEST_CASE("config round trip with partial overrides") {
  TempDir tmp;
  {
    std::ofstream f(tmp.str("cfg.json"));
    f << R"({"rank": 3, "iterations": 123, "mask_threshold": 0.9})";
  }
  const ModelConfig c = load_config(tmp.str("cfg.json"));
  CHECK(c.rank == 3);
  CHECK(c.iterations == 123);
  CHECK(c.mask_threshold == 0.9);
  CHECK(c.patch_size == 3);  // default preserved

  save_config(tmp.str("full.json"), c);
  const ModelConfig d = load_config(tmp.str("full.json"));
  CHECK(d.rank == c.rank);
  CHECK(d.a_e == c.a_e);
}
