#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "support.hpp"

using namespace metagrad;
using namespace testing;

TEST_CASE("bisection spine") {
  CheckpointStore store(RetentionPolicy::Bisection, 8);
  std::vector<long> kept;
  for (long t = 0; t < 8; ++t)
    if (store.wants(t)) kept.push_back(t);
  CHECK(kept == std::vector<long>{0, 4, 6, 7});

  CheckpointStore big(RetentionPolicy::Bisection, 1024);
  long count = 0;
  for (long t = 0; t < 1024; ++t) count += big.wants(t) ? 1 : 0;
  CHECK(count == 11);

  CheckpointStore all(RetentionPolicy::RetainAll, 5);
  for (long t = 0; t < 5; ++t) CHECK(all.wants(t));
  CHECK_FALSE(all.wants(5));
}

TEST_CASE("states survive a save/load round trip bit-exactly") {
  for (const auto& rule : {sgd(0.1), momentum(0.05), adam(0.01)}) {
    const TrainPlan plan = mlp_plan(rule, 20, 4, 3);
    const auto [final_state, store] = train_recorded(plan, ones_weights(20));
    const auto dir = scratch_dir("store");
    store.save(dir);
    const CheckpointStore loaded = CheckpointStore::load(dir, plan.rule);
    CHECK(loaded.size() == store.size());
    CHECK(loaded.total_steps() == store.total_steps());
    CHECK(loaded.final_state().bit_equal(final_state));
    for (const auto& [step, s] : store.states())
      CHECK(loaded.at(step).bit_equal(s));
  }
}

TEST_CASE("special values round trip") {
  const auto dir = scratch_dir("values");
  VectorXd v(5);
  v << 0.0, -0.0, 1e-310, -std::numeric_limits<double>::max(), 0.1;
  write_values(dir / "v.bin", v);
  const VectorXd back = read_values(dir / "v.bin");
  REQUIRE(back.size() == 5);
  CHECK(std::memcmp(back.data(), v.data(), 5 * sizeof(double)) == 0);
  CHECK(std::filesystem::file_size(dir / "v.bin") == 32 + 4 + 5 * 8);
}

TEST_CASE("the file header is little-endian with the documented layout") {
  const auto dir = scratch_dir("header");
  const UpdateRule rule = adam(0.1);
  OptimizerState s = OptimizerState::initial(rule, VectorXd::Ones(2));
  s.step = 7;
  write_state(dir / "s.bin", s, rule);
  std::ifstream in(dir / "s.bin", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 32 + 3 * 4 + 3 * 2 * 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 7) == "MGSTATE");
  CHECK(bytes[7] == 0);
  CHECK(bytes[8] == 1);   // version
  CHECK(bytes[12] == 3);  // blocks
  CHECK(bytes[16] == 2);  // block length
  CHECK(bytes[24] == 7);  // step
  CHECK(bytes[32] == 0);  // params
  CHECK(bytes[36] == 2);  // first moment
  CHECK(bytes[40] == 3);  // second moment
}

TEST_CASE("corrupt files are rejected") {
  const auto dir = scratch_dir("corrupt");
  const UpdateRule rule = sgd(0.1);
  OptimizerState s = OptimizerState::initial(rule, VectorXd::Ones(3));
  write_state(dir / "s.bin", s, rule);
  const auto size = std::filesystem::file_size(dir / "s.bin");

  std::filesystem::copy_file(dir / "s.bin", dir / "short.bin");
  std::filesystem::resize_file(dir / "short.bin", size - 3);
  CHECK_THROWS_AS(read_state(dir / "short.bin", rule), Error);

  std::filesystem::copy_file(dir / "s.bin", dir / "long.bin");
  std::ofstream(dir / "long.bin", std::ios::app | std::ios::binary) << 'x';
  CHECK_THROWS_AS(read_state(dir / "long.bin", rule), Error);

  {
    std::fstream f(dir / "s.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(read_state(dir / "s.bin", rule), Error);

  OptimizerState a = OptimizerState::initial(adam(0.1), VectorXd::Ones(3));
  write_state(dir / "adam.bin", a, adam(0.1));
  CHECK_THROWS_AS(read_state(dir / "adam.bin", rule), Error);
  CHECK_THROWS_AS(CheckpointStore::load(dir / "nowhere", rule), Error);
}

TEST_CASE("missing states fail with the step index") {
  CheckpointStore store(RetentionPolicy::Bisection, 4);
  try {
    store.at(2);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
    CHECK(std::string(e.what()).find('2') != std::string::npos);
  }
}
