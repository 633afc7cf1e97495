#include <cmath>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "mmlop/prompts.hpp"
#include "support/test_support.hpp"

using namespace mmlop;
using namespace mmlop::prompts;
using mmlop::testing::singular_values;

TEST_SUITE_BEGIN("prompts");

namespace {

PromptConfig shared_cfg(std::size_t depth = 2, std::size_t len = 4, std::size_t rank = 1,
                        std::size_t d_v = 32, std::size_t d_t = 24) {
  PromptConfig cfg;
  cfg.mode = Mode::kShared;
  cfg.depth = depth;
  cfg.length = len;
  cfg.v_length = len;
  cfg.rank = rank;
  cfg.d_v = d_v;
  cfg.d_t = d_t;
  return cfg;
}

std::size_t stack_entries(const PromptStack& stack) {
  std::size_t n = 0;
  for (const auto& b : stack.blocks()) n += b.tensor->size();
  return n;
}

}  // namespace

TEST_CASE("config validation names the violated constraint") {
  PromptConfig cfg = shared_cfg();
  cfg.rank = 30;  // > min(d_v, d_t) = 24
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("rank"), std::invalid_argument);
  cfg = shared_cfg();
  cfg.v_length = 2;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("T = V"), std::invalid_argument);
  cfg = shared_cfg();
  cfg.length = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(init_stack(cfg, 0), std::invalid_argument);
}

TEST_CASE("init is deterministic per (cfg, seed)") {
  PromptConfig cfg = shared_cfg();
  PromptStack a = init_stack(cfg, 42);
  PromptStack b = init_stack(cfg, 42);
  PromptStack c = init_stack(cfg, 43);
  auto ab = a.blocks();
  auto bb = b.blocks();
  auto cb = c.blocks();
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    if (ab[i].tensor->data != bb[i].tensor->data) all_equal = false;
    if (ab[i].tensor->data != cb[i].tensor->data) any_diff = true;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("init sample standard deviation matches init_std") {
  PromptConfig cfg = shared_cfg(4, 4, 2, 700, 700);  // > 1e4 entries
  PromptStack stack = init_stack(cfg, 7);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& b : stack.blocks()) {
    for (double x : b.tensor->data) {
      sum += x;
      sq += x * x;
      ++n;
    }
  }
  REQUIRE(n >= 10000);
  double mean = sum / n;
  double stddev = std::sqrt(sq / n - mean * mean);
  CHECK(stddev == doctest::Approx(0.05).epsilon(0.05));
}

TEST_CASE("init_std zero gives all-zero factors and prompts") {
  PromptConfig cfg = shared_cfg();
  cfg.init_std = 0.0;
  PromptStack stack = init_stack(cfg, 3);
  for (const auto& b : stack.blocks()) {
    for (double x : b.tensor->data) CHECK(x == 0.0);
  }
  auto [pv, pt] = materialize(stack, 1);
  for (double x : pv.data) CHECK(x == 0.0);
  for (double x : pt.data) CHECK(x == 0.0);
}

TEST_CASE("materialize rank-1 product") {
  PromptConfig cfg = shared_cfg(1, 2, 1, 2, 2);
  PromptStack stack = init_stack(cfg, 0);
  stack.u[0] = Tensor::matrix(2, 1, {1, 2});
  stack.v_v[0] = Tensor::matrix(1, 2, {3, 4});
  auto [pv, pt] = materialize(stack, 1);
  CHECK(pv.data == std::vector<double>{3, 4, 6, 8});
}

TEST_CASE("materialize layer range") {
  PromptStack stack = init_stack(shared_cfg(2), 0);
  CHECK_THROWS_AS(materialize(stack, 0), std::out_of_range);
  CHECK_THROWS_AS(materialize(stack, 3), std::out_of_range);
}

TEST_CASE("full-rank materialize returns stored matrices bitwise") {
  PromptConfig cfg = shared_cfg();
  cfg.mode = Mode::kFullRank;
  PromptStack stack = init_stack(cfg, 5);
  auto [pv, pt] = materialize(stack, 2);
  CHECK(pv.data == stack.p_v[1].data);
  CHECK(pt.data == stack.p_t[1].data);
}

TEST_CASE("shared mode bounds the rank of [P_v | P_t]") {
  for (std::size_t rank : {std::size_t{1}, std::size_t{2}}) {
    PromptConfig cfg = shared_cfg(3, 4, rank);
    PromptStack stack = init_stack(cfg, 21);
    for (std::size_t l = 1; l <= cfg.depth; ++l) {
      auto [pv, pt] = materialize(stack, l);
      Tensor joint = Tensor::zeros(cfg.length, cfg.d_v + cfg.d_t);
      for (std::size_t i = 0; i < cfg.length; ++i) {
        for (std::size_t j = 0; j < cfg.d_v; ++j) joint.at(i, j) = pv.at(i, j);
        for (std::size_t j = 0; j < cfg.d_t; ++j) joint.at(i, cfg.d_v + j) = pt.at(i, j);
      }
      auto sv = singular_values(joint);
      REQUIRE(sv.size() > rank);
      CHECK(sv[rank] < 1e-8 * sv[0]);
    }
  }
}

TEST_CASE("independent mode does not bound the joint rank") {
  PromptConfig cfg = shared_cfg(1, 4, 1);
  cfg.mode = Mode::kIndependent;
  PromptStack stack = init_stack(cfg, 9);
  auto [pv, pt] = materialize(stack, 1);
  Tensor joint = Tensor::zeros(cfg.length, cfg.d_v + cfg.d_t);
  for (std::size_t i = 0; i < cfg.length; ++i) {
    for (std::size_t j = 0; j < cfg.d_v; ++j) joint.at(i, j) = pv.at(i, j);
    for (std::size_t j = 0; j < cfg.d_t; ++j) joint.at(i, cfg.d_v + j) = pt.at(i, j);
  }
  auto sv = singular_values(joint);
  CHECK(sv[1] > 1e-8 * sv[0]);  // two independent rank-1 factors -> rank 2
}

TEST_CASE("count_params closed forms") {
  PromptConfig cfg = shared_cfg(9, 4, 1, 768, 512);
  CHECK(count_params(cfg) == 11556);
  cfg.mode = Mode::kFullRank;
  CHECK(count_params(cfg) == 46080);
  cfg = shared_cfg(0);
  CHECK(count_params(cfg) == 0);
}

TEST_CASE("count_params equals the number of initialized entries") {
  for (Mode mode : {Mode::kShared, Mode::kIndependent, Mode::kFullRank}) {
    for (std::size_t depth : {std::size_t{0}, std::size_t{1}, std::size_t{3}}) {
      for (std::size_t rank : {std::size_t{1}, std::size_t{2}}) {
        for (std::size_t len : {std::size_t{2}, std::size_t{4}}) {
          PromptConfig cfg;
          cfg.mode = mode;
          cfg.depth = depth;
          cfg.length = len;
          cfg.v_length = mode == Mode::kIndependent ? len + 1 : len;
          cfg.rank = rank;
          cfg.d_v = 12;
          cfg.d_t = 8;
          PromptStack stack = init_stack(cfg, 17);
          CHECK(count_params(cfg) == stack_entries(stack));
        }
      }
    }
  }
}

TEST_CASE("materialization is linear in each factor") {
  PromptConfig cfg = shared_cfg(1, 3, 2, 10, 6);
  PromptStack stack = init_stack(cfg, 33);
  auto [pv, pt] = materialize(stack, 1);
  double alpha = -2.75;
  PromptStack scaled = stack;
  for (double& x : scaled.u[0].data) x *= alpha;
  auto [spv, spt] = materialize(scaled, 1);
  for (std::size_t i = 0; i < pv.size(); ++i) {
    CHECK(spv.data[i] == doctest::Approx(alpha * pv.data[i]).epsilon(1e-12));
  }
  for (std::size_t i = 0; i < pt.size(); ++i) {
    CHECK(spt.data[i] == doctest::Approx(alpha * pt.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("tape materialization matches the plain one") {
  PromptConfig cfg = shared_cfg(2, 4, 2, 16, 12);
  PromptStack stack = init_stack(cfg, 12);
  Tape tape;
  StackVars vars = lift(tape, stack);
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    auto [pv, pt] = materialize(stack, l);
    CHECK(materialize_vision(vars, l).value() == pv.data);
    CHECK(materialize_text(vars, l).value() == pt.data);
  }
}

TEST_CASE("export-u emits one row per (layer, token, rank)") {
  PromptConfig cfg = shared_cfg(2, 3, 2, 8, 8);
  PromptStack stack = init_stack(cfg, 4);
  std::ostringstream os;
  write_u_csv(stack, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "layer,token,rank_index,value");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 2 * 3 * 2);

  PromptConfig full = cfg;
  full.mode = Mode::kFullRank;
  PromptStack full_stack = init_stack(full, 4);
  CHECK_THROWS_AS(write_u_csv(full_stack, os), std::invalid_argument);
}

TEST_SUITE_END();
