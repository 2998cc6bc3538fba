#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "capstrain/errors.hpp"
#include "capstrain/random.hpp"
#include "capstrain/schedulers.hpp"

using namespace capstrain;

namespace {

// Closed forms, written out independently of the library.
double one_cycle_phase1(double lo, double hi, double TS, double ts) { return lo + ts * (hi - lo) / (0.45 * TS); }
double one_cycle_phase2(double lo, double hi, double TS, double ts) {
  return lo + (ts - 0.9 * TS) * (lo - hi) / (0.45 * TS);
}
double one_cycle_phase3(double lo, double, double TS, double ts) { return lo - 9.0 * lo / TS * (ts - 0.9 * TS); }
double cosine(double lo, double hi, double t, double T) {
  return lo + 0.5 * (hi - lo) * (1.0 + std::cos(std::numbers::pi * t / T));
}

std::vector<std::size_t> local_maxima(const std::vector<TracePoint>& trace) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const bool rises = i == 0 || trace[i].lr > trace[i - 1].lr;
    const bool holds = i + 1 == trace.size() || trace[i].lr >= trace[i + 1].lr;
    if (rises && holds) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> local_minima(const std::vector<TracePoint>& trace) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const bool falls = i == 0 || trace[i].lr < trace[i - 1].lr;
    const bool holds = i + 1 == trace.size() || trace[i].lr <= trace[i + 1].lr;
    if (falls && holds && i != 0) out.push_back(i);
  }
  return out;
}

}  // namespace

TEST_CASE("fixed rate") {
  LrPolicy p;
  CHECK(lr_fixed(p) == 0.001);
  const auto trace = schedule_trace(p, {}, 2, 100);
  for (const auto& t : trace) CHECK(t.lr == 0.001);
  p.lr_max = 0.0005;
  CHECK(lr_fixed(p) == 0.0005);
}

TEST_CASE("exponential decay") {
  CHECK(lr_exp_decay(0.001, 0.96, 2000, 0) == 0.001);
  CHECK(lr_exp_decay(0.001, 0.96, 2000, 2000) == doctest::Approx(0.00096).epsilon(1e-14));
  CHECK(lr_exp_decay(0.001, 0.96, 2000, 4000) == doctest::Approx(0.0009216).epsilon(1e-14));
  double previous = lr_exp_decay(0.001, 0.96, 2000, 0);
  for (int s = 1; s < 5000; s += 7) {
    const double now = lr_exp_decay(0.001, 0.96, 2000, s);
    CHECK(now < previous);
    previous = now;
  }
  CHECK_THROWS_AS(lr_exp_decay(0.001, 0.96, 2000, -1), RangeError);
}

TEST_CASE("one-cycle policy") {
  const double TS = 1000;
  CHECK(lr_one_cycle(1e-4, 1e-3, TS, 0) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(lr_one_cycle(1e-4, 1e-3, TS, 0.45 * TS) == doctest::Approx(1e-3).epsilon(1e-14));
  CHECK(lr_one_cycle(1e-4, 1e-3, TS, TS) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(one_cycle_phase2(1e-4, 1e-3, TS, 0.9 * TS) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(one_cycle_phase3(1e-4, 1e-3, TS, 0.9 * TS) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(lr_one_cycle(1e-4, 1e-3, TS, 0.9 * TS) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK_THROWS_AS(lr_one_cycle(1e-4, 1e-3, TS, -1), RangeError);
  CHECK_THROWS_AS(lr_one_cycle(1e-4, 1e-3, TS, TS + 1), RangeError);
}

TEST_CASE("one-cycle is continuous at its phase boundaries") {
  for (double TS : {100.0, 1000.0, 281250.0, 12345.0}) {
    for (double boundary : {0.45 * TS, 0.9 * TS}) {
      const double left = lr_one_cycle(1e-4, 1e-3, TS, std::nextafter(boundary, 0.0));
      const double at = lr_one_cycle(1e-4, 1e-3, TS, boundary);
      const double right = lr_one_cycle(1e-4, 1e-3, TS, std::nextafter(boundary, TS));
      CHECK(std::abs(left - at) < 1e-15);
      CHECK(std::abs(right - at) < 1e-15);
    }
  }
}

TEST_CASE("warm restarts") {
  const std::int64_t Ti = 100;
  auto r = lr_warm_restarts(1e-4, 1e-3, {}, Ti);
  CHECK(r.lr == doctest::Approx(0.001).epsilon(1e-14));
  CHECK(r.state.t_curr == 1);
  r = lr_warm_restarts(1e-4, 1e-3, {.t_curr = 50}, Ti);
  CHECK(r.lr == doctest::Approx(0.00055).epsilon(1e-14));
  r = lr_warm_restarts(1e-4, 1e-3, {.t_curr = Ti}, Ti);
  CHECK(r.lr == doctest::Approx(0.0001).epsilon(1e-14));
  CHECK(r.state.t_curr == 0);
}

TEST_CASE("warm restarts are periodic with period T_i + 1") {
  const std::int64_t Ti = 37;
  ScheduleState s;
  std::vector<double> lrs;
  for (int i = 0; i < 4 * (Ti + 1); ++i) {
    const auto r = lr_warm_restarts(1e-4, 1e-3, s, Ti);
    CHECK(r.state.t_curr <= Ti);
    lrs.push_back(r.lr);
    s = r.state;
  }
  for (std::size_t i = 0; i + Ti + 1 < lrs.size(); ++i) CHECK(std::abs(lrs[i] - lrs[i + Ti + 1]) < 1e-15);
}

TEST_CASE("AdaBatch table") {
  CHECK(batch_adabatch(4, 2) == 1);
  CHECK(batch_adabatch(4, 5) == 16);
  CHECK(batch_adabatch(4, 10) == 32);
  CHECK(batch_adabatch(4, 20) == 64);
  std::int64_t previous = 1;
  for (int e = 1; e <= 40; ++e) {
    const std::int64_t b = batch_adabatch(4, e);
    CHECK(b >= previous);
    CHECK((b & (b - 1)) == 0);
    previous = b;
  }
  CHECK(batch_adabatch(0, 30) == 4);
  CHECK_THROWS_AS(batch_adabatch(4, 0), RangeError);
}

TEST_CASE("WarmAdaBatch at full MNIST size") {
  auto first = warm_adabatch(1e-4, 1e-3, 1, {}, 60000);
  CHECK(first.lr == doctest::Approx(0.001).epsilon(1e-14));
  CHECK(first.batch == 1);
  CHECK(first.cycle_length == 180000);

  // state as it stands after the last step of epoch 3
  ScheduleState end_of_three{.t_curr = 180000, .epoch = 3, .global_step = 180000};
  auto second = warm_adabatch(1e-4, 1e-3, 4, end_of_three, 60000);
  CHECK(second.lr == doctest::Approx(0.001).epsilon(1e-14));
  CHECK(second.batch == 16);
  CHECK(second.cycle_length == 101250);
  CHECK(second.state.t_curr == 1);

  const auto trace = schedule_trace({.variant = LrVariant::WarmAdaBatch}, {}, 30, 60000);
  REQUIRE(trace.size() == 180000 + 27 * 3750);
  CHECK(trace.back().epoch == 30);
  CHECK(trace.back().lr == doctest::Approx(1e-4).epsilon(1e-8));
  CHECK(trace.back().lr == doctest::Approx(cosine(1e-4, 1e-3, 101249, 101250)).epsilon(1e-15));
  CHECK(trace[179999].lr == doctest::Approx(cosine(1e-4, 1e-3, 179999, 180000)).epsilon(1e-15));
  CHECK(trace[180000].epoch == 4);
  CHECK(trace[180000].batch == 16);
  CHECK(trace[180000].lr == doctest::Approx(1e-3).epsilon(1e-15));
}

TEST_CASE("schedule traces") {
  SUBCASE("warm restarts with a one-epoch cycle have one maximum per epoch") {
    for (int epochs : {1, 3, 7}) {
      const auto trace = schedule_trace({.variant = LrVariant::WarmRestarts}, {.base_batch = 10}, epochs, 95);
      const auto maxima = local_maxima(trace);
      CHECK(maxima.size() == static_cast<std::size_t>(epochs));
      for (std::size_t m : maxima) CHECK(m % 10 == 0);
    }
  }
  SUBCASE("WarmAdaBatch maxima at the two cycle starts, minima at the two cycle ends") {
    const std::int64_t N = 500;
    const auto trace = schedule_trace({.variant = LrVariant::WarmAdaBatch}, {}, 30, N);
    const auto maxima = local_maxima(trace);
    const auto minima = local_minima(trace);
    REQUIRE(maxima.size() == 2);
    REQUIRE(minima.size() == 2);
    CHECK(maxima[0] == 0);
    CHECK(maxima[1] == static_cast<std::size_t>(3 * N));
    CHECK(trace[maxima[1]].epoch == 4);
    CHECK(minima[0] == static_cast<std::size_t>(3 * N - 1));
    CHECK(trace[minima[0]].epoch == 3);
    CHECK(minima[1] == trace.size() - 1);
    CHECK(trace[minima[1]].epoch == 30);
    for (const auto& t : trace) CHECK(t.batch == (t.epoch <= 3 ? 1 : 16));
  }
  SUBCASE("one-cycle spans the whole run") {
    const auto trace = schedule_trace({.variant = LrVariant::OneCycle}, {.base_batch = 7}, 4, 100);
    const double TS = static_cast<double>(trace.size());
    for (const auto& t : trace) {
      const double ts = static_cast<double>(t.step);
      const double expected = ts <= 0.45 * TS   ? one_cycle_phase1(1e-4, 1e-3, TS, ts)
                              : ts <= 0.9 * TS ? one_cycle_phase2(1e-4, 1e-3, TS, ts)
                                               : one_cycle_phase3(1e-4, 1e-3, TS, ts);
      CHECK(t.lr == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  SUBCASE("CSV layout") {
    std::ostringstream os;
    write_schedule_csv(os, schedule_trace({}, {.base_batch = 2}, 1, 3));
    CHECK(os.str() == "epoch,step,lr,batch_size\n1,0,0.001,2\n1,1,0.001,2\n");
  }
}

TEST_CASE("every policy stays within [0.1 lr_min, lr_max] and traces have the planned length") {
  Rng rng(17);
  const std::vector<std::pair<LrPolicy, BatchPolicy>> configs{
      {{.variant = LrVariant::Fixed}, {}},
      {{.variant = LrVariant::ExpDecay}, {}},
      {{.variant = LrVariant::OneCycle}, {}},
      {{.variant = LrVariant::WarmRestarts}, {}},
      {{.variant = LrVariant::WarmAdaBatch}, {}},
      {{.variant = LrVariant::Fixed}, {.variant = BatchVariant::AdaBatch, .exponent = 3}},
  };
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t N = 50 + static_cast<std::int64_t>(rng.below(400));
    const int epochs = 1 + static_cast<int>(rng.below(20));
    for (const auto& [lr, batch] : configs) {
      CAPTURE(to_string(lr.variant));
      const auto trace = schedule_trace(lr, batch, epochs, N);
      std::int64_t planned = 0;
      for (int e = 1; e <= epochs; ++e) planned += ceil_div(N, batch_for_epoch(lr, batch, e));
      CHECK(static_cast<std::int64_t>(trace.size()) == planned);
      for (const auto& t : trace) {
        CHECK(t.lr > 0.0);
        CHECK(t.lr >= 0.1 * lr.lr_min * (1 - 1e-12));
        CHECK(t.lr <= lr.lr_max * (1 + 1e-12));
      }
    }
  }
}

TEST_CASE("invalid policies are rejected") {
  CHECK_THROWS_AS(Scheduler({.lr_min = 0.0}, {}, 1, 10), RangeError);
  CHECK_THROWS_AS(Scheduler({.lr_min = 2e-3, .lr_max = 1e-3}, {}, 1, 10), RangeError);
  CHECK_THROWS_AS(Scheduler({}, {}, 0, 10), RangeError);
  Scheduler s({}, {}, 2, 10);
  CHECK_THROWS_AS(s.next_lr(), RangeError);
  CHECK_THROWS_AS(s.begin_epoch(2), RangeError);
}
