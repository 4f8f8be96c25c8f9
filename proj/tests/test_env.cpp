#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ccs/env.hpp"

using namespace ccs;

namespace {

GridGeometry small_grid() {
  GridGeometry g;
  g.nx = 16;
  g.ny = 12;
  g.nz = 3;
  return g;
}

SimOptions fast_sim() {
  SimOptions o;
  o.substeps_per_interval = 12;
  return o;
}

Env make_env(int scenario_id, EnvConfig cfg = {}, SimOptions opt = fast_sim(),
             GridGeometry g = small_grid(), uint64_t seed = 17,
             ScenarioLayoutConfig layout = {}) {
  GeologyRealization geo = generate_realization(g, seed, 0, false);
  ScenarioPhysics phys = apply_scenario_physics(g, scenario_id, layout);
  return Env(g, geo, FluidProps{}, default_wells(g), phys, opt, cfg);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("action mapping: affine endpoints, midpoint, clipping, inverse") {
  std::vector<WellSpec> wells(1);
  wells[0].q_min = 0.0;
  wells[0].q_max = 100.0;

  ActionVector a(1);
  a << -1.0;
  CHECK(map_action(a, wells)[0] == doctest::Approx(0.0).epsilon(1e-15));
  a << 1.0;
  CHECK(map_action(a, wells)[0] == doctest::Approx(100.0).epsilon(1e-15));
  a << 0.0;
  CHECK(map_action(a, wells)[0] == doctest::Approx(50.0).epsilon(1e-15));
  // out-of-range commands are clipped, not rejected
  a << 2.5;
  CHECK(map_action(a, wells)[0] == 100.0);
  a << -7.0;
  CHECK(map_action(a, wells)[0] == 0.0);

  GridGeometry g = small_grid();
  auto field_wells = default_wells(g);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    ActionVector act(static_cast<Eigen::Index>(field_wells.size()));
    for (Eigen::Index i = 0; i < act.size(); ++i) act[i] = unit(rng);
    Eigen::VectorXd rates = map_action(act, field_wells);
    ActionVector back = inverse_map_action(rates, field_wells);
    for (Eigen::Index i = 0; i < act.size(); ++i) CHECK(std::abs(back[i] - act[i]) <= 1e-12);
  }

  ActionVector wrong(3);
  wrong.setZero();
  CHECK_THROWS_AS((void)map_action(wrong, field_wells), std::invalid_argument);
}

TEST_CASE("reward: hand-computed interval, window edges, discount, leakage term") {
  EnvConfig cfg;

  SUBCASE("worked example sums to one") {
    RewardBreakdown r = compute_reward(1.0, 0.1, 0.4, 0.0, cfg, 0);
    CHECK(r.retained_value == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(r.brine_penalty == doctest::Approx(0.1).epsilon(1e-12));
    // net storage rate 0.9 * 657000 / 730 = 810 m3/day, inside [200, 850]
    CHECK(r.storage_bonus == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(r.leakage_penalty == 0.0);
    CHECK(r.total == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("zero volumes produce exactly zero reward") {
    RewardBreakdown r = compute_reward(0.0, 0.0, 0.0, 0.0, cfg, 3);
    CHECK(r.retained_value == 0.0);
    CHECK(r.brine_penalty == 0.0);
    CHECK(r.storage_bonus == 0.0);  // rate 0 lies outside the window
    CHECK(r.leakage_penalty == 0.0);
    CHECK(r.total == 0.0);
  }

  SUBCASE("storage window is inclusive at both edges") {
    auto retained_n_for = [&](double q) { return q * cfg.interval_days / cfg.volume_ref; };
    CHECK(compute_reward(retained_n_for(200.0), 0.0, 0.0, 0.0, cfg, 0).storage_bonus == 0.2);
    CHECK(compute_reward(retained_n_for(850.0), 0.0, 0.0, 0.0, cfg, 0).storage_bonus == 0.2);
    CHECK(compute_reward(retained_n_for(199.999), 0.0, 0.0, 0.0, cfg, 0).storage_bonus == 0.0);
    CHECK(compute_reward(retained_n_for(850.001), 0.0, 0.0, 0.0, cfg, 0).storage_bonus == 0.0);
  }

  SUBCASE("discount applies to volume terms but not the window test") {
    cfg.rho = 0.9;
    RewardBreakdown r = compute_reward(1.0, 0.1, 0.4, 0.0, cfg, 2);
    CHECK(r.retained_value == doctest::Approx(0.81 * 0.9).epsilon(1e-12));
    CHECK(r.brine_penalty == doctest::Approx(0.81 * 0.1).epsilon(1e-12));
    CHECK(r.storage_bonus == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(r.total == doctest::Approx(0.729 - 0.081 + 0.2).epsilon(1e-12));
  }

  SUBCASE("leakage penalty: scenario 2 only, hinge at the threshold") {
    cfg.scenario_id = 2;
    RewardBreakdown below = compute_reward(0.5, 0.0, 0.0, 0.04, cfg, 0);
    CHECK(below.leakage_penalty == 0.0);
    RewardBreakdown above = compute_reward(0.5, 0.0, 0.0, 0.12, cfg, 0);
    CHECK(above.leakage_penalty == doctest::Approx(5.0 * 0.07).epsilon(1e-12));
    CHECK(above.total ==
          doctest::Approx(above.retained_value + above.storage_bonus - 0.35).epsilon(1e-12));
    cfg.scenario_id = 0;
    CHECK(compute_reward(0.5, 0.0, 0.0, 0.12, cfg, 0).leakage_penalty == 0.0);
  }
}

TEST_CASE("config validation rejects malformed settings") {
  auto expect_throw = [](EnvConfig c) { CHECK_THROWS_AS(c.validate(), std::invalid_argument); };
  EnvConfig ok;
  CHECK_NOTHROW(ok.validate());

  EnvConfig c = ok;
  c.horizon = 0;
  expect_throw(c);
  c = ok;
  c.q_window_lo = 900.0;  // >= q_window_hi
  expect_throw(c);
  c = ok;
  c.rho = 0.0;
  expect_throw(c);
  c = ok;
  c.rho = 1.5;
  expect_throw(c);
  c = ok;
  c.n_samples = 8;
  expect_throw(c);
  c = ok;
  c.c_brine = -0.1;
  expect_throw(c);
}

TEST_CASE("regime names and observation views") {
  const char* names[] = {"privileged", "well_only", "history", "masked_critic", "teacher_student"};
  for (const char* n : names) CHECK(regime_name(regime_from_string(n)) == n);
  CHECK_THROWS_AS((void)regime_from_string("oracle"), std::invalid_argument);

  ObservationView v = observation_view(Regime::privileged);
  CHECK(v.actor_spatial);
  CHECK(v.actor_wells);
  CHECK_FALSE(v.actor_history);
  CHECK(v.critic_spatial);
  CHECK(v.critic_wells);

  v = observation_view(Regime::well_only);
  CHECK_FALSE(v.actor_spatial);
  CHECK(v.actor_wells);
  CHECK_FALSE(v.actor_history);
  CHECK_FALSE(v.critic_spatial);
  CHECK(v.critic_wells);
  CHECK_FALSE(v.critic_history);

  v = observation_view(Regime::history);
  CHECK_FALSE(v.actor_spatial);
  CHECK(v.actor_wells);
  CHECK(v.actor_history);
  CHECK_FALSE(v.critic_spatial);
  CHECK(v.critic_history);

  // asymmetric regimes: actor stays deployable, critics see more
  v = observation_view(Regime::masked_critic);
  CHECK_FALSE(v.actor_spatial);
  CHECK(v.actor_wells);
  CHECK(v.critic_spatial);
  CHECK(v.critic_wells);

  v = observation_view(Regime::teacher_student);
  CHECK_FALSE(v.actor_spatial);
  CHECK(v.actor_wells);
  CHECK(v.actor_history);
  CHECK(v.critic_spatial);
  CHECK(v.critic_wells);
  CHECK(v.critic_history);
}

TEST_CASE("history buffer: fixed-length FIFO with chronological order") {
  HistoryBuffer h;
  h.length = 3;
  h.reset(1, 1);
  REQUIRE(h.blocks.size() == 3);
  for (const auto& b : h.blocks) CHECK(b(0, 0) == 0.0);

  auto block = [](double v) { return Eigen::MatrixXd::Constant(1, 1, v); };
  h.update(block(1.0));
  h.update(block(2.0));
  h.update(block(3.0));
  CHECK(h.blocks[0](0, 0) == 1.0);
  CHECK(h.blocks[1](0, 0) == 2.0);
  CHECK(h.blocks[2](0, 0) == 3.0);
  h.update(block(4.0));  // oldest entry falls out
  CHECK(h.blocks[0](0, 0) == 2.0);
  CHECK(h.blocks[1](0, 0) == 3.0);
  CHECK(h.blocks[2](0, 0) == 4.0);
  CHECK(h.blocks.size() == 3);
}

TEST_CASE("reset observation: zero wells, zero normalized pressure, zero history") {
  Env env = make_env(0);
  ObservationBundle obs = env.reset();

  const int n = env.sim().grid().num_cells();
  REQUIRE(obs.spatial.channels.rows() == 2);
  REQUIRE(obs.spatial.channels.cols() == n);
  // initial pressure equals the normalization offset, saturation starts at 0
  CHECK(obs.spatial.channels.cwiseAbs().maxCoeff() == 0.0);

  REQUIRE(obs.wells.samples.rows() == 9);
  REQUIRE(obs.wells.samples.cols() == 30);
  CHECK(obs.wells.samples.cwiseAbs().maxCoeff() == 0.0);

  REQUIRE(obs.history.blocks.size() == 20);
  for (const auto& b : obs.history.blocks) {
    REQUIRE(b.rows() == 9);
    REQUIRE(b.cols() == 30);
    CHECK(b.cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("episode loop: shapes, termination at the horizon, decomposition identity") {
  EnvConfig cfg;
  cfg.horizon = 5;
  Env env = make_env(0, cfg);
  env.reset();

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const int n = env.sim().grid().num_cells();
  int steps = 0;
  bool done = false;
  while (!done) {
    ActionVector a(11);
    for (int i = 0; i < 11; ++i) a[i] = unit(rng);
    StepResult res = env.step(a);
    ++steps;
    done = res.done;
    CHECK_FALSE(res.failed);

    CHECK(res.obs.spatial.channels.rows() == 2);
    CHECK(res.obs.spatial.channels.cols() == n);
    CHECK(res.obs.spatial.channels.allFinite());
    CHECK(res.obs.spatial.channels.row(1).minCoeff() >= 0.0);
    CHECK(res.obs.spatial.channels.row(1).maxCoeff() <= 1.0);
    CHECK(res.obs.wells.samples.rows() == 9);
    CHECK(res.obs.wells.samples.cols() == 30);
    CHECK(res.obs.wells.samples.allFinite());
    CHECK(res.obs.history.blocks.size() == 20);

    const RewardBreakdown& b = res.breakdown;
    CHECK(res.reward == b.total);
    CHECK(b.total == b.retained_value - b.brine_penalty + b.storage_bonus - b.leakage_penalty);
    CHECK(b.leakage_penalty == 0.0);  // scenario 0 has no monitored region

    CHECK(env.t() == steps);
    CHECK(done == (steps == cfg.horizon));
  }
  CHECK(steps == 5);
  CHECK_THROWS_AS((void)env.step(ActionVector::Zero(11)), std::logic_error);

  // history holds exactly min(t, L) populated blocks, most recent last
  ObservationBundle last = env.reset();
  ActionVector a0 = ActionVector::Constant(11, -0.5);
  ActionVector a1 = ActionVector::Constant(11, -0.2);
  StepResult r1 = env.step(a0);
  StepResult r2 = env.step(a1);
  (void)last;
  const auto& blocks = r2.obs.history.blocks;
  for (size_t i = 0; i + 2 < blocks.size(); ++i) CHECK(blocks[i].cwiseAbs().maxCoeff() == 0.0);
  CHECK((blocks[blocks.size() - 2] - r1.obs.wells.samples).cwiseAbs().maxCoeff() == 0.0);
  CHECK((blocks[blocks.size() - 1] - r2.obs.wells.samples).cwiseAbs().maxCoeff() == 0.0);
  CHECK(blocks[blocks.size() - 1].cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("well-observation channel layout matches the simulator") {
  // Reference grid: wells sit at least three cells apart, so one interval of
  // gentle injection cannot reach a producer.
  EnvConfig cfg;
  cfg.horizon = 2;
  Env env = make_env(0, cfg, fast_sim(), GridGeometry{});
  env.reset();

  // balanced field (90 m3/day in, 90 out) keeps the mean pressure put, so
  // BHP deviations reflect only the local well cones
  auto wells = env.sim().wells();
  Eigen::VectorXd rates(11);
  for (int p = 0; p < 8; ++p) rates[p] = 11.25;
  for (int w = 8; w < 11; ++w) rates[w] = 30.0;
  StepResult res = env.step(inverse_map_action(rates, wells));
  const Eigen::MatrixXd& ob = res.obs.wells.samples;

  for (int s = 0; s < 9; ++s) {
    for (int inj = 0; inj < 3; ++inj) {
      CHECK(ob(s, inj) == doctest::Approx(30.0 / 300.0).epsilon(1e-9));  // injected gas
      CHECK(ob(s, 19 + inj) > 0.0);  // injection mound raises the BHP
    }
    for (int p = 0; p < 8; ++p) {
      CHECK(ob(s, 3 + p) == 0.0);  // no gas breakthrough within one interval
      CHECK(ob(s, 11 + p) == doctest::Approx(11.25 / 150.0).epsilon(1e-9));  // brine
      CHECK(ob(s, 22 + p) < 0.0);  // producer drawdown cone
    }
  }

  // normalization is invertible: channels times the deck bounds recover rates
  const auto& audit = env.sim().rate_audit_log().back();
  CHECK(ob(0, 0) * wells[8].q_max == doctest::Approx(audit.applied_mean[8]).epsilon(1e-9));
  CHECK(ob(0, 11) * wells[0].q_max == doctest::Approx(audit.applied_mean[0]).epsilon(1e-9));
}

TEST_CASE("replay determinism: identical actions give identical trajectories") {
  EnvConfig cfg;
  cfg.horizon = 3;
  auto run = [&](uint64_t seed) {
    Env env = make_env(3, cfg, fast_sim(), small_grid(), seed);
    env.reset();
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<double> rewards;
    Eigen::MatrixXd last_spatial, last_wells;
    for (int t = 0; t < cfg.horizon; ++t) {
      ActionVector a(11);
      for (int i = 0; i < 11; ++i) a[i] = unit(rng);
      StepResult res = env.step(a);
      rewards.push_back(res.reward);
      last_spatial = res.obs.spatial.channels;
      last_wells = res.obs.wells.samples;
    }
    return std::make_tuple(rewards, last_spatial, last_wells);
  };

  auto [ra, sa, wa] = run(17);
  auto [rb, sb, wb] = run(17);
  CHECK(ra == rb);  // bitwise
  CHECK(sa == sb);
  CHECK(wa == wb);

  auto [rc, sc, wc] = run(99);  // different geology must change the outcome
  CHECK(sa != sc);
}

TEST_CASE("scenario 1 forces the third injector offline") {
  EnvConfig cfg;
  cfg.horizon = 2;
  Env env = make_env(1, cfg);
  env.reset();
  StepResult res = env.step(ActionVector::Constant(11, 1.0));
  CHECK_FALSE(res.failed);

  const auto& audit = env.sim().rate_audit_log().back();
  CHECK(audit.requested[10] == 0.0);          // masked to the deck floor
  CHECK(audit.applied_mean[10] == 0.0);
  CHECK(audit.requested[8] > 0.0);            // the other injectors still run
  CHECK(audit.requested[9] > 0.0);
  CHECK(res.obs.wells.samples.col(2).cwiseAbs().maxCoeff() == 0.0);  // I3 gas channel

  // masking inside the env matches masking in the action itself
  Env ref = make_env(1, cfg);
  ref.reset();
  ActionVector a = ActionVector::Constant(11, 1.0);
  a[10] = -1.0;
  StepResult res_ref = ref.step(a);
  CHECK(res.reward == res_ref.reward);
  CHECK(res.obs.wells.samples == res_ref.obs.wells.samples);
}

TEST_CASE("leakage penalty fires only under scenario 2") {
  EnvConfig cfg;
  cfg.horizon = 6;
  ScenarioLayoutConfig layout;
  layout.leakage_threshold = 0.01;  // tightened so a short episode trips it

  ActionVector push = ActionVector::Constant(11, 1.0);
  for (int p = 0; p < 8; ++p) push[p] = 2.0 * (100.0 / 150.0) - 1.0;

  Env leaky = make_env(2, cfg, fast_sim(), small_grid(), 17, layout);
  leaky.reset();
  double last_penalty = 0.0;
  double indicator = 0.0;
  for (int t = 0; t < cfg.horizon; ++t) {
    StepResult res = leaky.step(push);
    REQUIRE_FALSE(res.failed);
    last_penalty = res.breakdown.leakage_penalty;
    indicator = leaky.sim().leakage_indicator();
    CHECK(res.breakdown.total == res.breakdown.retained_value - res.breakdown.brine_penalty +
                                     res.breakdown.storage_bonus - res.breakdown.leakage_penalty);
  }
  CHECK(indicator > 0.01);
  CHECK(last_penalty == doctest::Approx(5.0 * (indicator - 0.01)).epsilon(1e-12));
  CHECK(last_penalty > 0.0);

  // same actions under the nominal model: no monitored region, no penalty
  for (int scenario : {0, 3}) {
    Env nominal = make_env(scenario, cfg);
    nominal.reset();
    for (int t = 0; t < cfg.horizon; ++t) {
      StepResult res = nominal.step(push);
      REQUIRE_FALSE(res.failed);
      CHECK(res.breakdown.leakage_penalty == 0.0);
    }
  }
}

TEST_CASE("solver failure ends the episode at the configured floor reward") {
  EnvConfig cfg;
  cfg.horizon = 4;
  SimOptions opt = fast_sim();
  opt.cg_max_iter = 0;  // force the pressure solve to fail
  Env env = make_env(0, cfg, opt);
  env.reset();

  StepResult res = env.step(ActionVector::Constant(11, 0.5));
  CHECK(res.done);
  CHECK(res.failed);
  CHECK(res.reward == 0.0);
  CHECK(res.breakdown.total == res.breakdown.retained_value - res.breakdown.brine_penalty +
                                   res.breakdown.storage_bonus - res.breakdown.leakage_penalty);
  CHECK(env.done());
  CHECK(env.t() == 0);  // the failed interval does not count as progress
  CHECK_THROWS_AS((void)env.step(ActionVector::Zero(11)), std::logic_error);

  // a non-zero floor is passed through verbatim
  cfg.failure_reward = -2.5;
  Env env2 = make_env(0, cfg, opt);
  env2.reset();
  StepResult res2 = env2.step(ActionVector::Constant(11, 0.5));
  CHECK(res2.failed);
  CHECK(res2.reward == -2.5);
  CHECK(res2.breakdown.total == res2.breakdown.retained_value - res2.breakdown.brine_penalty +
                                    res2.breakdown.storage_bonus - res2.breakdown.leakage_penalty);
}

TEST_CASE("episode traces: versioned line-delimited records, reproducible bytes") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path();
  const fs::path path_a = dir / "ccs_env_trace_a.jsonl";
  const fs::path path_b = dir / "ccs_env_trace_b.jsonl";

  EnvConfig cfg;
  cfg.horizon = 2;
  auto run = [&](const fs::path& path) {
    Env env = make_env(2, cfg);
    EpisodeTraceWriter writer(path.string());
    env.attach_trace(&writer);
    writer.begin_episode(7, 2, 42);
    env.reset();
    std::vector<double> rewards;
    rewards.push_back(env.step(ActionVector::Constant(11, 0.3)).reward);
    rewards.push_back(env.step(ActionVector::Constant(11, -0.4)).reward);
    writer.flush();
    return rewards;
  };

  std::vector<double> rewards = run(path_a);

  std::ifstream in(path_a);
  std::string line;
  REQUIRE(std::getline(in, line));
  nlohmann::json header = nlohmann::json::parse(line);
  CHECK(header.at("v") == 1);
  CHECK(header.at("kind") == "episode");
  CHECK(header.at("episode") == 7);
  CHECK(header.at("scenario") == 2);
  CHECK(header.at("seed") == 42);

  for (int t = 0; t < 2; ++t) {
    REQUIRE(std::getline(in, line));
    nlohmann::json rec = nlohmann::json::parse(line);
    CHECK(rec.at("v") == 1);
    CHECK(rec.at("kind") == "step");
    CHECK(rec.at("episode") == 7);
    CHECK(rec.at("t") == t);
    CHECK(rec.at("action").size() == 11);
    CHECK(rec.at("rates").size() == 11);
    CHECK(rec.at("reward").get<double>() == rewards[static_cast<size_t>(t)]);
    const double identity = rec.at("retained_value").get<double>() -
                            rec.at("brine_penalty").get<double>() +
                            rec.at("storage_bonus").get<double>() -
                            rec.at("leakage_penalty").get<double>();
    CHECK(rec.at("reward").get<double>() == doctest::Approx(identity).epsilon(1e-12));
    CHECK(rec.at("done") == (t == 1));
    CHECK(rec.at("failed") == false);
  }
  CHECK_FALSE(std::getline(in, line));  // nothing after the last step

  run(path_b);  // regeneration is byte-identical
  CHECK(slurp(path_a) == slurp(path_b));
  fs::remove(path_a);
  fs::remove(path_b);
}
