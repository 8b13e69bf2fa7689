#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "procl/checkpoint.hpp"
#include "procl/theory.hpp"
#include "procl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

using namespace procl;

namespace {

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.num_programs = 2;
  cfg.key_dim = 3;
  cfg.rank = 4;
  cfg.seed = seed;
  return cfg;
}

Dataset linear_dataset(Rng& rng, Index n, Index dim, Index out_dim, Scalar noise) {
  const Matrix map = rng.gaussian_matrix(out_dim, dim, 1.0 / std::sqrt(static_cast<Scalar>(dim)));
  Dataset d;
  d.x = rng.gaussian_matrix(n, dim, 1.0);
  d.y = d.x * map.transpose() + rng.gaussian_matrix(n, out_dim, noise);
  return d;
}

Scalar checksum_state(const ModelState& s) {
  std::uint64_t h = checksum(s.w0);
  h = derive_seed(h, checksum(s.a));
  h = derive_seed(h, checksum(s.adapter.weight()));
  h = derive_seed(h, checksum(s.encoder.weight));
  for (const Matrix& k : s.keys.keys) {
    h = derive_seed(h, checksum(k));
  }
  return static_cast<Scalar>(h);
}

}  // namespace

TEST_CASE("model initialization is deterministic and shape-consistent") {
  const TrainConfig cfg = small_config(5);
  ModelState a = ModelState::init(5, 3, cfg);
  ModelState b = ModelState::init(5, 3, cfg);

  CHECK(a.w0.rows() == 3);
  CHECK(a.w0.cols() == 5);
  CHECK(a.a.rows() == 3);
  CHECK(a.a.cols() == 4);
  CHECK(a.adapter.rank() == 4);
  CHECK(a.adapter.dim() == 5);
  CHECK(a.scaling.s.size() == 2);
  CHECK((a.anchor.w_orig - a.adapter.weight()).norm() == 0.0);
  CHECK(a.anchor.gamma == a.scaling.gamma());

  CHECK(checksum_state(a) == checksum_state(b));
  TrainConfig other = cfg;
  other.seed = 6;
  CHECK(checksum_state(a) != checksum_state(ModelState::init(5, 3, other)));

  TrainConfig bad = cfg;
  bad.num_programs = 3;  // does not divide rank 4
  CHECK_THROWS_AS(ModelState::init(5, 3, bad), ConfigError);
}

TEST_CASE("inference with a zero adapter reduces to the frozen base") {
  ModelState state = ModelState::init(5, 3, small_config(7));
  state.adapter.weight().setZero();
  Rng rng(70);
  const Matrix x = rng.gaussian_matrix(4, 5, 1.0);
  const Matrix y = predict(state, x);
  CHECK((y - x * state.w0.transpose()).norm() <= 1e-14);
}

TEST_CASE("train-mode forward with zeroed slots exposes the anchored path") {
  ModelState state = ModelState::init(5, 3, small_config(8));
  // The constructor snapshot keeps the original weight as the anchor.
  state.adapter.weight().setZero();
  Rng rng(80);
  const std::vector<Matrix> batch = {rng.gaussian_matrix(1, 5, 1.0),
                                     rng.gaussian_matrix(1, 5, 1.0)};
  const ForwardResult fwd = forward(state, batch, Mode::kTrain);
  const Scalar gamma = state.scaling.gamma();
  const Matrix expected = pool_batch(batch) *
                          (state.w0 + gamma * state.a * state.anchor.w_orig).transpose();
  CHECK((fwd.y - expected).norm() <= 1e-13);
  CHECK(fwd.w_exec.isApprox(gamma * state.anchor.w_orig, 1e-14));
}

TEST_CASE("train-mode forward matches the chained module oracle") {
  ModelState state = ModelState::init(6, 3, small_config(9));
  Rng rng(90);
  std::vector<Matrix> batch;
  for (int b = 0; b < 3; ++b) {
    batch.push_back(rng.gaussian_matrix(2, 6, 1.0));
  }

  const ForwardResult fwd = forward(state, batch, Mode::kTrain);
  REQUIRE(fwd.routing.has_value());

  const Matrix pooled = pool_batch(batch);
  const RoutingState routing = route_pooled(pooled, state.encoder, state.keys);
  const Matrix w_hat = compose_all_heads(routing.batch_alpha, state.scaling, state.adapter);
  const Matrix w_exec = state.scaling.gamma() * state.anchor.w_orig + w_hat;
  const Matrix y = pooled * (state.w0 + state.a * w_exec).transpose();

  CHECK((fwd.w_exec - w_exec).norm() == 0.0);
  CHECK((fwd.y - y).norm() == 0.0);
  CHECK((fwd.routing->batch_alpha - routing.batch_alpha).norm() == 0.0);
}

TEST_CASE("loss examples") {
  Rng rng(91);
  const Matrix y = rng.gaussian_matrix(3, 2, 1.0);
  CHECK(loss_mse(y, y) == 0.0);

  CHECK(loss_mse(Matrix::Constant(1, 1, 3.0), Matrix::Constant(1, 1, 1.0)) == 2.0);

  const Matrix y2 = rng.gaussian_matrix(4, 3, 1.0);
  const Matrix t2 = rng.gaussian_matrix(4, 3, 1.0);
  Scalar oracle = 0.0;
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < 3; ++j) {
      const Scalar d = y2(i, j) - t2(i, j);
      oracle += d * d;
    }
  }
  oracle *= 0.5 / 4.0;
  CHECK(loss_mse(y2, t2) == doctest::Approx(oracle).epsilon(1e-14));

  CHECK_THROWS_AS(loss_mse(y, y2), ShapeError);
}

TEST_CASE("every analytic gradient matches finite differences on a small instance") {
  TrainConfig cfg = small_config(10);
  ModelState state = ModelState::init(3, 2, cfg);
  Rng rng(100);
  const std::vector<Matrix> batch = {rng.gaussian_matrix(1, 3, 1.0),
                                     rng.gaussian_matrix(2, 3, 1.0)};
  const Matrix y_star = rng.gaussian_matrix(2, 2, 1.0);

  const ForwardResult fwd = forward(state, batch, Mode::kTrain);
  const Gradients g = backward(state, batch, y_star, *fwd.routing, fwd.w_exec);

  const auto check_leaf = [&](const Matrix& analytic, theory::LeafSelector sel) {
    const Matrix fd = theory::finite_diff_gradient(state, batch, y_star, sel);
    REQUIRE(fd.rows() == analytic.rows());
    REQUIRE(fd.cols() == analytic.cols());
    for (Index i = 0; i < fd.rows(); ++i) {
      for (Index j = 0; j < fd.cols(); ++j) {
        const Scalar denom = std::max({1e-7 / 1e-4, std::abs(fd(i, j)), std::abs(analytic(i, j))});
        CHECK(std::abs(fd(i, j) - analytic(i, j)) / denom <= 1e-4);
      }
    }
  };

  check_leaf(g.a, {theory::Leaf::kA, 0});
  check_leaf(g.adapter, {theory::Leaf::kAdapter, 0});
  check_leaf(g.s, {theory::Leaf::kGateLogits, 0});
  check_leaf(Matrix::Constant(1, 1, g.gamma_logit), {theory::Leaf::kGammaLogit, 0});
  check_leaf(g.encoder_weight, {theory::Leaf::kEncoderWeight, 0});
  check_leaf(g.encoder_bias, {theory::Leaf::kEncoderBias, 0});
  for (int h = 0; h < cfg.num_programs; ++h) {
    check_leaf(g.keys[static_cast<std::size_t>(h)], {theory::Leaf::kKeys, h});
  }
}

TEST_CASE("identity routing halves the execution gradient per slot") {
  TrainConfig cfg = small_config(11);
  ModelState state = ModelState::init(4, 2, cfg);
  Rng rng(110);
  const std::vector<Matrix> batch = {rng.gaussian_matrix(1, 4, 1.0),
                                     rng.gaussian_matrix(1, 4, 1.0)};
  const Matrix y_star = rng.gaussian_matrix(2, 2, 1.0);

  ForwardResult fwd = forward(state, batch, Mode::kTrain);
  // Overwrite the routing with exact one-hot rows, head h on slot h.
  RoutingState routing = *fwd.routing;
  routing.batch_alpha = Matrix::Identity(2, 2);
  for (int h = 0; h < 2; ++h) {
    routing.per_sample_alpha[static_cast<std::size_t>(h)].setZero();
    routing.per_sample_alpha[static_cast<std::size_t>(h)].col(h).setOnes();
  }

  const Gradients g = backward(state, batch, y_star, routing, fwd.w_exec);
  const Index r = state.adapter.slot_rows();
  for (int n = 0; n < 2; ++n) {
    const Matrix want = 0.5 * g.exec.middleRows(n * r, r);
    CHECK((g.adapter.middleRows(n * r, r) - want).norm() <= 1e-14 * std::max(1.0, want.norm()));
  }
}

TEST_CASE("a consistent target yields exactly zero gradients") {
  ModelState state = ModelState::init(4, 2, small_config(12));
  Rng rng(120);
  const std::vector<Matrix> batch = {rng.gaussian_matrix(1, 4, 1.0),
                                     rng.gaussian_matrix(1, 4, 1.0)};
  const ForwardResult fwd = forward(state, batch, Mode::kTrain);
  const Gradients g = backward(state, batch, fwd.y, *fwd.routing, fwd.w_exec);

  CHECK(g.a.norm() == 0.0);
  CHECK(g.adapter.norm() == 0.0);
  CHECK(g.s.norm() == 0.0);
  CHECK(g.gamma_logit == 0.0);
  CHECK(g.encoder_weight.norm() == 0.0);
  CHECK(g.encoder_bias.norm() == 0.0);
  for (const Matrix& k : g.keys) {
    CHECK(k.norm() == 0.0);
  }
}

TEST_CASE("backward rejects stale routing") {
  ModelState state = ModelState::init(4, 2, small_config(13));
  Rng rng(130);
  const std::vector<Matrix> batch = {rng.gaussian_matrix(1, 4, 1.0)};
  const Matrix y_star = rng.gaussian_matrix(1, 2, 1.0);
  const ForwardResult fwd = forward(state, batch, Mode::kTrain);

  const std::vector<Matrix> other = {rng.gaussian_matrix(1, 4, 1.0)};
  CHECK_THROWS_AS(backward(state, other, y_star, *fwd.routing, fwd.w_exec), ContractError);
}

TEST_CASE("sgd_step examples and frozen leaves") {
  ModelState state = ModelState::init(4, 2, small_config(14));
  const std::uint64_t w0_before = checksum(state.w0);
  const std::uint64_t anchor_before = checksum(state.anchor.w_orig);

  Gradients zero;
  zero.a = Matrix::Zero(2, 4);
  zero.adapter = Matrix::Zero(4, 4);
  zero.s = Vector::Zero(2);
  zero.encoder_weight = Matrix::Zero(state.encoder.weight.rows(), state.encoder.weight.cols());
  zero.encoder_bias = Vector::Zero(state.encoder.bias.size());
  zero.keys.assign(2, Matrix::Zero(2, 3));

  const Scalar before = checksum_state(state);
  sgd_step(state, zero, 0.5);
  CHECK(checksum_state(state) == before);

  // Scalar leaf: w = 1, g = 2, lr = 0.1 -> 0.8.
  state.scaling.gamma_logit = 1.0;
  Gradients g = zero;
  g.gamma_logit = 2.0;
  sgd_step(state, g, 0.1);
  CHECK(state.scaling.gamma_logit == doctest::Approx(0.8).epsilon(1e-15));

  // train_gamma=false freezes the blend logit.
  sgd_step(state, g, 0.1, false);
  CHECK(state.scaling.gamma_logit == doctest::Approx(0.8).epsilon(1e-15));

  CHECK(checksum(state.w0) == w0_before);
  CHECK(checksum(state.anchor.w_orig) == anchor_before);

  Gradients bad = zero;
  bad.a = Matrix::Zero(3, 3);
  CHECK_THROWS_AS(sgd_step(state, bad, 0.1), ShapeError);
}

TEST_CASE("train_task no-op and single-batch endpoints") {
  Rng rng(140);
  TrainConfig cfg = small_config(15);
  cfg.learning_rate = 0.0;
  cfg.lambda = 0.0;
  cfg.batch_size = 8;

  ModelState state = ModelState::init(4, 2, cfg);
  const Dataset data = linear_dataset(rng, 8, 4, 2, 0.0);
  const Matrix w_before = state.adapter.weight();
  train_task(state, data, cfg);
  CHECK((state.adapter.weight() - w_before).norm() == 0.0);

  // Single batch with full consolidation lands exactly on that W_exec.
  cfg.lambda = 1.0;
  ModelState state2 = ModelState::init(4, 2, cfg);
  ModelState probe = state2;
  const ForwardResult fwd =
      forward(probe, rows_as_samples(data.x), Mode::kTrain);
  train_task(state2, data, cfg);
  CHECK((state2.adapter.weight() - fwd.w_exec).norm() == 0.0);
}

TEST_CASE("train_task equals a hand-unrolled script of the same ops") {
  Rng rng(150);
  TrainConfig cfg = small_config(16);
  cfg.learning_rate = 0.05;
  cfg.lambda = 0.4;
  cfg.batch_size = 3;
  cfg.epochs_per_task = 2;

  const Dataset data = linear_dataset(rng, 7, 4, 2, 0.01);
  ModelState state = ModelState::init(4, 2, cfg);
  ModelState replay = state;

  const TaskLog log = train_task(state, data, cfg);

  std::vector<Scalar> replay_losses;
  for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
    for (Index at = 0; at < data.size(); at += cfg.batch_size) {
      const Index count = std::min<Index>(cfg.batch_size, data.size() - at);
      const std::vector<Matrix> samples = rows_as_samples(data.x.middleRows(at, count));
      const Matrix y_star = data.y.middleRows(at, count);
      const ForwardResult fwd = forward(replay, samples, Mode::kTrain);
      replay_losses.push_back(loss_mse(fwd.y, y_star));
      const Gradients grads = backward(replay, samples, y_star, *fwd.routing, fwd.w_exec);
      sgd_step(replay, grads, cfg.learning_rate, cfg.train_gamma);
      consolidate(replay.adapter, fwd.w_exec, cfg.lambda);
    }
  }

  REQUIRE(log.losses.size() == replay_losses.size());
  for (std::size_t i = 0; i < replay_losses.size(); ++i) {
    CHECK(log.losses[i] == replay_losses[i]);
  }
  CHECK((state.adapter.weight() - replay.adapter.weight()).norm() == 0.0);
  CHECK((state.a - replay.a).norm() == 0.0);
  CHECK((state.encoder.weight - replay.encoder.weight).norm() == 0.0);
  CHECK(state.scaling.gamma_logit == replay.scaling.gamma_logit);
}

TEST_CASE("with lr = 0 the task loop is exactly the EMA recursion") {
  Rng rng(160);
  TrainConfig cfg = small_config(17);
  cfg.learning_rate = 0.0;
  cfg.lambda = 0.7;
  cfg.batch_size = 2;
  cfg.epochs_per_task = 2;

  const Dataset data = linear_dataset(rng, 6, 4, 2, 0.01);
  ModelState state = ModelState::init(4, 2, cfg);

  // Independent unroll through the module-level ops; with lr = 0 the routing
  // parameters are frozen, so only W evolves.
  Matrix w = state.adapter.weight();
  const Matrix w_orig = state.anchor.w_orig;
  const Scalar gamma = state.scaling.gamma();
  for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
    for (Index at = 0; at < data.size(); at += cfg.batch_size) {
      const Index count = std::min<Index>(cfg.batch_size, data.size() - at);
      AdapterTensor current(w, cfg.num_programs);
      const RoutingState routing =
          route_pooled(data.x.middleRows(at, count), state.encoder, state.keys);
      const Matrix w_hat = compose_all_heads(routing.batch_alpha, state.scaling, current);
      const Matrix w_exec = gamma * w_orig + w_hat;
      w = (1.0 - cfg.lambda) * w + cfg.lambda * w_exec;
    }
  }

  train_task(state, data, cfg);
  CHECK((state.adapter.weight() - w).norm() <= 1e-12 * std::max(1.0, w.norm()));
}

TEST_CASE("train_sequence refreshes the anchor exactly at task boundaries") {
  Rng rng(170);
  TrainConfig cfg = small_config(18);
  cfg.learning_rate = 0.05;
  cfg.batch_size = 4;

  std::vector<Dataset> tasks = {linear_dataset(rng, 8, 4, 2, 0.01),
                                linear_dataset(rng, 8, 4, 2, 0.01),
                                linear_dataset(rng, 8, 4, 2, 0.01)};
  ModelState state = ModelState::init(4, 2, cfg);
  const std::uint64_t initial_w = checksum(state.adapter.weight());

  const Evaluator eval = [&tasks](ModelState& s, int k) {
    const Dataset& d = tasks[static_cast<std::size_t>(k)];
    return loss_mse(predict(s, d.x), d.y);
  };
  const RunLog run = train_sequence(state, tasks, cfg, eval);

  REQUIRE(run.tasks.size() == 3);
  CHECK(run.tasks[0].anchor_checksum == initial_w);
  CHECK(run.tasks[1].anchor_checksum == run.tasks[0].weight_checksum_end);
  CHECK(run.tasks[2].anchor_checksum == run.tasks[1].weight_checksum_end);
  CHECK(checksum(state.anchor.w_orig) == run.tasks[2].anchor_checksum);

  REQUIRE(run.accuracy.size() == 3);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(run.accuracy[r].size() == r + 1);
  }
}

TEST_CASE("one task reduces train_sequence to train_task plus one row") {
  Rng rng(180);
  TrainConfig cfg = small_config(19);
  cfg.learning_rate = 0.03;
  cfg.batch_size = 4;
  const Dataset data = linear_dataset(rng, 8, 4, 2, 0.01);

  ModelState seq_state = ModelState::init(4, 2, cfg);
  ModelState direct_state = ModelState::init(4, 2, cfg);

  const Evaluator eval = [&data](ModelState& s, int) {
    return loss_mse(predict(s, data.x), data.y);
  };
  const RunLog run = train_sequence(seq_state, {data}, cfg, eval);
  const TaskLog log = train_task(direct_state, data, cfg);

  REQUIRE(run.tasks.size() == 1);
  REQUIRE(run.accuracy.size() == 1);
  CHECK(run.accuracy[0].size() == 1);
  CHECK(run.tasks[0].weight_checksum_end == log.weight_checksum_end);
  REQUIRE(run.tasks[0].losses.size() == log.losses.size());
  for (std::size_t i = 0; i < log.losses.size(); ++i) {
    CHECK(run.tasks[0].losses[i] == log.losses[i]);
  }
}

TEST_CASE("repeating the same task does not degrade it") {
  std::vector<Scalar> deltas;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(900, seed));
    TrainConfig cfg = small_config(seed);
    cfg.learning_rate = 0.05;
    cfg.batch_size = 8;
    cfg.epochs_per_task = 2;
    const Dataset data = linear_dataset(rng, 32, 4, 2, 0.01);
    const Dataset eval_data = linear_dataset(rng, 32, 4, 2, 0.01);

    ModelState state = ModelState::init(4, 2, cfg);
    const Scalar threshold = 0.5;
    const Evaluator eval = [&](ModelState& s, int) {
      const Matrix y = predict(s, data.x);
      Index hits = 0;
      for (Index i = 0; i < y.rows(); ++i) {
        if ((y.row(i) - data.y.row(i)).squaredNorm() < threshold) {
          ++hits;
        }
      }
      return static_cast<Scalar>(hits) / static_cast<Scalar>(y.rows());
    };
    const RunLog run = train_sequence(state, {data, data}, cfg, eval);
    deltas.push_back(run.accuracy[1][0] - run.accuracy[0][0]);
  }
  std::sort(deltas.begin(), deltas.end());
  const Scalar median = 0.5 * (deltas[4] + deltas[5]);
  CHECK(median >= -1e-9);
}

TEST_CASE("seq_lora baseline endpoints") {
  Rng rng(190);
  TrainConfig cfg = small_config(20);
  cfg.batch_size = 4;

  std::vector<Dataset> tasks = {linear_dataset(rng, 8, 4, 2, 0.01),
                                linear_dataset(rng, 8, 4, 2, 0.01)};
  const Evaluator eval = [&tasks](ModelState& s, int k) {
    const Dataset& d = tasks[static_cast<std::size_t>(k)];
    return loss_mse(predict(s, d.x), d.y);
  };

  // lr = 0: nothing moves.
  cfg.learning_rate = 0.0;
  ModelState frozen = ModelState::init(4, 2, cfg);
  const Scalar before = checksum_state(frozen);
  const RunLog still = train_seq_lora(frozen, tasks, cfg, eval);
  CHECK(checksum_state(frozen) == before);
  CHECK(still.method == "seq_lora");
  CHECK(still.tasks[0].entropy.norm() == 0.0);

  // Small lr, full-batch steps on one task: loss decreases monotonically.
  cfg.learning_rate = 0.02;
  cfg.epochs_per_task = 6;
  cfg.batch_size = 8;
  ModelState learner = ModelState::init(4, 2, cfg);
  const RunLog run = train_seq_lora(learner, {tasks[0]}, cfg, eval);
  const auto& losses = run.tasks[0].losses;
  REQUIRE(losses.size() >= 4);
  for (std::size_t i = 1; i < losses.size(); ++i) {
    CHECK(losses[i] <= losses[i - 1] + 1e-12);
  }
}

TEST_CASE("identical seeds give bit-identical run logs") {
  Rng rng(200);
  TrainConfig cfg = small_config(21);
  cfg.learning_rate = 0.04;
  cfg.batch_size = 4;
  std::vector<Dataset> tasks = {linear_dataset(rng, 8, 4, 2, 0.01),
                                linear_dataset(rng, 8, 4, 2, 0.01)};
  const Evaluator eval = [&tasks](ModelState& s, int k) {
    const Dataset& d = tasks[static_cast<std::size_t>(k)];
    return loss_mse(predict(s, d.x), d.y);
  };

  ModelState s1 = ModelState::init(4, 2, cfg);
  ModelState s2 = ModelState::init(4, 2, cfg);
  const RunLog r1 = train_sequence(s1, tasks, cfg, eval);
  const RunLog r2 = train_sequence(s2, tasks, cfg, eval);

  REQUIRE(r1.tasks.size() == r2.tasks.size());
  for (std::size_t t = 0; t < r1.tasks.size(); ++t) {
    CHECK(r1.tasks[t].weight_checksum_end == r2.tasks[t].weight_checksum_end);
    REQUIRE(r1.tasks[t].losses.size() == r2.tasks[t].losses.size());
    for (std::size_t i = 0; i < r1.tasks[t].losses.size(); ++i) {
      CHECK(r1.tasks[t].losses[i] == r2.tasks[t].losses[i]);
    }
    CHECK((r1.tasks[t].entropy - r2.tasks[t].entropy).norm() == 0.0);
  }
  for (std::size_t r = 0; r < r1.accuracy.size(); ++r) {
    for (std::size_t k = 0; k < r1.accuracy[r].size(); ++k) {
      CHECK(r1.accuracy[r][k] == r2.accuracy[r][k]);
    }
  }
}

TEST_CASE("inference performs no routing work and touches no parameters") {
  Rng rng(210);
  TrainConfig cfg = small_config(22);
  cfg.learning_rate = 0.05;
  cfg.batch_size = 4;
  std::vector<Dataset> tasks = {linear_dataset(rng, 8, 4, 2, 0.01)};
  const Evaluator eval = [&tasks](ModelState& s, int k) {
    const Dataset& d = tasks[static_cast<std::size_t>(k)];
    return loss_mse(predict(s, d.x), d.y);
  };
  ModelState state = ModelState::init(4, 2, cfg);
  train_sequence(state, tasks, cfg, eval);

  const long long routed = state.counter.routing_evaluations;
  CHECK(routed > 0);
  const Scalar params = checksum_state(state);
  const std::uint64_t anchor = checksum(state.anchor.w_orig);

  for (int i = 0; i < 5; ++i) {
    predict(state, tasks[0].x);
  }
  CHECK(state.counter.routing_evaluations == routed);
  CHECK(checksum_state(state) == params);
  CHECK(checksum(state.anchor.w_orig) == anchor);
}

TEST_CASE("model checkpoints round-trip bit-exactly") {
  Rng rng(220);
  TrainConfig cfg = small_config(23);
  cfg.learning_rate = 0.05;
  cfg.batch_size = 4;
  ModelState state = ModelState::init(4, 2, cfg);
  const Dataset data = linear_dataset(rng, 8, 4, 2, 0.01);
  train_task(state, data, cfg);

  const std::string path = "model_roundtrip.ckpt";
  io::save_model(path, state);
  ModelState loaded = io::load_model(path);

  CHECK((loaded.w0 - state.w0).norm() == 0.0);
  CHECK((loaded.a - state.a).norm() == 0.0);
  CHECK((loaded.adapter.weight() - state.adapter.weight()).norm() == 0.0);
  CHECK(loaded.adapter.num_programs() == state.adapter.num_programs());
  CHECK((loaded.scaling.s - state.scaling.s).norm() == 0.0);
  CHECK(loaded.scaling.gamma_logit == state.scaling.gamma_logit);
  CHECK((loaded.encoder.weight - state.encoder.weight).norm() == 0.0);
  CHECK((loaded.encoder.bias - state.encoder.bias).norm() == 0.0);
  REQUIRE(loaded.keys.keys.size() == state.keys.keys.size());
  for (std::size_t h = 0; h < state.keys.keys.size(); ++h) {
    CHECK((loaded.keys.keys[h] - state.keys.keys[h]).norm() == 0.0);
  }
  CHECK((loaded.anchor.w_orig - state.anchor.w_orig).norm() == 0.0);
  CHECK(loaded.anchor.gamma == state.anchor.gamma);

  // Saving the loaded model reproduces the same bytes.
  const std::string path2 = "model_roundtrip2.ckpt";
  io::save_model(path2, loaded);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());

  // The loaded model predicts identically.
  CHECK((predict(loaded, data.x) - predict(state, data.x)).norm() == 0.0);

  std::remove(path.c_str());
  std::remove(path2.c_str());
}
