#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "contraction_kit/checkpoint.hpp"
#include "contraction_kit/training.hpp"

using namespace ckit;

namespace {

TrainConfig small_scalar_config() {
  TrainConfig c;
  c.N = 2000;
  c.epochs = 50;
  c.batch_size = 64;
  c.learning_rate = 1e-2;
  c.metric_hidden = {8};
  c.controller_hidden = {8};
  c.K = 8;
  c.seed = 3;
  return c;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Dataset, SamplesInsideBoxes) {
  const SystemModel s = make_pvtol();
  RngStream rng(1, streams::kDataset);
  for (const Sample& x : sample_dataset(s, 2000, rng)) {
    EXPECT_TRUE(s.state_box.contains(x.x_d));
    EXPECT_TRUE(s.error_box.contains(x.x - x.x_d, 1e-12));
    EXPECT_TRUE(s.input_box.contains(x.u_d));
    EXPECT_GE(x.t, s.t_min);
    EXPECT_LE(x.t, s.t_max);
  }
}

TEST(Dataset, Deterministic) {
  const SystemModel s = make_pvtol();
  RngStream a(2, streams::kDataset), b(2, streams::kDataset);
  const auto da = sample_dataset(s, 100, a), db = sample_dataset(s, 100, b);
  for (std::size_t i = 0; i < da.size(); ++i) {
    EXPECT_EQ(da[i].x, db[i].x);
    EXPECT_EQ(da[i].u_d, db[i].u_d);
    EXPECT_EQ(da[i].t, db[i].t);
  }
}

TEST(Dataset, UniformMeans) {
  const SystemModel s = make_pvtol();
  RngStream rng(3, streams::kDataset);
  const int N = 100000;
  const auto data = sample_dataset(s, N, rng);
  Vector mean = Vector::Zero(6);
  for (const auto& x : data) mean += x.x_d;
  mean /= N;
  const Vector mid = 0.5 * (s.state_box.lo + s.state_box.hi);
  const Vector width = s.state_box.hi - s.state_box.lo;
  for (int i = 0; i < 6; ++i) {
    const double sigma = width(i) / std::sqrt(12.0 * N);
    EXPECT_LT(std::abs(mean(i) - mid(i)), 3.0 * sigma) << "coordinate " << i;
  }
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = c.N + 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.m_under = 20.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.use_full_scale();
  EXPECT_EQ(c.N, 130000);
  EXPECT_EQ(c.epochs, 20);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const SystemModel s = make_scalar_test(-1.0);
  TrainConfig c = small_scalar_config();
  c.epochs = 0;
  MetricNet m0;
  ControllerNet c0;
  initialize_networks(s, c, m0, c0);
  const TrainResult r = train(s, c);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.metric.theta.flatten(), m0.theta.flatten());
  EXPECT_EQ(r.controller.w1.flatten(), c0.w1.flatten());
  EXPECT_EQ(r.controller.w2.flatten(), c0.w2.flatten());
}

TEST(Train, ScalarReachesZeroLoss) {
  const SystemModel s = make_scalar_test(-1.0);
  const TrainResult r = train(s, small_scalar_config());
  ASSERT_EQ(r.history.size(), 50u);
  EXPECT_LT(r.history.back().total(), 1e-4);
  EXPECT_EQ(r.holdout.size(), 200u);
}

TEST(Train, BitReproducible) {
  const SystemModel s = make_pvtol();
  TrainConfig c;
  c.N = 512;
  c.epochs = 3;
  c.batch_size = 64;
  c.metric_hidden = {8};
  c.controller_hidden = {8};
  c.seed = 11;
  set_worker_threads(2);
  const TrainResult a = train(s, c);
  set_worker_threads(4);
  const TrainResult b = train(s, c);
  set_worker_threads(0);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].total(), b.history[i].total());
  EXPECT_EQ(a.metric.theta.flatten(), b.metric.theta.flatten());
}

TEST(Train, CallbackSeesEveryEpoch) {
  const SystemModel s = make_scalar_test(-1.0);
  TrainConfig c = small_scalar_config();
  c.epochs = 4;
  int calls = 0;
  train(s, c, [&](int epoch, const LossReport&) { EXPECT_EQ(epoch, ++calls); });
  EXPECT_EQ(calls, 4);
}

TEST(LossCsv, SchemaAndFormatting) {
  const auto dir = std::filesystem::temp_directory_path() / "ckit_test_training";
  std::filesystem::create_directories(dir);
  LossReport r;
  r.l_u = 0.5;
  r.l_c = 0.0;
  r.l_w1 = 1e-7;
  r.l_w2 = 2.0;
  write_loss_history_csv((dir / "h.csv").string(), {r});
  EXPECT_EQ(read_file(dir / "h.csv"), "epoch,l_u,l_c,l_w1,l_w2,total\n1,0.5,0,1e-07,2,2.5000001\n");
  EXPECT_EQ(format_double(0.1), "0.1");
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RoundTrip) {
  const SystemModel s = make_pvtol();
  TrainConfig c;
  c.metric_hidden = {5, 4};
  c.controller_hidden = {6};
  c.metric_state_inputs = {2, 3, 4, 5};
  Checkpoint ck;
  ck.system = "pvtol";
  ck.alpha = 0.7;
  initialize_networks(s, c, ck.metric, ck.controller);
  const auto dir = std::filesystem::temp_directory_path() / "ckit_test_ckpt";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "c.json").string();
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.system, "pvtol");
  EXPECT_EQ(back.alpha, 0.7);
  EXPECT_EQ(back.metric.theta.flatten(), ck.metric.theta.flatten());
  EXPECT_EQ(back.metric.state_inputs, ck.metric.state_inputs);
  EXPECT_EQ(back.metric.m_bar, ck.metric.m_bar);
  EXPECT_EQ(back.controller.w2.flatten(), ck.controller.w2.flatten());
  EXPECT_EQ(back.controller.channels, ck.controller.channels);

  nlohmann::json j = checkpoint_to_json(ck);
  EXPECT_EQ(j["version"], kCheckpointVersion);
  j["version"] = "something-else";
  EXPECT_THROW(checkpoint_from_json(j), std::runtime_error);
  std::filesystem::remove_all(dir);
}
