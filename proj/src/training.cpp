#include "contraction_kit/training.hpp"

#include <array>
#include <chrono>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace ckit {

void TrainConfig::validate() const {
  if (N < 1 || batch_size < 1 || N < batch_size)
    throw std::invalid_argument("train: need N >= batch_size >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("train: alpha must be > 0");
  if (!(m_under > 0.0) || m_bar < m_under)
    throw std::invalid_argument("train: need m_bar >= m_under > 0");
  if (K < 1) throw std::invalid_argument("train: K must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw std::invalid_argument("train: holdout_fraction must be in [0, 1)");
  if (channels < 0) throw std::invalid_argument("train: channels must be >= 0");
}

void TrainConfig::use_full_scale() {
  N = 130000;
  epochs = 20;
}

std::vector<Sample> sample_dataset(const SystemModel& system, int N, RngStream& rng) {
  if (N < 1) throw std::invalid_argument("sample_dataset: N must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    Sample s;
    s.x_d = system.state_box.sample(rng);
    s.x = s.x_d + system.error_box.sample(rng);
    s.u_d = system.input_box.sample(rng);
    s.t = rng.uniform(system.t_min, system.t_max);
    out.push_back(std::move(s));
  }
  return out;
}

void initialize_networks(const SystemModel& system, const TrainConfig& c, MetricNet& metric,
                         ControllerNet& controller) {
  RngStream rng(c.seed, streams::kInit);
  const double time_scale = std::max(1.0, system.t_max - system.t_min);
  metric = MetricNet::create(system.n, c.metric_hidden, c.m_bar, c.m_under, rng, c.time_input,
                             time_scale, c.metric_state_inputs);
  const int channels = c.channels > 0 ? c.channels : 3 * system.n;
  controller = ControllerNet::create(system.n, system.m, channels, c.controller_hidden, rng,
                                     c.controller_state_inputs);
}

namespace {

Vector flatten_all(const MetricNet& metric, const ControllerNet& controller) {
  const Vector a = metric.theta.flatten(), b = controller.w1.flatten(), c = controller.w2.flatten();
  Vector out(a.size() + b.size() + c.size());
  out << a, b, c;
  return out;
}

void assign_all(const Vector& p, MetricNet& metric, ControllerNet& controller) {
  const auto na = static_cast<Eigen::Index>(metric.theta.parameter_count());
  const auto nb = static_cast<Eigen::Index>(controller.w1.parameter_count());
  const auto nc = static_cast<Eigen::Index>(controller.w2.parameter_count());
  metric.theta.assign(p.segment(0, na));
  controller.w1.assign(p.segment(na, nb));
  controller.w2.assign(p.segment(na + nb, nc));
}

bool finite(const LossReport& r) {
  return std::isfinite(r.l_u) && std::isfinite(r.l_c) && std::isfinite(r.l_w1) &&
         std::isfinite(r.l_w2);
}

class Adam {
 public:
  explicit Adam(Eigen::Index size) : m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

  void step(Vector& params, const Vector& grad, double lr) {
    ++t_;
    m_ = kBeta1 * m_ + (1.0 - kBeta1) * grad;
    v_ = kBeta2 * v_ + (1.0 - kBeta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + kEps);
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  Vector m_, v_;
  int t_ = 0;
};

}  // namespace

TrainResult train(const SystemModel& system, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  result.config = config;
  initialize_networks(system, config, result.metric, result.controller);

  RngStream data_rng(config.seed, streams::kDataset);
  std::vector<Sample> data = sample_dataset(system, config.N, data_rng);
  const int holdout = static_cast<int>(std::floor(config.holdout_fraction * config.N));
  const int n_train = std::max(config.batch_size, config.N - holdout);
  result.holdout.assign(data.begin() + n_train, data.end());
  data.resize(static_cast<std::size_t>(n_train));

  LossOptions opts;
  opts.alpha = config.alpha;
  opts.cv_enabled = config.cv_enabled;
  opts.cv_scale = config.cv_scale;

  RngStream sphere_rng(config.seed, streams::kSphere);
  RngStream shuffle_rng(config.seed, streams::kShuffle);
  const SpherePoints eval_points(system.n, config.K, sphere_rng);

  Vector params = flatten_all(result.metric, result.controller);
  Adam adam(params.size());
  const int decay_every = config.lr_decay_every > 0 ? config.lr_decay_every
                                                     : std::max(1, config.epochs / 3);
  std::vector<int> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  std::vector<Sample> batch;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate * std::pow(config.lr_decay, epoch / decay_every);
    for (int i = n_train - 1; i > 0; --i) {
      const int j = std::min(i, static_cast<int>(shuffle_rng.uniform(0.0, i + 1.0)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    const int batches = n_train / config.batch_size;
    for (int b = 0; b < batches; ++b) {
      batch.clear();
      for (int i = 0; i < config.batch_size; ++i)
        batch.push_back(data[static_cast<std::size_t>(order[static_cast<std::size_t>(b * config.batch_size + i)])]);
      const SpherePoints points(system.n, config.K, sphere_rng);
      const BatchLoss bl =
          empirical_loss(result.metric, result.controller, system, batch, opts, points, true);
      const Vector g = bl.gradient->flatten();
      if (!finite(bl.report) || !g.allFinite())
        throw TrainingDivergence("training diverged at epoch " + std::to_string(epoch + 1) +
                                     ", batch " + std::to_string(b),
                                 epoch + 1, b);
      adam.step(params, g, lr);
      assign_all(params, result.metric, result.controller);
    }
    const BatchLoss full =
        empirical_loss(result.metric, result.controller, system, data, opts, eval_points, false);
    if (!finite(full.report))
      throw TrainingDivergence("training diverged at end of epoch " + std::to_string(epoch + 1),
                               epoch + 1, -1);
    result.history.push_back(full.report);
    if (on_epoch) on_epoch(epoch + 1, full.report);
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

void write_loss_history_csv(const std::string& path, const std::vector<LossReport>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,l_u,l_c,l_w1,l_w2,total\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& r = history[i];
    out << (i + 1) << ',' << format_double(r.l_u) << ',' << format_double(r.l_c) << ','
        << format_double(r.l_w1) << ',' << format_double(r.l_w2) << ','
        << format_double(r.total()) << '\n';
  }
}

}  // namespace ckit
