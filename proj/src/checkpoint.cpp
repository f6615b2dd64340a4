#include "contraction_kit/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace ckit {

using nlohmann::json;

json mlp_to_json(const Mlp& net) {
  const Vector p = net.flatten();
  return {{"widths", net.widths()}, {"parameters", std::vector<double>(p.data(), p.data() + p.size())}};
}

Mlp mlp_from_json(const json& j) {
  Mlp net = Mlp::zeros(j.at("widths").get<std::vector<int>>());
  const auto p = j.at("parameters").get<std::vector<double>>();
  net.assign(Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())));
  return net;
}

json checkpoint_to_json(const Checkpoint& c) {
  json metric = {{"n", c.metric.n},
                 {"m_bar", c.metric.m_bar},
                 {"m_under", c.metric.m_under},
                 {"time_input", c.metric.time_input},
                 {"time_scale", c.metric.time_scale},
                 {"state_inputs", c.metric.state_inputs},
                 {"theta", mlp_to_json(c.metric.theta)}};
  json controller = {{"n", c.controller.n},
                     {"m", c.controller.m},
                     {"channels", c.controller.channels},
                     {"state_inputs", c.controller.state_inputs},
                     {"w1", mlp_to_json(c.controller.w1)},
                     {"w2", mlp_to_json(c.controller.w2)}};
  return {{"version", kCheckpointVersion}, {"system", c.system},  {"alpha", c.alpha},
          {"metric", metric},              {"controller", controller}, {"config", c.config}};
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.contains("version") || j.at("version") != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version");
  try {
    Checkpoint c;
    c.system = j.at("system").get<std::string>();
    c.alpha = j.at("alpha").get<double>();
    c.config = j.value("config", json::object());
    const json& m = j.at("metric");
    c.metric.n = m.at("n").get<int>();
    c.metric.m_bar = m.at("m_bar").get<double>();
    c.metric.m_under = m.at("m_under").get<double>();
    c.metric.time_input = m.at("time_input").get<bool>();
    c.metric.time_scale = m.at("time_scale").get<double>();
    c.metric.state_inputs = m.at("state_inputs").get<std::vector<int>>();
    c.metric.theta = mlp_from_json(m.at("theta"));
    const json& k = j.at("controller");
    c.controller.n = k.at("n").get<int>();
    c.controller.m = k.at("m").get<int>();
    c.controller.channels = k.at("channels").get<int>();
    c.controller.state_inputs = k.at("state_inputs").get<std::vector<int>>();
    c.controller.w1 = mlp_from_json(k.at("w1"));
    c.controller.w2 = mlp_from_json(k.at("w2"));
    return c;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed document: ") + e.what());
  }
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return json::parse(in);
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_json_file(path, checkpoint_to_json(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_json(read_json_file(path));
}

}  // namespace ckit
