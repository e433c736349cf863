#include "pcmoe/config_json.hpp"

#include "json.hpp"
#include "pcmoe/errors.hpp"

namespace pcmoe {

namespace {

nlohmann::ordered_json moe_json(const MoEConfig& m) {
  nlohmann::ordered_json j;
  j["n_experts"] = m.n_experts;
  j["top_k"] = m.top_k;
  j["grid"] = m.grid;
  j["gate"] = to_string(m.gate);
  j["gate_hidden_channels"] = m.gate_hidden_channels;
  j["n_shared"] = m.n_shared;
  j["expert_kernel"] = to_string(m.expert_kernel);
  j["in_channels"] = m.in_channels;
  j["out_channels"] = m.out_channels;
  j["balancing"] = to_string(m.balancing);
  j["loss_weight"] = m.loss_weight;
  return j;
}

MoEConfig moe_from(const nlohmann::json& j) {
  MoEConfig m;
  m.n_experts = j.at("n_experts").get<int>();
  m.top_k = j.at("top_k").get<int>();
  m.grid = j.at("grid").get<int>();
  m.gate = parse_gate_kind(j.at("gate").get<std::string>());
  m.gate_hidden_channels = j.at("gate_hidden_channels").get<int>();
  m.n_shared = j.at("n_shared").get<int>();
  m.expert_kernel = parse_expert_kernel(j.at("expert_kernel").get<std::string>());
  m.in_channels = j.at("in_channels").get<int>();
  m.out_channels = j.at("out_channels").get<int>();
  m.balancing = parse_balancing_loss(j.at("balancing").get<std::string>());
  m.loss_weight = j.at("loss_weight").get<double>();
  return m;
}

}  // namespace

std::string dump_train_config(const TrainConfig& c, int indent) {
  nlohmann::ordered_json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["seed"] = c.seed;
  j["n_train"] = c.n_train;
  j["n_val"] = c.n_val;
  j["image_size"] = c.image_size;
  j["data_seed"] = c.data_seed;
  j["trace_every"] = c.trace_every;
  j["gate_bias"] = c.gate_bias;
  nlohmann::ordered_json model;
  model["num_classes"] = c.model.num_classes;
  model["moe_slots"] = c.model.moe_slots;
  model["moe"] = moe_json(c.model.moe);
  j["model"] = model;
  return j.dump(indent);
}

TrainConfig parse_train_config(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_train = j.at("n_train").get<int>();
    c.n_val = j.at("n_val").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.data_seed = j.at("data_seed").get<std::uint64_t>();
    c.trace_every = j.at("trace_every").get<int>();
    c.gate_bias = j.at("gate_bias").get<double>();
    const auto& m = j.at("model");
    c.model.num_classes = m.at("num_classes").get<int>();
    c.model.moe_slots = m.at("moe_slots").get<std::vector<std::string>>();
    c.model.moe = moe_from(m.at("moe"));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config JSON: ") + e.what());
  }
}

}  // namespace pcmoe
