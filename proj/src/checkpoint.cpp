#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "attgf/errors.hpp"
#include "attgf/model.hpp"

namespace attgf {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'A', 'T', 'T', 'G', 'F', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as native little-endian doubles");

json config_json(const ModelConfig& c) {
  return json{{"num_stages", c.num_stages},       {"stage_channels", c.stage_channels},
              {"stem_channels", c.stem_channels}, {"reduction", c.reduction},
              {"num_attributes", c.num_attributes}, {"bn_epsilon", c.bn_epsilon},
              {"bn_momentum", c.bn_momentum},     {"input_size", c.input_size},
              {"use_cba", c.use_cba},             {"use_agt", c.use_agt},
              {"init_seed", c.init_seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.num_stages = j.at("num_stages").get<int>();
  c.stage_channels = j.at("stage_channels").get<std::vector<int>>();
  c.stem_channels = j.at("stem_channels").get<int>();
  c.reduction = j.at("reduction").get<int>();
  c.num_attributes = j.at("num_attributes").get<int>();
  c.bn_epsilon = j.at("bn_epsilon").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.input_size = j.at("input_size").get<int>();
  c.use_cba = j.at("use_cba").get<bool>();
  c.use_agt = j.at("use_agt").get<bool>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

json shape_json(const Shape& s) { return json::array({s.n, s.c, s.h, s.w}); }

Shape shape_from(const json& j) {
  auto v = j.get<std::vector<int>>();
  if (v.size() != 4) throw DataError("checkpoint tensor shape must have 4 entries");
  return Shape{v[0], v[1], v[2], v[3]};
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  return config_from(json::parse(text));
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::vector<NamedTensor>& extra) {
  std::vector<NamedTensor> tensors = model.parameters();
  const auto& stats = model.running_stats();
  for (std::size_t i = 0; i < stats.size(); ++i) {
    tensors.push_back({"bn" + std::to_string(i) + ".running_mean", stats[i].running_mean});
    tensors.push_back({"bn" + std::to_string(i) + ".running_var", stats[i].running_var});
  }
  const std::size_t model_tensors = tensors.size();
  tensors.insert(tensors.end(), extra.begin(), extra.end());

  json header;
  header["config"] = config_json(model.config());
  header["model_tensors"] = model_tensors;
  json entries = json::array();
  for (const auto& t : tensors) entries.push_back({{"name", t.name}, {"shape", shape_json(t.value.shape())}});
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    auto d = t.value.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a checkpoint archive: " + path.string());
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " +
                    path.string());
  }
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw DataError("truncated checkpoint header: " + path.string());

  json header = json::parse(text);
  Model model(config_from(header.at("config")));
  const std::size_t model_tensors = header.at("model_tensors").get<std::size_t>();
  std::vector<NamedTensor> tensors;
  for (const auto& e : header.at("tensors")) {
    Shape shape = shape_from(e.at("shape"));
    std::vector<double> values(shape.size());
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint payload: " + path.string());
    tensors.push_back({e.at("name").get<std::string>(), Tensor::from_data(shape, std::move(values))});
  }

  const auto& params = model.parameters();
  auto& stats = model.running_stats();
  if (model_tensors != params.size() + 2 * stats.size() || tensors.size() < model_tensors) {
    throw DataError("checkpoint tensor count does not match its configuration: " + path.string());
  }
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].name != params[i].name) {
      throw DataError("checkpoint tensor " + tensors[i].name + " where " + params[i].name +
                      " was expected: " + path.string());
    }
    values.push_back(tensors[i].value);
  }
  model.set_parameters(values);
  for (std::size_t i = 0; i < stats.size(); ++i) {
    stats[i].running_mean = tensors[params.size() + 2 * i].value;
    stats[i].running_var = tensors[params.size() + 2 * i + 1].value;
  }
  std::vector<NamedTensor> extra(tensors.begin() + static_cast<std::ptrdiff_t>(model_tensors),
                                 tensors.end());
  return LoadedCheckpoint{std::move(model), std::move(extra)};
}

}  // namespace attgf
