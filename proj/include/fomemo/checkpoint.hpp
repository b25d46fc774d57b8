#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "fomemo/errors.hpp"
#include "fomemo/model.hpp"
#include "fomemo/riemann.hpp"

namespace fomemo {

// Container layout: 8-byte magic "FOMEMO01", u32 little-endian header length,
// UTF-8 JSON header (model config, riemann support, train state, tensor
// manifest with byte offsets), then raw little-endian f32 tensor data in
// manifest order. Optimizer moments ride along as "adam_m.*" / "adam_v.*"
// manifest entries so an interrupted run resumes with its exact state.
inline constexpr char kCheckpointMagic[8] = {'F', 'O', 'M', 'E',
                                             'M', 'O', '0', '1'};

struct TrainState {
  long long epoch = 0;
  long long global_step = 0;
  std::uint64_t master_seed = 0;
};

struct Checkpoint {
  ModelParams<float> params;
  RiemannSupport support;
  TrainState train_state;
  bool has_optimizer = false;
  ModelParams<float> adam_m, adam_v;  // meaningful only if has_optimizer
};

namespace detail {

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"embed_dim", cfg.embed_dim},
                        {"ff_dim", cfg.ff_dim},
                        {"n_heads", cfg.n_heads},
                        {"n_layers", cfg.n_layers},
                        {"n_bins", cfg.n_bins},
                        {"max_input_dim", cfg.max_input_dim},
                        {"max_objectives", cfg.max_objectives},
                        {"max_tokens", cfg.max_tokens}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.ff_dim = j.at("ff_dim").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_bins = j.at("n_bins").get<int>();
  cfg.max_input_dim = j.at("max_input_dim").get<int>();
  cfg.max_objectives = j.at("max_objectives").get<int>();
  cfg.max_tokens = j.at("max_tokens").get<int>();
  return cfg;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            ModelParams<float>& params,
                            const RiemannSupport& support,
                            const TrainState& state,
                            ModelParams<float>* adam_m = nullptr,
                            ModelParams<float>* adam_v = nullptr) {
  if ((adam_m == nullptr) != (adam_v == nullptr))
    throw CheckpointError("save_checkpoint: need both moments or neither");
  if (support.bins() != params.config.n_bins)
    throw CheckpointError("save_checkpoint: support/model bin mismatch");

  struct Entry {
    std::string name;
    TensorRef<float> ref;
  };
  std::vector<Entry> entries;
  for (auto& t : params.tensors()) entries.push_back({t.name, t});
  if (adam_m) {
    for (auto& t : adam_m->tensors()) entries.push_back({"adam_m." + t.name, t});
    for (auto& t : adam_v->tensors()) entries.push_back({"adam_v." + t.name, t});
  }

  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    manifest.push_back({{"name", e.name},
                        {"rows", e.ref.rows},
                        {"cols", e.ref.cols},
                        {"offset", offset}});
    offset += static_cast<std::uint64_t>(e.ref.size()) * sizeof(float);
  }

  nlohmann::json header{
      {"schema", 1},
      {"model", detail::model_config_to_json(params.config)},
      {"support",
       {{"boundaries", std::vector<double>(support.boundaries.data(),
                                           support.boundaries.data() +
                                               support.boundaries.size())},
        {"tail_scale", support.tail_scale}}},
      {"train_state",
       {{"epoch", state.epoch},
        {"global_step", state.global_step},
        {"master_seed", state.master_seed}}},
      {"tensors", manifest}};
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t hlen = static_cast<std::uint32_t>(header_str.size());
  unsigned char lenbuf[4] = {static_cast<unsigned char>(hlen & 0xff),
                             static_cast<unsigned char>((hlen >> 8) & 0xff),
                             static_cast<unsigned char>((hlen >> 16) & 0xff),
                             static_cast<unsigned char>((hlen >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenbuf), 4);
  out.write(header_str.data(),
            static_cast<std::streamsize>(header_str.size()));
  for (const auto& e : entries)
    out.write(reinterpret_cast<const char*>(e.ref.data),
              static_cast<std::streamsize>(e.ref.size() * sizeof(float)));
  if (!out) throw CheckpointError("save_checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("load_checkpoint: cannot open " + path);

  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("load_checkpoint: bad magic in " + path);
  unsigned char lenbuf[4];
  in.read(reinterpret_cast<char*>(lenbuf), 4);
  if (!in) throw CheckpointError("load_checkpoint: truncated header length");
  const std::uint32_t hlen = static_cast<std::uint32_t>(lenbuf[0]) |
                             (static_cast<std::uint32_t>(lenbuf[1]) << 8) |
                             (static_cast<std::uint32_t>(lenbuf[2]) << 16) |
                             (static_cast<std::uint32_t>(lenbuf[3]) << 24);
  if (hlen == 0 || hlen > (64u << 20))
    throw CheckpointError("load_checkpoint: implausible header length");
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), hlen);
  if (!in) throw CheckpointError("load_checkpoint: truncated header");

  nlohmann::json header;
  Checkpoint ckpt;
  try {
    header = nlohmann::json::parse(header_str);
    ckpt.params = make_params<float>(
        detail::model_config_from_json(header.at("model")));
    const auto& sup = header.at("support");
    const auto bvec = sup.at("boundaries").get<std::vector<double>>();
    ckpt.support.boundaries =
        Eigen::Map<const Eigen::VectorXd>(bvec.data(), bvec.size());
    ckpt.support.tail_scale = sup.at("tail_scale").get<double>();
    const auto& ts = header.at("train_state");
    ckpt.train_state.epoch = ts.at("epoch").get<long long>();
    ckpt.train_state.global_step = ts.at("global_step").get<long long>();
    ckpt.train_state.master_seed = ts.at("master_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("load_checkpoint: bad header: ") +
                          e.what());
  }
  if (ckpt.support.bins() != ckpt.params.config.n_bins)
    throw CheckpointError("load_checkpoint: support/model bin mismatch");
  for (Eigen::Index k = 1; k < ckpt.support.boundaries.size(); ++k)
    if (!(ckpt.support.boundaries(k) > ckpt.support.boundaries(k - 1)))
      throw CheckpointError("load_checkpoint: boundaries not increasing");
  if (!(ckpt.support.tail_scale > 0.0))
    throw CheckpointError("load_checkpoint: nonpositive tail scale");

  ckpt.adam_m = make_params<float>(ckpt.params.config);
  ckpt.adam_v = make_params<float>(ckpt.params.config);
  std::unordered_map<std::string, TensorRef<float>> by_name;
  for (auto& t : ckpt.params.tensors()) by_name.emplace(t.name, t);
  for (auto& t : ckpt.adam_m.tensors()) by_name.emplace("adam_m." + t.name, t);
  for (auto& t : ckpt.adam_v.tensors()) by_name.emplace("adam_v." + t.name, t);

  const Eigen::Index n_params =
      static_cast<Eigen::Index>(ckpt.params.tensors().size());
  Eigen::Index filled_params = 0, filled_moments = 0;
  std::uint64_t expect_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    std::uint64_t off = 0;
    try {
      name = entry.at("name").get<std::string>();
      rows = entry.at("rows").get<Eigen::Index>();
      cols = entry.at("cols").get<Eigen::Index>();
      off = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("load_checkpoint: bad manifest: ") +
                            e.what());
    }
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError("load_checkpoint: unknown tensor " + name);
    if (it->second.rows != rows || it->second.cols != cols)
      throw CheckpointError("load_checkpoint: shape mismatch for " + name);
    if (off != expect_offset)
      throw CheckpointError("load_checkpoint: non-contiguous offset for " +
                            name);
    in.read(reinterpret_cast<char*>(it->second.data),
            static_cast<std::streamsize>(it->second.size() * sizeof(float)));
    if (!in)
      throw CheckpointError("load_checkpoint: truncated data for " + name);
    expect_offset += static_cast<std::uint64_t>(it->second.size()) *
                     sizeof(float);
    if (name.rfind("adam_", 0) == 0)
      ++filled_moments;
    else
      ++filled_params;
  }
  if (filled_params != n_params)
    throw CheckpointError("load_checkpoint: incomplete parameter set");
  if (filled_moments != 0 && filled_moments != 2 * n_params)
    throw CheckpointError("load_checkpoint: incomplete optimizer state");
  ckpt.has_optimizer = filled_moments == 2 * n_params;
  return ckpt;
}

}  // namespace fomemo
