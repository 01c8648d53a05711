#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/autodiff/adamw.hpp"
#include "pearl/autodiff/graph.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl::ad {

// Checkpoint layout: a JSON manifest (name, shape, byte offset per tensor)
// next to a flat little-endian float32 blob. Optimizer moments are stored as
// extra tensors named "adamw.m/<param>" and "adamw.v/<param>".

inline constexpr const char* kCheckpointFormat = "pearl-ckpt-v1";

struct CheckpointData {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::optional<std::uint64_t> optimizer_step;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest) {
  std::filesystem::path blob = manifest;
  blob.replace_extension(".bin");
  return blob;
}

namespace detail {

inline void put_f32(std::vector<char>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& manifest_path, const ParameterSet<T>& params,
                     const AdamW<T>* optimizer, const nlohmann::json& meta) {
  std::vector<char> blob;
  nlohmann::json entries = nlohmann::json::array();
  auto append = [&](const std::string& name, const Shape& shape, std::span<const T> values) {
    entries.push_back({{"name", name}, {"shape", shape}, {"offset", blob.size()}});
    for (T v : values) detail::put_f32(blob, static_cast<float>(v));
  };
  for (const auto& p : params) append(p.name, p.value.shape(), p.value.values());
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"dtype", "float32-le"},
                             {"data_file", checkpoint_blob_path(manifest_path).filename().string()},
                             {"meta", meta}};
  if (optimizer != nullptr) {
    const auto& states = optimizer->states();
    PEARL_REQUIRE(states.size() == params.size(), ShapeError,
                  "optimizer state does not match parameter set");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      std::vector<T> zeros(p.value.size(), T{0});
      const auto& m = states[i].m.empty() ? zeros : states[i].m;
      const auto& v = states[i].v.empty() ? zeros : states[i].v;
      append("adamw.m/" + p.name, p.value.shape(), m);
      append("adamw.v/" + p.name, p.value.shape(), v);
    }
    manifest["optimizer"] = {{"kind", "adamw"}, {"step", optimizer->steps_taken()}};
  }
  manifest["tensors"] = std::move(entries);

  if (manifest_path.has_parent_path())
    std::filesystem::create_directories(manifest_path.parent_path());
  {
    std::ofstream out(checkpoint_blob_path(manifest_path), std::ios::binary | std::ios::trunc);
    PEARL_REQUIRE(out.good(), IoError, "cannot write " + checkpoint_blob_path(manifest_path).string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    PEARL_REQUIRE(out.good(), IoError, "write failed for checkpoint blob");
  }
  std::ofstream out(manifest_path, std::ios::trunc);
  PEARL_REQUIRE(out.good(), IoError, "cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
  PEARL_REQUIRE(out.good(), IoError, "write failed for checkpoint manifest");
}

inline CheckpointData read_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  PEARL_REQUIRE(in.good(), IoError, "cannot open checkpoint " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  PEARL_REQUIRE(manifest.value("format", "") == kCheckpointFormat, IoError,
                "unsupported checkpoint format in " + manifest_path.string());

  std::filesystem::path blob_path =
      manifest_path.parent_path() / manifest.at("data_file").get<std::string>();
  std::ifstream blob_in(blob_path, std::ios::binary);
  PEARL_REQUIRE(blob_in.good(), IoError, "cannot open checkpoint data " + blob_path.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(blob_in)),
                                  std::istreambuf_iterator<char>());

  CheckpointData data;
  data.meta = manifest.value("meta", nlohmann::json::object());
  if (manifest.contains("optimizer"))
    data.optimizer_step = manifest["optimizer"].at("step").get<std::uint64_t>();
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t count = numel(shape);
    PEARL_REQUIRE(offset + 4 * count <= blob.size(), IoError,
                  "checkpoint tensor " + e.at("name").get<std::string>() + " exceeds data file");
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = detail::get_f32(&blob[offset + 4 * i]);
    data.tensors.emplace_back(e.at("name").get<std::string>(),
                              Tensor<float>(std::move(shape), std::move(values)));
  }
  return data;
}

template <class T>
void restore_parameters(const CheckpointData& data, ParameterSet<T>& params) {
  for (auto& p : params) {
    const Tensor<float>* t = data.find(p.name);
    PEARL_REQUIRE(t != nullptr, IoError, "checkpoint lacks parameter " + p.name);
    PEARL_REQUIRE(t->shape() == p.value.shape(), ShapeError,
                  "checkpoint shape mismatch for " + p.name + ": " + to_string(t->shape()) +
                      " vs " + to_string(p.value.shape()));
    p.value = t->template cast<T>();
  }
}

template <class T>
void restore_optimizer(const CheckpointData& data, const ParameterSet<T>& params,
                       AdamW<T>& optimizer) {
  PEARL_REQUIRE(data.optimizer_step.has_value(), IoError, "checkpoint has no optimizer state");
  auto& states = optimizer.states();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = data.find("adamw.m/" + params[i].name);
    const auto* v = data.find("adamw.v/" + params[i].name);
    PEARL_REQUIRE(m && v, IoError, "checkpoint lacks optimizer moments for " + params[i].name);
    states[i].m.assign(m->values().begin(), m->values().end());
    states[i].v.assign(v->values().begin(), v->values().end());
    states[i].step = *data.optimizer_step;
  }
}

}  // namespace pearl::ad
