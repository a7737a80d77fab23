#pragma once

// Single-file checkpoint container. Layout (little-endian):
//   magic "STNMCKPT" | u32 version | u64 config_len | config JSON |
//   u64 step | u8 has_optimizer | u64 n_params |
//   per param: u16 name_len | name | u8 rank | u32 dims[rank] | f32 data[[]
//   if has_optimizer: u64 adam_t | per param: f32 m[] | f32 v[]
// Parameters are stored row-major as float32 in registration order, keyed by
// name; loading verifies name and shape.

#include <cstdio>
#include <fstream>

#include "stn/model.hpp"
#include "stn/optim.hpp"

namespace stn {

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'S', 'T', 'N', 'M', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail_data("checkpoint: truncated file");
  return v;
}

template <class S>
void write_f32(std::ostream& os, const Tensor<S>& t) {
  for (long i = 0; i < t.numel(); ++i) write_pod<float>(os, (float)t[i]);
}

template <class S>
void read_f32(std::istream& is, Tensor<S>& t) {
  std::vector<float> buf(t.numel());
  is.read(reinterpret_cast<char*>(buf.data()), sizeof(float) * buf.size());
  if (!is) fail_data("checkpoint: truncated tensor data");
  for (long i = 0; i < t.numel(); ++i) t[i] = (S)buf[i];
}

}  // namespace ckpt_detail

template <class S>
void save_checkpoint(const std::string& path, STNMamba<S>& model, long step,
                     Adam<S>* opt = nullptr) {
  using namespace ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_data("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  write_pod<uint32_t>(os, kVersion);
  std::string cfg = model.config().to_json().dump();
  write_pod<uint64_t>(os, cfg.size());
  os.write(cfg.data(), cfg.size());
  write_pod<uint64_t>(os, (uint64_t)step);
  write_pod<uint8_t>(os, opt ? 1 : 0);
  auto params = model.named_params();
  write_pod<uint64_t>(os, params.size());
  for (auto& [name, p] : params) {
    write_pod<uint16_t>(os, (uint16_t)name.size());
    os.write(name.data(), name.size());
    const Shape& sh = p->value.shape();
    write_pod<uint8_t>(os, (uint8_t)sh.rank);
    for (int d = 0; d < sh.rank; ++d) write_pod<uint32_t>(os, (uint32_t)sh.d[d]);
    write_f32(os, p->value);
  }
  if (opt) {
    if (opt->slots() != params.size())
      fail_config("optimizer state does not match model parameters");
    write_pod<uint64_t>(os, (uint64_t)opt->step_count());
    for (size_t k = 0; k < params.size(); ++k) {
      write_f32(os, opt->moment1(k));
      write_f32(os, opt->moment2(k));
    }
  }
  if (!os) fail_data("checkpoint write failed: " + path);
}

// Reads only the header; used to construct a model before loading weights.
struct CheckpointInfo {
  ModelConfig config;
  long step = 0;
  bool has_optimizer = false;
};

inline CheckpointInfo checkpoint_info(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    fail_data("not a checkpoint file: " + path);
  uint32_t ver = read_pod<uint32_t>(is);
  if (ver != kVersion)
    fail_data("unsupported checkpoint version " + std::to_string(ver));
  uint64_t len = read_pod<uint64_t>(is);
  std::string cfg(len, '\0');
  is.read(cfg.data(), len);
  if (!is) fail_data("checkpoint: truncated config");
  CheckpointInfo info;
  info.config = ModelConfig::from_json(nlohmann::json::parse(cfg));
  info.step = (long)read_pod<uint64_t>(is);
  info.has_optimizer = read_pod<uint8_t>(is) != 0;
  return info;
}

// Fills an already-constructed model (its config must match the file's).
// Returns the stored step counter.
template <class S>
long load_checkpoint(const std::string& path, STNMamba<S>& model,
                     Adam<S>* opt = nullptr) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    fail_data("not a checkpoint file: " + path);
  uint32_t ver = read_pod<uint32_t>(is);
  if (ver != kVersion)
    fail_data("unsupported checkpoint version " + std::to_string(ver));
  uint64_t len = read_pod<uint64_t>(is);
  std::string cfg(len, '\0');
  is.read(cfg.data(), len);
  long step = (long)read_pod<uint64_t>(is);
  bool has_opt = read_pod<uint8_t>(is) != 0;
  uint64_t n = read_pod<uint64_t>(is);
  auto params = model.named_params();
  if (n != params.size())
    fail_data("checkpoint holds " + std::to_string(n) + " parameters, model has " +
              std::to_string(params.size()) +
              " (config/ablation mismatch between checkpoint and model)");
  for (auto& [name, p] : params) {
    uint16_t nl = read_pod<uint16_t>(is);
    std::string stored(nl, '\0');
    is.read(stored.data(), nl);
    if (stored != name)
      fail_data("checkpoint parameter order mismatch: expected '" + name +
                "', found '" + stored + "'");
    uint8_t rank = read_pod<uint8_t>(is);
    Shape sh = p->value.shape();
    if (rank != sh.rank) fail_data("checkpoint rank mismatch for " + name);
    for (int d = 0; d < rank; ++d) {
      uint32_t dim = read_pod<uint32_t>(is);
      if ((long)dim != sh.d[d]) fail_data("checkpoint shape mismatch for " + name);
    }
    read_f32(is, p->value);
  }
  if (opt) {
    if (!has_opt) fail_data("checkpoint has no optimizer state: " + path);
    opt->attach(model.named_params());
    opt->set_step_count((long)read_pod<uint64_t>(is));
    for (size_t k = 0; k < params.size(); ++k) {
      read_f32(is, opt->moment1(k));
      read_f32(is, opt->moment2(k));
    }
  }
  return step;
}

}  // namespace stn
