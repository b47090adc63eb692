#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "rflow/binio.hpp"
#include "rflow/mlp.hpp"

namespace rflow {

/// What the network output means: the posterior mean E[x | x_t] or the velocity.
enum class Parameterization : std::uint32_t { x_pred = 0, v_pred = 1 };

inline const char* to_string(Parameterization p) { return p == Parameterization::x_pred ? "x-pred" : "v-pred"; }

/// Trained (or initial) network weights together with their EMA shadow.
struct Checkpoint {
  MlpParams params;
  std::vector<Tensor> ema;
  Parameterization parameterization = Parameterization::v_pred;

  static Checkpoint from_params(MlpParams params, Parameterization p) {
    Checkpoint c;
    c.ema = params.tensors;
    c.params = std::move(params);
    c.parameterization = p;
    return c;
  }

  /// The EMA weights packaged as a standalone parameter set.
  MlpParams ema_params() const {
    MlpParams p = params;
    p.tensors = ema;
    return p;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::string_view kCheckpointMagic = "RFPP1";

/// Layout: "RFPP1", u32 width count, u32 widths..., u32 activation id,
/// u64 seed, u32 parameterization id, then f64 arrays W0 b0 W1 b1 ... and
/// the EMA arrays in the same order. Everything little-endian.
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.magic(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(c.params.widths.size()));
  for (std::size_t width : c.params.widths) w.u32(static_cast<std::uint32_t>(width));
  w.u32(static_cast<std::uint32_t>(c.params.activation));
  w.u64(c.params.seed);
  w.u32(static_cast<std::uint32_t>(c.parameterization));
  for (const Tensor& t : c.params.tensors) w.f64s(t.data());
  for (const Tensor& t : c.ema) w.f64s(t.data());
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic(kCheckpointMagic);
  const std::uint32_t n_widths = r.u32();
  if (n_widths < 2 || n_widths > 64) throw IoError("checkpoint: implausible layer count");
  std::vector<std::size_t> widths(n_widths);
  for (std::size_t& width : widths) {
    width = r.u32();
    if (width == 0) throw IoError("checkpoint: zero layer width");
  }
  const std::uint32_t act = r.u32();
  if (act > 1) throw IoError("checkpoint: unknown activation id");
  const std::uint64_t seed = r.u64();
  const std::uint32_t param = r.u32();
  if (param > 1) throw IoError("checkpoint: unknown parameterization id");

  Checkpoint c;
  c.params = MlpParams::zeros(widths, static_cast<Activation>(act));
  c.params.seed = seed;
  c.parameterization = static_cast<Parameterization>(param);
  for (Tensor& t : c.params.tensors) r.f64s(t.data());
  c.ema = c.params.tensors;
  for (Tensor& t : c.ema) r.f64s(t.data());
  if (!r.at_end()) throw IoError("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_bytes(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

inline std::uint64_t checkpoint_checksum(const Checkpoint& c) { return fnv1a64(encode_checkpoint(c)); }

}  // namespace rflow
