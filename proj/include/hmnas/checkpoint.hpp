#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmnas/finetune.hpp"
#include "hmnas/masker.hpp"
#include "hmnas/searchspace.hpp"
#include "hmnas/trainer.hpp"

namespace hmnas {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// On disk: "HMCK", u32 version, u64 payload length, u64 FNV-1a of the
/// payload, then the payload as CBOR. Tensors are stored as raw
/// little-endian doubles so a round trip is bit-exact.
struct Checkpoint {
  std::string stage;  // supernet, masks or final
  Supernet net;
  TrainState train;
  std::optional<HierMasks> masks;
  MaskTrainState mask_state;
  std::optional<BinaryMasks> final_masks;
  FinetuneState finetune_state;
  std::string config;  // resolved config echo
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
// FormatError (magic), VersionError, IntegrityError (length, checksum, content).
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and a rename.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline const char* kMetricsHeader = "stage,epoch,split,loss,accuracy,lr,params";
std::string metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// Whole-file helpers shared by the CLI.
void write_file(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace hmnas
