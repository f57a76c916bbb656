#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>

#include "tandem/deeptandem.hpp"
#include "tandem/router.hpp"
#include "tandem/tandem.hpp"

namespace tandem {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TensorMap = std::map<std::string, Tensor<float>>;

/// "TNDM", u32 version, u32 tensor count, then per tensor: u32 name length,
/// name bytes, u32 rank, u32 dims, f32 payload; finally the CRC-32 of every
/// byte between the version field and the CRC. Little-endian throughout.
void save_checkpoint(const TensorMap& tensors, const std::filesystem::path& path,
                     std::uint32_t version = kCheckpointVersion);
TensorMap load_checkpoint(const std::filesystem::path& path);

enum class ModelKind { DECODER = 1, TANDEM = 2, DEEP_TANDEM = 3, ROUTER = 4 };

/// Kind recorded under "meta/kind".
ModelKind checkpoint_kind(const TensorMap& tensors);

/// Parameter names are stored without the model's prefix.
TensorMap bundle_decoder(DecoderModel<float>& model);
TensorMap bundle_tandem(TandemModel<float>& model);
TensorMap bundle_deep(DeepTandemModel<float>& model);
TensorMap bundle_router(RouterMLP<float>& router, const RouterConfig& config, const RouterDataset* dataset = nullptr);

std::unique_ptr<DecoderModel<float>> unbundle_decoder(const TensorMap& tensors);
std::unique_ptr<TandemModel<float>> unbundle_tandem(const TensorMap& tensors);
std::unique_ptr<DeepTandemModel<float>> unbundle_deep(const TensorMap& tensors);

struct LoadedRouter {
  std::unique_ptr<RouterMLP<float>> router;
  RouterConfig config;
  RouterDataset dataset;  // empty unless stored
};
LoadedRouter unbundle_router(const TensorMap& tensors);

}  // namespace tandem
