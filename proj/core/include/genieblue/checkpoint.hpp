#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "genieblue/adaptation.hpp"
#include "genieblue/quant.hpp"

namespace genieblue {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kManifestFile = "manifest.json";

/// Load or verification failure. `tensor()` names the offending tensor when
/// one is to blame.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what, std::string tensor = {})
      : std::runtime_error(what), tensor_(std::move(tensor)) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

enum class Artifact { kBase, kDelta };
std::string_view to_string(Artifact a);

/// One tensor in the directory. `offset` and `bytes` locate its stored bytes
/// inside its artifact's blob; `sha256` covers exactly those bytes.
struct ArtifactEntry {
  std::string name;
  Shape shape;
  std::string dtype = "f64";  // "f64", "q4" or "q8"
  Artifact artifact = Artifact::kBase;
  std::size_t offset = 0;
  std::size_t bytes = 0;
  std::string sha256;
  std::size_t group = 0;  // quantized entries only

  unsigned bits() const;  // 0 for f64
};

struct CheckpointManifest {
  int version = kCheckpointVersion;
  ModelConfig config;
  PlacementSchedule placement;
  std::size_t rank = 0;
  Architecture architecture = Architecture::kGenieBlue;
  double lora_scale = 1.0;
  bool projector_aligned = false;
  int stage = 0;  // last completed training stage
  std::map<Artifact, std::string> blobs;  // file names, relative to the manifest
  std::vector<ArtifactEntry> artifacts;
  std::string quant_plan;  // empty unless exported quantized

  bool has(Artifact a) const { return blobs.contains(a); }
  const ArtifactEntry* find(const std::string& name) const;

  std::string to_json() const;
  static CheckpointManifest parse(const std::string& text);
};

/// Base artifact: every lm.* tensor (the original language model). Delta
/// artifact: everything multimodal training adds or changes.
Artifact artifact_of(const std::string& tensor_name);

struct SaveOptions {
  int stage = 0;
  // Where to write the delta blob; defaults to the checkpoint directory.
  std::optional<std::filesystem::path> delta_dir;
};

CheckpointManifest save_checkpoint(const HybridModel& model, const std::filesystem::path& dir,
                                   const SaveOptions& options = {});

struct LoadOptions {
  bool base_only = false;
  // Blob locations overriding the manifest's relative names.
  std::optional<std::filesystem::path> base_blob;
  std::optional<std::filesystem::path> delta_blob;
};

/// A verified, loaded checkpoint. Treat as immutable once loaded; routed
/// views bind into `model` without changing it.
struct HybridCheckpoint {
  CheckpointManifest manifest;
  HybridModel model;
  bool has_delta = false;
};

CheckpointManifest read_manifest(const std::filesystem::path& dir);

/// Verifies every tensor hash before building the model. Quantized entries
/// are dequantized.
HybridCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                 const LoadOptions& options = {});

/// Quantized entries of an exported checkpoint, hash-verified.
std::map<std::string, QuantizedTensor> load_quantized(const std::filesystem::path& dir);

struct ExportSummary {
  CheckpointManifest manifest;
  std::size_t quantized_tensors = 0;
  std::size_t float_tensors = 0;
  double worst_bound_ratio = 0.0;  // over every quantized group
};

/// Re-saves a checkpoint with weight-only quantization per `plan`.
ExportSummary export_quantized(const HybridCheckpoint& checkpoint, const QuantPlan& plan,
                               const std::filesystem::path& out_dir);

}  // namespace genieblue
