#include "genieblue/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "genieblue/digest.hpp"
#include "json_io.hpp"

namespace genieblue {

namespace fs = std::filesystem;
using json_io::Json;

namespace {

constexpr const char* kQuantLayout =
    "per tensor: packed codes then one float64 little-endian scale per group; 4-bit codes "
    "are two's complement, two per byte, most significant nibble first; 8-bit codes are one "
    "signed byte each; groups run along the last dimension, row-major";

std::string blob_name(Artifact a) { return a == Artifact::kBase ? "base.bin" : "delta.bin"; }

Artifact parse_artifact(const std::string& text) {
  if (text == "base") return Artifact::kBase;
  if (text == "delta") return Artifact::kDelta;
  throw CheckpointError("manifest: unknown artifact '" + text + "'");
}

std::string read_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + what + " " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::string& bytes) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("cannot write " + path.string());
}

std::string float_bytes(const Tensor& t) {
  static_assert(std::endian::native == std::endian::little);
  const auto raw = raw_bytes(t);
  return std::string(reinterpret_cast<const char*>(raw.data()), raw.size());
}

std::string digest(std::string_view bytes) {
  return sha256_hex(std::as_bytes(std::span<const char>(bytes.data(), bytes.size())));
}

// Accumulates stored tensors per artifact, then writes blobs and manifest.
class CheckpointWriter {
 public:
  CheckpointWriter(CheckpointManifest manifest, fs::path dir, std::optional<fs::path> delta_dir)
      : manifest_(std::move(manifest)), dir_(std::move(dir)), delta_dir_(std::move(delta_dir)) {
    manifest_.artifacts.clear();
    manifest_.blobs.clear();
  }

  void add(const std::string& name, const Shape& shape, std::string dtype, std::size_t group,
           const std::string& bytes) {
    ArtifactEntry e;
    e.name = name;
    e.shape = shape;
    e.dtype = std::move(dtype);
    e.group = group;
    e.artifact = artifact_of(name);
    std::string& blob = blobs_[e.artifact];
    e.offset = blob.size();
    e.bytes = bytes.size();
    e.sha256 = digest(bytes);
    blob += bytes;
    manifest_.artifacts.push_back(std::move(e));
  }

  CheckpointManifest finish() {
    fs::create_directories(dir_);
    for (const auto& [artifact, bytes] : blobs_) {
      fs::path target = dir_ / blob_name(artifact);
      std::string recorded = blob_name(artifact);
      if (artifact == Artifact::kDelta && delta_dir_) {
        target = *delta_dir_ / blob_name(artifact);
        recorded = fs::relative(target, dir_).generic_string();
      }
      write_file(target, bytes);
      manifest_.blobs[artifact] = recorded;
    }
    write_file(dir_ / kManifestFile, manifest_.to_json());
    return manifest_;
  }

 private:
  CheckpointManifest manifest_;
  fs::path dir_;
  std::optional<fs::path> delta_dir_;
  std::map<Artifact, std::string> blobs_;
};

CheckpointManifest describe(const HybridModel& model, int stage) {
  CheckpointManifest m;
  m.config = model.config();
  m.placement = model.schedule;
  m.rank = model.rank;
  m.architecture = model.architecture;
  m.projector_aligned = model.projector_aligned;
  m.stage = stage;
  if (!model.adapters.empty()) {
    m.lora_scale = model.adapters.begin()->second.at(Projection::kQuery).scale;
  }
  return m;
}

// The model's structure with placeholder values; loading overwrites every
// tensor by name. `lm` seeds the base so derived copies (replicated blocks,
// experts) start from the stored base.
HybridModel skeleton(const CheckpointManifest& m, const std::map<std::string, Tensor>& lm) {
  BaseModel base = build_model(m.config, 0);
  for_each_parameter(base.lm, "lm.", [&](const std::string& name, Tensor& t) {
    if (auto it = lm.find(name); it != lm.end()) t = it->second;
  });
  HybridModel h;
  switch (m.architecture) {
    case Architecture::kGenieBlue: h = build_genieblue(base, m.placement, m.rank); break;
    case Architecture::kVisualExpert: h = build_cogvlm(base, m.placement, m.rank); break;
    case Architecture::kFullFinetune: h = build_full_finetune(base); break;
  }
  for (auto& [layer, adapters] : h.adapters) {
    for (auto& a : adapters.adapters) a.scale = m.lora_scale;
  }
  h.projector_aligned = m.projector_aligned;
  return h;
}

struct BlobSet {
  std::map<Artifact, std::string> bytes;
};

BlobSet read_blobs(const CheckpointManifest& m, const fs::path& dir, const LoadOptions& opt) {
  BlobSet out;
  for (Artifact a : {Artifact::kBase, Artifact::kDelta}) {
    if (a == Artifact::kDelta && opt.base_only) continue;
    const auto& override_path = a == Artifact::kBase ? opt.base_blob : opt.delta_blob;
    if (!m.has(a) && !override_path) {
      throw CheckpointError("checkpoint has no " + std::string(to_string(a)) + " artifact");
    }
    const fs::path path = override_path ? *override_path : dir / m.blobs.at(a);
    out.bytes[a] = read_file(path, std::string(to_string(a)) + " blob");
  }
  return out;
}

// Hash-checked stored bytes of one entry.
std::string_view verified_bytes(const ArtifactEntry& e, const BlobSet& blobs) {
  const std::string& blob = blobs.bytes.at(e.artifact);
  if (e.offset > blob.size() || e.bytes > blob.size() - e.offset) {
    throw CheckpointError("tensor '" + e.name + "' lies outside its blob (truncated " +
                              std::string(to_string(e.artifact)) + " artifact?)",
                          e.name);
  }
  const std::string_view bytes(blob.data() + e.offset, e.bytes);
  if (digest(bytes) != e.sha256) {
    throw CheckpointError("tensor '" + e.name + "' failed hash verification", e.name);
  }
  return bytes;
}

Tensor decode(const ArtifactEntry& e, std::string_view bytes) {
  if (e.bits() != 0) return dequantize(unpack(bytes, e.bits(), e.group, e.shape));
  Tensor t(e.shape);
  if (bytes.size() != 8 * t.size()) {
    throw CheckpointError("tensor '" + e.name + "' has " + std::to_string(bytes.size()) +
                              " bytes for shape " + to_string(e.shape),
                          e.name);
  }
  std::memcpy(t.data(), bytes.data(), bytes.size());
  return t;
}

}  // namespace

std::string_view to_string(Artifact a) { return a == Artifact::kBase ? "base" : "delta"; }

unsigned ArtifactEntry::bits() const {
  if (dtype == "f64") return 0;
  if (dtype == "q4") return 4;
  if (dtype == "q8") return 8;
  throw CheckpointError("tensor '" + name + "' has unknown dtype '" + dtype + "'", name);
}

const ArtifactEntry* CheckpointManifest::find(const std::string& name) const {
  for (const auto& e : artifacts) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

Artifact artifact_of(const std::string& tensor_name) {
  return tensor_name.starts_with("lm.") ? Artifact::kBase : Artifact::kDelta;
}

std::string CheckpointManifest::to_json() const {
  Json j;
  j["version"] = version;
  j["config"] = json_io::to_json(config);
  j["placement"] = Json{{"mode", std::string(to_string(placement.mode))},
                        {"fraction", placement.fraction},
                        {"layers", placement.layers},
                        {"replicated", placement.replicated},
                        {"complement", placement.complement}};
  j["rank"] = rank;
  j["architecture"] = std::string(to_string(architecture));
  j["lora_scale"] = lora_scale;
  j["projector_aligned"] = projector_aligned;
  j["stage"] = stage;
  Json blob_json = Json::object();
  for (const auto& [a, file] : blobs) blob_json[std::string(to_string(a))] = file;
  j["blobs"] = blob_json;
  if (!quant_plan.empty()) {
    j["quant_plan"] = quant_plan;
    j["quant_layout"] = kQuantLayout;
  }
  Json list = Json::array();
  for (const auto& e : artifacts) {
    Json item{{"name", e.name},
              {"shape", e.shape},
              {"dtype", e.dtype},
              {"offset", e.offset},
              {"sha256", e.sha256},
              {"artifact", std::string(to_string(e.artifact))},
              {"bytes", e.bytes}};
    if (e.group != 0) item["group"] = e.group;
    list.push_back(std::move(item));
  }
  j["artifacts"] = std::move(list);
  return j.dump(2) + "\n";
}

CheckpointManifest CheckpointManifest::parse(const std::string& text) {
  CheckpointManifest m;
  try {
    const Json j = Json::parse(text);
    m.version = j.at("version");
    if (m.version != kCheckpointVersion) {
      throw CheckpointError("manifest: unsupported version " + std::to_string(m.version));
    }
    m.config = json_io::model_config(j.at("config"));
    const Json& p = j.at("placement");
    m.placement.mode = parse_placement_mode(p.at("mode").get<std::string>());
    m.placement.fraction = p.at("fraction");
    m.placement.layers = p.at("layers");
    m.placement.replicated = p.at("replicated").get<std::vector<std::size_t>>();
    m.placement.complement = p.at("complement").get<std::vector<std::size_t>>();
    m.placement.validate();
    m.rank = j.at("rank");
    m.architecture = parse_architecture(j.at("architecture").get<std::string>());
    m.lora_scale = j.value("lora_scale", 1.0);
    m.projector_aligned = j.value("projector_aligned", false);
    m.stage = j.value("stage", 0);
    for (const auto& [key, file] : j.at("blobs").items()) {
      m.blobs[parse_artifact(key)] = file.get<std::string>();
    }
    m.quant_plan = j.value("quant_plan", std::string());
    for (const Json& item : j.at("artifacts")) {
      ArtifactEntry e;
      e.name = item.at("name");
      e.shape = item.at("shape").get<Shape>();
      e.dtype = item.at("dtype");
      e.offset = item.at("offset");
      e.sha256 = item.at("sha256");
      e.artifact = item.contains("artifact") ? parse_artifact(item.at("artifact"))
                                             : artifact_of(e.name);
      e.bytes = item.contains("bytes") ? item.at("bytes").get<std::size_t>()
                                       : 8 * element_count(e.shape);
      e.group = item.value("group", std::size_t{0});
      e.bits();
      m.artifacts.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("manifest: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw CheckpointError(std::string("manifest: ") + ex.what());
  }
  return m;
}

CheckpointManifest save_checkpoint(const HybridModel& model, const fs::path& dir,
                                   const SaveOptions& options) {
  CheckpointWriter writer(describe(model, options.stage), dir, options.delta_dir);
  for_each_parameter(model, [&](const std::string& name, ParamGroup, const Tensor& t) {
    writer.add(name, t.shape(), "f64", 0, float_bytes(t));
  });
  return writer.finish();
}

CheckpointManifest read_manifest(const fs::path& dir) {
  return CheckpointManifest::parse(read_file(dir / kManifestFile, "manifest"));
}

HybridCheckpoint load_checkpoint(const fs::path& dir, const LoadOptions& options) {
  HybridCheckpoint out;
  out.manifest = read_manifest(dir);
  const BlobSet blobs = read_blobs(out.manifest, dir, options);
  out.has_delta = !options.base_only;

  // Verify everything that will be used before building anything.
  std::map<std::string, Tensor> lm;
  std::map<std::string, Tensor> delta;
  for (const auto& e : out.manifest.artifacts) {
    if (e.artifact == Artifact::kDelta && options.base_only) continue;
    Tensor t = decode(e, verified_bytes(e, blobs));
    auto& target = e.artifact == Artifact::kBase ? lm : delta;
    if (!target.emplace(e.name, std::move(t)).second) {
      throw CheckpointError("tensor '" + e.name + "' listed twice", e.name);
    }
  }

  out.model = skeleton(out.manifest, lm);
  std::set<std::string> used;
  for_each_parameter(out.model, [&](const std::string& name, ParamGroup, Tensor& t) {
    auto& source = artifact_of(name) == Artifact::kBase ? lm : delta;
    if (artifact_of(name) == Artifact::kDelta && options.base_only) return;
    auto it = source.find(name);
    if (it == source.end()) throw CheckpointError("tensor '" + name + "' missing", name);
    if (it->second.shape() != t.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + to_string(it->second.shape()) +
                                ", expected " + to_string(t.shape()),
                            name);
    }
    t = it->second;
    used.insert(name);
  });
  for (const auto* source : {&lm, &delta}) {
    for (const auto& [name, t] : *source) {
      if (!used.contains(name)) {
        throw CheckpointError("tensor '" + name + "' does not belong to this model", name);
      }
    }
  }
  return out;
}

std::map<std::string, QuantizedTensor> load_quantized(const fs::path& dir) {
  const CheckpointManifest m = read_manifest(dir);
  const BlobSet blobs = read_blobs(m, dir, LoadOptions{});
  std::map<std::string, QuantizedTensor> out;
  for (const auto& e : m.artifacts) {
    if (e.bits() == 0) continue;
    out.emplace(e.name, unpack(verified_bytes(e, blobs), e.bits(), e.group, e.shape));
  }
  return out;
}

ExportSummary export_quantized(const HybridCheckpoint& checkpoint, const QuantPlan& plan,
                               const fs::path& out_dir) {
  plan.validate();
  if (!checkpoint.has_delta) {
    throw CheckpointError("export needs the full checkpoint; the delta artifact was not loaded");
  }
  CheckpointManifest base = checkpoint.manifest;
  base.quant_plan = plan.name();
  CheckpointWriter writer(base, out_dir, std::nullopt);
  ExportSummary summary;
  for_each_parameter(checkpoint.model, [&](const std::string& name, ParamGroup, const Tensor& t) {
    const unsigned bits = plan.bits_for(name, t.shape());
    if (bits == 0) {
      writer.add(name, t.shape(), "f64", 0, float_bytes(t));
      ++summary.float_tensors;
      return;
    }
    const QuantizedTensor q = quantize_weights(t, bits, plan.group);
    summary.worst_bound_ratio = std::max(summary.worst_bound_ratio, worst_bound_ratio(t, q));
    writer.add(name, t.shape(), bits == 4 ? "q4" : "q8", plan.group, pack(q));
    ++summary.quantized_tensors;
  });
  summary.manifest = writer.finish();
  return summary;
}

}  // namespace genieblue
