#pragma once

// Tensor bundles: a directory holding manifest.json, checksums.json and one
// SATF record per tensor. See docs/format.md for the manifest schema.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "json.hpp"
#include "selagg/aggregation.hpp"
#include "selagg/localization.hpp"
#include "selagg/probe.hpp"
#include "selagg/satf.hpp"
#include "selagg/vit.hpp"

namespace selagg {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

struct TensorBundle {
  std::string kind;
  Json config = Json::object();
  std::map<std::string, DenseTensor> tensors;
  Json items = Json::array();

  const DenseTensor& tensor(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorKind::Data, "bundle has no tensor '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

namespace detail {

inline std::string tensor_file_name(std::size_t index, const std::string& name) {
  std::string safe;
  for (char c : name) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
  char prefix[16];
  std::snprintf(prefix, sizeof(prefix), "%06zu_", index);
  return "tensors/" + std::string(prefix) + safe + ".satf";
}

}  // namespace detail

/// Writes into a sibling temp directory and renames it over `dir`.
inline void save_bundle(const TensorBundle& bundle, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path target = fs::absolute(dir).lexically_normal();
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp-" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  fs::create_directories(tmp / "tensors");

  Json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["kind"] = bundle.kind;
  manifest["config"] = bundle.config;
  Json tensors = Json::object();
  Json checksums = Json::object();
  std::size_t index = 0;
  for (const auto& [name, t] : bundle.tensors) {
    const std::string file = detail::tensor_file_name(index++, name);
    const auto bytes = satf::encode(t);
    satf::write_file(tmp / file, bytes.data(), bytes.size());
    tensors[name] = Json{{"file", file}, {"dtype", "f32"}, {"dims", t.dims()}};
    checksums[name] = satf::hex64(satf::payload_checksum(bytes));
  }
  manifest["tensors"] = std::move(tensors);
  manifest["items"] = bundle.items;
  satf::write_file(tmp / "manifest.json", manifest.dump(2) + "\n");
  satf::write_file(tmp / "checksums.json", checksums.dump(2) + "\n");

  fs::remove_all(target);
  fs::rename(tmp, target);
}

/// Loads every declared tensor, checking header dims against the manifest and
/// payload checksums against checksums.json when that file is present.
inline TensorBundle load_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) fail(ErrorKind::Data, "no manifest.json in " + dir.string());
  Json manifest;
  try {
    manifest = Json::parse(satf::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  const int version = manifest.value("schema_version", -1);
  require(version == kSchemaVersion, ErrorKind::Data, "unknown schema version " + std::to_string(version));

  Json checksums = Json::object();
  if (fs::exists(dir / "checksums.json")) checksums = Json::parse(satf::read_file(dir / "checksums.json"));

  TensorBundle b;
  b.kind = manifest.value("kind", "");
  b.config = manifest.value("config", Json::object());
  b.items = manifest.value("items", Json::array());
  const Json declared = manifest.value("tensors", Json::object());
  for (const auto& [name, entry] : declared.items()) {
    const fs::path file = dir / entry.at("file").get<std::string>();
    if (!fs::exists(file)) fail(ErrorKind::Data, "missing tensor '" + name + "' (" + file.string() + ")");
    const auto bytes = satf::read_file(file);
    DenseTensor t = satf::decode<float>(bytes, file.string());
    if (entry.contains("dims")) {
      const auto dims = entry.at("dims").get<Dims>();
      require(dims == t.dims(), ErrorKind::Shape,
              "tensor '" + name + "' is " + dims_string(t.dims()) + " on disk but " + dims_string(dims) +
                  " in the manifest");
    }
    if (checksums.contains(name)) {
      const std::string expect = checksums.at(name).get<std::string>();
      const std::string got = satf::hex64(satf::payload_checksum(bytes));
      require(expect == got, ErrorKind::Data, "checksum mismatch for tensor '" + name + "'");
    }
    b.tensors.emplace(name, std::move(t));
  }
  return b;
}

// ---------------------------------------------------------------------------
// ViT weights

inline Json to_json(const ViTConfig& c) {
  return Json{{"image_h", c.image_h},     {"image_w", c.image_w},     {"channels", c.channels},
              {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim}, {"depth", c.depth},
              {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio}, {"final_norm", c.final_norm},
              {"has_cls", c.has_cls},     {"ln_eps", c.ln_eps}};
}

inline ViTConfig vit_config_from_json(const Json& j) {
  ViTConfig c;
  try {
    c.image_h = j.at("image_h");
    c.image_w = j.at("image_w");
    c.channels = j.at("channels");
    c.patch_size = j.at("patch_size");
    c.embed_dim = j.at("embed_dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.final_norm = j.value("final_norm", true);
    c.has_cls = j.value("has_cls", true);
    c.ln_eps = j.value("ln_eps", 1e-6f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, std::string("incomplete ViT config: ") + e.what());
  }
  c.validate();
  return c;
}

inline Json to_json(const MAEDecoderConfig& c) {
  return Json{{"embed_dim", c.embed_dim}, {"depth", c.depth}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio},
              {"final_norm", c.final_norm}};
}

namespace detail {

inline void put_block(TensorBundle& b, const std::string& pre, const BlockParams& p) {
  auto put = [&](const std::string& name, const DenseTensor& t) {
    if (!t.empty()) b.tensors[pre + name] = t;
  };
  put("norm1.weight", p.norm1_w);
  put("norm1.bias", p.norm1_b);
  put("attn.q.weight", p.q_w);
  put("attn.q.bias", p.q_b);
  put("attn.k.weight", p.k_w);
  put("attn.k.bias", p.k_b);
  put("attn.v.weight", p.v_w);
  put("attn.v.bias", p.v_b);
  put("attn.proj.weight", p.proj_w);
  put("attn.proj.bias", p.proj_b);
  put("norm2.weight", p.norm2_w);
  put("norm2.bias", p.norm2_b);
  put("mlp.fc1.weight", p.fc1_w);
  put("mlp.fc1.bias", p.fc1_b);
  put("mlp.fc2.weight", p.fc2_w);
  put("mlp.fc2.bias", p.fc2_b);
}

inline DenseTensor take(const TensorBundle& b, const std::string& name, bool optional = false) {
  if (b.has(name)) return b.tensor(name);
  if (optional) return {};
  fail(ErrorKind::Data, "missing tensor '" + name + "'");
}

inline BlockParams get_block(const TensorBundle& b, const std::string& pre) {
  BlockParams p;
  p.norm1_w = take(b, pre + "norm1.weight");
  p.norm1_b = take(b, pre + "norm1.bias");
  p.q_w = take(b, pre + "attn.q.weight");
  p.q_b = take(b, pre + "attn.q.bias", true);
  p.k_w = take(b, pre + "attn.k.weight");
  p.k_b = take(b, pre + "attn.k.bias", true);
  p.v_w = take(b, pre + "attn.v.weight");
  p.v_b = take(b, pre + "attn.v.bias", true);
  p.proj_w = take(b, pre + "attn.proj.weight");
  p.proj_b = take(b, pre + "attn.proj.bias", true);
  p.norm2_w = take(b, pre + "norm2.weight");
  p.norm2_b = take(b, pre + "norm2.bias");
  p.fc1_w = take(b, pre + "mlp.fc1.weight");
  p.fc1_b = take(b, pre + "mlp.fc1.bias", true);
  p.fc2_w = take(b, pre + "mlp.fc2.weight");
  p.fc2_b = take(b, pre + "mlp.fc2.bias", true);
  return p;
}

}  // namespace detail

inline TensorBundle vit_to_bundle(const ViTParams& p, const MAEDecoderParams* decoder = nullptr) {
  TensorBundle b;
  b.kind = "vit";
  b.config = to_json(p.config);
  b.tensors["patch_embed.weight"] = p.patch_w;
  if (!p.patch_b.empty()) b.tensors["patch_embed.bias"] = p.patch_b;
  b.tensors["pos_embed"] = p.pos_embed;
  if (p.config.has_cls) b.tensors["cls_token"] = p.cls_token;
  for (std::size_t l = 0; l < p.blocks.size(); ++l)
    detail::put_block(b, "blocks." + std::to_string(l) + ".", p.blocks[l]);
  if (p.config.final_norm) {
    b.tensors["norm.weight"] = p.norm_w;
    b.tensors["norm.bias"] = p.norm_b;
  }
  if (decoder) {
    const auto& d = *decoder;
    b.config["decoder"] = to_json(d.config);
    b.tensors["decoder.embed.weight"] = d.embed_w;
    b.tensors["decoder.embed.bias"] = d.embed_b;
    b.tensors["decoder.mask_token"] = d.mask_token;
    b.tensors["decoder.pos_embed"] = d.pos_embed;
    for (std::size_t l = 0; l < d.blocks.size(); ++l)
      detail::put_block(b, "decoder.blocks." + std::to_string(l) + ".", d.blocks[l]);
    if (d.config.final_norm) {
      b.tensors["decoder.norm.weight"] = d.norm_w;
      b.tensors["decoder.norm.bias"] = d.norm_b;
    }
    b.tensors["decoder.pred.weight"] = d.pred_w;
    b.tensors["decoder.pred.bias"] = d.pred_b;
  }
  return b;
}

/// Rebuilds encoder parameters and validates every shape against the config.
inline ViTParams vit_from_bundle(const TensorBundle& b) {
  require(b.kind == "vit", ErrorKind::Data, "expected a vit bundle, got '" + b.kind + "'");
  ViTParams p;
  p.config = vit_config_from_json(b.config);
  p.patch_w = detail::take(b, "patch_embed.weight");
  p.patch_b = detail::take(b, "patch_embed.bias", true);
  p.pos_embed = detail::take(b, "pos_embed");
  if (p.config.has_cls) p.cls_token = detail::take(b, "cls_token");
  for (std::size_t l = 0; l < p.config.depth; ++l)
    p.blocks.push_back(detail::get_block(b, "blocks." + std::to_string(l) + "."));
  if (p.config.final_norm) {
    p.norm_w = detail::take(b, "norm.weight");
    p.norm_b = detail::take(b, "norm.bias");
  }
  validate_params(p);
  return p;
}

inline std::optional<MAEDecoderParams> decoder_from_bundle(const TensorBundle& b) {
  if (!b.config.contains("decoder")) return std::nullopt;
  const Json& j = b.config.at("decoder");
  MAEDecoderParams d;
  d.config.embed_dim = j.at("embed_dim");
  d.config.depth = j.at("depth");
  d.config.heads = j.at("heads");
  d.config.mlp_ratio = j.at("mlp_ratio");
  d.config.final_norm = j.value("final_norm", true);
  d.embed_w = detail::take(b, "decoder.embed.weight");
  d.embed_b = detail::take(b, "decoder.embed.bias", true);
  d.mask_token = detail::take(b, "decoder.mask_token");
  d.pos_embed = detail::take(b, "decoder.pos_embed");
  for (std::size_t l = 0; l < d.config.depth; ++l)
    d.blocks.push_back(detail::get_block(b, "decoder.blocks." + std::to_string(l) + "."));
  if (d.config.final_norm) {
    d.norm_w = detail::take(b, "decoder.norm.weight");
    d.norm_b = detail::take(b, "decoder.norm.bias");
  }
  d.pred_w = detail::take(b, "decoder.pred.weight");
  d.pred_b = detail::take(b, "decoder.pred.bias", true);
  return d;
}

// ---------------------------------------------------------------------------
// Probe parameters

inline TensorBundle probe_to_bundle(const ProbeParams<float>& p) {
  TensorBundle b;
  b.kind = "probe";
  const std::size_t hidden = p.score.depth() > 1 ? p.score.layers[0].w.dim(1) : 0;
  b.config = Json{{"mode", to_string(p.mode)},
                  {"score_depth", p.score.depth()},
                  {"score_hidden", hidden},
                  {"activation", to_string(p.score.activation)},
                  {"input_dim", p.input_dim()},
                  {"num_classes", p.num_classes()},
                  {"standardized", p.standardized()}};
  for (std::size_t l = 0; l < p.score.depth(); ++l) {
    b.tensors["score.layers." + std::to_string(l) + ".weight"] = p.score.layers[l].w;
    b.tensors["score.layers." + std::to_string(l) + ".bias"] = p.score.layers[l].b;
  }
  b.tensors["classifier.weight"] = p.classifier_w;
  b.tensors["classifier.bias"] = p.classifier_b;
  if (p.standardized()) {
    b.tensors["standardize.mean"] = p.feature_mean;
    b.tensors["standardize.std"] = p.feature_std;
  }
  return b;
}

inline ProbeParams<float> probe_from_bundle(const TensorBundle& b) {
  require(b.kind == "probe", ErrorKind::Data, "expected a probe bundle, got '" + b.kind + "'");
  ProbeParams<float> p;
  p.mode = parse_mode(b.config.at("mode").get<std::string>());
  const std::size_t depth = b.config.at("score_depth");
  p.score.activation = parse_activation(b.config.value("activation", "none"));
  for (std::size_t l = 0; l < depth; ++l)
    p.score.layers.push_back({detail::take(b, "score.layers." + std::to_string(l) + ".weight"),
                              detail::take(b, "score.layers." + std::to_string(l) + ".bias")});
  p.classifier_w = detail::take(b, "classifier.weight");
  p.classifier_b = detail::take(b, "classifier.bias");
  p.feature_mean = detail::take(b, "standardize.mean", true);
  p.feature_std = detail::take(b, "standardize.std", true);
  if (is_abmilp(p.mode)) p.score.validate();
  require(p.classifier_w.rank() == 2 && p.classifier_b.size() == p.classifier_w.dim(1), ErrorKind::Shape,
          "classifier shape mismatch");
  return p;
}

// ---------------------------------------------------------------------------
// Dataset manifests and ground-truth boxes

struct ManifestItem {
  std::string id;
  std::string path;  // image or feature file, resolved against the manifest directory
  std::optional<std::size_t> label;
  std::string split = "train";
  std::vector<BoundingBox> gt_boxes;
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<ManifestItem> items;

  const ManifestItem* find(const std::string& id) const {
    for (const auto& it : items)
      if (it.id == id) return &it;
    return nullptr;
  }
};

inline std::vector<BoundingBox> boxes_from_json(const Json& j) {
  std::vector<BoundingBox> out;
  for (const auto& b : j) {
    require(b.is_array() && b.size() == 4, ErrorKind::Data, "a box must be [x0, y0, x1, y1]");
    BoundingBox box{b[0].get<std::int64_t>(), b[1].get<std::int64_t>(), b[2].get<std::int64_t>(),
                    b[3].get<std::int64_t>()};
    require(box.valid(), ErrorKind::Data, "degenerate ground-truth box");
    out.push_back(box);
  }
  return out;
}

inline Json boxes_to_json(const std::vector<BoundingBox>& boxes) {
  Json out = Json::array();
  for (const auto& b : boxes) out.push_back(Json::array({b.x0, b.y0, b.x1, b.y1}));
  return out;
}

inline DatasetManifest parse_dataset_manifest(const Json& j, const std::filesystem::path& base) {
  DatasetManifest m;
  try {
    if (j.contains("classes")) m.classes = j.at("classes").get<std::vector<std::string>>();
    std::set<std::string> seen;
    for (const auto& it : j.at("items")) {
      ManifestItem item;
      item.id = it.at("id").get<std::string>();
      require(seen.insert(item.id).second, ErrorKind::Data, "duplicate id '" + item.id + "'");
      for (const char* key : {"image", "features", "path"})
        if (it.contains(key)) item.path = (base / it.at(key).get<std::string>()).string();
      if (it.contains("label") && !it.at("label").is_null()) {
        item.label = it.at("label").get<std::size_t>();
        require(m.classes.empty() || *item.label < m.classes.size(), ErrorKind::Data,
                "label of '" + item.id + "' outside [0, " + std::to_string(m.classes.size()) + ")");
      }
      item.split = it.value("split", "train");
      if (it.contains("gt_boxes")) item.gt_boxes = boxes_from_json(it.at("gt_boxes"));
      m.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, std::string("malformed dataset manifest: ") + e.what());
  }
  return m;
}

inline DatasetManifest load_dataset_manifest(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(satf::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, "malformed JSON in " + path.string() + ": " + e.what());
  }
  return parse_dataset_manifest(j, path.parent_path());
}

/// {"image id": [[x0, y0, x1, y1], ...], ...}
inline std::map<std::string, std::vector<BoundingBox>> load_gt_boxes(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(satf::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, "malformed JSON in " + path.string() + ": " + e.what());
  }
  std::map<std::string, std::vector<BoundingBox>> out;
  for (const auto& [id, boxes] : j.items()) out[id] = boxes_from_json(boxes);
  return out;
}

// ---------------------------------------------------------------------------
// Feature bundles

/// Reads a feature bundle into a dataset. Labels come from the bundle items,
/// overridden by `labels` when given. Only items whose split matches are kept
/// (an empty split keeps everything).
inline FeatureDataset dataset_from_features(const TensorBundle& b, const DatasetManifest* labels = nullptr,
                                            const std::string& split = "") {
  require(b.kind == "features", ErrorKind::Data, "expected a features bundle, got '" + b.kind + "'");
  FeatureDataset data;
  const bool has_cls = b.config.value("has_cls", true);
  std::size_t classes = b.config.value("num_classes", std::size_t{0});
  if (labels && !labels->classes.empty()) classes = labels->classes.size();
  for (const auto& it : b.items) {
    const std::string id = it.at("id").get<std::string>();
    std::optional<std::size_t> label;
    std::string item_split = it.value("split", "train");
    if (it.contains("label") && !it.at("label").is_null()) label = it.at("label").get<std::size_t>();
    if (labels) {
      const ManifestItem* m = labels->find(id);
      if (m) {
        if (m->label) label = m->label;
        item_split = m->split;
      }
    }
    if (!split.empty() && item_split != split) continue;
    require(it.contains("tokens"), ErrorKind::Data, "item '" + id + "' has no token tensor");
    require(label.has_value(), ErrorKind::Data, "no label for item '" + id + "'");
    FeatureSample s;
    s.id = id;
    s.tokens = b.tensor(it.at("tokens").get<std::string>());
    s.has_cls = has_cls;
    s.label = *label;
    data.samples.push_back(std::move(s));
  }
  if (classes == 0)
    for (const auto& s : data.samples) classes = std::max(classes, s.label + 1);
  data.num_classes = classes;
  return data;
}

inline AttentionTensor attention_of(const TensorBundle& b, const Json& item) {
  require(item.contains("attention"), ErrorKind::Data,
          "item '" + item.value("id", std::string("?")) + "' has no captured attention");
  AttentionTensor a{b.tensor(item.at("attention").get<std::string>()), b.config.value("has_cls", true)};
  a.validate();
  return a;
}

}  // namespace selagg
