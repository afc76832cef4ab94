// selagg: attention metrics, aggregation probes and localization on frozen ViT features.
//
// Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "selagg/bundle.hpp"
#include "selagg/report.hpp"
#include "selagg/synth.hpp"

namespace fs = std::filesystem;
using namespace selagg;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] void usage(const std::string& msg) { throw UsageError(msg); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

int default_threads() {
  const char* env = std::getenv("SELAGG_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) usage(std::string("SELAGG_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<int>(v);
}

/// Turns a JSON object into "--key=value" arguments. Keys may use '_' or '-'.
std::vector<std::string> overlay_args(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(satf::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Data, "config file " + path.string() + " is not valid JSON: " + e.what());
  }
  require(j.is_object(), ErrorKind::Data, "config file " + path.string() + " must hold a JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (value.is_string()) out.push_back(flag + "=" + value.get<std::string>());
    else if (value.is_boolean()) out.push_back(flag + "=" + (value.get<bool>() ? "true" : "false"));
    else if (value.is_number()) out.push_back(flag + "=" + value.dump());
    else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      out.push_back(flag + "=" + joined);
    } else throw Error(ErrorKind::Data, "config key '" + key + "' has an unsupported value");
  }
  return out;
}

/// Config-file values go before the command-line flags; with TakeLast, flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (args.size() < 2) return args;
  for (std::size_t i = 2; i < args.size(); ++i) {
    std::optional<std::string> path;
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    if (!path) continue;
    auto extra = overlay_args(*path);
    args.insert(args.begin() + 2, extra.begin(), extra.end());
    break;
  }
  return args;
}

void report_resolved(const CLI::App& cmd, std::uint64_t seed) {
  std::cerr << "[" << cmd.get_name() << "] resolved config:\n" << cmd.config_to_str(true, false);
  std::cerr << "[" << cmd.get_name() << "] seed: " << seed << "\n";
}

void add_common(CLI::App* cmd, std::string& config, int& threads) {
  cmd->add_option("--config", config, "JSON file of option values; command-line flags override it");
  cmd->add_option("--threads", threads, "worker threads (default: $SELAGG_THREADS or 1)")->check(CLI::Range(1, 1024));
}

// ---------------------------------------------------------------------------
// Selectors shared by analyze and localize

struct GridInfo {
  std::size_t rows = 0, cols = 0;
  std::size_t image_h = 0, image_w = 0;
};

GridInfo grid_of(const TensorBundle& b, std::size_t patches) {
  GridInfo g;
  g.rows = b.config.value("grid_rows", std::size_t{0});
  g.cols = b.config.value("grid_cols", std::size_t{0});
  if (g.rows * g.cols != patches) {
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
    g.rows = g.cols = side * side == patches ? side : 0;
  }
  g.image_h = b.config.value("image_h", g.rows);
  g.image_w = b.config.value("image_w", g.cols);
  return g;
}

struct SelectorContext {
  const TensorBundle* bundle = nullptr;
  const ProbeParams<float>* probe = nullptr;
};

const std::vector<std::string> kSelectors = {"attn_avg_cls", "attn_lowest_entropy", "attn_central_patch", "uniform",
                                             "abmilp"};

void check_selectors(const std::vector<std::string>& names, const ProbeParams<float>* probe) {
  for (const auto& n : names) {
    if (std::find(kSelectors.begin(), kSelectors.end(), n) == kSelectors.end())
      usage("unknown selector '" + n + "' (choose from attn_avg_cls, attn_lowest_entropy, attn_central_patch, "
            "uniform, abmilp)");
    if (n == "abmilp" && !probe) usage("selector abmilp needs --probe");
  }
  if (probe && !is_abmilp(probe->mode))
    usage("the probe was trained with mode " + std::string(to_string(probe->mode)) + ", not an abmilp mode");
}

/// Per-patch weights for one item under a named selector.
SelectionVector select(const std::string& name, const Json& item, const SelectorContext& ctx) {
  const TensorBundle& b = *ctx.bundle;
  if (name == "abmilp") {
    FeatureSample s;
    s.id = item.at("id").get<std::string>();
    require(item.contains("tokens"), ErrorKind::Data, "item '" + s.id + "' has no tokens for the abmilp selector");
    s.tokens = b.tensor(item.at("tokens").get<std::string>());
    s.has_cls = b.config.value("has_cls", true);
    auto out = probe_forward(s, *ctx.probe);
    if (ctx.probe->mode == AggregatorMode::AbmilpWithCls) {
      std::vector<double> w(out.selection.weights.begin() + (s.has_cls ? 1 : 0), out.selection.weights.end());
      return normalized_selection(w, "abmilp");
    }
    out.selection.source = "abmilp";
    return out.selection;
  }
  const AttentionTensor a = attention_of(b, item);
  if (name == "attn_avg_cls") return selector_avg_cls_attention(a);
  if (name == "attn_lowest_entropy") return selector_lowest_entropy_head(a);
  if (name == "uniform") return uniform_selection(a.num_patches());
  const GridInfo g = grid_of(b, a.num_patches());
  require(g.rows > 0, ErrorKind::Data, "cannot infer the patch grid; set grid_rows/grid_cols in the bundle config");
  return selector_central_patch(a, g.rows, g.cols);
}

// ---------------------------------------------------------------------------
// extract

struct ExtractOptions {
  std::string weights, images, out, config;
  std::size_t block = 0;
  double mask_ratio = 0.0;
  std::uint64_t seed = 0;
  bool capture = false;
  int threads = 1;
};

int run_extract(const ExtractOptions& o, const CLI::App& cmd) {
  report_resolved(cmd, o.seed);
  const ViTParams vit = vit_from_bundle(load_bundle(o.weights));
  const auto& cfg = vit.config;
  const std::size_t block = o.block == 0 ? cfg.depth : o.block;
  if (block < 1 || block > cfg.depth)
    usage("--block " + std::to_string(block) + " is out of range 1.." + std::to_string(cfg.depth));
  if (o.mask_ratio < 0.0 || o.mask_ratio >= 1.0) usage("--mask-ratio must lie in [0, 1)");
  if (o.mask_ratio > 0.0 && !cfg.has_cls) usage("--mask-ratio needs a model with a cls token");
  const DatasetManifest manifest = load_dataset_manifest(o.images);
  require(!manifest.items.empty(), ErrorKind::Data, "image manifest has no items");

  const std::size_t n = manifest.items.size();
  std::vector<ForwardResult> results(n);
  std::vector<std::vector<std::size_t>> kept(n);
  parallel_for(n, o.threads, [&](std::size_t i) {
    const auto& item = manifest.items[i];
    require(!item.path.empty(), ErrorKind::Data, "item '" + item.id + "' has no image file");
    const DenseTensor image = satf::read_tensor<float>(item.path);
    require(image.dims() == Dims{cfg.image_h, cfg.image_w, cfg.channels}, ErrorKind::Shape,
            "image '" + item.id + "' is " + dims_string(image.dims()) + ", the model expects " +
                dims_string({cfg.image_h, cfg.image_w, cfg.channels}));
    TokenSequence z0 = embed(patchify(image, cfg.patch_size), vit);
    if (o.mask_ratio > 0.0) {
      RngStream rng(o.seed, 100 + i);
      const MaskSpec mask = sample_mask(cfg.num_patches(), o.mask_ratio, rng);
      kept[i] = mask.kept_indices();
      z0 = apply_mask(z0, mask);
    }
    results[i] = vit_forward(z0, vit, o.capture, block);
  });

  TensorBundle out;
  out.kind = "features";
  out.config = Json{{"has_cls", cfg.has_cls},
                    {"num_classes", manifest.classes.size()},
                    {"block", block},
                    {"depth", cfg.depth},
                    {"embed_dim", cfg.embed_dim},
                    {"image_h", cfg.image_h},
                    {"image_w", cfg.image_w},
                    {"patch_size", cfg.patch_size},
                    {"mask_ratio", o.mask_ratio},
                    {"seed", o.seed}};
  if (o.mask_ratio == 0.0) {
    out.config["grid_rows"] = cfg.grid_rows();
    out.config["grid_cols"] = cfg.grid_cols();
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = manifest.items[i];
    Json entry{{"id", item.id}, {"split", item.split}};
    entry["label"] = item.label ? Json(*item.label) : Json(nullptr);
    out.tensors["tokens/" + item.id] = results[i].tokens.tokens;
    entry["tokens"] = "tokens/" + item.id;
    if (o.capture) {
      out.tensors["attention/" + item.id] = results[i].attention->maps;
      entry["attention"] = "attention/" + item.id;
    }
    if (o.mask_ratio > 0.0) entry["kept_patches"] = kept[i];
    out.items.push_back(std::move(entry));
  }
  save_bundle(out, o.out);
  std::cout << "extracted " << n << " images at block " << block << " ("
            << results[0].tokens.size() << " tokens x " << cfg.embed_dim << ") into " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
  std::string attention, out, config, metrics = "all", selectors, probe;
  std::string format = "both";
  int threads = 1;
};

int run_analyze(const AnalyzeOptions& o, const CLI::App& cmd) {
  report_resolved(cmd, 0);
  const TensorBundle b = load_bundle(o.attention);
  const bool has_cls = b.config.value("has_cls", true);
  std::vector<Json> items;
  std::vector<AttentionTensor> maps;
  for (const auto& it : b.items)
    if (it.contains("attention")) {
      items.push_back(it);
      maps.push_back(attention_of(b, it));
    }
  require(!maps.empty(), ErrorKind::Data, "bundle " + o.attention + " holds no captured attention");

  std::vector<Metric> metrics;
  if (o.metrics == "all") {
    for (Metric m : kAllMetrics)
      if (has_cls || !metric_needs_cls(m)) metrics.push_back(m);
  } else {
    for (const auto& name : split_list(o.metrics)) {
      auto it = std::find_if(kAllMetrics.begin(), kAllMetrics.end(), [&](Metric m) { return metric_name(m) == name; });
      if (it == kAllMetrics.end()) usage("unknown metric '" + name + "'");
      if (metric_needs_cls(*it) && !has_cls) fail(ErrorKind::Data, "metric " + name + " needs a cls token");
      metrics.push_back(*it);
    }
  }
  if (o.format != "csv" && o.format != "json" && o.format != "both") usage("--format must be csv, json or both");

  const auto series = dataset_metrics(maps, metrics, o.threads);
  fs::create_directories(o.out);
  if (o.format != "json") write_text(fs::path(o.out) / "metrics.csv", metrics_csv(series));
  if (o.format != "csv") write_text(fs::path(o.out) / "metrics.json", dump_json(metrics_json(series)));

  const auto selectors = split_list(o.selectors);
  std::optional<ProbeParams<float>> probe;
  if (!o.probe.empty()) probe = probe_from_bundle(load_bundle(o.probe));
  check_selectors(selectors, probe ? &*probe : nullptr);
  if (selectors.size() == 1) usage("a KLD matrix needs at least two selectors");
  if (selectors.size() >= 2) {
    SelectorContext ctx{&b, probe ? &*probe : nullptr};
    std::vector<std::vector<SelectionVector>> per_image(items.size());
    parallel_for(items.size(), o.threads, [&](std::size_t i) {
      for (const auto& s : selectors) per_image[i].push_back(select(s, items[i], ctx));
    });
    write_text(fs::path(o.out) / "kld.json", dump_json(kld_json(selectors, selector_kld_matrix(per_image))));
  }
  std::cout << "analyzed " << maps.size() << " attention tensors (" << maps[0].blocks() << " blocks, "
            << maps[0].heads() << " heads) into " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-probe

struct TrainOptions {
  std::string features, labels, out, config, external;
  std::string mode = "abmilp_patches", activation, optimizer, preset = "desk";
  std::string train_split = "train", eval_split = "eval";
  std::size_t score_depth = 1, score_hidden = 0;
  double lr = 0.0, momentum = 0.0, weight_decay = 0.0;
  std::size_t epochs = 0, warmup_epochs = 0, batch_size = 0;
  std::uint64_t seed = 0;
  bool no_standardize = false;
  int threads = 1;
};

/// Fills fixed per-patch weights for the attention- and map-driven modes.
void attach_fixed_selectors(FeatureDataset& data, const TensorBundle& b, AggregatorMode mode,
                            const TensorBundle* external) {
  if (!uses_fixed_selector(mode)) return;
  std::map<std::string, const Json*> by_id;
  for (const auto& it : b.items) by_id[it.at("id").get<std::string>()] = &it;
  for (auto& s : data.samples) {
    const Json& item = *by_id.at(s.id);
    const std::size_t patches = s.tokens.rows() - (s.has_cls ? 1 : 0);
    SelectionVector w;
    if (mode == AggregatorMode::ExternalMap) {
      require(external != nullptr, ErrorKind::Data, "mode external_map needs --external");
      w = selector_external(external->tensor("maps/" + s.id), patches);
    } else {
      const AttentionTensor a = attention_of(b, item);
      if (mode == AggregatorMode::AttnAvgCls) w = selector_avg_cls_attention(a);
      else if (mode == AggregatorMode::AttnLowestEntropy) w = selector_lowest_entropy_head(a);
      else {
        const GridInfo g = grid_of(b, a.num_patches());
        require(g.rows > 0, ErrorKind::Data, "cannot infer the patch grid for attn_central_patch");
        w = selector_central_patch(a, g.rows, g.cols);
      }
    }
    require(w.size() == patches, ErrorKind::Shape, "selector length does not match the patch count of " + s.id);
    s.fixed_weights = w.weights;
  }
}

/// Mean selection weight on the recorded signal token, when items carry one.
std::optional<double> signal_weight(const FeatureDataset& data, const TensorBundle& b, const ProbeParams<float>& p) {
  if (!is_abmilp(p.mode) || data.empty()) return std::nullopt;
  std::map<std::string, std::size_t> signal;
  for (const auto& it : b.items)
    if (it.contains("signal_index")) signal[it.at("id").get<std::string>()] = it.at("signal_index").get<std::size_t>();
  if (signal.empty()) return std::nullopt;
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : data.samples) {
    auto it = signal.find(s.id);
    if (it == signal.end()) continue;
    const auto out = probe_forward(s, p);
    const std::size_t off = (p.mode == AggregatorMode::AbmilpWithCls && s.has_cls) ? 1 : 0;
    sum += out.selection.weights[off + it->second];
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

int run_train(const TrainOptions& o, CLI::App& cmd) {
  TrainConfig tc;
  if (o.preset == "desk") tc = TrainConfig::desk();
  else if (o.preset == "paper") tc = TrainConfig::paper();
  else usage("--preset must be desk or paper");
  auto given = [&](const char* name) { return cmd.get_option(name)->count() > 0; };
  if (given("--optimizer")) tc.optimizer = parse_optimizer(o.optimizer);
  if (given("--lr")) tc.base_lr = o.lr;
  if (given("--momentum")) tc.momentum = o.momentum;
  if (given("--weight-decay")) tc.weight_decay = o.weight_decay;
  if (given("--epochs")) tc.epochs = o.epochs;
  if (given("--warmup-epochs")) tc.warmup_epochs = o.warmup_epochs;
  if (given("--batch-size")) tc.batch_size = o.batch_size;
  tc.seed = o.seed;
  tc.standardize = !o.no_standardize;

  tc.shape.mode = parse_mode(o.mode);
  tc.shape.score_depth = o.score_depth;
  tc.shape.score_hidden = o.score_hidden;
  if (o.score_depth < 1 || o.score_depth > 4) usage("--score-depth must be between 1 and 4");
  if (!is_abmilp(tc.shape.mode) && (given("--score-depth") || given("--activation") || given("--score-hidden")))
    usage("--score-depth, --score-hidden and --activation only apply to the abmilp modes");
  if (o.activation.empty()) tc.shape.activation = o.score_depth == 1 ? Activation::None : Activation::Relu;
  else tc.shape.activation = parse_activation(o.activation);
  if (o.score_depth == 1 && tc.shape.activation != Activation::None)
    usage("--activation " + o.activation + " has no effect at --score-depth 1 (a single affine layer)");
  if (o.score_depth > 1 && tc.shape.activation == Activation::None)
    usage("--score-depth " + std::to_string(o.score_depth) + " needs an activation (relu, gelu or tanh)");
  tc.validate();

  // Show the preset-resolved values in the dump for options left unset.
  auto resolved = [&](const char* name, const std::string& value) {
    if (!given(name)) cmd.get_option(name)->default_str(value);
  };
  resolved("--optimizer", std::string(to_string(tc.optimizer)));
  resolved("--lr", format_g9(tc.base_lr));
  resolved("--momentum", format_g9(tc.momentum));
  resolved("--weight-decay", format_g9(tc.weight_decay));
  resolved("--epochs", std::to_string(tc.epochs));
  resolved("--warmup-epochs", std::to_string(tc.warmup_epochs));
  resolved("--batch-size", std::to_string(tc.batch_size));
  resolved("--activation", std::string(to_string(tc.shape.activation)));
  report_resolved(cmd, o.seed);

  const TensorBundle b = load_bundle(o.features);
  std::optional<DatasetManifest> labels;
  if (!o.labels.empty()) labels = load_dataset_manifest(o.labels);
  const DatasetManifest* lp = labels ? &*labels : nullptr;
  FeatureDataset train = dataset_from_features(b, lp, o.train_split);
  FeatureDataset eval = dataset_from_features(b, lp, o.eval_split);
  require(!train.empty(), ErrorKind::Data, "no items in split '" + o.train_split + "'");
  if (requires_cls(tc.shape.mode) && !train.samples.front().has_cls)
    fail(ErrorKind::Data, "mode " + o.mode + " needs a cls token but the features have none");
  eval.num_classes = train.num_classes = std::max(train.num_classes, eval.num_classes);

  std::optional<TensorBundle> external;
  if (!o.external.empty()) external = load_bundle(o.external);
  attach_fixed_selectors(train, b, tc.shape.mode, external ? &*external : nullptr);
  attach_fixed_selectors(eval, b, tc.shape.mode, external ? &*external : nullptr);

  const auto result = train_probe(train, tc, eval.empty() ? nullptr : &eval, o.threads);
  const auto& last = result.history.back();

  fs::create_directories(o.out);
  save_bundle(probe_to_bundle(result.params), fs::path(o.out) / "probe");
  write_text(fs::path(o.out) / "history.csv", history_csv(result.history));

  AggregatorSpec spec{tc.shape.mode, std::nullopt};
  if (is_abmilp(tc.shape.mode))
    spec.score_model = ScoreModelShape{tc.shape.score_depth, tc.shape.score_hidden ? tc.shape.score_hidden : train.dim()};
  Json summary{{"mode", o.mode},
               {"score_depth", tc.shape.score_depth},
               {"activation", to_string(tc.shape.activation)},
               {"optimizer", to_string(tc.optimizer)},
               {"preset", o.preset},
               {"seed", o.seed},
               {"epochs", tc.epochs},
               {"train_samples", train.size()},
               {"eval_samples", eval.size()},
               {"parameter_count", parameter_count(spec, train.dim(), train.num_classes)},
               {"final_train_loss", round_g9(last.train_loss)},
               {"final_train_accuracy", round_g9(last.train_accuracy)}};
  summary["final_eval_accuracy"] = last.eval_accuracy ? Json(round_g9(*last.eval_accuracy)) : Json(nullptr);
  if (auto w = signal_weight(eval.empty() ? train : eval, b, result.params)) summary["signal_weight_mean"] = round_g9(*w);
  write_text(fs::path(o.out) / "summary.json", dump_json(summary));

  std::cout << "final train accuracy: " << format_g9(last.train_accuracy) << "\n";
  if (last.eval_accuracy) std::cout << "final eval accuracy: " << format_g9(*last.eval_accuracy) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// localize

struct LocalizeOptions {
  std::string features, gt, probe, out, config, selectors = "attn_avg_cls";
  std::size_t image_h = 0, image_w = 0;
  int threads = 1;
};

int run_localize(const LocalizeOptions& o, const CLI::App& cmd) {
  report_resolved(cmd, 0);
  const TensorBundle b = load_bundle(o.features);
  const auto gt = load_gt_boxes(o.gt);
  std::optional<ProbeParams<float>> probe;
  if (!o.probe.empty()) probe = probe_from_bundle(load_bundle(o.probe));
  const auto selectors = split_list(o.selectors);
  if (selectors.empty()) usage("--selectors is empty");
  check_selectors(selectors, probe ? &*probe : nullptr);
  require(!b.items.empty(), ErrorKind::Data, "bundle has no items");

  std::vector<const Json*> items;
  std::vector<std::vector<BoundingBox>> boxes;
  for (const auto& it : b.items) {
    const std::string id = it.at("id").get<std::string>();
    auto g = gt.find(id);
    require(g != gt.end() && !g->second.empty(), ErrorKind::Data, "no ground-truth boxes for '" + id + "'");
    items.push_back(&it);
    boxes.push_back(g->second);
  }

  SelectorContext ctx{&b, probe ? &*probe : nullptr};
  const MaxBoxAccConfig mcfg;
  Json report = Json::object();
  for (const auto& name : selectors) {
    std::vector<Heatmap> heatmaps(items.size());
    parallel_for(items.size(), o.threads, [&](std::size_t i) {
      const SelectionVector w = select(name, *items[i], ctx);
      GridInfo g = grid_of(b, w.size());
      if (o.image_h) g.image_h = o.image_h;
      if (o.image_w) g.image_w = o.image_w;
      require(g.rows > 0 && g.image_h > 0 && g.image_w > 0, ErrorKind::Data,
              "cannot infer the patch grid or image size; see --image-h/--image-w");
      heatmaps[i] = scores_to_heatmap(w, g.rows, g.cols, g.image_h, g.image_w);
    });
    const auto r = max_box_acc_v2(heatmaps, boxes, mcfg, o.threads);

    // Per-image boxes at the threshold that is best for IoU 0.5.
    const auto level = std::find(mcfg.iou_levels.begin(), mcfg.iou_levels.end(), 0.5) - mcfg.iou_levels.begin();
    const std::size_t li = static_cast<std::size_t>(level) < mcfg.iou_levels.size() ? static_cast<std::size_t>(level) : 0;
    const double tau = r.best_threshold[li];
    Json images = Json::array();
    for (std::size_t i = 0; i < items.size(); ++i) {
      const auto box = threshold_to_box(heatmaps[i], tau);
      Json e{{"id", items[i]->at("id")}};
      e["box"] = box ? Json::array({box->x0, box->y0, box->x1, box->y1}) : Json(nullptr);
      e["iou"] = box ? [&] {
        double best = 0.0;
        for (const auto& g : boxes[i]) best = std::max(best, iou(*box, g));
        return round_g9(best);
      }() : 0.0;
      images.push_back(e);
    }
    Json entry = max_box_acc_json(r, mcfg);
    entry["box_threshold"] = round_g9(tau);
    entry["images"] = images;
    report[name] = entry;
    std::cout << name << ": MaxBoxAccV2 " << format_g9(r.score) << "\n";
  }
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, dump_json(Json{{"images", items.size()}, {"selectors", report}}));
  return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::string task, out, config, kind = "random";
  std::size_t n = 0, d = 0, k = 0, tokens = 0, n_eval = 0, blocks = 4, heads = 4;
  std::uint64_t seed = 0;
  bool no_cls = false;
  int threads = 1;
};

int run_synth(const SynthOptions& o, CLI::App& cmd) {
  auto given = [&](const char* name) { return cmd.get_option(name)->count() > 0; };
  // Shows task defaults in the resolved-config dump; options the task ignores stay "task".
  auto report = [&](std::initializer_list<std::pair<const char*, std::size_t>> values) {
    for (const auto& [name, v] : values)
      if (!given(name)) cmd.get_option(name)->default_str(std::to_string(v));
    report_resolved(cmd, o.seed);
  };
  const fs::path out(o.out);
  fs::create_directories(out);
  if (o.task == "bags") {
    synth::BagsConfig c;
    if (given("--n")) c.n_train = o.n;
    if (given("--n-eval")) c.n_eval = o.n_eval;
    if (given("--d")) c.dim = o.d;
    if (given("--k")) c.classes = o.k;
    if (given("--tokens")) c.tokens = o.tokens;
    c.with_cls = !o.no_cls;
    c.seed = o.seed;
    if (c.n_train == 0 || c.dim == 0 || c.classes == 0 || c.tokens == 0) usage("bag sizes must be positive");
    report({{"--n", c.n_train}, {"--n-eval", c.n_eval}, {"--d", c.dim}, {"--k", c.classes}, {"--tokens", c.tokens}});
    const auto bags = synth::make_bags(c);
    save_bundle(synth::bags_to_bundle(bags, c), out / "features");
    std::cout << "wrote " << c.n_train << " train and " << c.n_eval << " eval bags to " << (out / "features").string()
              << "\n";
  } else if (o.task == "attention") {
    const std::size_t n = given("--n") ? o.n : 8, tokens = given("--tokens") ? o.tokens : 16;
    if (n == 0 || tokens == 0 || o.blocks == 0 || o.heads == 0) usage("attention sizes must be positive");
    report({{"--n", n}, {"--tokens", tokens}});
    const auto kind = synth::parse_attention_kind(o.kind);
    TensorBundle b;
    b.kind = "attention";
    b.config = Json{{"task", "attention"}, {"kind", o.kind}, {"has_cls", !o.no_cls}, {"blocks", o.blocks},
                    {"heads", o.heads},    {"patches", tokens}, {"seed", o.seed}};
    for (std::size_t i = 0; i < n; ++i) {
      RngStream rng(o.seed, 100 + i);
      char id[32];
      std::snprintf(id, sizeof(id), "img_%05zu", i);
      b.tensors[std::string("attention/") + id] =
          synth::make_attention(kind, o.blocks, o.heads, tokens, !o.no_cls, rng).maps;
      b.items.push_back(Json{{"id", id}, {"attention", std::string("attention/") + id}});
    }
    save_bundle(b, out / "attention");
    std::cout << "wrote " << n << " " << o.kind << " attention tensors to " << (out / "attention").string() << "\n";
  } else if (o.task == "boxes") {
    synth::BoxesConfig c;
    if (given("--n")) c.n = o.n;
    if (given("--d")) c.dim = o.d;
    c.seed = o.seed;
    if (c.n == 0 || c.dim == 0) usage("box set sizes must be positive");
    report({{"--n", c.n}, {"--d", c.dim}});
    const auto samples = synth::make_boxes(c);
    save_bundle(synth::boxes_to_bundle(samples, c), out / "features");
    write_text(out / "gt_boxes.json", dump_json(synth::boxes_gt_json(samples)));
    std::cout << "wrote " << c.n << " localization samples to " << out.string() << "\n";
  } else if (o.task == "model") {
    synth::ModelConfig c;
    if (given("--n")) c.n_images = o.n;
    if (given("--d")) c.vit.embed_dim = o.d;
    if (given("--k")) c.classes = o.k;
    if (given("--blocks")) c.vit.depth = o.blocks;
    if (given("--heads")) c.vit.heads = o.heads;
    c.vit.has_cls = !o.no_cls;
    c.seed = o.seed;
    c.vit.validate();
    if (c.n_images == 0 || c.classes == 0) usage("model sizes must be positive");
    report({{"--n", c.n_images}, {"--d", c.vit.embed_dim}, {"--k", c.classes}});
    save_bundle(vit_to_bundle(synth::make_model(c)), out / "vit");
    const auto images = synth::make_images(c);
    Json manifest{{"classes", Json::array()}, {"items", Json::array()}};
    for (std::size_t k = 0; k < c.classes; ++k) manifest["classes"].push_back("class_" + std::to_string(k));
    for (std::size_t i = 0; i < images.size(); ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "img_%05zu", i);
      const std::string rel = std::string("images/") + id + ".satf";
      satf::write_tensor(images[i], out / rel);
      manifest["items"].push_back(Json{{"id", id}, {"image", rel}, {"label", i % c.classes},
                                       {"split", i % 4 == 3 ? "eval" : "train"}});
    }
    write_text(out / "images.json", dump_json(manifest));
    std::cout << "wrote a random ViT and " << images.size() << " images to " << out.string() << "\n";
  } else {
    usage("unknown synth task '" + o.task + "' (choose bags, attention, boxes or model)");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::string mode = "abmilp_patches", activation, config, out;
  std::size_t score_depth = 2;
  std::uint64_t seed = 0;
  bool all = false, corrupt = false;
  int threads = 1;
};

std::string describe(const ProbeShape& s) {
  std::string out(to_string(s.mode));
  if (is_abmilp(s.mode)) out += " depth " + std::to_string(s.score_depth) + " " + std::string(to_string(s.activation));
  return out;
}

int run_gradcheck(const GradcheckOptions& o, const CLI::App& cmd) {
  report_resolved(cmd, o.seed);
  GradcheckConfig base;
  base.seed = o.seed;
  base.corrupt = o.corrupt;
  std::vector<ProbeShape> shapes;
  if (o.all) {
    shapes = gradcheck_shapes();
  } else {
    ProbeShape s;
    s.mode = parse_mode(o.mode);
    if (!is_abmilp(s.mode)) {
      s.score_depth = 1;
      s.activation = Activation::None;
    } else {
      if (o.score_depth < 1 || o.score_depth > 4) usage("--score-depth must be between 1 and 4");
      s.score_depth = o.score_depth;
      s.activation = o.activation.empty() ? (o.score_depth == 1 ? Activation::None : Activation::Relu)
                                          : parse_activation(o.activation);
      if ((s.score_depth == 1) != (s.activation == Activation::None))
        usage("depth 1 takes no activation; deeper score models need relu, gelu or tanh");
    }
    shapes.push_back(s);
  }
  std::vector<GradcheckCase> cases(shapes.size());
  parallel_for(shapes.size(), o.threads, [&](std::size_t i) {
    GradcheckConfig c = base;
    c.shape = shapes[i];
    cases[i] = {shapes[i], gradcheck(c)};
  });
  bool ok = true;
  double worst = 0.0;
  Json rows = Json::array();
  for (const auto& c : cases) {
    ok = ok && c.report.passed;
    worst = std::max(worst, c.report.max_rel_error);
    std::cout << (c.report.passed ? "PASS " : "FAIL ") << describe(c.shape) << ": max rel error "
              << format_g9(c.report.max_rel_error) << " (worst " << c.report.worst_tensor << "[" << c.report.worst_index
              << "])\n";
    rows.push_back(Json{{"mode", to_string(c.shape.mode)},
                        {"score_depth", c.shape.score_depth},
                        {"activation", to_string(c.shape.activation)},
                        {"max_rel_error", round_g9(c.report.max_rel_error)},
                        {"worst_tensor", c.report.worst_tensor},
                        {"worst_index", c.report.worst_index},
                        {"passed", c.report.passed}});
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << ", max rel error " << format_g9(worst) << "\n";
  if (!o.out.empty()) write_text(o.out, dump_json(Json{{"passed", ok}, {"max_rel_error", round_g9(worst)}, {"cases", rows}}));
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention metrics, selective aggregation probes and localization for frozen ViT features"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();

  int threads = 1;
  try {
    threads = default_threads();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  ExtractOptions ex;
  ex.threads = threads;
  auto* extract = app.add_subcommand("extract", "Run a ViT bundle over images and save per-image tokens");
  extract->add_option("--weights", ex.weights, "ViT weights bundle directory")->required();
  extract->add_option("--images", ex.images, "dataset manifest (JSON) listing SATF images")->required();
  extract->add_option("--out", ex.out, "output features bundle directory")->required();
  extract->add_option("--block", ex.block, "number of blocks to run, 1..depth (default: depth)");
  extract->add_option("--mask-ratio", ex.mask_ratio, "fraction of patches dropped before the encoder, in [0, 1)");
  extract->add_option("--seed", ex.seed, "seed for the patch masks");
  extract->add_flag("--capture-attn", ex.capture, "also save per-block attention maps");
  add_common(extract, ex.config, ex.threads);

  AnalyzeOptions an;
  an.threads = threads;
  auto* analyze = app.add_subcommand("analyze", "Per-block attention metrics and selector divergences");
  analyze->add_option("--attention", an.attention, "bundle with captured attention")->required();
  analyze->add_option("--out", an.out, "output directory")->required();
  analyze->add_option("--metrics", an.metrics,
                      "comma list of cls_self_attention, cls_patch_entropy, patch_self_attention_ratio, "
                      "patch_patch_entropy, or all");
  analyze->add_option("--selectors", an.selectors,
                      "comma list of two or more selectors for a KLD matrix: attn_avg_cls, attn_lowest_entropy, "
                      "attn_central_patch, uniform, abmilp");
  analyze->add_option("--probe", an.probe, "probe bundle for the abmilp selector");
  analyze->add_option("--format", an.format, "csv, json or both");
  add_common(analyze, an.config, an.threads);

  TrainOptions tr;
  tr.threads = threads;
  auto* train = app.add_subcommand("train-probe", "Train an aggregator and linear classifier on frozen features");
  train->add_option("--features", tr.features, "features bundle")->required();
  train->add_option("--labels", tr.labels, "dataset manifest overriding labels and splits");
  train->add_option("--out", tr.out, "output directory (probe bundle, history.csv, summary.json)")->required();
  train->add_option("--mode", tr.mode,
                    "cls, avg_patches, abmilp_patches, abmilp_with_cls, external_map, attn_avg_cls, "
                    "attn_lowest_entropy, attn_central_patch");
  train->add_option("--score-depth", tr.score_depth, "score model layers, 1..4");
  train->add_option("--score-hidden", tr.score_hidden, "score model hidden width (default: feature width)");
  train->add_option("--activation", tr.activation, "relu, gelu or tanh (depth >= 2 only)");
  train->add_option("--optimizer", tr.optimizer, "sgd_momentum or lars")->default_str("preset");
  train->add_option("--preset", tr.preset, "desk or paper");
  train->add_option("--lr", tr.lr, "base learning rate")->default_str("preset");
  train->add_option("--momentum", tr.momentum, "momentum")->default_str("preset");
  train->add_option("--weight-decay", tr.weight_decay, "weight decay")->default_str("preset");
  train->add_option("--epochs", tr.epochs, "epochs")->default_str("preset");
  train->add_option("--warmup-epochs", tr.warmup_epochs, "linear warmup epochs")->default_str("preset");
  train->add_option("--batch-size", tr.batch_size, "batch size")->default_str("preset");
  train->add_option("--seed", tr.seed, "seed for initialization and shuffling");
  train->add_option("--train-split", tr.train_split, "split used for training");
  train->add_option("--eval-split", tr.eval_split, "split used for evaluation");
  train->add_option("--external", tr.external, "bundle of maps/<id> tensors for mode external_map");
  train->add_flag("--no-standardize", tr.no_standardize, "disable per-dimension feature standardization");
  add_common(train, tr.config, tr.threads);

  LocalizeOptions lo;
  lo.threads = threads;
  auto* localize = app.add_subcommand("localize", "MaxBoxAccV2 of selector heatmaps against ground-truth boxes");
  localize->add_option("--features", lo.features, "bundle with tokens and/or attention")->required();
  localize->add_option("--gt", lo.gt, "JSON of image id -> [[x0, y0, x1, y1], ...]")->required();
  localize->add_option("--out", lo.out, "output JSON report")->required();
  localize->add_option("--selectors", lo.selectors,
                       "comma list of attn_avg_cls, attn_lowest_entropy, attn_central_patch, uniform, abmilp");
  localize->add_option("--probe", lo.probe, "probe bundle for the abmilp selector");
  localize->add_option("--image-h", lo.image_h, "image height (default: bundle config)");
  localize->add_option("--image-w", lo.image_w, "image width (default: bundle config)");
  add_common(localize, lo.config, lo.threads);

  SynthOptions sy;
  sy.threads = threads;
  auto* synth_cmd = app.add_subcommand("synth", "Generate seeded synthetic datasets");
  synth_cmd->add_option("task", sy.task, "bags, attention, boxes or model")->required();
  synth_cmd->add_option("--out", sy.out, "output directory")->required();
  synth_cmd->add_option("--n", sy.n, "number of samples (bags: training samples)")->default_str("task");
  synth_cmd->add_option("--n-eval", sy.n_eval, "bags: evaluation samples")->default_str("task");
  synth_cmd->add_option("--d", sy.d, "feature width")->default_str("task");
  synth_cmd->add_option("--k", sy.k, "number of classes")->default_str("task");
  synth_cmd->add_option("--tokens", sy.tokens, "patch tokens per sample")->default_str("task");
  synth_cmd->add_option("--blocks", sy.blocks, "attention/model: blocks");
  synth_cmd->add_option("--heads", sy.heads, "attention/model: heads");
  synth_cmd->add_option("--kind", sy.kind, "attention: uniform, identity, random or peaked");
  synth_cmd->add_option("--seed", sy.seed, "seed");
  synth_cmd->add_flag("--no-cls", sy.no_cls, "omit the cls token");
  add_common(synth_cmd, sy.config, sy.threads);

  GradcheckOptions gc;
  gc.threads = threads;
  auto* grad = app.add_subcommand("gradcheck", "Compare analytic probe gradients with central differences");
  grad->add_option("--mode", gc.mode, "aggregator mode");
  grad->add_option("--score-depth", gc.score_depth, "score model layers, 1..4");
  grad->add_option("--activation", gc.activation, "relu, gelu or tanh (depth >= 2 only)");
  grad->add_option("--seed", gc.seed, "seed");
  grad->add_option("--out", gc.out, "optional JSON report");
  grad->add_flag("--all", gc.all, "sweep every mode, depth and activation");
  grad->add_flag("--corrupt", gc.corrupt, "perturb one analytic gradient entry (negative control)")->group("");
  add_common(grad, gc.config, gc.threads);

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Domain ? kExitUsage : kExitData;
  }
  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*extract) return run_extract(ex, *extract);
    if (*analyze) return run_analyze(an, *analyze);
    if (*train) return run_train(tr, *train);
    if (*localize) return run_localize(lo, *localize);
    if (*synth_cmd) return run_synth(sy, *synth_cmd);
    if (*grad) return run_gradcheck(gc, *grad);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.kind() == ErrorKind::Numeric) return kExitNumeric;
    if (e.kind() == ErrorKind::Domain) return kExitUsage;
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
