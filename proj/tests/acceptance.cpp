// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "oracles.hpp"
#include "selagg/aggregation.hpp"
#include "selagg/localization.hpp"
#include "selagg/metrics.hpp"
#include "selagg/probe.hpp"
#include "selagg/satf.hpp"
#include "selagg/synth.hpp"
#include "selagg/vit.hpp"

using namespace selagg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Accumulates the first few failure reasons.
struct Check {
  Outcome out;
  void expect(bool cond, const std::string& why) {
    if (cond) return;
    if (out.pass) out.detail = why;
    out.pass = false;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(8);
  s << v;
  return s.str();
}

int hw_threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---------------------------------------------------------------------------

Outcome a1_entropy_bound() {
  Check c;
  const auto t0 = Clock::now();
  const std::size_t t = 197;
  const AttentionTensor a{DenseTensor({1, 1, t, t}, 1.0f / static_cast<float>(t)), true};
  const double h = cls_patch_entropy(a).values[0];
  c.expect(std::abs(h - std::log(196.0)) <= 1e-6, "entropy " + fmt(h));
  c.expect(std::abs(std::log(196.0) - 5.2781) < 5e-5, "ln 196 mismatch");
  const double secs = seconds_since(t0);
  c.expect(secs < 1.0, "took " + fmt(secs) + " s");
  if (c.out.pass) c.out.detail = "H = " + fmt(h) + ", ln 196 = " + fmt(std::log(196.0));
  return c.out;
}

Outcome a2_metric_oracle() {
  Check c;
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed, 42);
    const auto a = synth::make_attention(synth::AttentionKind::Random, 4, 4, 16, true, rng);
    const auto ref = oracle::image_metrics(a.maps);
    const auto cs = cls_self_attention(a), ce = cls_patch_entropy(a);
    const auto pr = patch_self_attention_ratio(a), pe = patch_patch_entropy(a);
    for (std::size_t l = 0; l < 4; ++l) {
      worst = std::max({worst, std::abs(cs.values[l] - ref.cls_self[l]), std::abs(ce.values[l] - ref.cls_entropy[l]),
                        std::abs(pr.values[l] - ref.patch_self_ratio[l]),
                        std::abs(pe.values[l] - ref.patch_entropy[l])});
    }
  }
  c.expect(worst <= 1e-6, "max deviation " + fmt(worst));
  const double secs = seconds_since(t0);
  c.expect(secs < 5.0, "took " + fmt(secs) + " s");
  if (c.out.pass) c.out.detail = "20 tensors, max deviation " + fmt(worst);
  return c.out;
}

Outcome a3_gradients() {
  Check c;
  const auto t0 = Clock::now();
  GradcheckConfig base;  // D=16, N=8, K=5, batch 4
  double worst = 0.0;
  std::size_t cases = 0;
  for (const auto& g : gradcheck_suite(base)) {
    ++cases;
    worst = std::max(worst, g.report.max_rel_error);
    c.expect(g.report.passed && g.report.max_rel_error < 1e-4,
             std::string(to_string(g.shape.mode)) + " depth " + std::to_string(g.shape.score_depth) + " " +
                 std::string(to_string(g.shape.activation)) + " err " + fmt(g.report.max_rel_error));
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 30.0, "took " + fmt(secs) + " s");
  if (c.out.pass) c.out.detail = std::to_string(cases) + " shapes, max rel err " + fmt(worst) + ", " + fmt(secs) + " s";
  return c.out;
}

double mean_signal_weight(const synth::Bags& bags, const ProbeParams<float>& p) {
  double sum = 0.0;
  for (std::size_t i = 0; i < bags.eval.size(); ++i)
    sum += probe_forward(bags.eval.samples[i], p).selection.weights[bags.eval_signal[i]];
  return sum / static_cast<double>(bags.eval.size());
}

Outcome a4_selective_advantage() {
  Check c;
  const auto t0 = Clock::now();
  double avg_acc = 0.0, abmilp_acc = 0.0, weight = 0.0;
  const int seeds = 3;
  for (int s = 0; s < seeds; ++s) {
    synth::BagsConfig bc;  // K=10, N=32, D=64, 5000 / 1000
    bc.seed = static_cast<std::uint64_t>(s);
    const auto bags = synth::make_bags(bc);
    auto tc = TrainConfig::desk();
    tc.seed = static_cast<std::uint64_t>(s);
    tc.shape.mode = AggregatorMode::AvgPatches;
    const auto avg = train_probe(bags.train, tc, nullptr, hw_threads());
    avg_acc += evaluate(bags.eval, avg.params, hw_threads());
    tc.shape.mode = AggregatorMode::AbmilpPatches;
    const auto ab = train_probe(bags.train, tc, nullptr, hw_threads());
    abmilp_acc += evaluate(bags.eval, ab.params, hw_threads());
    weight += mean_signal_weight(bags, ab.params);
  }
  avg_acc /= seeds;
  abmilp_acc /= seeds;
  weight /= seeds;
  const double gap = 100.0 * (abmilp_acc - avg_acc);
  const double secs = seconds_since(t0);
  const std::string summary = "abmilp " + fmt(100.0 * abmilp_acc) + "% vs avg " + fmt(100.0 * avg_acc) +
                              "% (gap " + fmt(gap) + "pp), signal weight " + fmt(weight) + " vs 3/N = " +
                              fmt(3.0 / 32.0) + ", " + fmt(secs) + " s";
  c.expect(gap >= 20.0, summary);
  c.expect(weight > 3.0 / 32.0, summary);
  c.expect(secs < 180.0, summary);
  if (c.out.pass) c.out.detail = summary;
  return c.out;
}

Outcome a5_parameter_overhead() {
  Check c;
  const auto plain = parameter_count({AggregatorMode::Cls, std::nullopt}, 768, 1000);
  const auto avg = parameter_count({AggregatorMode::AvgPatches, std::nullopt}, 768, 1000);
  const auto ab = parameter_count({AggregatorMode::AbmilpPatches, ScoreModelShape{1, 0}}, 768, 1000);
  c.expect(plain == 769000 && avg == 769000, "plain " + std::to_string(plain));
  c.expect(ab == 769769, "abmilp " + std::to_string(ab));
  // The instantiated tensors agree with the formula.
  RngStream rng(5, 0);
  auto p = init_probe<float>(768, 1000, ProbeShape{}, rng);
  std::size_t actual = 0;
  for (auto& [name, t] : p.trainable()) actual += t->size();
  c.expect(actual == ab, "instantiated " + std::to_string(actual));
  if (c.out.pass) c.out.detail = std::to_string(plain) + " vs " + std::to_string(ab);
  return c.out;
}

Outcome a6_shift_invariance() {
  Check c;
  double worst_w = 0.0, worst_l = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, 6);
    for (std::size_t depth = 1; depth <= 4; ++depth) {
      ProbeShape shape{AggregatorMode::AbmilpWithCls, depth, 12, depth == 1 ? Activation::None : Activation::Gelu};
      auto p = init_probe<float>(12, 5, shape, rng);
      p.classifier_w = rand_normal<float>({12, 5}, rng, 0.5);
      const FeatureSample sample{"x", rand_normal<float>({17, 12}, rng), true, 0, {}};
      const auto base = probe_forward(sample, p);
      for (float shift : {-10.f, 1.f, 10.f}) {
        auto q = p;
        q.score.layers.back().b[0] += shift;
        const auto out = probe_forward(sample, q);
        for (std::size_t i = 0; i < out.selection.size(); ++i)
          worst_w = std::max(worst_w, std::abs(out.selection.weights[i] - base.selection.weights[i]));
        for (std::size_t k = 0; k < out.logits.size(); ++k)
          worst_l = std::max(worst_l, std::abs(out.logits[k] - base.logits[k]));
      }
    }
  }
  c.expect(worst_w <= 1e-6, "weight change " + fmt(worst_w));
  c.expect(worst_l <= 1e-5, "logit change " + fmt(worst_l));
  if (c.out.pass) c.out.detail = "max weight change " + fmt(worst_w) + ", max logit change " + fmt(worst_l);
  return c.out;
}

Outcome a7_mae_plumbing() {
  Check c;
  const auto t0 = Clock::now();
  ViTConfig vc;
  vc.image_h = 16;
  vc.image_w = 16;
  vc.channels = 3;
  vc.patch_size = 4;
  vc.embed_dim = 16;
  vc.depth = 2;
  vc.heads = 2;
  MAEDecoderConfig dc;
  dc.embed_dim = 8;
  dc.depth = 1;
  dc.heads = 2;
  const std::size_t n = vc.num_patches();

  // End to end on random tiny models at each ratio, on a 4x4 and a 2x5 patch grid.
  for (const auto& [h, w] : {std::pair<std::size_t, std::size_t>{16, 16}, {8, 20}}) {
    for (double rho : {0.25, 0.5, 0.75}) {
      ViTConfig gc = vc;
      gc.image_h = h;
      gc.image_w = w;
      const std::size_t np = gc.num_patches();
      RngStream rng(7, static_cast<std::uint64_t>(rho * 100) + h);
      const auto enc = random_vit(gc, rng);
      const auto dec = random_decoder(gc, dc, rng);
      const auto patches = patchify(rand_uniform<float>({h, w, 3}, rng), 4);
      const auto mask = sample_mask(np, rho, rng);
      const auto encoded = vit_forward(apply_mask(embed(patches, enc), mask), enc, false).tokens;
      const auto visible = 1 + static_cast<std::size_t>(std::floor(static_cast<double>(np) * (1.0 - rho)));
      c.expect(encoded.size() == visible, "visible tokens " + std::to_string(encoded.size()) + " at rho " + fmt(rho));
      const auto pred = mae_decode(encoded, mask, dec, gc.ln_eps);
      c.expect(pred.dims() == patches.dims(), "decoder output shape");
      c.expect(std::isfinite(mae_loss(pred, patches, mask)), "non-finite loss");
      c.expect(mae_loss(patches, patches, mask) == 0.0, "loss(pred=target) != 0");
    }
  }

  // Mask-token placement against an index oracle.
  RngStream rng(70, 0);
  const auto dec = random_decoder(vc, dc, rng);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    RngStream mr(static_cast<std::uint64_t>(trial), 71);
    const double rho = 0.25 * static_cast<double>(1 + trial % 3);
    const auto mask = sample_mask(n, rho, mr);
    const auto kept = mask.kept_indices();
    const TokenSequence encoded{rand_normal<float>({kept.size() + 1, vc.embed_dim}, mr), true, 0};
    const auto full = decoder_input(encoded, mask, dec);
    const auto proj = affine(encoded.tokens, dec.embed_w, dec.embed_b);
    std::vector<long> source(n, -1);
    for (std::size_t r = 0; r < kept.size(); ++r) source[kept[r]] = static_cast<long>(r + 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dc.embed_dim; ++j) {
        const float want = source[i] < 0 ? dec.mask_token[j] : proj.at(static_cast<std::size_t>(source[i]), j);
        mismatches += full.at(i + 1, j) != want;
      }
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " misplaced decoder entries");
  const double secs = seconds_since(t0);
  c.expect(secs < 10.0, "took " + fmt(secs) + " s");
  if (c.out.pass) c.out.detail = "3 ratios on 16 and 10 patches end to end, 100 masks placed correctly";
  return c.out;
}

Heatmap smooth_heatmap(RngStream& rng, std::size_t size) {
  std::vector<double> w(16);
  for (double& v : w) v = rng.uniform();
  return scores_to_heatmap(SelectionVector{w, "r"}, 4, 4, size, size);
}

BoundingBox random_box(RngStream& rng, std::int64_t size) {
  const auto x0 = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::size_t>(size - 2)));
  const auto y0 = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::size_t>(size - 2)));
  const auto x1 = x0 + 1 + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::size_t>(size - x0 - 1)));
  const auto y1 = y0 + 1 + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::size_t>(size - y0 - 1)));
  return {x0, y0, x1, y1};
}

Outcome a8_max_box_acc() {
  Check c;
  const auto t0 = Clock::now();
  const MaxBoxAccConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, 8);
    std::vector<Heatmap> maps;
    std::vector<std::vector<BoundingBox>> gts;
    std::vector<std::vector<std::vector<double>>> omaps;
    std::vector<std::vector<oracle::Box>> ogts;
    for (int i = 0; i < 5; ++i) {
      maps.push_back(smooth_heatmap(rng, 24));
      const auto& h = maps.back();
      omaps.emplace_back(h.height(), std::vector<double>(h.width()));
      for (std::size_t y = 0; y < h.height(); ++y)
        for (std::size_t x = 0; x < h.width(); ++x) omaps.back()[y][x] = h.values.at(y, x);
      const auto b = random_box(rng, 24);
      gts.push_back({b});
      ogts.push_back({{b.x0, b.y0, b.x1, b.y1}});
    }
    const double got = max_box_acc_v2(maps, gts, cfg).score;
    const double want = oracle::max_box_acc(omaps, ogts, cfg.thresholds, cfg.iou_levels);
    c.expect(got == want, "seed " + std::to_string(seed) + ": " + fmt(got) + " vs oracle " + fmt(want));
  }

  RngStream rng(80, 0);
  std::vector<Heatmap> perfect, constant;
  std::vector<std::vector<BoundingBox>> gts;
  for (int i = 0; i < 5; ++i) {
    BoundingBox b = random_box(rng, 24);
    b.x1 = std::min<std::int64_t>(b.x1, b.x0 + 8);
    b.y1 = std::min<std::int64_t>(b.y1, b.y0 + 8);
    DenseTensor v({24, 24});
    for (auto y = b.y0; y < b.y1; ++y)
      for (auto x = b.x0; x < b.x1; ++x) v.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.f;
    perfect.push_back(Heatmap{v, 24, 24});
    constant.push_back(Heatmap{DenseTensor({24, 24}), 24, 24});
    gts.push_back({b});
  }
  const double p = max_box_acc_v2(perfect, gts).score, z = max_box_acc_v2(constant, gts).score;
  c.expect(p == 100.0, "perfect maps scored " + fmt(p));
  c.expect(z == 0.0, "constant maps scored " + fmt(z));
  const double secs = seconds_since(t0);
  c.expect(secs < 5.0, "took " + fmt(secs) + " s");
  if (c.out.pass) c.out.detail = "5 sets equal the oracle, perfect 100, constant 0";
  return c.out;
}

// ---------------------------------------------------------------------------
// CLI determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  if (fs::is_regular_file(root)) {
    files["."] = slurp(root);
    return files;
  }
  if (!fs::exists(root)) return files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" SELAGG_CLI "' " + args + " >/dev/null 2>>cli.log";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome a9_determinism() {
  Check c;
  const fs::path dir = fs::temp_directory_path() / ("selagg_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);

  // Shared inputs.
  c.expect(run_cli(dir, "synth model --out model --seed 1") == 0, "synth model failed");
  c.expect(run_cli(dir, "synth bags --out bags --n 200 --n-eval 50 --seed 2") == 0, "synth bags failed");
  c.expect(run_cli(dir, "synth boxes --out boxes --n 8 --seed 3") == 0, "synth boxes failed");
  c.expect(run_cli(dir, "extract --weights model/vit --images model/images.json --out feats --capture-attn") == 0,
           "extract failed");
  c.expect(run_cli(dir, "train-probe --features boxes/features --out boxprobe --epochs 3 --warmup-epochs 1") == 0,
           "train-probe on boxes failed");
  if (!c.out.pass) return c.out;

  struct Job {
    std::string name, args;
    bool file = false;
  };
  const std::vector<Job> jobs{
      {"synth_bags", "synth bags --n 60 --n-eval 20 --seed 9"},
      {"synth_attention", "synth attention --n 4 --kind peaked --seed 9"},
      {"synth_boxes", "synth boxes --n 4 --seed 9"},
      {"synth_model", "synth model --seed 9"},
      {"extract", "extract --weights model/vit --images model/images.json --capture-attn --mask-ratio 0.5 --seed 5"},
      {"analyze", "analyze --attention feats"},
      {"train_abmilp", "train-probe --features bags/features --score-depth 2 --activation gelu --epochs 4"},
      {"train_avg", "train-probe --features bags/features --mode avg_patches --epochs 4"},
      {"train_selector", "train-probe --features boxes/features --mode attn_central_patch --epochs 3"},
      {"localize", "localize --features boxes/features --gt boxes/gt_boxes.json --probe boxprobe/probe "
                   "--selectors attn_avg_cls,attn_lowest_entropy,attn_central_patch,abmilp,uniform",
       true},
      {"gradcheck", "gradcheck --all", true},
  };
  std::size_t compared = 0;
  for (const auto& job : jobs) {
    const std::string ext = job.file ? ".json" : "";
    std::map<std::string, std::string> first;
    bool ok = true;
    for (const char* tag : {"a", "b", "c"}) {
      const std::string out = job.name + "_" + tag + ext;
      const int threads = std::string(tag) == "c" ? 4 : 1;
      const int code = run_cli(dir, job.args + " --out " + out + " --threads " + std::to_string(threads));
      c.expect(code == 0, job.name + " exited " + std::to_string(code));
      const auto snap = snapshot(dir / out);
      c.expect(!snap.empty(), job.name + " wrote nothing");
      if (std::string(tag) == "a") first = snap;
      else ok = ok && snap == first;
    }
    c.expect(ok, job.name + " outputs differ between runs");
    compared += first.size();
  }
  if (c.out.pass) fs::remove_all(dir);
  else c.out.detail += " (work dir " + dir.string() + ")";
  if (c.out.pass)
    c.out.detail = std::to_string(jobs.size()) + " commands, " + std::to_string(compared) +
                   " files identical across reruns and 1 vs 4 threads";
  return c.out;
}

// ---------------------------------------------------------------------------

double expected_value(const nlohmann::json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    return s == "inf" ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  }
  return v.get<double>();
}

template <typename T>
bool same_value(T got, const nlohmann::json& want) {
  if constexpr (std::is_same_v<T, std::int64_t>) {
    return got == want.get<std::int64_t>();
  } else {
    const auto w = static_cast<T>(expected_value(want));
    return (std::isnan(got) && std::isnan(w)) || got == w;
  }
}

template <typename T>
void check_golden(Check& c, const fs::path& dir, const std::string& name, const nlohmann::json& e) {
  const auto path = dir / (name + ".satf");
  const auto bytes = satf::read_file(path);
  const auto h = satf::read_header(path);
  c.expect(h.header_bytes() == e["header_bytes"].get<std::size_t>(), name + " header size");
  c.expect(h.dims == e["dims"].get<Dims>(), name + " dims");
  c.expect(satf::hex64(satf::payload_checksum(bytes)) == e["checksum"].get<std::string>(), name + " checksum");
  const auto t = satf::read_tensor<T>(path);
  c.expect(t.size() == e["values"].size(), name + " element count");
  for (std::size_t i = 0; i < t.size() && i < e["values"].size(); ++i)
    c.expect(same_value(t[i], e["values"][i]), name + " value " + std::to_string(i));
  c.expect(satf::encode(t) == bytes, name + " re-encoding differs");
}

Outcome a10_golden_files() {
  Check c;
  const fs::path dir = SELAGG_GOLDEN_DIR;
  try {
    std::ifstream in(dir / "expected.json");
    const auto expected = nlohmann::json::parse(in);
    for (const auto& [name, e] : expected.items()) {
      const auto dtype = e["dtype"].get<std::string>();
      if (dtype == "f32") check_golden<float>(c, dir, name, e);
      else if (dtype == "f64") check_golden<double>(c, dir, name, e);
      else check_golden<std::int64_t>(c, dir, name, e);
    }
    const auto h = satf::read_header(dir / "f32_2x3.satf");
    c.expect(h.dtype == satf::DType::F32 && h.dims == Dims{2, 3} && h.header_bytes() == 23,
             "[2,3] f32 header is " + std::to_string(h.header_bytes()) + " bytes");
    c.expect(satf::encode(DenseTensor({2, 3})).size() == 23 + 24, "fresh [2,3] record size");
    if (c.out.pass) c.out.detail = std::to_string(expected.size()) + " golden files, [2,3] f32 header 23 bytes";
  } catch (const std::exception& e) {
    c.expect(false, e.what());
  }
  return c.out;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1 entropy bound", a1_entropy_bound},
      {"A2 metric oracle equivalence", a2_metric_oracle},
      {"A3 gradient correctness", a3_gradients},
      {"A4 selective aggregation advantage", a4_selective_advantage},
      {"A5 parameter overhead", a5_parameter_overhead},
      {"A6 softmax shift invariance", a6_shift_invariance},
      {"A7 MAE plumbing", a7_mae_plumbing},
      {"A8 MaxBoxAccV2 oracle", a8_max_box_acc},
      {"A9 determinism and parallel equivalence", a9_determinism},
      {"A10 format golden files", a10_golden_files},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
