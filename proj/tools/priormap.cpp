// SPDX-License-Identifier: Apache-2.0
// priormap: command-line front end. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "priormap/priormap.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace priormap;

namespace {

std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << s;
}

// Flags that only say where outputs go are left out of the manifest so two
// runs into different directories produce the same manifest.
bool is_location_flag(const std::string& name) {
  return name == "--out" || name == "--out-dir" || name == "--report" || name == "--store";
}

/// One manifest per run. Outputs are named relative to the manifest's
/// directory; wall-clock time goes to a separate timing file.
class RunManifest {
 public:
  RunManifest(const CLI::App* sub, fs::path manifest_path)
      : path_(std::move(manifest_path)), start_(std::chrono::steady_clock::now()) {
    j_["subcommand"] = sub->get_name();
    auto& flags = j_["flags"] = ordered_json::object();
    for (const CLI::Option* opt : sub->get_options()) {
      const std::string name = opt->get_name();
      if (name.rfind("--help", 0) == 0 || is_location_flag(name)) continue;
      std::string v;
      if (opt->count() > 0) {
        for (const auto& r : opt->results()) v += (v.empty() ? "" : ",") + r;
      } else {
        v = opt->get_default_str();
      }
      flags[name] = v;
    }
    j_["seeds"] = ordered_json::object();
    j_["inputs"] = ordered_json::array();
    j_["outputs"] = ordered_json::array();
  }

  void seed(const std::string& key, std::uint64_t v) { j_["seeds"][key] = v; }
  void input(const fs::path& p) { j_["inputs"].push_back({{"path", p.string()}, {"sha256", sha256_file(p)}}); }
  void output(const fs::path& p) {
    const fs::path rel = fs::relative(p, path_.parent_path().empty() ? fs::path(".") : path_.parent_path());
    j_["outputs"].push_back({{"path", rel.generic_string()}, {"sha256", sha256_file(p)}});
  }

  void write() const {
    write_text(path_, j_.dump() + "\n");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    fs::path timing = path_;
    timing.replace_extension(".timing.json");
    write_text(timing, ordered_json{{"subcommand", j_["subcommand"]}, {"wall_clock_s", secs}}.dump() + "\n");
  }

 private:
  fs::path path_;
  std::chrono::steady_clock::time_point start_;
  ordered_json j_;
};

fs::path manifest_for(const fs::path& out) {
  fs::path m = out;
  m += ".manifest.json";
  return m;
}

Pose parse_pose(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("--pose: cannot parse '" + tok + "'");
    }
  }
  if (v.size() != 3) throw UsageError("--pose expects x,y,yaw");
  return {v[0], v[1], v[2]};
}

std::vector<double> parse_list(const std::string& text, const char* flag) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": cannot parse '" + tok + "'");
    }
  }
  if (v.empty()) throw UsageError(std::string(flag) + ": empty list");
  return v;
}

std::vector<ElementType> parse_classes(const std::string& text) {
  std::vector<ElementType> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    auto t = element_type_from_string(tok);
    if (!t) throw UsageError("unknown class name '" + tok + "'");
    out.push_back(*t);
  }
  return out;
}

void require_ego(const std::vector<VectorMap>& maps, const std::string& what) {
  for (std::size_t k = 0; k < maps.size(); ++k)
    if (maps[k].frame != Frame::ego) throw DataError(what + ": record " + std::to_string(k + 1) + " is not in the ego frame");
}

// ---------------------------------------------------------------------------
// Shared option groups

struct UveOpts {
  std::size_t m_intra = 2, n_inter = 2, dim = 64, heads = 4, ffn = 128, bands = 8, max_instances = 32, points = 20;

  void add(CLI::App* sub) {
    sub->add_option("--m-intra", m_intra, "intra-vector layers")->capture_default_str();
    sub->add_option("--n-inter", n_inter, "inter-vector layers")->capture_default_str();
    sub->add_option("--dim", dim, "model width")->capture_default_str();
    sub->add_option("--heads", heads, "attention heads")->capture_default_str();
    sub->add_option("--ffn", ffn, "feed-forward width")->capture_default_str();
    sub->add_option("--bands", bands, "Fourier bands per coordinate")->capture_default_str();
    sub->add_option("--max-instances", max_instances, "instance capacity")->capture_default_str();
  }
  UveConfig config(const PerceptionWindow& w) const {
    UveConfig c;
    c.m_intra = m_intra;
    c.n_inter = n_inter;
    c.dim = dim;
    c.heads = heads;
    c.ffn_dim = ffn;
    c.fourier_bands = bands;
    c.max_instances = max_instances;
    c.max_points = points;
    c.window = w;
    c.validate();
    return c;
  }
};

struct CorruptOpts {
  std::string mode = "noise";
  double seg = 0.10, pt = 0.05, std_m = 1.0;

  void add(CLI::App* sub) {
    sub->add_option("--mode", mode, "corruption: noise|mask|none")->capture_default_str();
    sub->add_option("--seg", seg, "segment-level instance fraction")->capture_default_str();
    sub->add_option("--pt", pt, "point-level fraction")->capture_default_str();
    sub->add_option("--std", std_m, "noise std in meters")->capture_default_str();
  }
  CorruptionConfig config() const {
    CorruptionConfig c;
    c.mode = corruption_mode_from_string(mode);
    c.seg_fraction = seg;
    c.pt_fraction = pt;
    c.noise_std = std_m;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Subcommands

void run_synth(CLI::App* sub, std::size_t n, std::uint64_t seed, std::size_t points, const PerceptionWindow& w,
               const fs::path& out) {
  RunManifest man(sub, manifest_for(out));
  const std::uint64_t s = derive_seed(seed, "corpus");
  man.seed("corpus", s);
  write_map_file(out.string(), synth_corpus(n, s, {w, points}));
  man.output(out);
  man.write();
}

void print_epoch(std::size_t epoch, double loss) {
  std::cerr << "epoch " << epoch << " loss " << loss << '\n';
}

void run_pretrain(CLI::App* sub, const fs::path& corpus_path, std::size_t synth_n, std::uint64_t seed,
                  const PretrainConfig& cfg, const fs::path& out, const fs::path& report) {
  RunManifest man(sub, manifest_for(out));
  std::vector<VectorMap> corpus;
  if (!corpus_path.empty()) {
    man.input(corpus_path);
    corpus = parse_map_file(corpus_path.string());
    require_ego(corpus, "pretrain");
    for (auto& m : corpus) m = resample_map(clip_to_window(m, cfg.uve.window), cfg.uve.max_points);
  } else {
    const std::uint64_t s = derive_seed(seed, "corpus");
    man.seed("corpus", s);
    corpus = synth_corpus(synth_n, s, {cfg.uve.window, cfg.uve.max_points});
  }
  man.seed("pretrain", cfg.seed);
  auto res = pretrain_loop(corpus, cfg, print_epoch);
  save_checkpoint(out.string(), cfg.uve, res.params);
  man.output(out);
  if (!report.empty()) {
    write_text(report, res.report.to_json().dump(1) + "\n");
    man.output(report);
  }
  std::cout << res.report.to_json().dump() << '\n';
  man.write();
}

void run_encode(CLI::App* sub, const fs::path& map_path, const fs::path& ckpt_path, const fs::path& out) {
  RunManifest man(sub, manifest_for(out));
  man.input(map_path);
  man.input(ckpt_path);
  const auto ck = load_checkpoint(ckpt_path.string());
  auto maps = parse_map_file(map_path.string());
  require_ego(maps, "encode");
  ArrayFile f;
  f.meta = {{"kind", "prior_features"}, {"maps", maps.size()}, {"dim", ck.config.dim}};
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto prepared = prepare_ego_map(maps[k], ck.config.window, ck.config.max_points);
    auto b = encode(prepared, ck.config, ck.params);
    f.arrays.emplace_back("map" + std::to_string(k) + ".f_ins", std::move(b.f_ins));
    f.arrays.emplace_back("map" + std::to_string(k) + ".f_pt", std::move(b.f_pt));
  }
  write_array_file(out.string(), f);
  man.output(out);
  man.write();
}

void run_store_insert(CLI::App* sub, const fs::path& store_path, const fs::path& map_path, const Pose& pose,
                      double timestamp) {
  RunManifest man(sub, manifest_for(store_path));
  man.input(map_path);
  PriorStore store = fs::exists(store_path) ? PriorStore::load(store_path.string()) : PriorStore();
  for (auto m : parse_map_file(map_path.string())) {
    if (m.frame == Frame::ego) m = ego_to_world(m, pose);
    insert_prior(store, pose, std::move(m), timestamp);
  }
  store.save(store_path.string());
  man.output(store_path);
  man.write();
}

struct FuseOpts {
  double range = kDefaultSearchRange;
  std::size_t num = kDefaultPriorNum;
  std::string mode = std::string(to_string(kDefaultMergeMode));
  std::size_t grid_m = 50, grid_n = 20, query_dim = 64;
  std::uint64_t seed = 0;

  void add(CLI::App* sub) {
    sub->add_option("--range", range, "search range in meters")->capture_default_str();
    sub->add_option("--num", num, "maximum number of priors")->capture_default_str();
    sub->add_option("--merge", mode, "merge mode: add|replace|concat")->capture_default_str();
    sub->add_option("--grid-m", grid_m, "instance queries")->capture_default_str();
    sub->add_option("--grid-n", grid_n, "point queries")->capture_default_str();
    sub->add_option("--query-dim", query_dim, "query width")->capture_default_str();
  }
};

/// Retrieval, encoding and merging for one pose; arrays go under `prefix`.
std::size_t fuse_frame(const PriorStore& store, const Pose& pose, const FuseOpts& o, const Checkpoint& ck,
                       const QueryGrid& grid, const FusionParams& fp, const std::string& prefix, ArrayFile& f,
                       std::vector<VectorMap>* priors_out = nullptr) {
  const MergeMode mode = merge_mode_from_string(o.mode);
  auto priors = retrieve_priors(store, pose, o.range, o.num, ck.config.window);
  std::vector<PriorFeatureBundle> bundles;
  for (std::size_t k = 0; k < priors.size(); ++k) {
    priors[k] = resample_map(priors[k], ck.config.max_points);
    bundles.push_back(encode(priors[k], ck.config, ck.params));
    f.arrays.emplace_back(prefix + "prior" + std::to_string(k) + ".f_ins", bundles.back().f_ins);
    f.arrays.emplace_back(prefix + "prior" + std::to_string(k) + ".f_pt", bundles.back().f_pt);
  }
  MergedQueries mq = merge(grid, bundles, fp, mode);
  f.arrays.emplace_back(prefix + "merged", mq.features);
  f.arrays.emplace_back(prefix + "prior_backed", mq.prior_backed_array());
  if (mq.dropped_instances > 0)
    std::cerr << "warning: " << mq.dropped_instances << " prior instances (" << mq.dropped_points
              << " points) did not fit the query grid\n";
  else if (mq.dropped_points > 0)
    std::cerr << "warning: " << mq.dropped_points << " prior points did not fit the query grid\n";
  if (priors_out) *priors_out = std::move(priors);
  return mq.prior_backed_count();
}

void run_fuse(CLI::App* sub, const fs::path& store_path, const Pose& pose, const FuseOpts& o, const fs::path& ckpt_path,
              const fs::path& out) {
  RunManifest man(sub, manifest_for(out));
  man.input(store_path);
  man.input(ckpt_path);
  const auto ck = load_checkpoint(ckpt_path.string());
  const PriorStore store = PriorStore::load(store_path.string());
  const std::uint64_t s = derive_seed(o.seed, "fusion");
  man.seed("fusion", s);
  const QueryGrid grid = QueryGrid::random(o.grid_m, o.grid_n, o.query_dim, s);
  const FusionParams fp = FusionParams::random(ck.config.dim, o.query_dim, s);
  ArrayFile f;
  const std::size_t backed = fuse_frame(store, pose, o, ck, grid, fp, "", f);
  f.meta = {{"kind", "merged_queries"}, {"mode", o.mode},       {"pose", {pose.x, pose.y, pose.yaw}},
            {"range", o.range},         {"num", o.num},         {"grid", {o.grid_m, o.grid_n, o.query_dim}},
            {"prior_backed_slots", backed}};
  write_array_file(out.string(), f);
  man.output(out);
  man.write();
}

void run_degrade(CLI::App* sub, const fs::path& map_path, const std::string& drop, double offset_std,
                 std::uint64_t seed, const fs::path& out) {
  RunManifest man(sub, manifest_for(out));
  man.input(map_path);
  const auto classes = parse_classes(drop);
  if (!(offset_std >= 0.0)) throw UsageError("--offset-std must be non-negative");
  const std::uint64_t s = derive_seed(seed, "degrade");
  man.seed("degrade", s);
  auto maps = parse_map_file(map_path.string());
  for (std::size_t k = 0; k < maps.size(); ++k) maps[k] = degrade_map(maps[k], classes, offset_std, derive_seed(s, "map", k));
  write_map_file(out.string(), maps);
  man.output(out);
  man.write();
}

ordered_json eval_report(const std::vector<VectorMap>& preds, const std::vector<VectorMap>& gts,
                         const std::string& metric, const std::vector<double>& taus, const PerceptionWindow& w) {
  if (preds.size() != gts.size())
    throw DataError("eval: " + std::to_string(preds.size()) + " prediction records vs " + std::to_string(gts.size()) +
                    " ground-truth records");
  require_ego(preds, "eval --pred");
  require_ego(gts, "eval --gt");
  if (metric == "ap") return evaluate_ap(preds, gts, taus).to_json();
  if (metric == "iou") {
    std::vector<RasterGrid> a, b;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      a.push_back(rasterize(clip_to_window(preds[k], w), w));
      b.push_back(rasterize(clip_to_window(gts[k], w), w));
    }
    return iou(a, b).to_json();
  }
  if (metric == "dist") {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      const std::size_t pts = gts[k].total_points();
      total += mean_point_error(preds[k], gts[k]) * static_cast<double>(pts);
      n += pts;
    }
    return {{"metric", "dist"}, {"points", n}, {"mean_point_error_m", n ? total / static_cast<double>(n) : 0.0}};
  }
  throw UsageError("--metric must be ap, iou or dist");
}

void run_eval(CLI::App* sub, const fs::path& pred, const fs::path& gt, const std::string& metric,
              const std::string& tau, const PerceptionWindow& w, const fs::path& out) {
  std::optional<RunManifest> man;
  if (!out.empty()) man.emplace(sub, manifest_for(out));
  const auto preds = parse_map_file(pred.string());
  const auto gts = parse_map_file(gt.string());
  const auto rep = eval_report(preds, gts, metric, parse_list(tau, "--tau"), w);
  std::cout << rep.dump() << '\n';
  if (man) {
    man->input(pred);
    man->input(gt);
    write_text(out, rep.dump(1) + "\n");
    man->output(out);
    man->write();
  }
}

void run_render(CLI::App* sub, const fs::path& map_path, std::size_t index, const PerceptionWindow& w,
                const fs::path& out) {
  RunManifest man(sub, manifest_for(out));
  man.input(map_path);
  const auto maps = parse_map_file(map_path.string());
  if (index >= maps.size()) throw UsageError("--index " + std::to_string(index) + " out of range");
  write_text(out, render_svg(maps[index], w));
  man.output(out);
  man.write();
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOpts {
  std::size_t corpus_size = 2000;
  std::size_t frames = 20;
  std::size_t traversals = 3;
  double traversal_radius = 7.0;
};

template <class F>
auto stage(const char* name, F&& f) {
  std::cerr << "[" << name << "]\n";
  try {
    return f();
  } catch (const UsageError& e) {
    throw UsageError(std::string("stage ") + name + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(std::string("stage ") + name + ": " + e.what());
  } catch (const Error& e) {
    throw DataError(std::string("stage ") + name + ": " + e.what());
  }
}

void run_pipeline(CLI::App* sub, const fs::path& dir, std::uint64_t seed, const PipelineOpts& po,
                  PretrainConfig pcfg, FuseOpts fo) {
  fs::create_directories(dir);
  RunManifest man(sub, dir / "manifest.json");
  const PerceptionWindow& w = pcfg.uve.window;
  const std::uint64_t s_corpus = derive_seed(seed, "corpus");
  const std::uint64_t s_frames = derive_seed(seed, "frames");
  const std::uint64_t s_history = derive_seed(seed, "history");
  pcfg.seed = derive_seed(seed, "pretrain");
  fo.seed = seed;
  const std::uint64_t s_fusion = derive_seed(seed, "fusion");
  for (auto [k, v] : {std::pair{"corpus", s_corpus}, {"pretrain", pcfg.seed}, {"frames", s_frames},
                      {"history", s_history}, {"fusion", s_fusion}})
    man.seed(k, v);

  const SynthConfig scfg{w, pcfg.uve.max_points};
  const auto corpus = stage("synth", [&] {
    auto c = synth_corpus(po.corpus_size, s_corpus, scfg);
    write_map_file((dir / "corpus.jsonl").string(), c);
    return c;
  });
  man.output(dir / "corpus.jsonl");

  const Checkpoint ck = stage("pretrain", [&] {
    auto res = pretrain_loop(corpus, pcfg, print_epoch);
    save_checkpoint((dir / "uve.ckpt").string(), pcfg.uve, res.params);
    write_text(dir / "train_report.json", res.report.to_json().dump(1) + "\n");
    return Checkpoint{pcfg.uve, std::move(res.params)};
  });
  man.output(dir / "uve.ckpt");
  man.output(dir / "train_report.json");

  // Evaluation frames are fresh maps placed along a road in world space.
  // Each one gets several earlier traversals from nearby poses whose
  // corrupted local maps become the stored priors.
  std::vector<VectorMap> gt_frames;
  std::vector<Pose> poses;
  const PriorStore store = stage("store", [&] {
    PriorStore st;
    for (std::size_t k = 0; k < po.frames; ++k) {
      Rng rng(derive_seed(s_frames, "frame", k));
      VectorMap gt = synth_map(rng, scfg);
      const Pose pose{250.0 * static_cast<double>(k), 100.0, rng.uniform(-std::numbers::pi, std::numbers::pi)};
      const VectorMap world = ego_to_world(gt, pose);
      for (std::size_t h = 0; h < po.traversals; ++h) {
        Rng hr(derive_seed(s_history, "traversal", k * po.traversals + h));
        const double r = po.traversal_radius * std::sqrt(hr.uniform());
        const double th = hr.uniform(-std::numbers::pi, std::numbers::pi);
        const Pose q{pose.x + r * std::cos(th), pose.y + r * std::sin(th), pose.yaw + hr.normal(0.0, 0.05)};
        VectorMap local = prepare_ego_map(world_to_ego(world, q), w, pcfg.uve.max_points);
        CorruptionConfig cc = pcfg.corruption;
        cc.seed = derive_seed(s_history, "corrupt", k * po.traversals + h);
        VectorMap noisy = corrupt(local, cc).first;
        noisy.source_tag = SourceTag::online_local;
        insert_prior(st, q, ego_to_world(noisy, q), static_cast<double>(h + 1));
      }
      gt_frames.push_back(std::move(gt));
      poses.push_back(pose);
    }
    st.save((dir / "prior_store.jsonl").string());
    write_map_file((dir / "eval_gt.jsonl").string(), gt_frames);
    return st;
  });
  man.output(dir / "prior_store.jsonl");
  man.output(dir / "eval_gt.jsonl");

  std::vector<VectorMap> raw_preds, uve_preds;
  ordered_json fuse_stats = ordered_json::array();
  stage("fuse", [&] {
    const QueryGrid grid = QueryGrid::random(fo.grid_m, fo.grid_n, fo.query_dim, s_fusion);
    const FusionParams fp = FusionParams::random(ck.config.dim, fo.query_dim, s_fusion);
    ArrayFile f;
    for (std::size_t k = 0; k < poses.size(); ++k) {
      std::vector<VectorMap> priors;
      const std::size_t backed =
          fuse_frame(store, poses[k], fo, ck, grid, fp, "frame" + std::to_string(k) + ".", f, &priors);
      fuse_stats.push_back({{"frame", k}, {"priors", priors.size()}, {"prior_backed_slots", backed}});
      VectorMap raw;
      raw.frame = Frame::ego;
      raw.source_tag = SourceTag::prediction;
      if (!priors.empty()) raw.instances = priors.front().instances;
      VectorMap den = raw.instances.empty() ? raw : reconstruct(raw, ck.config, ck.params);
      raw_preds.push_back(std::move(raw));
      uve_preds.push_back(std::move(den));
    }
    f.meta = {{"kind", "merged_queries"}, {"mode", fo.mode}, {"frames", poses.size()},
              {"grid", {fo.grid_m, fo.grid_n, fo.query_dim}}};
    write_array_file((dir / "features.bin").string(), f);
    write_map_file((dir / "pred_raw_prior.jsonl").string(), raw_preds);
    write_map_file((dir / "pred_uve_prior.jsonl").string(), uve_preds);
  });
  man.output(dir / "features.bin");
  man.output(dir / "pred_raw_prior.jsonl");
  man.output(dir / "pred_uve_prior.jsonl");

  stage("eval", [&] {
    const std::vector<double> taus(kDefaultThresholds.begin(), kDefaultThresholds.end());
    ordered_json rep;
    rep["frames"] = poses.size();
    rep["fusion"] = fuse_stats;
    rep["raw_prior"] = {{"ap", eval_report(raw_preds, gt_frames, "ap", taus, w)},
                        {"iou", eval_report(raw_preds, gt_frames, "iou", taus, w)}};
    rep["uve_prior"] = {{"ap", eval_report(uve_preds, gt_frames, "ap", taus, w)},
                        {"iou", eval_report(uve_preds, gt_frames, "iou", taus, w)}};
    write_text(dir / "eval_report.json", rep.dump(1) + "\n");

    // Denoising on the evaluation frames themselves: corrupt, reconstruct,
    // compare with the clean map point by point.
    const auto e = evaluate_reconstruction(gt_frames, ck.config, ck.params, pcfg.corruption, s_frames);
    ordered_json den = {{"frames", gt_frames.size()},
                        {"corruption", pcfg.corruption.to_json()},
                        {"corrupted_points", e.corrupted_points},
                        {"input_error_corrupted_m", e.input_corrupted},
                        {"reconstruction_error_corrupted_m", e.corrupted},
                        {"reconstruction_error_all_m", e.all}};
    write_text(dir / "denoise_report.json", den.dump(1) + "\n");
    std::cout << ordered_json{{"eval", rep}, {"denoise", den}}.dump() << '\n';
  });
  man.output(dir / "eval_report.json");
  man.output(dir / "denoise_report.json");
  man.write();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"priormap: vector map priors, encoder pre-training, fusion and evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  std::uint64_t seed = 0;
  std::string window_text = "-15,15,-30,30";
  auto add_common = [&](CLI::App* sub, bool window) {
    sub->add_option("--seed", seed, "run seed")->capture_default_str();
    if (window) sub->add_option("--window", window_text, "perception window x0,x1,y0,y1")->capture_default_str();
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic ego-map corpus");
  std::size_t synth_n = 100, synth_points = kDefaultPointsPerInstance;
  std::string synth_out;
  synth->add_option("--n", synth_n, "number of maps")->capture_default_str();
  synth->add_option("--points", synth_points, "points per instance")->capture_default_str();
  synth->add_option("--out", synth_out, "output map file")->required();
  add_common(synth, true);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pre-train the vector encoder by corrupted-map reconstruction");
  std::string pre_corpus, pre_out, pre_report;
  std::size_t epochs = 24, batch = 8;
  double lr = 1e-3;
  UveOpts uve_opts;
  CorruptOpts cor_opts;
  std::size_t pre_synth = 0;
  auto* corpus_opt = pre->add_option("--corpus", pre_corpus, "training map file")->check(CLI::ExistingFile);
  auto* synth_opt = pre->add_option("--synth", pre_synth, "train on N synthetic maps instead of a file");
  corpus_opt->excludes(synth_opt);
  pre->add_option("--epochs", epochs, "training epochs")->capture_default_str();
  pre->add_option("--batch", batch, "maps per Adam step")->capture_default_str();
  pre->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
  uve_opts.add(pre);
  cor_opts.add(pre);
  pre->add_option("--out", pre_out, "checkpoint path")->required();
  pre->add_option("--report", pre_report, "training report path");
  add_common(pre, true);

  // encode
  auto* enc = app.add_subcommand("encode", "encode maps into prior feature bundles");
  std::string enc_map, enc_ckpt, enc_out;
  enc->add_option("--map", enc_map, "ego-frame map file")->required()->check(CLI::ExistingFile);
  enc->add_option("--ckpt", enc_ckpt, "encoder checkpoint")->required()->check(CLI::ExistingFile);
  enc->add_option("--out", enc_out, "feature file")->required();

  // store-insert
  auto* ins = app.add_subcommand("store-insert", "add maps to a prior store");
  std::string ins_store, ins_map, ins_pose;
  double ins_ts = 0.0;
  ins->add_option("--store", ins_store, "prior store file (created if missing)")->required();
  ins->add_option("--map", ins_map, "map file; ego-frame records are moved to world by --pose")
      ->required()
      ->check(CLI::ExistingFile);
  ins->add_option("--pose", ins_pose, "pose x,y,yaw")->required();
  ins->add_option("--timestamp", ins_ts, "entry timestamp")->capture_default_str();

  // fuse
  auto* fuse = app.add_subcommand("fuse", "retrieve, encode and merge priors into a query grid");
  std::string fuse_store, fuse_pose, fuse_ckpt, fuse_out;
  FuseOpts fuse_opts;
  fuse->add_option("--store", fuse_store, "prior store file")->required()->check(CLI::ExistingFile);
  fuse->add_option("--pose", fuse_pose, "query pose x,y,yaw")->required();
  fuse->add_option("--ckpt", fuse_ckpt, "encoder checkpoint")->required()->check(CLI::ExistingFile);
  fuse_opts.add(fuse);
  fuse->add_option("--mode", fuse_opts.mode, "alias of --merge");
  fuse->add_option("--out", fuse_out, "feature file")->required();
  add_common(fuse, false);

  // degrade
  auto* deg = app.add_subcommand("degrade", "simulate an outdated HD map");
  std::string deg_map, deg_drop, deg_out;
  double deg_std = 0.0;
  deg->add_option("--map", deg_map, "map file")->required()->check(CLI::ExistingFile);
  deg->add_option("--drop", deg_drop, "comma-separated classes to remove")->capture_default_str();
  deg->add_option("--offset-std", deg_std, "per-instance rigid offset std in meters")->capture_default_str();
  deg->add_option("--out", deg_out, "output map file")->required();
  add_common(deg, false);

  // eval
  auto* ev = app.add_subcommand("eval", "score predictions against ground truth");
  std::string ev_pred, ev_gt, ev_metric = "ap", ev_tau = "0.5,1.0,1.5", ev_out;
  ev->add_option("--pred", ev_pred, "prediction map file")->required()->check(CLI::ExistingFile);
  ev->add_option("--gt", ev_gt, "ground-truth map file")->required()->check(CLI::ExistingFile);
  ev->add_option("--metric", ev_metric, "ap|iou|dist")->capture_default_str();
  ev->add_option("--tau", ev_tau, "Chamfer thresholds in meters")->capture_default_str();
  ev->add_option("--out", ev_out, "also write the report here");
  ev->add_option("--window", window_text, "perception window x0,x1,y0,y1")->capture_default_str();

  // render
  auto* ren = app.add_subcommand("render", "draw one map record as SVG");
  std::string ren_map, ren_out;
  std::size_t ren_index = 0;
  ren->add_option("--map", ren_map, "map file")->required()->check(CLI::ExistingFile);
  ren->add_option("--index", ren_index, "record index")->capture_default_str();
  ren->add_option("--out", ren_out, "SVG path")->required();
  ren->add_option("--window", window_text, "perception window x0,x1,y0,y1")->capture_default_str();

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "synth, pretrain, store, fuse and eval in one run");
  std::string pipe_dir;
  PipelineOpts pipe_opts;
  UveOpts pipe_uve;
  CorruptOpts pipe_cor;
  FuseOpts pipe_fuse;
  std::size_t pipe_epochs = 24, pipe_batch = 8;
  double pipe_lr = 1e-3;
  pipe->add_option("--out-dir", pipe_dir, "output directory")->required();
  pipe->add_option("--corpus-size", pipe_opts.corpus_size, "training maps")->capture_default_str();
  pipe->add_option("--epochs", pipe_epochs, "training epochs")->capture_default_str();
  pipe->add_option("--batch", pipe_batch, "maps per Adam step")->capture_default_str();
  pipe->add_option("--lr", pipe_lr, "Adam learning rate")->capture_default_str();
  pipe->add_option("--frames", pipe_opts.frames, "evaluation frames")->capture_default_str();
  pipe->add_option("--traversals", pipe_opts.traversals, "stored traversals per frame")->capture_default_str();
  pipe->add_option("--traversal-radius", pipe_opts.traversal_radius, "max traversal offset in meters")
      ->capture_default_str();
  pipe_uve.add(pipe);
  pipe_cor.add(pipe);
  pipe_fuse.add(pipe);
  add_common(pipe, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const PerceptionWindow window = parse_window(window_text);
    if (synth->parsed()) {
      if (synth_n < 1) throw UsageError("--n must be at least 1");
      run_synth(synth, synth_n, seed, synth_points, window, synth_out);
    } else if (pre->parsed()) {
      PretrainConfig cfg;
      cfg.uve = uve_opts.config(window);
      cfg.corruption = cor_opts.config();
      cfg.epochs = epochs;
      cfg.batch = batch;
      cfg.lr = lr;
      cfg.seed = derive_seed(seed, "pretrain");
      if (pre_corpus.empty() && pre_synth == 0) throw UsageError("pretrain needs --corpus or --synth N");
      run_pretrain(pre, pre_corpus, pre_synth, seed, cfg, pre_out, pre_report);
    } else if (enc->parsed()) {
      run_encode(enc, enc_map, enc_ckpt, enc_out);
    } else if (ins->parsed()) {
      run_store_insert(ins, ins_store, ins_map, parse_pose(ins_pose), ins_ts);
    } else if (fuse->parsed()) {
      fuse_opts.seed = seed;
      merge_mode_from_string(fuse_opts.mode);
      run_fuse(fuse, fuse_store, parse_pose(fuse_pose), fuse_opts, fuse_ckpt, fuse_out);
    } else if (deg->parsed()) {
      run_degrade(deg, deg_map, deg_drop, deg_std, seed, deg_out);
    } else if (ev->parsed()) {
      run_eval(ev, ev_pred, ev_gt, ev_metric, ev_tau, window, ev_out);
    } else if (ren->parsed()) {
      run_render(ren, ren_map, ren_index, window, ren_out);
    } else if (pipe->parsed()) {
      PretrainConfig cfg;
      cfg.uve = pipe_uve.config(window);
      cfg.corruption = pipe_cor.config();
      cfg.epochs = pipe_epochs;
      cfg.batch = pipe_batch;
      cfg.lr = pipe_lr;
      merge_mode_from_string(pipe_fuse.mode);
      run_pipeline(pipe, pipe_dir, seed, pipe_opts, cfg, pipe_fuse);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
