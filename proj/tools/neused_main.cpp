// neused command-line driver: reconstruct / edit / render / mesh / eval.
//
// Exit codes (stable, also listed in README.md):
//   0  success
//   1  unexpected internal error
//   2  configuration or dataset error
//   3  remote denoiser transport failure after the retry budget
//   4  stage-1 checkpoint missing (or not a stage-1 checkpoint)
//   5  invalid or corrupt checkpoint file
//   6  numerical divergence during optimization

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "neused/common.hpp"
#include "neused/fields.hpp"
#include "neused/geometry_io.hpp"
#include "neused/image_io.hpp"
#include "neused/params.hpp"
#include "neused/render.hpp"
#include "neused/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace neused;

namespace {

#ifndef NEUSED_GIT_DESCRIBE
#define NEUSED_GIT_DESCRIBE "unknown"
#endif

struct MissingCheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file for hashing: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
  return buf;
}

void atomic_write(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Run manifest: written atomically before and after each stage.
// ---------------------------------------------------------------------------

struct ManifestWriter {
  fs::path dir;
  json doc;
  std::chrono::steady_clock::time_point t0;

  ManifestWriter(const fs::path& out_dir, const std::string& stage,
                 const std::string& input_hash, std::uint64_t seed)
      : dir(out_dir), t0(std::chrono::steady_clock::now()) {
    fs::create_directories(out_dir);
    doc["stage"] = stage;
    doc["config_hash"] = input_hash;
    doc["seed"] = seed;
    doc["git"] = NEUSED_GIT_DESCRIBE;
    doc["started_at"] = now_iso8601();
    doc["status"] = "running";
    doc["outputs"] = json::array();
    write();
  }

  void add_output(const fs::path& p) { doc["outputs"].push_back(p.string()); }

  void finish() {
    doc["status"] = "complete";
    doc["finished_at"] = now_iso8601();
    doc["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write();
  }

  void write() const { atomic_write(dir / "manifest.json", doc.dump(2) + "\n"); }
};

// ---------------------------------------------------------------------------
// Scene + camera (de)serialization stored in checkpoint metadata, so render /
// mesh / eval are self-contained given a checkpoint file.
// ---------------------------------------------------------------------------

json grid_to_json(const HashGridConfig& g) {
  return {{"levels", g.levels},
          {"features", g.features},
          {"table_size", g.table_size},
          {"base_resolution", g.base_resolution},
          {"growth", g.growth},
          {"bound", g.bound}};
}

HashGridConfig grid_from_json(const json& j) {
  HashGridConfig g;
  g.levels = j.at("levels").get<int>();
  g.features = j.at("features").get<int>();
  g.table_size = j.at("table_size").get<int>();
  g.base_resolution = j.at("base_resolution").get<int>();
  g.growth = j.at("growth").get<double>();
  g.bound = j.at("bound").get<double>();
  return g;
}

std::string scene_to_json(const SceneConfig& c) {
  json j{{"grid", grid_to_json(c.grid)},
         {"bg_grid", grid_to_json(c.bg_grid)},
         {"geo_hidden", c.geo_hidden},
         {"geo_depth", c.geo_depth},
         {"color_hidden", c.color_hidden},
         {"color_depth", c.color_depth},
         {"feat_dim", c.feat_dim},
         {"sphere_init_radius", c.sphere_init_radius},
         {"sharpness_init", c.sharpness_init},
         {"active_levels_init", c.active_levels_init}};
  return j.dump();
}

SceneConfig scene_from_json(const std::string& text) {
  const json j = json::parse(text);
  SceneConfig c;
  c.grid = grid_from_json(j.at("grid"));
  c.bg_grid = grid_from_json(j.at("bg_grid"));
  c.geo_hidden = j.at("geo_hidden").get<int>();
  c.geo_depth = j.at("geo_depth").get<int>();
  c.color_hidden = j.at("color_hidden").get<int>();
  c.color_depth = j.at("color_depth").get<int>();
  c.feat_dim = j.at("feat_dim").get<int>();
  c.sphere_init_radius = j.at("sphere_init_radius").get<double>();
  c.sharpness_init = j.at("sharpness_init").get<double>();
  c.active_levels_init = j.at("active_levels_init").get<int>();
  return c;
}

std::string cameras_to_json(const std::vector<Camera>& cams) {
  json arr = json::array();
  for (const Camera& c : cams) {
    json pose = json::array();
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) pose.push_back(c.pose(r, col));
    arr.push_back({{"fx", c.fx},
                   {"fy", c.fy},
                   {"cx", c.cx},
                   {"cy", c.cy},
                   {"width", c.width},
                   {"height", c.height},
                   {"pose", pose}});
  }
  return arr.dump();
}

std::vector<Camera> cameras_from_json(const std::string& text) {
  const json arr = json::parse(text);
  std::vector<Camera> cams;
  for (const json& j : arr) {
    Camera c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    const json& pose = j.at("pose");
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) c.pose(r, col) = pose.at(r * 4 + col).get<double>();
    cams.push_back(c);
  }
  return cams;
}

struct LoadedScene {
  ParamStore store;
  std::unique_ptr<FieldBundle> bundle;
  CheckpointMeta meta;
  std::vector<Camera> cameras;
};

LoadedScene open_scene(const std::string& ckpt_path) {
  if (!fs::exists(ckpt_path))
    throw MissingCheckpointError("checkpoint not found: " + ckpt_path);
  LoadedScene s;
  const CheckpointMeta head = peek_checkpoint(ckpt_path);
  const auto scene_it = head.extra.find("scene");
  if (scene_it == head.extra.end())
    throw CheckpointError("checkpoint lacks scene metadata: " + ckpt_path);
  try {
    s.bundle = std::make_unique<FieldBundle>(s.store, scene_from_json(scene_it->second));
    const auto cam_it = head.extra.find("cameras");
    if (cam_it != head.extra.end()) s.cameras = cameras_from_json(cam_it->second);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  s.meta = load_checkpoint(ckpt_path, s.store);
  return s;
}

// ---------------------------------------------------------------------------
// Camera paths (--path spherical | file:POSES)
// ---------------------------------------------------------------------------

CameraPath resolve_path(const LoadedScene& s, const std::string& spec, int frames) {
  if (spec == "spherical") {
    if (s.cameras.empty())
      throw ConfigError("--path spherical needs training cameras in the checkpoint");
    if (frames < 1) throw ConfigError("--frames must be at least 1");
    std::vector<Vec3> positions;
    positions.reserve(s.cameras.size());
    for (const Camera& c : s.cameras) positions.push_back(c.pose.block<3, 1>(0, 3));
    CameraPath path = spherical_poses(positions, frames);
    path.fx = s.cameras[0].fx;
    path.fy = s.cameras[0].fy;
    path.cx = s.cameras[0].cx;
    path.cy = s.cameras[0].cy;
    path.width = s.cameras[0].width;
    path.height = s.cameras[0].height;
    return path;
  }
  if (spec.rfind("file:", 0) == 0) return load_camera_path(spec.substr(5));
  throw ConfigError("--path must be 'spherical' or 'file:POSES_TXT'");
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

void report_progress(const char* stage, int step, int total, double loss) {
  const int stride = std::max(1, total / 10);
  if (step % stride == 0 || step + 1 == total)
    std::cerr << stage << " " << (step + 1) << "/" << total << " loss " << loss << "\n";
}

int cmd_reconstruct(const std::string& config_path, const std::string& out,
                    std::optional<std::uint64_t> seed) {
  EngineConfig cfg = load_engine_config(config_path);
  if (seed) cfg.stage1.seed = *seed;
  if (cfg.dataset.path.empty()) throw ConfigError("config: [dataset] path is required");
  const DatasetFormat format = cfg.dataset.format == "blender_transforms"
                                   ? DatasetFormat::blender_transforms
                                   : DatasetFormat::pose_txt;
  const CalibratedDataset full = load_dataset(cfg.dataset.path, format);
  const int holdout = cfg.dataset.holdout;
  if (holdout >= static_cast<int>(full.size()))
    throw ConfigError("config: [dataset] holdout view index out of range");
  CalibratedDataset fit;
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (static_cast<int>(i) == holdout) continue;
    fit.images.push_back(full.images[i]);
    fit.cameras.push_back(full.cameras[i]);
  }

  ManifestWriter manifest(out, "source", file_hash_hex(config_path), cfg.stage1.seed);

  const SceneConfig scene;
  ParamStore store;
  FieldBundle bundle(store, scene);
  Rng rng(cfg.stage1.seed);
  bundle.init(store, rng);

  const Stage1Stats stats =
      stage1_fit(store, bundle, fit, cfg.stage1, [&](int step, double loss) {
        report_progress("reconstruct", step, cfg.stage1.iterations, loss);
      });

  CheckpointMeta meta;
  meta.stage = "reconstruct";
  meta.extra["scene"] = scene_to_json(scene);
  meta.extra["cameras"] = cameras_to_json(fit.cameras);
  const fs::path ckpt = fs::path(out) / "source.ckpt";
  save_checkpoint(ckpt.string(), store, meta);
  manifest.add_output(ckpt);

  RenderConfig rc;
  rc.fg_samples = cfg.stage1.fg_samples;
  rc.bg_samples = cfg.stage1.bg_samples;
  rc.active_levels = scene.grid.levels;

  // Validation contact sheet: ground truth on top, re-render below.
  {
    const int k = std::min<std::size_t>(4, fit.size());
    const int h = fit.cameras[0].height, w = fit.cameras[0].width;
    Tensor sheet({2 * h, k * w, 3});
    for (int i = 0; i < k; ++i) {
      Tensor render;
      render_image(store, bundle, fit.cameras[i], FieldSel::source, rc, render, nullptr, nullptr,
                   nullptr, nullptr);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int c = 0; c < 3; ++c) {
            sheet[(static_cast<std::size_t>(y) * k * w + i * w + x) * 3 + c] =
                fit.images[i][(static_cast<std::size_t>(y) * w + x) * 3 + c];
            sheet[(static_cast<std::size_t>(y + h) * k * w + i * w + x) * 3 + c] =
                render[(static_cast<std::size_t>(y) * w + x) * 3 + c];
          }
    }
    const fs::path sheet_path = fs::path(out) / "contact_sheet.png";
    write_png(sheet_path.string(), sheet);
    manifest.add_output(sheet_path);
  }

  manifest.doc["iterations"] = stats.iterations_run;
  manifest.doc["final_loss"] = stats.final_loss;
  if (holdout >= 0) {
    Tensor render;
    render_image(store, bundle, full.cameras[holdout], FieldSel::source, rc, render, nullptr,
                 nullptr, nullptr, nullptr);
    const double db = psnr(render, full.images[holdout]);
    manifest.doc["holdout_psnr_db"] = std::isfinite(db) ? json(db) : json();
    std::cout << "holdout view " << holdout << " psnr " << db << " dB\n";
  }
  manifest.finish();
  std::cout << "reconstruct: " << stats.iterations_run << " iterations, final loss "
            << stats.final_loss << " -> " << ckpt.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// edit
// ---------------------------------------------------------------------------

void apply_denoiser_flag(DenoiserSpec& spec, const std::string& flag) {
  if (flag == "analytic" || flag == "two_mode") {
    spec.kind = flag;
  } else if (flag.rfind("remote:", 0) == 0) {
    spec.kind = "remote";
    spec.endpoint = flag.substr(7);
    if (spec.endpoint.empty()) throw ConfigError("--denoiser remote: needs a URL");
  } else {
    throw ConfigError("--denoiser must be 'analytic', 'two_mode', or 'remote:URL'");
  }
}

int cmd_edit(const std::string& config_path, const std::string& out, std::string ckpt_in,
             const std::optional<std::string>& prompt, std::optional<double> guidance,
             const std::optional<std::string>& denoiser_flag, std::optional<std::uint64_t> seed) {
  EngineConfig cfg = load_engine_config(config_path);
  if (prompt) cfg.edit.prompt = *prompt;
  if (guidance) cfg.edit.guidance_scale = *guidance;
  if (seed) cfg.edit.seed = *seed;
  if (denoiser_flag) apply_denoiser_flag(cfg.denoiser, *denoiser_flag);
  if (cfg.edit.prompt.empty())
    throw ConfigError("edit needs a prompt (config [edit] prompt or --prompt)");
  if (cfg.edit.guidance_scale < 0.0) throw ConfigError("--guidance must be >= 0");

  if (ckpt_in.empty()) ckpt_in = (fs::path(out) / "source.ckpt").string();
  LoadedScene s = open_scene(ckpt_in);
  if (s.meta.stage != "reconstruct")
    throw MissingCheckpointError("edit needs a stage-1 checkpoint; " + ckpt_in + " has stage '" +
                                 s.meta.stage + "'");
  if (s.cameras.empty()) throw CheckpointError("checkpoint lacks camera metadata: " + ckpt_in);

  ManifestWriter manifest(out, "edit", file_hash_hex(config_path), cfg.edit.seed);

  if (cfg.edit.loss_log.empty()) cfg.edit.loss_log = (fs::path(out) / "loss_trace.jsonl").string();
  fs::remove(cfg.edit.loss_log);  // the trace is per-run, not cumulative

  const DiffusionSchedule sched = make_schedule(cfg.denoiser);
  const auto den = make_denoiser(cfg.denoiser, {cfg.edit.patch, cfg.edit.patch, 3}, sched);

  const EditStats stats = stage2_edit(s.store, *s.bundle, s.cameras, cfg.edit, *den, sched,
                                      [&](int step, const PepdsGradients& g, const Tensor&) {
                                        report_progress("edit", step, cfg.edit.iterations,
                                                        g.l_pepds);
                                      });

  CheckpointMeta meta;
  meta.stage = "edit";
  meta.extra = s.meta.extra;
  meta.extra["prompt"] = cfg.edit.prompt;
  const fs::path ckpt = fs::path(out) / "edited.ckpt";
  save_checkpoint(ckpt.string(), s.store, meta);
  manifest.add_output(ckpt);
  manifest.add_output(cfg.edit.loss_log);
  manifest.doc["iterations"] = stats.iterations_run;
  manifest.doc["final_l_pds"] = stats.final_l_pds;
  manifest.doc["final_l_pe"] = stats.final_l_pe;
  manifest.doc["final_l_pepds"] = stats.final_l_pepds;
  manifest.finish();
  std::cout << "edit: " << stats.iterations_run << " steps, final losses pds "
            << stats.final_l_pds << " pe " << stats.final_l_pe << " -> " << ckpt.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

int cmd_render(const std::string& ckpt_path, const std::string& out, const std::string& path_spec,
               int frames) {
  LoadedScene s = open_scene(ckpt_path);
  const CameraPath path = resolve_path(s, path_spec, frames);
  ManifestWriter manifest(out, "render", file_hash_hex(ckpt_path), 0);

  RenderConfig rc;
  rc.active_levels = s.bundle->config().grid.levels;
  rc.want_phong = true;
  RenderConfig rc_src = rc;
  rc_src.want_phong = false;

  const int w = path.width, h = path.height;
  static const char* kLayers[6] = {"source", "target", "background", "mask", "normal", "phong"};
  for (std::size_t f = 0; f < path.poses.size(); ++f) {
    const Camera cam = path.camera(f);
    Tensor layer[6];
    for (auto& t : layer) t = Tensor({h, w, 3});
#pragma omp parallel for schedule(static) num_threads(worker_count())
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) {
        const Ray ray = generate_ray(cam, px, py);
        const RenderOutput to = render_pixel(s.store, *s.bundle, ray, FieldSel::target, rc);
        const RenderOutput so = render_pixel(s.store, *s.bundle, ray, FieldSel::source, rc_src);
        const std::size_t p3 = (static_cast<std::size_t>(py) * w + px) * 3;
        for (int c = 0; c < 3; ++c) {
          layer[0][p3 + c] = so.rgb[c];
          layer[1][p3 + c] = to.rgb[c];
          layer[2][p3 + c] = to.rgb_bg[c];
          layer[3][p3 + c] = to.mask;
          layer[4][p3 + c] = 0.5 * (to.normal[c] + 1.0);
          layer[5][p3 + c] = to.phong[c];
        }
      }
    char name[64];
    for (int l = 0; l < 6; ++l) {
      std::snprintf(name, sizeof(name), "frame_%03zu_%s.png", f, kLayers[l]);
      const fs::path p = fs::path(out) / name;
      write_png(p.string(), layer[l]);
      manifest.add_output(p);
    }
  }
  manifest.doc["frames"] = path.poses.size();
  manifest.finish();
  std::cout << "render: " << path.poses.size() << " frames x 6 layers -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// mesh
// ---------------------------------------------------------------------------

int cmd_mesh(const std::string& ckpt_path, const std::string& out, const std::string& which,
             int res) {
  if (res < 8) throw ConfigError("--res must be at least 8");
  if (which != "source" && which != "target")
    throw ConfigError("--which must be 'source' or 'target'");
  LoadedScene s = open_scene(ckpt_path);
  const FieldSel sel = which == "source" ? FieldSel::source : FieldSel::target;
  const int levels = s.bundle->config().grid.levels;
  ManifestWriter manifest(out, "mesh", file_hash_hex(ckpt_path), 0);

  const SourceFieldView src_view(s.store, *s.bundle, levels);
  const TargetFieldView tgt_view(s.store, *s.bundle, levels);
  const SdfField& view =
      sel == FieldSel::source ? static_cast<const SdfField&>(src_view) : tgt_view;

  // The foreground lives strictly inside the unit ball; a small margin keeps
  // boundary cells out of the surface.
  const Vec3 hi = Vec3::Constant(1.05), lo = -hi;
  TriangleMesh mesh = marching_cubes([&](const Vec3& x) { return view.sdf(x); }, lo, hi, res);

  const std::size_t nv = mesh.vertices.size();
  mesh.normals.assign(nv, Vec3::UnitZ());
  mesh.colors.assign(nv, Vec3::Zero());
#pragma omp parallel num_threads(worker_count())
  {
    FgSampleEval ev;
    FgEvalRequest req;
    req.which = sel;
    req.active_levels = levels;
    req.want_color = true;
#pragma omp for schedule(static)
    for (std::size_t v = 0; v < nv; ++v) {
      Vec3 n = view.sdf_gradient_analytic(mesh.vertices[v]);
      const double nn = n.norm();
      n = nn > 1e-12 ? Vec3(n / nn) : Vec3::UnitZ();
      mesh.normals[v] = n;
      // Color queried along the outward normal as the viewing direction.
      ev.eval(s.store, *s.bundle, mesh.vertices[v], n, req);
      for (int c = 0; c < 3; ++c) mesh.colors[v][c] = std::clamp(ev.color[c], 0.0, 1.0);
    }
  }

  const fs::path obj = fs::path(out) / (which + "_mesh.obj");
  const fs::path ply = fs::path(out) / (which + "_mesh.ply");
  export_mesh(mesh, obj.string(), MeshFormat::obj);
  export_mesh(mesh, ply.string(), MeshFormat::ply);
  manifest.add_output(obj);
  manifest.add_output(ply);
  manifest.doc["vertices"] = mesh.vertices.size();
  manifest.doc["faces"] = mesh.faces.size();
  manifest.doc["area"] = mesh_area(mesh);
  manifest.doc["euler_characteristic"] = euler_characteristic(mesh);
  manifest.finish();
  std::cout << "mesh(" << which << "): " << mesh.vertices.size() << " vertices, "
            << mesh.faces.size() << " faces, area " << mesh_area(mesh) << ", chi "
            << euler_characteristic(mesh) << " -> " << obj.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

const char* kMetricsSchema = R"({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "MetricsReport",
  "type": "object",
  "required": ["psnr_vs_source", "frame_consistency", "mask_coverage", "frames"],
  "properties": {
    "psnr_vs_source": {
      "type": ["number", "null"],
      "description": "PSNR (dB) between edited and source renders pooled over the path; null when the renders are identical."
    },
    "frame_consistency": {
      "type": "number",
      "minimum": 0,
      "description": "Mean per-pixel RGB distance between consecutive edited frames."
    },
    "mask_coverage": {
      "type": "number",
      "minimum": 0,
      "maximum": 1,
      "description": "Mean foreground opacity of the edited render."
    },
    "frames": { "type": "integer", "minimum": 0 }
  },
  "additionalProperties": false
}
)";

int cmd_eval(const std::string& ckpt_path, const std::string& out, const std::string& path_spec,
             int frames) {
  LoadedScene s = open_scene(ckpt_path);
  const CameraPath path = resolve_path(s, path_spec, frames);
  ManifestWriter manifest(out, "eval", file_hash_hex(ckpt_path), 0);

  std::vector<Camera> cams;
  for (std::size_t i = 0; i < path.poses.size(); ++i) cams.push_back(path.camera(i));
  RenderConfig rc;
  rc.active_levels = s.bundle->config().grid.levels;
  const MetricsReport rep = evaluate(s.store, *s.bundle, cams, rc);

  json report;
  report["psnr_vs_source"] = std::isfinite(rep.psnr_vs_source) ? json(rep.psnr_vs_source) : json();
  report["frame_consistency"] = rep.frame_consistency;
  report["mask_coverage"] = rep.mask_coverage;
  report["frames"] = cams.size();
  const fs::path report_path = fs::path(out) / "metrics_report.json";
  atomic_write(report_path, report.dump(2) + "\n");
  atomic_write(fs::path(out) / "metrics_report.schema.json", kMetricsSchema);
  manifest.add_output(report_path);
  manifest.add_output(fs::path(out) / "metrics_report.schema.json");
  manifest.finish();
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neused: two-field neural implicit surfaces with text-guided editing"};
  app.require_subcommand(1);

  std::string config, out, ckpt, prompt, denoiser_flag, path_spec = "spherical";
  std::string which = "target";
  double guidance = 0.0;
  std::uint64_t seed = 0;
  int frames = 8, res = 128;

  CLI::App* rec = app.add_subcommand(
      "reconstruct", "Stage 1: fit background + source fields to a posed dataset");
  rec->add_option("config", config, "TOML run configuration")->required();
  rec->add_option("--out", out, "output directory")->required();
  rec->add_option("--seed", seed, "override [stage1] seed");

  CLI::App* edit =
      app.add_subcommand("edit", "Stage 2: distill a text edit into the target field");
  edit->add_option("config", config, "TOML run configuration")->required();
  edit->add_option("--out", out, "output directory")->required();
  edit->add_option("--checkpoint", ckpt, "stage-1 checkpoint (default: OUT/source.ckpt)");
  edit->add_option("--prompt", prompt, "target prompt (overrides config)");
  edit->add_option("--guidance", guidance, "guidance scale (overrides config)");
  edit->add_option("--denoiser", denoiser_flag, "analytic | two_mode | remote:URL");
  edit->add_option("--seed", seed, "override [edit] seed");

  CLI::App* ren = app.add_subcommand(
      "render", "Render source/target/background/mask/normal/phong layers along a path");
  ren->add_option("checkpoint", ckpt, "checkpoint file")->required();
  ren->add_option("--out", out, "output directory")->required();
  ren->add_option("--path", path_spec, "spherical | file:POSES_TXT");
  ren->add_option("--frames", frames, "frame count for the spherical path");

  CLI::App* mesh = app.add_subcommand("mesh", "Extract a colored triangle mesh from an SDF");
  mesh->add_option("checkpoint", ckpt, "checkpoint file")->required();
  mesh->add_option("--out", out, "output directory")->required();
  mesh->add_option("--which", which, "source | target");
  mesh->add_option("--res", res, "marching-cubes cells per axis (>= 8)");

  CLI::App* ev = app.add_subcommand("eval", "Render-and-compare metrics along a camera path");
  ev->add_option("checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("--out", out, "output directory")->required();
  ev->add_option("--path", path_spec, "spherical | file:POSES_TXT");
  ev->add_option("--frames", frames, "frame count for the spherical path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (rec->parsed())
      return cmd_reconstruct(config, out,
                             rec->count("--seed") ? std::optional<std::uint64_t>(seed)
                                                  : std::nullopt);
    if (edit->parsed())
      return cmd_edit(config, out, ckpt,
                      edit->count("--prompt") ? std::optional<std::string>(prompt) : std::nullopt,
                      edit->count("--guidance") ? std::optional<double>(guidance) : std::nullopt,
                      edit->count("--denoiser") ? std::optional<std::string>(denoiser_flag)
                                                : std::nullopt,
                      edit->count("--seed") ? std::optional<std::uint64_t>(seed) : std::nullopt);
    if (ren->parsed()) return cmd_render(ckpt, out, path_spec, frames);
    if (mesh->parsed()) return cmd_mesh(ckpt, out, which, res);
    if (ev->parsed()) return cmd_eval(ckpt, out, path_spec, frames);
    std::cerr << "error[cli]: no subcommand\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const DatasetError& e) {
    std::cerr << "error[dataset]: " << e.what() << "\n";
    return 2;
  } catch (const TransportError& e) {
    std::cerr << "error[transport]: " << e.what() << "\n";
    return 3;
  } catch (const MalformedResponseError& e) {
    std::cerr << "error[transport]: " << e.what() << "\n";
    return 3;
  } catch (const MissingCheckpointError& e) {
    std::cerr << "error[checkpoint-missing]: " << e.what() << "\n";
    return 4;
  } catch (const CheckpointError& e) {
    std::cerr << "error[checkpoint]: " << e.what() << "\n";
    return 5;
  } catch (const NumericsError& e) {
    std::cerr << "error[numerics]: " << e.what() << "\n";
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
}
