// Benchmark: OpenMP image renderer against the serial reference
// implementation, verifying that both produce bitwise-identical images.
//
// Usage: neused_bench [image_size] [repeats]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "neused/fields.hpp"
#include "neused/geometry_io.hpp"
#include "neused/render.hpp"

using namespace neused;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  const int size = argc > 1 ? std::atoi(argv[1]) : 96;
  const int repeats = argc > 2 ? std::atoi(argv[2]) : 3;
  if (size < 8 || repeats < 1) {
    std::fprintf(stderr, "usage: neused_bench [image_size >= 8] [repeats >= 1]\n");
    return 1;
  }

  SceneConfig scene;
  ParamStore store;
  FieldBundle bundle(store, scene);
  Rng rng(7);
  bundle.init(store, rng);

  Camera cam;
  cam.width = cam.height = size;
  cam.fx = cam.fy = 1.2 * size;
  cam.cx = cam.cy = 0.5 * size;
  cam.pose = look_at_origin(Vec3(2.4, 1.1, 1.6));

  RenderConfig rc;
  rc.fg_samples = 48;
  rc.bg_samples = 24;
  rc.active_levels = scene.grid.levels;
  rc.want_phong = true;

  Tensor rgb_s, phong_s, mask_s, rgb_p, phong_p, mask_p;

  // Warm-up (thread pool creation, lazy allocations).
  render_image(store, bundle, cam, FieldSel::source, rc, rgb_p, &phong_p, &mask_p, nullptr,
               nullptr);

  double t_serial = 1e300, t_parallel = 1e300;
  for (int r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    render_image_serial(store, bundle, cam, FieldSel::source, rc, rgb_s, &phong_s, &mask_s,
                        nullptr, nullptr);
    t_serial = std::min(t_serial, seconds_since(t0));

    t0 = std::chrono::steady_clock::now();
    render_image(store, bundle, cam, FieldSel::source, rc, rgb_p, &phong_p, &mask_p, nullptr,
                 nullptr);
    t_parallel = std::min(t_parallel, seconds_since(t0));
  }

  const bool identical =
      rgb_s.v == rgb_p.v && phong_s.v == phong_p.v && mask_s.v == mask_p.v;
  const double rays = static_cast<double>(size) * size;

  std::printf("image %dx%d, %d foreground + %d background samples, %d workers\n", size, size,
              rc.fg_samples, rc.bg_samples, worker_count());
  std::printf("serial   : %8.1f ms  (%7.0f rays/s)\n", 1e3 * t_serial, rays / t_serial);
  std::printf("parallel : %8.1f ms  (%7.0f rays/s)\n", 1e3 * t_parallel, rays / t_parallel);
  std::printf("speedup  : %.2fx\n", t_serial / t_parallel);
  std::printf("bitwise identical outputs: %s\n", identical ? "yes" : "NO");
  return identical ? 0 : 1;
}
