#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "neused/render.hpp"
#include "neused/tensor.hpp"

namespace neused {

/// Posed RGB views of one scene. Images are [H,W,3] in [0,1].
struct CalibratedDataset {
  std::vector<Tensor> images;
  std::vector<Camera> cameras;

  std::size_t size() const { return images.size(); }
};

enum class DatasetFormat { blender_transforms, pose_txt };

/// Loads a dataset directory. blender_transforms reads transforms.json
/// (camera-to-world 4x4 matrices plus a shared horizontal field of view);
/// pose_txt reads poses.txt with an intrinsics header line
/// "fx fy cx cy width height" followed by one row-major 3x4 camera-to-world
/// matrix per line, with images 0000.png, 0001.png, ... alongside.
/// Violated invariants are errors, never repaired.
CalibratedDataset load_dataset(const std::string& dir, DatasetFormat format);

/// Writes a dataset in the blender_transforms layout (fixtures, round-trips).
void write_dataset_blender(const std::string& dir, const CalibratedDataset& ds);

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> normals;  // empty or one per vertex
  std::vector<Vec3> colors;   // empty or one per vertex, values in [0,1]

  bool empty() const { return vertices.empty(); }
};

/// Extracts the zero level set of the field over an axis-aligned box sampled
/// at (n+1)^3 lattice points (n cells per axis, n >= 8). Vertices are welded
/// along shared cell edges; triangles wind so normals point toward
/// increasing field values. Field evaluation is OpenMP-parallel, the
/// polygonization pass is serial and deterministic.
TriangleMesh marching_cubes(const std::function<double(const Vec3&)>& field, const Vec3& lo,
                            const Vec3& hi, int n);

double mesh_area(const TriangleMesh& mesh);
/// V - E + F with E counted over unique undirected edges.
long euler_characteristic(const TriangleMesh& mesh);

enum class MeshFormat { obj, ply };

/// ASCII OBJ (v/vn/f, colors as 6-number v lines) or binary little-endian
/// PLY (float32 positions/normals, uchar colors).
void export_mesh(const TriangleMesh& mesh, const std::string& path, MeshFormat format);
TriangleMesh import_mesh(const std::string& path, MeshFormat format);

/// Ordered rigid poses sharing one set of intrinsics.
struct CameraPath {
  std::vector<Mat4> poses;
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  Camera camera(std::size_t i) const;
};

/// Reads a poses.txt-style file (same layout as the pose_txt dataset format,
/// header "fx fy cx cy width height" plus one row-major 3x4 pose per line)
/// into a camera path; no images are required.
CameraPath load_camera_path(const std::string& path);

/// Camera-to-world pose at cam_pos with the view axis through the origin;
/// the up hint picks the roll (falls back to +z, then +x, when parallel).
Mat4 look_at_origin(const Vec3& cam_pos, const Vec3& up_hint = Vec3::UnitZ());

/// Sweeps a look-at-origin camera along a great arc through the mean camera
/// position. The sweep plane is spanned by the mean position and the second
/// eigenvector of the raw position Gram matrix (sign-oriented toward +z);
/// the arc covers [-max_angle, +max_angle] where max_angle is the widest
/// angle between any input position and the mean. Degenerate eigenstructure
/// (collinear cameras) falls back to the global +z up vector.
CameraPath spherical_poses(const std::vector<Vec3>& camera_positions, int n_steps);

}  // namespace neused
