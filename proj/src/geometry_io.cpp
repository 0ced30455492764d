#include "neused/geometry_io.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "neused/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace neused {

namespace {

std::string frame_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return buf;
}

Mat4 pose_from_json(const json& rows) {
  if (!rows.is_array() || rows.size() != 4)
    throw DatasetError("transforms.json: transform_matrix must be a 4x4 array");
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    if (!rows[r].is_array() || rows[r].size() != 4)
      throw DatasetError("transforms.json: transform_matrix must be a 4x4 array");
    for (int c = 0; c < 4; ++c) {
      if (!rows[r][c].is_number())
        throw DatasetError("transforms.json: non-numeric transform entry");
      m(r, c) = rows[r][c].get<double>();
    }
  }
  return m;
}

CalibratedDataset load_blender(const std::string& dir) {
  const fs::path meta_path = fs::path(dir) / "transforms.json";
  std::ifstream in(meta_path);
  if (!in) throw DatasetError("missing file: " + meta_path.string());
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw DatasetError("transforms.json: parse failure: " + std::string(e.what()));
  }
  if (!meta.contains("camera_angle_x") || !meta["camera_angle_x"].is_number())
    throw DatasetError("transforms.json: missing numeric camera_angle_x");
  if (!meta.contains("frames") || !meta["frames"].is_array() || meta["frames"].empty())
    throw DatasetError("transforms.json: missing frames array");
  const double angle_x = meta["camera_angle_x"].get<double>();
  if (!(angle_x > 0.0 && angle_x < 3.14159))
    throw DatasetError("transforms.json: camera_angle_x out of range");

  CalibratedDataset ds;
  for (const auto& frame : meta["frames"]) {
    if (!frame.contains("file_path") || !frame["file_path"].is_string())
      throw DatasetError("transforms.json: frame without file_path");
    if (!frame.contains("transform_matrix"))
      throw DatasetError("transforms.json: frame without transform_matrix");
    std::string rel = frame["file_path"].get<std::string>();
    if (rel.rfind("./", 0) == 0) rel = rel.substr(2);
    fs::path img_path = fs::path(dir) / rel;
    if (img_path.extension() != ".png") img_path += ".png";
    if (!fs::exists(img_path)) throw DatasetError("missing file: " + img_path.string());

    Tensor img = read_png(img_path.string());
    const Mat4 pose = pose_from_json(frame["transform_matrix"]);
    validate_pose(pose);

    Camera cam;
    cam.width = img.shape[1];
    cam.height = img.shape[0];
    cam.fx = 0.5 * cam.width / std::tan(0.5 * angle_x);
    cam.fy = cam.fx;
    cam.cx = 0.5 * cam.width;
    cam.cy = 0.5 * cam.height;
    cam.pose = pose;

    if (!ds.images.empty() && img.shape != ds.images.front().shape)
      throw DatasetError("dataset count/shape mismatch: image sizes differ across frames");
    ds.images.push_back(std::move(img));
    ds.cameras.push_back(cam);
  }
  return ds;
}

CameraPath parse_pose_file(const fs::path& meta_path) {
  std::ifstream in(meta_path);
  if (!in) throw DatasetError("missing file: " + meta_path.string());

  const std::string label = meta_path.filename().string();
  std::string line;
  CameraPath path;
  bool have_header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    if (!have_header) {
      if (!(ss >> path.fx >> path.fy >> path.cx >> path.cy >> path.width >> path.height) ||
          path.width <= 0 || path.height <= 0)
        throw DatasetError(label + ":" + std::to_string(lineno) +
                           ": expected header 'fx fy cx cy width height'");
      have_header = true;
      continue;
    }
    Mat4 m = Mat4::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c)
        if (!(ss >> m(r, c)))
          throw DatasetError(label + ":" + std::to_string(lineno) +
                             ": expected 12 numbers (row-major 3x4 pose)");
    double extra;
    if (ss >> extra)
      throw DatasetError(label + ":" + std::to_string(lineno) + ": trailing values after pose");
    validate_pose(m);
    path.poses.push_back(m);
  }
  if (!have_header) throw DatasetError(label + ": empty file");
  if (path.poses.empty()) throw DatasetError(label + ": no poses");
  return path;
}

CalibratedDataset load_pose_txt(const std::string& dir) {
  const CameraPath path = parse_pose_file(fs::path(dir) / "poses.txt");
  const double fx = path.fx, fy = path.fy, cx = path.cx, cy = path.cy;
  const int width = path.width, height = path.height;
  const std::vector<Mat4>& poses = path.poses;

  CalibratedDataset ds;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const fs::path img_path = fs::path(dir) / (frame_name(static_cast<int>(i)) + ".png");
    if (!fs::exists(img_path))
      throw DatasetError("dataset count mismatch: missing image " + img_path.string());
    Tensor img = read_png(img_path.string());
    if (img.shape[0] != height || img.shape[1] != width)
      throw DatasetError("dataset count/shape mismatch: " + img_path.string() +
                         " does not match the header size");
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = cx;
    cam.cy = cy;
    cam.width = width;
    cam.height = height;
    cam.pose = poses[i];
    ds.images.push_back(std::move(img));
    ds.cameras.push_back(cam);
  }
  return ds;
}

void write_floats_le(std::ofstream& out, const float* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
}

}  // namespace

CameraPath load_camera_path(const std::string& path) { return parse_pose_file(path); }

CalibratedDataset load_dataset(const std::string& dir, DatasetFormat format) {
  if (!fs::is_directory(dir)) throw DatasetError("missing file: no such directory " + dir);
  CalibratedDataset ds = format == DatasetFormat::blender_transforms ? load_blender(dir)
                                                                     : load_pose_txt(dir);
  if (ds.images.size() != ds.cameras.size() || ds.images.empty())
    throw DatasetError("dataset count mismatch in " + dir);
  return ds;
}

void write_dataset_blender(const std::string& dir, const CalibratedDataset& ds) {
  if (ds.images.size() != ds.cameras.size() || ds.images.empty())
    throw DatasetError("write_dataset_blender: images/cameras mismatch");
  const Camera& c0 = ds.cameras.front();
  if (std::abs(c0.fx - c0.fy) > 1e-9 || std::abs(c0.cx - 0.5 * c0.width) > 1e-9 ||
      std::abs(c0.cy - 0.5 * c0.height) > 1e-9)
    throw ConfigError(
        "write_dataset_blender: the transforms.json layout requires fx = fy and a centered "
        "principal point");
  fs::create_directories(dir);

  json meta;
  meta["camera_angle_x"] = 2.0 * std::atan(0.5 * c0.width / c0.fx);
  meta["frames"] = json::array();
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const std::string name = "r_" + std::to_string(i);
    write_png((fs::path(dir) / (name + ".png")).string(), ds.images[i]);
    json frame;
    frame["file_path"] = "./" + name;
    json rows = json::array();
    for (int r = 0; r < 4; ++r) {
      json row = json::array();
      for (int c = 0; c < 4; ++c) row.push_back(ds.cameras[i].pose(r, c));
      rows.push_back(row);
    }
    frame["transform_matrix"] = rows;
    meta["frames"].push_back(frame);
  }
  std::ofstream out(fs::path(dir) / "transforms.json");
  if (!out) throw DatasetError("write_dataset_blender: cannot write transforms.json");
  out << meta.dump(2) << "\n";
}

void export_mesh(const TriangleMesh& mesh, const std::string& path, MeshFormat format) {
  const bool with_normals = !mesh.normals.empty();
  const bool with_colors = !mesh.colors.empty();
  if (with_normals && mesh.normals.size() != mesh.vertices.size())
    throw ShapeError("export_mesh: normal count mismatch");
  if (with_colors && mesh.colors.size() != mesh.vertices.size())
    throw ShapeError("export_mesh: color count mismatch");
  for (const auto& f : mesh.faces)
    for (int k : f)
      if (k < 0 || k >= static_cast<int>(mesh.vertices.size()))
        throw ShapeError("export_mesh: face index out of range");

  if (format == MeshFormat::obj) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DatasetError("export_mesh: cannot open " + path);
    char buf[256];
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      const Vec3& v = mesh.vertices[i];
      if (with_colors) {
        const Vec3& c = mesh.colors[i];
        std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g %.17g %.17g %.17g\n", v.x(), v.y(),
                      v.z(), c.x(), c.y(), c.z());
      } else {
        std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
      }
      out << buf;
    }
    for (const auto& n : mesh.normals) {
      std::snprintf(buf, sizeof(buf), "vn %.17g %.17g %.17g\n", n.x(), n.y(), n.z());
      out << buf;
    }
    for (const auto& f : mesh.faces) {
      if (with_normals)
        std::snprintf(buf, sizeof(buf), "f %d//%d %d//%d %d//%d\n", f[0] + 1, f[0] + 1, f[1] + 1,
                      f[1] + 1, f[2] + 1, f[2] + 1);
      else
        std::snprintf(buf, sizeof(buf), "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
      out << buf;
    }
    if (!out) throw DatasetError("export_mesh: short write to " + path);
    return;
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("export_mesh: cannot open " + path);
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (with_normals) out << "property float nx\nproperty float ny\nproperty float nz\n";
  if (with_colors) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << mesh.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    float v[3] = {static_cast<float>(mesh.vertices[i].x()),
                  static_cast<float>(mesh.vertices[i].y()),
                  static_cast<float>(mesh.vertices[i].z())};
    write_floats_le(out, v, 3);
    if (with_normals) {
      float n[3] = {static_cast<float>(mesh.normals[i].x()),
                    static_cast<float>(mesh.normals[i].y()),
                    static_cast<float>(mesh.normals[i].z())};
      write_floats_le(out, n, 3);
    }
    if (with_colors) {
      unsigned char c[3];
      for (int k = 0; k < 3; ++k)
        c[k] = static_cast<unsigned char>(
            std::lround(std::clamp(mesh.colors[i][k], 0.0, 1.0) * 255.0));
      out.write(reinterpret_cast<const char*>(c), 3);
    }
  }
  for (const auto& f : mesh.faces) {
    const unsigned char count = 3;
    out.write(reinterpret_cast<const char*>(&count), 1);
    const std::int32_t idx[3] = {f[0], f[1], f[2]};
    out.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
  if (!out) throw DatasetError("export_mesh: short write to " + path);
}

namespace {

TriangleMesh import_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("import_mesh: cannot open " + path);
  TriangleMesh mesh;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ss >> x >> y >> z))
        throw DatasetError(path + ":" + std::to_string(lineno) + ": malformed v line");
      mesh.vertices.emplace_back(x, y, z);
      double r, g, b;
      if (ss >> r >> g >> b) mesh.colors.emplace_back(r, g, b);
    } else if (tag == "vn") {
      double x, y, z;
      if (!(ss >> x >> y >> z))
        throw DatasetError(path + ":" + std::to_string(lineno) + ": malformed vn line");
      mesh.normals.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::array<int, 3> f{};
      for (int k = 0; k < 3; ++k) {
        std::string tok;
        if (!(ss >> tok))
          throw DatasetError(path + ":" + std::to_string(lineno) + ": faces must be triangles");
        f[k] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
        if (f[k] < 0)
          throw DatasetError(path + ":" + std::to_string(lineno) + ": bad face index");
      }
      std::string extra;
      if (ss >> extra)
        throw DatasetError(path + ":" + std::to_string(lineno) + ": faces must be triangles");
      mesh.faces.push_back(f);
    }
  }
  if (!mesh.colors.empty() && mesh.colors.size() != mesh.vertices.size())
    throw DatasetError("import_mesh: inconsistent vertex colors in " + path);
  return mesh;
}

TriangleMesh import_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("import_mesh: cannot open " + path);
  std::string line;
  std::size_t n_vertices = 0, n_faces = 0;
  bool with_normals = false, with_colors = false;
  std::vector<std::string> vertex_props;
  std::string element;
  if (!std::getline(in, line) || line != "ply") throw DatasetError("import_mesh: not a PLY file");
  if (!std::getline(in, line) || line != "format binary_little_endian 1.0")
    throw DatasetError("import_mesh: unsupported PLY format in " + path);
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "comment") continue;
    if (tag == "element") {
      std::size_t count;
      ss >> element >> count;
      if (element == "vertex") n_vertices = count;
      else if (element == "face") n_faces = count;
      else throw DatasetError("import_mesh: unsupported PLY element " + element);
    } else if (tag == "property") {
      if (element == "vertex") {
        std::string type, name;
        ss >> type;
        if (type == "list") throw DatasetError("import_mesh: unexpected list property on vertices");
        ss >> name;
        vertex_props.push_back(name);
      }
    } else if (tag == "end_header") {
      break;
    } else {
      throw DatasetError("import_mesh: unsupported PLY header line: " + line);
    }
  }
  const std::vector<std::string> base = {"x", "y", "z"};
  std::vector<std::string> expect = base;
  if (vertex_props.size() >= 6 && vertex_props[3] == "nx") {
    with_normals = true;
    expect.insert(expect.end(), {"nx", "ny", "nz"});
  }
  if (vertex_props.size() == expect.size() + 3) {
    with_colors = true;
    expect.insert(expect.end(), {"red", "green", "blue"});
  }
  if (vertex_props != expect)
    throw DatasetError("import_mesh: unsupported PLY vertex layout in " + path);

  TriangleMesh mesh;
  mesh.vertices.resize(n_vertices);
  if (with_normals) mesh.normals.resize(n_vertices);
  if (with_colors) mesh.colors.resize(n_vertices);
  for (std::size_t i = 0; i < n_vertices; ++i) {
    float v[3];
    in.read(reinterpret_cast<char*>(v), sizeof(v));
    mesh.vertices[i] = Vec3(v[0], v[1], v[2]);
    if (with_normals) {
      float nrm[3];
      in.read(reinterpret_cast<char*>(nrm), sizeof(nrm));
      mesh.normals[i] = Vec3(nrm[0], nrm[1], nrm[2]);
    }
    if (with_colors) {
      unsigned char c[3];
      in.read(reinterpret_cast<char*>(c), 3);
      mesh.colors[i] = Vec3(c[0] / 255.0, c[1] / 255.0, c[2] / 255.0);
    }
    if (!in) throw DatasetError("import_mesh: truncated vertex payload in " + path);
  }
  mesh.faces.resize(n_faces);
  for (std::size_t i = 0; i < n_faces; ++i) {
    unsigned char count;
    in.read(reinterpret_cast<char*>(&count), 1);
    if (!in || count != 3) throw DatasetError("import_mesh: non-triangle face in " + path);
    std::int32_t idx[3];
    in.read(reinterpret_cast<char*>(idx), sizeof(idx));
    if (!in) throw DatasetError("import_mesh: truncated face payload in " + path);
    for (int k = 0; k < 3; ++k) {
      if (idx[k] < 0 || static_cast<std::size_t>(idx[k]) >= n_vertices)
        throw DatasetError("import_mesh: face index out of range in " + path);
      mesh.faces[i][k] = idx[k];
    }
  }
  return mesh;
}

}  // namespace

TriangleMesh import_mesh(const std::string& path, MeshFormat format) {
  return format == MeshFormat::obj ? import_obj(path) : import_ply(path);
}

Camera CameraPath::camera(std::size_t i) const {
  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = cx;
  cam.cy = cy;
  cam.width = width;
  cam.height = height;
  cam.pose = poses.at(i);
  return cam;
}

Mat4 look_at_origin(const Vec3& cam_pos, const Vec3& up_hint) {
  const double dist = cam_pos.norm();
  if (dist < 1e-12) throw ConfigError("spherical_poses: camera position at the origin");
  const Vec3 f = -cam_pos / dist;  // view direction, toward the origin
  Vec3 side = f.cross(up_hint);
  if (side.norm() < 1e-9) side = f.cross(Vec3::UnitZ());
  if (side.norm() < 1e-9) side = f.cross(Vec3::UnitX());
  side.normalize();
  const Vec3 up = side.cross(f);
  Mat4 pose = Mat4::Identity();
  pose.block<3, 1>(0, 0) = side;
  pose.block<3, 1>(0, 1) = up;
  pose.block<3, 1>(0, 2) = -f;
  pose.block<3, 1>(0, 3) = cam_pos;
  return pose;
}

CameraPath spherical_poses(const std::vector<Vec3>& camera_positions, int n_steps) {
  if (camera_positions.empty()) throw ConfigError("spherical_poses: need at least one camera");
  if (n_steps < 1) throw ConfigError("spherical_poses: need at least one step");

  Vec3 center = Vec3::Zero();
  for (const Vec3& p : camera_positions) center += p;
  center /= static_cast<double>(camera_positions.size());
  if (center.norm() < 1e-12)
    throw ConfigError("spherical_poses: camera positions average to the origin");

  // Gram matrix of the raw positions; eigenvalues ascending in Eigen.
  Mat3 gram = Mat3::Zero();
  for (const Vec3& p : camera_positions) gram += p * p.transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(gram);
  const Vec3 evals = eig.eigenvalues();
  Vec3 up;
  if (evals[1] <= 1e-12 * std::max(evals[2], 1.0)) {
    up = Vec3::UnitZ();  // collinear cameras: documented fallback
  } else {
    up = eig.eigenvectors().col(1);  // second eigenvector, descending order
    if (up.z() < 0.0) up = -up;
  }

  const Vec3 rot_dir = up.cross(center);
  double max_angle = 0.0;
  for (const Vec3& p : camera_positions) {
    const double denom = p.norm() * center.norm();
    if (denom < 1e-12) continue;
    const double c = std::clamp(p.dot(center) / denom, -1.0, 1.0);
    max_angle = std::max(max_angle, std::acos(c));
  }

  CameraPath path;
  path.poses.reserve(n_steps);
  for (int i = 0; i < n_steps; ++i) {
    const double theta =
        n_steps == 1 ? -max_angle
                     : -max_angle + 2.0 * max_angle * static_cast<double>(i) / (n_steps - 1);
    const Vec3 pos = center * std::cos(theta) + rot_dir * std::sin(theta);
    path.poses.push_back(look_at_origin(pos, up));
  }
  return path;
}

}  // namespace neused
