#include <cstdint>
#include <unordered_map>

#include "neused/geometry_io.hpp"

namespace neused {

namespace {

#include "mc_tables.inc"

// Cube corner offsets in (dx, dy, dz), matching the table convention: the
// bottom face runs 0:(1,1,0) 1:(1,0,0) 2:(0,0,0) 3:(0,1,0), the top face
// repeats it at dz=1, and bit i of the case index is set where the field is
// strictly positive at corner i.
constexpr int kCorner[8][3] = {
    {1, 1, 0}, {1, 0, 0}, {0, 0, 0}, {0, 1, 0}, {1, 1, 1}, {1, 0, 1}, {0, 0, 1}, {0, 1, 1},
};

// The 12 cell edges as corner pairs.
constexpr int kEdge[12][2] = {
    {0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7},
};

}  // namespace

TriangleMesh marching_cubes(const std::function<double(const Vec3&)>& field, const Vec3& lo,
                            const Vec3& hi, int n) {
  if (n < 8) throw ConfigError("marching_cubes: resolution must be at least 8");
  if (!((hi - lo).array() > 0.0).all())
    throw ConfigError("marching_cubes: bounding box must have positive extent");

  const int np = n + 1;
  const Vec3 cell = (hi - lo) / n;
  std::vector<double> values(static_cast<std::size_t>(np) * np * np);
  const auto lattice = [np](int x, int y, int z) {
    return (static_cast<std::size_t>(z) * np + y) * np + x;
  };

#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (int z = 0; z < np; ++z)
    for (int y = 0; y < np; ++y)
      for (int x = 0; x < np; ++x)
        values[lattice(x, y, z)] =
            field(Vec3(lo.x() + x * cell.x(), lo.y() + y * cell.y(), lo.z() + z * cell.z()));

  TriangleMesh mesh;
  std::unordered_map<std::uint64_t, int> edge_vertex;  // welds shared edge crossings
  const auto weld_key = [&](std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint64_t>(b);
  };

  double corner_val[8];
  std::size_t corner_id[8];
  Vec3 corner_pos[8];
  int edge_ids[12];

  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        int index = 0;
        for (int c = 0; c < 8; ++c) {
          const int cx = x + kCorner[c][0], cy = y + kCorner[c][1], cz = z + kCorner[c][2];
          corner_id[c] = lattice(cx, cy, cz);
          corner_val[c] = values[corner_id[c]];
          corner_pos[c] =
              Vec3(lo.x() + cx * cell.x(), lo.y() + cy * cell.y(), lo.z() + cz * cell.z());
          if (corner_val[c] > 0.0) index |= 1 << c;
        }
        const int flags = kEdgeTable[index];
        if (flags == 0) continue;

        for (int e = 0; e < 12; ++e) {
          if (!(flags & (1 << e))) continue;
          const int a = kEdge[e][0], b = kEdge[e][1];
          const std::uint64_t key = weld_key(corner_id[a], corner_id[b]);
          const auto it = edge_vertex.find(key);
          if (it != edge_vertex.end()) {
            edge_ids[e] = it->second;
            continue;
          }
          const double va = corner_val[a], vb = corner_val[b];
          const double t = va / (va - vb);  // zero crossing; flagged edges have va != vb
          const Vec3 p = corner_pos[a] + t * (corner_pos[b] - corner_pos[a]);
          edge_ids[e] = static_cast<int>(mesh.vertices.size());
          mesh.vertices.push_back(p);
          edge_vertex.emplace(key, edge_ids[e]);
        }

        // Cell-average field gradient, used only to orient triangles.
        Vec3 g = Vec3::Zero();
        for (int dy = 0; dy < 2; ++dy)
          for (int dz = 0; dz < 2; ++dz) {
            g.x() += values[lattice(x + 1, y + dy, z + dz)] - values[lattice(x, y + dy, z + dz)];
            g.y() += values[lattice(x + dy, y + 1, z + dz)] - values[lattice(x + dy, y, z + dz)];
            g.z() += values[lattice(x + dy, y + dz, z + 1)] - values[lattice(x + dy, y + dz, z)];
          }
        g = (g / 4.0).cwiseQuotient(cell);

        const int* tri = kTriTable[index];
        for (int i = 0; tri[i] != -1; i += 3) {
          int i0 = edge_ids[tri[i]], i1 = edge_ids[tri[i + 1]], i2 = edge_ids[tri[i + 2]];
          if (i0 == i1 || i1 == i2 || i0 == i2) continue;
          const Vec3 nrm = (mesh.vertices[i1] - mesh.vertices[i0])
                               .cross(mesh.vertices[i2] - mesh.vertices[i0]);
          if (nrm.squaredNorm() == 0.0) continue;
          if (nrm.dot(g) < 0.0) std::swap(i1, i2);
          mesh.faces.push_back({i0, i1, i2});
        }
      }
  return mesh;
}

double mesh_area(const TriangleMesh& mesh) {
  double area = 0.0;
  for (const auto& f : mesh.faces) {
    const Vec3 e1 = mesh.vertices[f[1]] - mesh.vertices[f[0]];
    const Vec3 e2 = mesh.vertices[f[2]] - mesh.vertices[f[0]];
    area += 0.5 * e1.cross(e2).norm();
  }
  return area;
}

long euler_characteristic(const TriangleMesh& mesh) {
  std::unordered_map<std::uint64_t, int> edges;
  for (const auto& f : mesh.faces)
    for (int k = 0; k < 3; ++k) {
      std::uint64_t a = f[k], b = f[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edges.emplace((a << 32) | b, 1);
    }
  return static_cast<long>(mesh.vertices.size()) - static_cast<long>(edges.size()) +
         static_cast<long>(mesh.faces.size());
}

}  // namespace neused
