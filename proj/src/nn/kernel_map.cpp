#include "td3d/nn/kernel_map.hpp"

#include <algorithm>

#include "td3d/voxel_grid.hpp"

namespace td3d::nn {
namespace {

int floor_div2(int v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

}  // namespace

std::size_t KernelMap::num_pairs() const {
  std::size_t n = 0;
  for (const auto& v : in) n += v.size();
  return n;
}

KernelMap submanifold_map(std::span<const Coord> coords, const CoordIndex& index) {
  KernelMap map;
  const int n = static_cast<int>(coords.size());
  map.num_in = map.num_out = n;
  map.in.resize(27);
  map.out.resize(27);
  map.identity.assign(27, false);
  int k = 0;
  for (int dx = -1; dx <= 1; ++dx) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dz = -1; dz <= 1; ++dz, ++k) {
        auto& in = map.in[static_cast<std::size_t>(k)];
        auto& out = map.out[static_cast<std::size_t>(k)];
        if (dx == 0 && dy == 0 && dz == 0) {
          in.resize(static_cast<std::size_t>(n));
          for (int i = 0; i < n; ++i) in[static_cast<std::size_t>(i)] = i;
          out = in;
          map.identity[static_cast<std::size_t>(k)] = true;
          continue;
        }
        for (int i = 0; i < n; ++i) {
          const Coord& c = coords[static_cast<std::size_t>(i)];
          const int j = index.find({c.x + dx, c.y + dy, c.z + dz});
          if (j >= 0) {
            in.push_back(j);
            out.push_back(i);
          }
        }
      }
    }
  }
  return map;
}

Downsampling downsample(std::span<const Coord> fine) {
  Downsampling d;
  std::vector<Coord> parents(fine.size());
  for (std::size_t i = 0; i < fine.size(); ++i) {
    parents[i] = {floor_div2(fine[i].x), floor_div2(fine[i].y), floor_div2(fine[i].z)};
  }
  d.coarse = parents;
  std::sort(d.coarse.begin(), d.coarse.end());
  d.coarse.erase(std::unique(d.coarse.begin(), d.coarse.end()), d.coarse.end());
  d.parent.resize(fine.size());
  const int n_fine = static_cast<int>(fine.size());
  const int n_coarse = static_cast<int>(d.coarse.size());
  d.down.num_in = n_fine;
  d.down.num_out = n_coarse;
  d.down.in.resize(8);
  d.down.out.resize(8);
  d.down.identity.assign(8, false);
  for (int i = 0; i < n_fine; ++i) {
    const auto u = static_cast<std::size_t>(i);
    const int j = static_cast<int>(std::lower_bound(d.coarse.begin(), d.coarse.end(), parents[u]) - d.coarse.begin());
    d.parent[u] = j;
    const int k = (fine[u].x - 2 * parents[u].x) * 4 + (fine[u].y - 2 * parents[u].y) * 2 + (fine[u].z - 2 * parents[u].z);
    d.down.in[static_cast<std::size_t>(k)].push_back(i);
    d.down.out[static_cast<std::size_t>(k)].push_back(j);
  }
  d.up.num_in = n_coarse;
  d.up.num_out = n_fine;
  d.up.in = d.down.out;
  d.up.out = d.down.in;
  d.up.identity.assign(8, false);
  return d;
}

Pyramid build_pyramid(std::vector<Coord> base, int num_levels) {
  Pyramid p;
  p.coords.push_back(std::move(base));
  for (int l = 0; l < num_levels; ++l) {
    const auto& coords = p.coords[static_cast<std::size_t>(l)];
    p.subm.push_back(std::make_shared<const KernelMap>(submanifold_map(coords, CoordIndex(coords))));
    if (l + 1 == num_levels) break;
    Downsampling d = downsample(coords);
    p.down.push_back(std::make_shared<const KernelMap>(std::move(d.down)));
    p.up.push_back(std::make_shared<const KernelMap>(std::move(d.up)));
    p.coords.push_back(std::move(d.coarse));
  }
  return p;
}

}  // namespace td3d::nn
