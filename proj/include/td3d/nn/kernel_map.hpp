#pragma once

#include <memory>
#include <span>
#include <vector>

#include "td3d/geometry.hpp"

namespace td3d {
class CoordIndex;
}

namespace td3d::nn {

// Input/output row pairs per kernel offset of a sparse convolution.
struct KernelMap {
  int num_in = 0;
  int num_out = 0;
  std::vector<std::vector<int>> in;
  std::vector<std::vector<int>> out;
  // Offsets whose pairs are (i, i) for every row; evaluated as a dense GEMM.
  std::vector<bool> identity;

  int num_offsets() const { return static_cast<int>(in.size()); }
  std::size_t num_pairs() const;
};

// 3x3x3 submanifold map: outputs are the input sites.
KernelMap submanifold_map(std::span<const Coord> coords, const CoordIndex& index);

// Stride-2 coarsening: coarse[j] = unique(floor(coords / 2)), sorted.
struct Downsampling {
  std::vector<Coord> coarse;
  std::vector<int> parent;  // fine row -> coarse row
  KernelMap down;           // fine -> coarse, 8 offsets
  KernelMap up;             // coarse -> fine, 8 offsets (transpose of down)
};

Downsampling downsample(std::span<const Coord> fine);

// Occupancy at strides 1, 2, ..., 2^(L-1) with the maps a sparse U-shaped
// network needs: submanifold maps per level and down/up maps between level l
// and l + 1.
struct Pyramid {
  std::vector<std::vector<Coord>> coords;
  std::vector<std::shared_ptr<const KernelMap>> subm;
  std::vector<std::shared_ptr<const KernelMap>> down;
  std::vector<std::shared_ptr<const KernelMap>> up;

  int num_levels() const { return static_cast<int>(coords.size()); }
};

// `base` must be sorted and unique.
Pyramid build_pyramid(std::vector<Coord> base, int num_levels);

}  // namespace td3d::nn
