// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/simruntime/mesh.h"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

namespace titanlab::sim {

std::string group_key(const Group& group) {
  std::string key;
  for (size_t i = 0; i < group.size(); ++i) {
    if (i) key += ',';
    key += std::to_string(group[i]);
  }
  return key;
}

DeviceMesh::DeviceMesh(Shape shape, std::vector<std::string> names, std::vector<int> ranks)
    : shape_(std::move(shape)), names_(std::move(names)), ranks_(std::move(ranks)) {
  if (shape_.size() != names_.size()) {
    throw MeshError("device mesh: " + std::to_string(shape_.size()) + " extents but " +
                    std::to_string(names_.size()) + " names");
  }
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (!seen.insert(n).second) throw MeshError("device mesh: duplicate dim name '" + n + "'");
  }
  int64_t total = 1;
  for (int64_t e : shape_) {
    if (e <= 0) throw MeshError("device mesh: extents must be positive, got " + shape_str(shape_));
    total *= e;
  }
  if (ranks_.empty()) {
    ranks_.resize(static_cast<size_t>(total));
    std::iota(ranks_.begin(), ranks_.end(), 0);
  } else if (static_cast<int64_t>(ranks_.size()) != total) {
    throw MeshError("device mesh: shape " + shape_str(shape_) + " has " + std::to_string(total) +
                    " slots but " + std::to_string(ranks_.size()) + " ranks were given");
  }
}

bool DeviceMesh::has_dim(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

int64_t DeviceMesh::dim_index(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw MeshError("device mesh " + str() + " has no dim named '" + name + "'");
  return it - names_.begin();
}

bool DeviceMesh::contains(int rank) const {
  return std::find(ranks_.begin(), ranks_.end(), rank) != ranks_.end();
}

std::vector<int64_t> DeviceMesh::coordinate(int rank) const {
  auto it = std::find(ranks_.begin(), ranks_.end(), rank);
  if (it == ranks_.end()) throw MeshError("rank " + std::to_string(rank) + " not in mesh " + str());
  int64_t flat = it - ranks_.begin();
  std::vector<int64_t> coord(shape_.size());
  for (size_t d = shape_.size(); d-- > 0;) {
    coord[d] = flat % shape_[d];
    flat /= shape_[d];
  }
  return coord;
}

int DeviceMesh::rank_at(const std::vector<int64_t>& coord) const {
  int64_t flat = 0;
  for (size_t d = 0; d < shape_.size(); ++d) flat = flat * shape_[d] + coord[d];
  return ranks_[static_cast<size_t>(flat)];
}

Group DeviceMesh::group(int rank, const std::string& name) const {
  return group(rank, dim_index(name));
}

Group DeviceMesh::group(int rank, int64_t dim) const {
  auto coord = coordinate(rank);
  Group g;
  for (int64_t i = 0; i < shape_[dim]; ++i) {
    coord[dim] = i;
    g.push_back(rank_at(coord));
  }
  return g;
}

Group DeviceMesh::flatten_group(int rank, const std::vector<std::string>& names) const {
  std::vector<int64_t> dims;
  for (const auto& n : names) dims.push_back(dim_index(n));
  std::sort(dims.begin(), dims.end());
  auto coord = coordinate(rank);
  int64_t count = 1;
  for (int64_t d : dims) count *= shape_[d];
  Group g;
  for (int64_t flat = 0; flat < count; ++flat) {
    int64_t rem = flat;
    for (size_t i = dims.size(); i-- > 0;) {
      coord[dims[i]] = rem % shape_[dims[i]];
      rem /= shape_[dims[i]];
    }
    g.push_back(rank_at(coord));
  }
  return g;
}

DeviceMesh DeviceMesh::flatten(const std::vector<std::string>& names,
                               const std::string& new_name) const {
  if (names.empty()) throw MeshError("flatten: no dims given");
  const int64_t first = dim_index(names.front());
  for (size_t i = 0; i < names.size(); ++i) {
    if (dim_index(names[i]) != first + static_cast<int64_t>(i)) {
      throw MeshError("flatten: dims must be adjacent and in mesh order");
    }
  }
  Shape shape;
  std::vector<std::string> out_names;
  for (int64_t d = 0; d < ndim(); ++d) {
    if (d == first) {
      int64_t e = 1;
      for (size_t i = 0; i < names.size(); ++i) e *= shape_[first + i];
      shape.push_back(e);
      out_names.push_back(new_name);
      d += static_cast<int64_t>(names.size()) - 1;
    } else {
      shape.push_back(shape_[d]);
      out_names.push_back(names_[d]);
    }
  }
  return DeviceMesh(shape, out_names, ranks_);
}

DeviceMesh DeviceMesh::submesh(int rank, const std::vector<std::string>& names) const {
  std::vector<int64_t> dims;
  for (const auto& n : names) dims.push_back(dim_index(n));
  std::sort(dims.begin(), dims.end());
  Shape shape;
  std::vector<std::string> out_names;
  for (int64_t d : dims) {
    shape.push_back(shape_[d]);
    out_names.push_back(names_[d]);
  }
  const std::vector<std::string> sorted_names = out_names;
  return DeviceMesh(shape, out_names, flatten_group(rank, sorted_names));
}

std::string DeviceMesh::str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? ", " : "") << names_[i] << "=" << shape_[i];
  os << ")";
  return os.str();
}

DeviceMesh device_mesh(Shape shape, std::vector<std::string> names) {
  return DeviceMesh(std::move(shape), std::move(names));
}

Group mesh_slice(const DeviceMesh& mesh, int rank, const std::string& name) {
  return mesh.group(rank, name);
}

Group mesh_flatten(const DeviceMesh& mesh, int rank, const std::vector<std::string>& names) {
  return mesh.flatten_group(rank, names);
}

}  // namespace titanlab::sim
