// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "titanlab/ndtensor/tensor.h"

namespace titanlab::sim {

// Ordered list of global ranks taking part in a collective. The order is the
// reduction/concatenation order.
using Group = std::vector<int>;

std::string group_key(const Group& group);

class MeshError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// n-D arrangement of global ranks with named dims. `ranks` lists the member
// global ranks in row-major coordinate order; a fresh mesh uses 0..size-1.
class DeviceMesh {
 public:
  DeviceMesh() = default;
  DeviceMesh(Shape shape, std::vector<std::string> names, std::vector<int> ranks = {});

  const Shape& shape() const { return shape_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<int>& ranks() const { return ranks_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(ranks_.size()); }
  int64_t extent(const std::string& name) const { return shape_[dim_index(name)]; }
  bool has_dim(const std::string& name) const;
  int64_t dim_index(const std::string& name) const;
  bool contains(int rank) const;

  std::vector<int64_t> coordinate(int rank) const;
  int rank_at(const std::vector<int64_t>& coord) const;

  // Ranks sharing every coordinate of `rank` except along `name`.
  Group group(int rank, const std::string& name) const;
  Group group(int rank, int64_t dim) const;
  // Ranks sharing every coordinate of `rank` except along `names`.
  Group flatten_group(int rank, const std::vector<std::string>& names) const;

  // Merges the adjacent dims `names` into a single dim called `new_name`.
  DeviceMesh flatten(const std::vector<std::string>& names, const std::string& new_name) const;
  // Keeps dims `names` (in mesh order), fixing every other coordinate at `rank`'s.
  DeviceMesh submesh(int rank, const std::vector<std::string>& names) const;

  bool operator==(const DeviceMesh& other) const = default;
  std::string str() const;

 private:
  Shape shape_;
  std::vector<std::string> names_;
  std::vector<int> ranks_;
};

DeviceMesh device_mesh(Shape shape, std::vector<std::string> names);
Group mesh_slice(const DeviceMesh& mesh, int rank, const std::string& name);
Group mesh_flatten(const DeviceMesh& mesh, int rank, const std::vector<std::string>& names);

}  // namespace titanlab::sim
