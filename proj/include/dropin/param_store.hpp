// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>

#include "dropin/tensor.hpp"

namespace dropin {

using ParamId = std::string;

/// Named parameter tensors plus the set of ids the optimizer may touch.
/// Iteration order is lexicographic by id, which keeps every traversal
/// deterministic.
class ParamStore {
 public:
  void add(const ParamId& id, Tensor value, bool trainable = true);
  void replace(const ParamId& id, Tensor value);
  void erase(const ParamId& id);

  bool contains(const ParamId& id) const { return entries_.count(id) != 0; }
  const Tensor& get(const ParamId& id) const;
  Tensor& get_mut(const ParamId& id);

  bool is_trainable(const ParamId& id) const { return trainable_.count(id) != 0; }
  void set_trainable(const ParamId& id, bool trainable);
  void set_all_trainable(bool trainable);
  /// Trainable set becomes exactly `ids`; every id must exist.
  void set_trainable_only(const std::set<ParamId>& ids);

  const std::map<ParamId, Tensor>& entries() const { return entries_; }
  const std::set<ParamId>& trainable() const { return trainable_; }

  std::size_t num_tensors() const { return entries_.size(); }
  /// Element count over all entries, or over the trainable ones only.
  std::size_t element_count(bool trainable_only = false) const;

  /// Value copy; `restore` puts it back bit-exactly.
  ParamStore snapshot() const { return *this; }
  void restore(const ParamStore& snap) { *this = snap; }

  bool operator==(const ParamStore& other) const;

 private:
  std::map<ParamId, Tensor> entries_;
  std::set<ParamId> trainable_;
};

}  // namespace dropin
