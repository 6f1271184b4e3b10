// SPDX-License-Identifier: Apache-2.0

#include "dropin/param_store.hpp"

#include "dropin/error.hpp"

namespace dropin {

void ParamStore::add(const ParamId& id, Tensor value, bool trainable) {
  if (id.empty()) throw Error(ErrorKind::kArgument, "parameter id must be non-empty");
  if (!entries_.emplace(id, std::move(value)).second) {
    throw Error(ErrorKind::kArgument, "duplicate parameter id '" + id + "'");
  }
  if (trainable) trainable_.insert(id);
}

void ParamStore::replace(const ParamId& id, Tensor value) { get_mut(id) = std::move(value); }

void ParamStore::erase(const ParamId& id) {
  if (entries_.erase(id) == 0) throw Error(ErrorKind::kArgument, "unknown parameter id '" + id + "'");
  trainable_.erase(id);
}

const Tensor& ParamStore::get(const ParamId& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw Error(ErrorKind::kArgument, "unknown parameter id '" + id + "'");
  return it->second;
}

Tensor& ParamStore::get_mut(const ParamId& id) {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw Error(ErrorKind::kArgument, "unknown parameter id '" + id + "'");
  return it->second;
}

void ParamStore::set_trainable(const ParamId& id, bool trainable) {
  if (!contains(id)) throw Error(ErrorKind::kArgument, "unknown parameter id '" + id + "'");
  if (trainable) {
    trainable_.insert(id);
  } else {
    trainable_.erase(id);
  }
}

void ParamStore::set_all_trainable(bool trainable) {
  trainable_.clear();
  if (!trainable) return;
  for (const auto& [id, _] : entries_) trainable_.insert(id);
}

void ParamStore::set_trainable_only(const std::set<ParamId>& ids) {
  for (const auto& id : ids) {
    if (!contains(id)) throw Error(ErrorKind::kArgument, "unknown parameter id '" + id + "'");
  }
  trainable_ = ids;
}

std::size_t ParamStore::element_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& [id, t] : entries_) {
    if (!trainable_only || is_trainable(id)) n += t.size();
  }
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  return entries_ == other.entries_ && trainable_ == other.trainable_;
}

}  // namespace dropin
