#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lcat/error.hpp"
#include "lcat/tensor.hpp"

namespace lcat {

// Ordered, named collection of parameter tensors. The name set is fixed once
// built; snapshots capture raw values and restore them bit-identically.
template <typename S>
class BasicModelParams {
 public:
  using Snapshot = std::vector<std::vector<S>>;

  void add(std::string name, BasicTensor<S> tensor) {
    if (index_.count(name))
      fail(Err::Config, "params: duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  BasicTensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(Err::Config, "params: no parameter '" + name + "'");
    return entries_[it->second].second;
  }
  const BasicTensor<S>& at(const std::string& name) const {
    return const_cast<BasicModelParams*>(this)->at(name);
  }

  size_t size() const { return entries_.size(); }
  const std::string& name(size_t i) const { return entries_[i].first; }
  BasicTensor<S>& tensor(size_t i) { return entries_[i].second; }
  const BasicTensor<S>& tensor(size_t i) const { return entries_[i].second; }

  int64_t total_numel() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  Snapshot snapshot() const {
    Snapshot snap;
    snap.reserve(entries_.size());
    for (const auto& [name, t] : entries_) snap.push_back(t.data());
    return snap;
  }

  void restore(const Snapshot& snap) {
    if (snap.size() != entries_.size())
      fail(Err::Config, "params: snapshot entry count mismatch");
    for (size_t i = 0; i < entries_.size(); ++i) {
      if (snap[i].size() != entries_[i].second.data().size())
        fail(Err::Config, "params: snapshot size mismatch for '" + entries_[i].first + "'");
      entries_[i].second.data() = snap[i];
    }
  }

  // Deep copy with fresh tensors (used for worker-local replicas).
  BasicModelParams clone() const {
    BasicModelParams out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone());
    return out;
  }

 private:
  std::vector<std::pair<std::string, BasicTensor<S>>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ModelParams = BasicModelParams<float>;

}  // namespace lcat
