#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mimdet/tensor.hpp"

namespace mimdet {

/// Receives (name, shape) for every parameter a module declares. The same
/// declaration code backs allocation, counting, and optimizer wiring.
using ParamSink = std::function<void(const std::string&, const Shape&)>;

/// Ordered collection of named tensors.
class ParamStore {
 public:
  Tensor& add(const std::string& name, const Shape& shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = order_.size();
    order_.push_back(name);
    tensors_.emplace_back(shape);
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return tensors_[it->second];
  }
  const Tensor& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  long total_elements() const {
    long n = 0;
    for (const Tensor& t : tensors_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Resolves parameter names to Values during a forward pass. With a tape,
/// each parameter becomes a leaf on first lookup so gradients can be read
/// back by name afterwards.
class ParamRef {
 public:
  explicit ParamRef(const ParamStore& store, Tape* tape = nullptr)
      : store_(&store), tape_(tape) {}

  Value operator()(const std::string& name) const {
    Value v{store_->at(name), -1};
    if (tape_) {
      auto it = ids_.find(name);
      if (it == ids_.end()) {
        v.id = tape_->leaf(v.v.shape());
        ids_.emplace(name, v.id);
      } else {
        v.id = it->second;
      }
    }
    return v;
  }

  /// Leaf id per parameter actually touched by the pass (-1 reported as absent).
  const std::unordered_map<std::string, int>& leaf_ids() const { return ids_; }

 private:
  const ParamStore* store_;
  Tape* tape_;
  mutable std::unordered_map<std::string, int> ids_;
};

/// Count of scalars a declaration emits, without allocating anything.
inline long count_params(const std::function<void(ParamSink)>& declare) {
  long total = 0;
  declare([&total](const std::string&, const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    total += n;
  });
  return total;
}

}  // namespace mimdet
