#pragma once

// Flat parameter storage with named 2-D tensors.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace queueseq {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

// Over-aligned storage: Eigen's vectorized reductions split work by address
// alignment, so a fixed alignment keeps sums bit-identical across runs.
using ParamVector = std::vector<double, Eigen::aligned_allocator<double>>;

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw std::invalid_argument("duplicate tensor '" + name + "'");
    if (rows < 1 || cols < 1) throw std::invalid_argument("tensor '" + name + "' needs positive shape");
    TensorInfo t{name, rows, cols, data_.size()};
    data_.resize(data_.size() + t.size(), 0.0);
    tensors_.push_back(t);
    index_[name] = static_cast<int>(tensors_.size()) - 1;
    return index_[name];
  }

  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no tensor named '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  MatMap operator[](int id) {
    const auto& t = tensors_.at(static_cast<std::size_t>(id));
    return MatMap(data_.data() + t.offset, t.rows, t.cols);
  }
  ConstMatMap operator[](int id) const {
    const auto& t = tensors_.at(static_cast<std::size_t>(id));
    return ConstMatMap(data_.data() + t.offset, t.rows, t.cols);
  }
  MatMap operator[](const std::string& name) { return (*this)[id(name)]; }
  ConstMatMap operator[](const std::string& name) const { return (*this)[id(name)]; }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  ParamVector& data() { return data_; }
  const ParamVector& data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  // Same layout, all zeros.
  ParamStore zeros_like() const {
    ParamStore z = *this;
    std::fill(z.data_.begin(), z.data_.end(), 0.0);
    return z;
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_layout(const ParamStore& o) const { return tensors_ == o.tensors_; }

  // Rebuilds the name index after the tensor list was set directly.
  static ParamStore from_layout(const std::vector<TensorInfo>& tensors, std::vector<double> data) {
    ParamStore p;
    std::size_t expected = 0;
    for (const auto& t : tensors) {
      if (t.offset != expected) throw std::invalid_argument("tensor layout is not contiguous");
      expected += t.size();
      p.index_[t.name] = static_cast<int>(p.tensors_.size());
      p.tensors_.push_back(t);
    }
    if (expected != data.size()) throw std::invalid_argument("tensor layout does not match data size");
    p.data_.assign(data.begin(), data.end());
    return p;
  }

 private:
  std::vector<TensorInfo> tensors_;
  ParamVector data_;
  std::map<std::string, int> index_;
};

}  // namespace queueseq
