#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "somala/errors.hpp"

namespace somala {

/// Maps named parameter blocks to contiguous ranges of a flat vector.
/// Blocks are disjoint and cover [0, dim) in declaration order.
class BlockLayout {
 public:
  struct Block {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
  };

  BlockLayout() = default;

  void add_block(std::string name, Eigen::Index size) {
    Block b;
    b.name = std::move(name);
    b.offset = dim_;
    b.size = size;
    dim_ += size;
    blocks_.push_back(std::move(b));
  }

  Eigen::Index dim() const { return dim_; }
  const std::vector<Block>& blocks() const { return blocks_; }

  bool has_block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return true;
    return false;
  }

  const Block& block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw ConfigError("unknown parameter block: " + name);
  }

 private:
  std::vector<Block> blocks_;
  Eigen::Index dim_ = 0;
};

/// Flat parameter vector plus its shared block layout.
struct ParamVector {
  Eigen::VectorXd values;
  std::shared_ptr<const BlockLayout> layout;

  ParamVector() = default;
  ParamVector(Eigen::VectorXd v, std::shared_ptr<const BlockLayout> l)
      : values(std::move(v)), layout(std::move(l)) {
    if (layout && values.size() != layout->dim())
      throw ConfigError("parameter vector length does not match layout");
  }

  static ParamVector zeros(std::shared_ptr<const BlockLayout> l) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(l->dim());
    return ParamVector(std::move(v), std::move(l));
  }

  Eigen::Index dim() const { return values.size(); }

  Eigen::VectorBlock<Eigen::VectorXd> block(const std::string& name) {
    const auto& b = layout->block(name);
    return values.segment(b.offset, b.size);
  }
  Eigen::VectorBlock<const Eigen::VectorXd> block(const std::string& name) const {
    const auto& b = layout->block(name);
    return values.segment(b.offset, b.size);
  }
};

}  // namespace somala
