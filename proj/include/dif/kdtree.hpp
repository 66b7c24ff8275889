#pragma once

#include "dif/common.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace dif {

/// Exact nearest-neighbour search over a fixed point set. Distances are
/// computed as (q - p).squaredNorm(), the same expression a brute-force scan
/// uses, so results agree bit for bit.
class KdTree {
 public:
  struct Hit {
    double dist2 = std::numeric_limits<double>::infinity();
    std::size_t index = 0;
  };

  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points) : pts_(std::move(points)) {
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), std::size_t{0});
    if (!pts_.empty()) build(0, pts_.size());
  }

  std::size_t size() const { return pts_.size(); }
  const std::vector<Vec3>& points() const { return pts_; }

  Hit nearest(const Vec3& q) const {
    if (pts_.empty()) throw StructuralError("nearest-neighbour query on an empty tree");
    Hit best;
    search(0, q, best);
    return best;
  }

 private:
  struct Node {
    std::size_t begin, end;
    int axis = -1;  // -1 marks a leaf
    double split = 0;
    std::size_t left = 0, right = 0;
  };
  static constexpr std::size_t kLeaf = 8;

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({begin, end});
    if (end - begin <= kLeaf) return id;
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(pts_[idx_[i]]);
      hi = hi.cwiseMax(pts_[idx_[i]]);
    }
    Eigen::Index axis;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(begin), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return pts_[a][axis] < pts_[b][axis]; });
    const double split = pts_[idx_[mid]][axis];
    const std::size_t l = build(begin, mid);
    const std::size_t r = build(mid, end);
    nodes_[id].axis = static_cast<int>(axis);
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(std::size_t id, const Vec3& q, Hit& best) const {
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const double d = (q - pts_[idx_[i]]).squaredNorm();
        if (d < best.dist2 || (d == best.dist2 && idx_[i] < best.index)) best = {d, idx_[i]};
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const std::size_t near = diff < 0 ? n.left : n.right, far = diff < 0 ? n.right : n.left;
    search(near, q, best);
    // <= keeps ties reachable so the smallest index wins, as in a linear scan.
    if (diff * diff <= best.dist2) search(far, q, best);
  }

  std::vector<Vec3> pts_;
  std::vector<std::size_t> idx_;
  std::vector<Node> nodes_;
};

}  // namespace dif
