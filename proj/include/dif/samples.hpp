#pragma once

#include "dif/container.hpp"

namespace dif {

/// Supervision for one shape: surface points with unit normals and
/// free-space points with ground-truth signed distances.
struct ShapeSampleSet {
  Eigen::Matrix3Xd surface_points;
  Eigen::Matrix3Xd surface_normals;
  Eigen::Matrix3Xd free_points;
  Eigen::VectorXd free_sdf;

  Eigen::Index surface_count() const { return surface_points.cols(); }
  Eigen::Index free_count() const { return free_points.cols(); }

  void validate() const {
    if (surface_normals.cols() != surface_points.cols())
      throw StructuralError("surface samples must carry one normal per point");
    if (free_sdf.size() != free_points.cols())
      throw StructuralError("free samples must carry one ground-truth SDF value per point");
  }

  /// Random subset (with replacement when the set is smaller than requested).
  ShapeSampleSet subsample(Eigen::Index n_surface, Eigen::Index n_free, std::mt19937_64& rng) const {
    ShapeSampleSet s;
    s.surface_points.resize(3, n_surface);
    s.surface_normals.resize(3, n_surface);
    s.free_points.resize(3, n_free);
    s.free_sdf.resize(n_free);
    auto pick = [&](Eigen::Index total, Eigen::Index want) {
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(total));
      for (Eigen::Index i = 0; i < total; ++i) idx[static_cast<std::size_t>(i)] = i;
      if (want <= total) {
        // partial Fisher-Yates
        for (Eigen::Index i = 0; i < want; ++i) {
          const auto j = i + static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(total - i)));
          std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        idx.resize(static_cast<std::size_t>(want));
      } else {
        idx.resize(static_cast<std::size_t>(want));
        for (auto& v : idx) v = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(total)));
      }
      return idx;
    };
    if (n_surface > 0) {
      if (surface_count() == 0) throw StructuralError("shape has no surface samples");
      const auto si = pick(surface_count(), n_surface);
      for (Eigen::Index i = 0; i < n_surface; ++i) {
        s.surface_points.col(i) = surface_points.col(si[static_cast<std::size_t>(i)]);
        s.surface_normals.col(i) = surface_normals.col(si[static_cast<std::size_t>(i)]);
      }
    }
    if (n_free > 0) {
      if (free_count() == 0) throw StructuralError("shape has no free-space samples");
      const auto fi = pick(free_count(), n_free);
      for (Eigen::Index i = 0; i < n_free; ++i) {
        s.free_points.col(i) = free_points.col(fi[static_cast<std::size_t>(i)]);
        s.free_sdf[i] = free_sdf[fi[static_cast<std::size_t>(i)]];
      }
    }
    return s;
  }
};

inline void save_samples(const std::filesystem::path& path, const ShapeSampleSet& s) {
  Container c;
  Eigen::MatrixXd surf(s.surface_count(), 6);
  surf.leftCols(3) = s.surface_points.transpose();
  surf.rightCols(3) = s.surface_normals.transpose();
  Eigen::MatrixXd free(s.free_count(), 4);
  free.leftCols(3) = s.free_points.transpose();
  free.col(3) = s.free_sdf;
  c.put("surface", std::move(surf));
  c.put("free", std::move(free));
  write_container(path, c);
}

inline ShapeSampleSet load_samples(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const Eigen::MatrixXd& surf = c.get("surface");
  const Eigen::MatrixXd& free = c.get("free");
  if ((surf.rows() > 0 && surf.cols() != 6) || (free.rows() > 0 && free.cols() != 4))
    throw DataError(path.string() + ": sample records have unexpected widths");
  ShapeSampleSet s;
  s.surface_points = surf.leftCols(3).transpose();
  s.surface_normals = surf.rightCols(3).transpose();
  s.free_points = free.leftCols(3).transpose();
  s.free_sdf = free.col(3);
  return s;
}

}  // namespace dif
