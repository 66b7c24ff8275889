#pragma once

// Point clouds and their PLY serialization (ASCII and binary little-endian,
// vertex element with float or double x, y, z; other properties skipped).

#include "dif/common.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dif {

enum class Frame { Camera, Canonical, EstimatorCanonical };

inline const char* to_string(Frame f) {
  switch (f) {
    case Frame::Camera: return "camera";
    case Frame::Canonical: return "canonical";
    case Frame::EstimatorCanonical: return "estimator-canonical";
  }
  return "?";
}

struct PointCloud {
  std::vector<Vec3> points;
  Frame frame = Frame::Canonical;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  Eigen::Matrix3Xd matrix() const {
    Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = points[i];
    return m;
  }

  static PointCloud from_matrix(const Eigen::Matrix3Xd& m, Frame f) {
    PointCloud pc;
    pc.frame = f;
    pc.points.reserve(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.cols(); ++i) pc.points.emplace_back(m.col(i));
    return pc;
  }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }

  void validate() const {
    if (points.empty()) throw StructuralError("point cloud is empty");
    for (std::size_t i = 0; i < points.size(); ++i)
      if (!points[i].allFinite()) throw NumericError("point " + std::to_string(i) + " is not finite");
  }
};

enum class PlyFormat { Ascii, BinaryLittleEndian };

inline void write_ply(const std::filesystem::path& path, const PointCloud& pc,
                      PlyFormat format = PlyFormat::BinaryLittleEndian) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << "ply\nformat " << (format == PlyFormat::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
     << "element vertex " << pc.size() << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  if (format == PlyFormat::Ascii) {
    char buf[96];
    for (const auto& p : pc.points) {
      std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", static_cast<double>(static_cast<float>(p.x())),
                    static_cast<double>(static_cast<float>(p.y())), static_cast<double>(static_cast<float>(p.z())));
      os << buf;
    }
  } else {
    static_assert(std::endian::native == std::endian::little);
    for (const auto& p : pc.points) {
      const float v[3] = {static_cast<float>(p.x()), static_cast<float>(p.y()), static_cast<float>(p.z())};
      os.write(reinterpret_cast<const char*>(v), sizeof v);
    }
  }
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

inline PointCloud read_ply(const std::filesystem::path& path, Frame frame = Frame::Canonical) {
  std::ifstream is(path, std::ios::binary);
  const std::string p = path.string();
  if (!is) throw DataError("cannot open '" + p + "'");
  std::string line;
  std::getline(is, line);
  if (line != "ply") throw DataError(p + ": not a PLY file");
  bool ascii = false, in_vertex = false;
  std::size_t nverts = 0;
  struct Prop {
    std::string name;
    std::size_t size;
    bool is_double;
    bool is_float;
  };
  std::vector<Prop> props;
  bool seen_vertex = false;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string f;
      ls >> f;
      if (f == "ascii") ascii = true;
      else if (f != "binary_little_endian") throw DataError(p + ": unsupported PLY format '" + f + "'");
    } else if (kw == "element") {
      std::string name;
      ls >> name;
      if (seen_vertex && name != "vertex") {
        in_vertex = false;
        continue;  // trailing elements are ignored
      }
      in_vertex = name == "vertex";
      if (in_vertex) {
        ls >> nverts;
        seen_vertex = true;
      } else {
        throw DataError(p + ": vertex element must come first");
      }
    } else if (kw == "property" && in_vertex) {
      std::string type, name;
      ls >> type;
      if (type == "list") throw DataError(p + ": list properties on vertices are not supported");
      ls >> name;
      std::size_t size = 0;
      bool dbl = false, flt = false;
      if (type == "float" || type == "float32") size = 4, flt = true;
      else if (type == "double" || type == "float64") size = 8, dbl = true;
      else if (type == "uchar" || type == "char" || type == "uint8" || type == "int8") size = 1;
      else if (type == "short" || type == "ushort" || type == "int16" || type == "uint16") size = 2;
      else if (type == "int" || type == "uint" || type == "int32" || type == "uint32") size = 4;
      else throw DataError(p + ": unknown property type '" + type + "'");
      props.push_back({name, size, dbl, flt});
    } else if (kw == "end_header") {
      break;
    }
  }
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (props[i].name == "x") ix = static_cast<int>(i);
    if (props[i].name == "y") iy = static_cast<int>(i);
    if (props[i].name == "z") iz = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw DataError(p + ": missing x/y/z vertex properties");
  for (int i : {ix, iy, iz})
    if (!props[static_cast<std::size_t>(i)].is_float && !props[static_cast<std::size_t>(i)].is_double)
      throw DataError(p + ": coordinates must be float or double");
  PointCloud pc;
  pc.frame = frame;
  pc.points.resize(nverts);
  for (std::size_t v = 0; v < nverts; ++v) {
    double vals[3] = {0, 0, 0};
    if (ascii) {
      std::vector<double> row(props.size());
      for (auto& x : row)
        if (!(is >> x)) throw DataError(p + ": truncated ASCII vertex data");
      vals[0] = row[static_cast<std::size_t>(ix)];
      vals[1] = row[static_cast<std::size_t>(iy)];
      vals[2] = row[static_cast<std::size_t>(iz)];
    } else {
      for (std::size_t i = 0; i < props.size(); ++i) {
        char buf[8];
        is.read(buf, static_cast<std::streamsize>(props[i].size));
        if (!is) throw DataError(p + ": truncated binary vertex data");
        double val = 0;
        if (props[i].is_double) {
          std::memcpy(&val, buf, 8);
        } else if (props[i].is_float) {
          float f;
          std::memcpy(&f, buf, 4);
          val = f;
        }
        if (static_cast<int>(i) == ix) vals[0] = val;
        if (static_cast<int>(i) == iy) vals[1] = val;
        if (static_cast<int>(i) == iz) vals[2] = val;
      }
    }
    pc.points[v] = Vec3(vals[0], vals[1], vals[2]);
  }
  return pc;
}

}  // namespace dif
