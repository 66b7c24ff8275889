#pragma once

// Little-endian binary container for named real matrices.
//
//   offset  type        field
//   0       char[4]     magic "DIFC"
//   4       u32         version (1)
//   8       u32         record count
//           per record: u32 name length, name bytes (no terminator),
//                       u32 rows, u32 cols
//           per record, in table order: rows*cols f64, row-major
//
// Network weights are stored with one record per tensor:
//   <prefix>L<k>.W (out x in), <prefix>L<k>.b (out x 1),
//   <prefix>L<k>.meta (1 x 2: activation code, omega).

#include "dif/autodiff.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace dif {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr char kContainerMagic[4] = {'D', 'I', 'F', 'C'};
inline constexpr std::uint32_t kContainerVersion = 1;

class Container {
 public:
  void put(const std::string& name, Eigen::MatrixXd m) {
    if (index_.count(name) == 0) {
      index_[name] = records_.size();
      records_.push_back({name, std::move(m)});
    } else {
      records_[index_[name]].second = std::move(m);
    }
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Eigen::MatrixXd& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("container has no record '" + name + "'");
    return records_[it->second].second;
  }

  const std::vector<std::pair<std::string, Eigen::MatrixXd>>& records() const { return records_; }

 private:
  std::vector<std::pair<std::string, Eigen::MatrixXd>> records_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
void put_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_raw(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError(path + ": truncated container");
  return v;
}

}  // namespace detail

inline void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os.write(kContainerMagic, 4);
  detail::put_raw<std::uint32_t>(os, kContainerVersion);
  detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(c.records().size()));
  for (const auto& [name, m] : c.records()) {
    detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    detail::put_raw<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  }
  for (const auto& [name, m] : c.records()) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
  }
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  const std::string p = path.string();
  if (!is) throw DataError("cannot open '" + p + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kContainerMagic, 4) != 0) throw DataError(p + ": bad container magic");
  const auto version = detail::get_raw<std::uint32_t>(is, p);
  if (version != kContainerVersion) throw DataError(p + ": unsupported container version " + std::to_string(version));
  const auto count = detail::get_raw<std::uint32_t>(is, p);
  std::vector<std::tuple<std::string, std::uint32_t, std::uint32_t>> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_raw<std::uint32_t>(is, p);
    if (len > (1u << 16)) throw DataError(p + ": implausible record name length");
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rows = detail::get_raw<std::uint32_t>(is, p);
    const auto cols = detail::get_raw<std::uint32_t>(is, p);
    table.emplace_back(std::move(name), rows, cols);
  }
  Container c;
  for (const auto& [name, rows, cols] : table) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    is.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
    if (!is) throw DataError(p + ": truncated payload for '" + name + "'");
    c.put(name, rm);
  }
  return c;
}

inline void put_network(Container& c, const std::string& prefix, const MlpParams& p) {
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const std::string base = prefix + "L" + std::to_string(k);
    const Layer& l = p.layers[k];
    c.put(base + ".W", l.weight);
    c.put(base + ".b", l.bias);
    Eigen::MatrixXd meta(1, 2);
    meta << static_cast<double>(l.act), l.omega;
    c.put(base + ".meta", meta);
  }
}

inline MlpParams get_network(const Container& c, const std::string& prefix) {
  MlpParams p;
  for (std::size_t k = 0;; ++k) {
    const std::string base = prefix + "L" + std::to_string(k);
    if (!c.has(base + ".W")) break;
    Layer l;
    l.weight = c.get(base + ".W");
    l.bias = c.get(base + ".b");
    const Eigen::MatrixXd& meta = c.get(base + ".meta");
    if (meta.size() != 2) throw DataError("bad layer meta for " + base);
    const int code = static_cast<int>(meta(0, 0));
    if (code < 0 || code > 2) throw DataError("unknown activation code for " + base);
    l.act = static_cast<Activation>(code);
    l.omega = meta(0, 1);
    p.layers.push_back(std::move(l));
  }
  if (p.layers.empty()) throw DataError("container has no network under prefix '" + prefix + "'");
  p.validate();
  return p;
}

}  // namespace dif
