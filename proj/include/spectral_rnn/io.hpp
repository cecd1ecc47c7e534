#pragma once

// Artifact files: SPT1 binary tensors, CSV sequences and the small JSON
// sidecars the CLI writes next to them.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "moments.hpp"
#include "sequence.hpp"
#include "tensor.hpp"

namespace srnn {

static_assert(std::endian::native == std::endian::little,
              "SPT1 files are written in native order, which must be little-endian");

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "io", "cannot open " + path.string(), ErrorKind::io);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "io", "cannot write " + path.string(), ErrorKind::io);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), "io", "write failed for " + path.string(), ErrorKind::io);
}

// ---------------------------------------------------------------------------
// SPT1: "SPT1", u32 order, order x u64 dims, f64 payload (last mode fastest).

inline std::string encode_spt1(const DenseTensor& T) {
  std::string out = "SPT1";
  auto put = [&](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const std::uint32_t order = static_cast<std::uint32_t>(T.order());
  put(&order, 4);
  for (Index d : T.dims) {
    const std::uint64_t v = d;
    put(&v, 8);
  }
  put(T.data.data(), T.data.size() * sizeof(double));
  return out;
}

inline DenseTensor decode_spt1(const std::string& bytes, const std::string& what = "tensor") {
  auto bad = [&](const std::string& why) { fail("io", what + ": " + why, ErrorKind::io); };
  if (bytes.size() < 8 || bytes.compare(0, 4, "SPT1") != 0) bad("missing SPT1 magic");
  std::uint32_t order;
  std::memcpy(&order, bytes.data() + 4, 4);
  if (order == 0 || order > 64) bad("invalid order");
  std::size_t pos = 8;
  if (bytes.size() < pos + 8 * order) bad("truncated header");
  std::vector<Index> dims(order);
  std::uint64_t total = 1;
  for (auto& d : dims) {
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    if (v == 0) bad("zero dimension");
    if (total > (std::uint64_t{1} << 40) / v) bad("tensor too large");
    total *= v;
    d = v;
  }
  if (bytes.size() != pos + total * sizeof(double)) bad("payload size does not match dims");
  std::vector<double> data(total);
  std::memcpy(data.data(), bytes.data() + pos, total * sizeof(double));
  return DenseTensor(std::move(dims), std::move(data));
}

inline void write_spt1(const fs::path& path, const DenseTensor& T) {
  write_file(path, encode_spt1(T));
}
inline DenseTensor read_spt1(const fs::path& path) {
  return decode_spt1(read_file(path), path.string());
}
inline void write_matrix(const fs::path& path, const Matrix& M) { write_spt1(path, from_matrix(M)); }
inline Matrix read_matrix(const fs::path& path) {
  const DenseTensor T = read_spt1(path);
  require(T.order() == 2, "io", path.string() + ": expected a matrix (order 2)", ErrorKind::io);
  return to_matrix(T);
}
inline void write_vector(const fs::path& path, const Vector& v) { write_spt1(path, from_vector(v)); }

// ---------------------------------------------------------------------------
// Sequences. SPT1: one file per field (x, y, and h/z when present), each
// stored d x n. CSV: header t,x0..,y0.. and one row per position.

enum class Format { spt1, csv };

inline Format parse_format(const std::string& s) {
  if (s == "spt1") return Format::spt1;
  if (s == "csv") return Format::csv;
  fail("io", "unknown format '" + s + "' (expected spt1 or csv)", ErrorKind::config);
}

inline std::string sequence_csv(const SequenceData& s) {
  std::ostringstream os;
  os.precision(17);
  os << 't';
  for (Index i = 0; i < static_cast<Index>(s.x.rows()); ++i) os << ",x" << i;
  for (Index i = 0; i < static_cast<Index>(s.y.rows()); ++i) os << ",y" << i;
  os << '\n';
  for (Index t = 0; t < s.n(); ++t) {
    os << t;
    for (Index i = 0; i < static_cast<Index>(s.x.rows()); ++i) os << ',' << s.x(i, t);
    for (Index i = 0; i < static_cast<Index>(s.y.rows()); ++i) os << ',' << s.y(i, t);
    os << '\n';
  }
  return os.str();
}

inline SequenceData parse_sequence_csv(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "io", what + ": empty file", ErrorKind::io);
  Index dx = 0, dy = 0;
  {
    std::istringstream hs(line);
    std::string col;
    std::getline(hs, col, ',');
    require(col == "t", "io", what + ": header must start with t", ErrorKind::io);
    while (std::getline(hs, col, ',')) {
      if (!col.empty() && col[0] == 'x' && dy == 0) ++dx;
      else if (!col.empty() && col[0] == 'y') ++dy;
      else fail("io", what + ": unexpected column '" + col + "'", ErrorKind::io);
    }
  }
  require(dx > 0 && dy > 0, "io", what + ": need x and y columns", ErrorKind::io);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> r;
    std::getline(ls, cell, ',');
    while (std::getline(ls, cell, ',')) {
      try {
        r.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail("io", what + ": bad number '" + cell + "'", ErrorKind::io);
      }
    }
    require(r.size() == dx + dy, "io", what + ": row with wrong column count", ErrorKind::io);
    rows.push_back(std::move(r));
  }
  SequenceData s;
  s.x.resize(dx, rows.size());
  s.y.resize(dy, rows.size());
  for (Index t = 0; t < rows.size(); ++t) {
    for (Index i = 0; i < dx; ++i) s.x(i, t) = rows[t][i];
    for (Index i = 0; i < dy; ++i) s.y(i, t) = rows[t][dx + i];
  }
  return s;
}

// Returns the written file names relative to `dir`.
inline std::vector<std::string> write_sequence(const fs::path& dir, const SequenceData& s,
                                               Format f) {
  if (f == Format::csv) {
    write_file(dir / "sequence.csv", sequence_csv(s));
    return {"sequence.csv"};
  }
  std::vector<std::string> files{"x.spt1", "y.spt1"};
  write_matrix(dir / "x.spt1", s.x);
  write_matrix(dir / "y.spt1", s.y);
  if (s.h.size()) {
    write_matrix(dir / "h.spt1", s.h);
    files.push_back("h.spt1");
  }
  if (s.z.size()) {
    write_matrix(dir / "z.spt1", s.z);
    files.push_back("z.spt1");
  }
  return files;
}

inline SequenceData read_sequence(const fs::path& dir) {
  if (fs::exists(dir / "sequence.csv"))
    return parse_sequence_csv(read_file(dir / "sequence.csv"), (dir / "sequence.csv").string());
  require(fs::exists(dir / "x.spt1") && fs::exists(dir / "y.spt1"), "io",
          "no sequence found in " + dir.string() + " (need x.spt1 and y.spt1 or sequence.csv)",
          ErrorKind::io);
  SequenceData s;
  s.x = read_matrix(dir / "x.spt1");
  s.y = read_matrix(dir / "y.spt1");
  require(s.x.cols() == s.y.cols(), "io", "x and y lengths differ in " + dir.string(),
          ErrorKind::io);
  return s;
}

// ---------------------------------------------------------------------------
// Moment tensors with their metadata sidecar.

inline json moment_meta(const MomentTensor& m) {
  return json{{"kind", kind_name(m.kind)},
              {"n_used", m.n_used},
              {"shift", m.shift},
              {"se_norm", m.se_norm},
              {"dims", m.value.dims}};
}

inline std::vector<std::string> write_moment(const fs::path& dir, const std::string& stem,
                                             const MomentTensor& m) {
  write_spt1(dir / (stem + ".spt1"), m.value);
  write_file(dir / (stem + ".meta.json"), moment_meta(m).dump(2) + "\n");
  return {stem + ".spt1", stem + ".meta.json"};
}

}  // namespace srnn
