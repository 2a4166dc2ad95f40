#pragma once

// Checkpoints and CSV rows.
//
// Checkpoint layout: a text header of `key value` lines starting with the
// magic line SHARPMAML1 and ending with `payload f64le`, then dim raw
// little-endian doubles.

#include "sharpmaml/config.hpp"
#include "sharpmaml/core.hpp"
#include "sharpmaml/meta.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace sharpmaml {

inline constexpr const char* checkpoint_magic = "SHARPMAML1";

struct Checkpoint {
  std::string layout;
  std::uint64_t seed = 0;
  std::uint64_t iter = 0;
  std::uint64_t trace_count = 0;
  double trace_sum = 0.0;
  ParamVector theta;
};

inline std::string format_hex(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

inline double parse_hex(const std::string& s) {
  double v = 0.0;
  const bool neg = !s.empty() && s[0] == '-';
  const char* first = s.data() + (neg ? 1 : 0);
  auto res = std::from_chars(first, s.data() + s.size(), v, std::chars_format::hex);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("bad hex float '" + s + "'");
  return neg ? -v : v;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << checkpoint_magic << "\n"
      << "layout " << ck.layout << "\n"
      << "dim " << ck.theta.size() << "\n"
      << "seed " << ck.seed << "\n"
      << "iter " << ck.iter << "\n"
      << "trace_count " << ck.trace_count << "\n"
      << "trace_sum " << format_hex(ck.trace_sum) << "\n"
      << "payload f64le\n";
  for (Eigen::Index i = 0; i < ck.theta.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(ck.theta[i]);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != checkpoint_magic) throw IoError("'" + path + "' is not a checkpoint");
  Checkpoint ck;
  long long dim = -1;
  for (;;) {
    if (!std::getline(in, line)) throw IoError("truncated checkpoint header in '" + path + "'");
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string value = sp == std::string::npos ? "" : line.substr(sp + 1);
    try {
      if (key == "layout") ck.layout = value;
      else if (key == "dim") dim = parse_int(value, key);
      else if (key == "seed") ck.seed = static_cast<std::uint64_t>(std::stoull(value));
      else if (key == "iter") ck.iter = static_cast<std::uint64_t>(std::stoull(value));
      else if (key == "trace_count") ck.trace_count = static_cast<std::uint64_t>(std::stoull(value));
      else if (key == "trace_sum") ck.trace_sum = parse_hex(value);
      else if (key == "payload") {
        if (value != "f64le") throw IoError("unsupported payload '" + value + "'");
        break;
      } else throw IoError("unknown checkpoint field '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw IoError("bad checkpoint field '" + key + "'");
    } catch (const ConfigError& e) {
      throw IoError(e.what());
    }
  }
  if (dim < 0) throw IoError("checkpoint without dim");
  ck.theta.resize(dim);
  for (long long i = 0; i < dim; ++i) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw IoError("truncated checkpoint payload in '" + path + "'");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    ck.theta[i] = std::bit_cast<double>(bits);
  }
  return ck;
}

/// Checkpoint whose layout must match `model`.
inline Checkpoint load_checkpoint_for(const std::string& path, const ModelSpec& model) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.layout != model.layout_string() || static_cast<std::size_t>(ck.theta.size()) != model.dim())
    throw ConfigError("checkpoint layout '" + ck.layout + "' does not match model '" + model.layout_string() + "'");
  return ck;
}

// ---------------------------------------------------------------------------
// CSV.

inline constexpr const char* trace_header =
    "iter,meta_loss,grad_norm_sq,running_avg_grad_norm_sq,wall_ms,eps_norm,mean_eps_m_norm,degenerate_flags";
inline constexpr const char* eval_header = "seed,variant,iter,pre_adapt_metric,post_adapt_metric,gen_gap";
inline constexpr const char* landscape_header = "i,j,x,y,loss,diverged";
inline constexpr const char* sharpness_header = "alpha,sharpness,argmax_norm,restarts";
inline constexpr const char* bound_header = "alpha,empirical_term,sqrt_term,gamma_A,bound";

inline std::string trace_row(const StepReport& r, double wall_ms) {
  return std::to_string(r.iter) + "," + format_double(r.meta_loss) + "," + format_double(r.grad_norm_sq) + "," +
         format_double(r.running_avg_grad_norm_sq) + "," + format_double(wall_ms) + "," + format_double(r.eps_norm) +
         "," + format_double(r.mean_eps_m_norm) + "," + std::to_string(r.degenerate_flags);
}

inline std::ofstream open_output(const std::string& path, std::ios::openmode mode = std::ios::trunc) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream out(path, std::ios::out | mode);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace sharpmaml
