#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <Eigen/Dense>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "golf/errors.hpp"
#include "golf/lattice.hpp"
#include "golf/oracle.hpp"
#include "golf/sampler.hpp"

namespace golf {
namespace io {

// ---------------------------------------------------------------------------
// Numbers
// ---------------------------------------------------------------------------

// 17 significant digits round-trip every finite double exactly.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

// Strict: the whole field must be one finite decimal number, no padding.
inline bool try_parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

template <typename Int>
inline bool try_parse_int(std::string_view s, Int& out) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
    s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

// ---------------------------------------------------------------------------
// Whole files
// ---------------------------------------------------------------------------

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw data_error("cannot read file: " + path);
  return text;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot open file for writing: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.flush();
  if (!out) throw data_error("cannot write file: " + path);
}

// ---------------------------------------------------------------------------
// CSV matrices
// ---------------------------------------------------------------------------

// Empty fields mark missing cells (value NaN, present false). Lines starting
// with '#' are comments and may only precede the data.
struct CsvTable {
  Eigen::MatrixXd values;
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> present;
  std::vector<std::string> comments;  // '#' and padding stripped

  bool complete() const { return present.all(); }
};

inline CsvTable read_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  CsvTable t;
  std::vector<std::pair<std::size_t, std::string_view>> lines;  // (line number, content)
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line(text.data() + pos,
                          (nl == std::string::npos ? text.size() : nl) - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty())
      throw data_error(path + " line " + std::to_string(line_no) + ": empty line");
    if (line.front() == '#') {
      if (!lines.empty())
        throw data_error(path + " line " + std::to_string(line_no) +
                         ": comment lines must precede the data");
      std::string_view c = line;
      c.remove_prefix(1);
      t.comments.emplace_back(trim(c));
      continue;
    }
    lines.emplace_back(line_no, line);
  }
  if (lines.empty()) throw data_error(path + ": no data rows");

  std::size_t cols = 1;
  for (const char ch : lines[0].second)
    if (ch == ',') ++cols;
  t.values.resize(static_cast<Eigen::Index>(lines.size()), static_cast<Eigen::Index>(cols));
  t.present.resize(t.values.rows(), t.values.cols());
  for (std::size_t r = 0; r < lines.size(); ++r) {
    std::string_view line = lines[r].second;
    std::size_t c = 0, start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::string_view field =
          line.substr(start, comma == std::string_view::npos ? line.size() - start
                                                             : comma - start);
      if (c >= cols)
        throw data_error(path + " line " + std::to_string(lines[r].first) + ": row has " +
                         std::to_string(c + 1) + "+ fields, expected " + std::to_string(cols));
      const Eigen::Index ri = static_cast<Eigen::Index>(r);
      const Eigen::Index ci = static_cast<Eigen::Index>(c);
      if (field.empty()) {
        t.values(ri, ci) = std::numeric_limits<double>::quiet_NaN();
        t.present(ri, ci) = false;
      } else {
        double v;
        if (!try_parse_double(field, v))
          throw data_error(path + " line " + std::to_string(lines[r].first) + ", field " +
                           std::to_string(c + 1) + ": invalid number '" + std::string(field) +
                           "'");
        t.values(ri, ci) = v;
        t.present(ri, ci) = true;
      }
      ++c;
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (c != cols)
      throw data_error(path + " line " + std::to_string(lines[r].first) + ": row has " +
                       std::to_string(c) + " fields, expected " + std::to_string(cols));
  }
  return t;
}

// Reads a matrix that may not have missing fields.
inline Eigen::MatrixXd read_full_matrix(const std::string& path) {
  CsvTable t = read_csv(path);
  if (!t.complete()) throw data_error(path + ": missing fields are not allowed here");
  return std::move(t.values);
}

inline void write_csv(const std::string& path, const Eigen::MatrixXd& m,
                      const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>* present = nullptr,
                      const std::vector<std::string>& comments = {}) {
  if (present && (present->rows() != m.rows() || present->cols() != m.cols()))
    throw invalid_parameter("write_csv: mask shape mismatch");
  std::string out;
  out.reserve(static_cast<std::size_t>(m.size()) * 20 + 64);
  for (const std::string& c : comments) {
    out += "# ";
    out += c;
    out += '\n';
  }
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j > 0) out += ',';
      if (!present || (*present)(i, j)) out += format_double(m(i, j));
    }
    out += '\n';
  }
  write_text_file(path, out);
}

inline void write_int_csv(const std::string& path, const std::vector<std::int64_t>& v) {
  std::string out;
  out.reserve(v.size() * 8);
  for (const std::int64_t x : v) {
    out += std::to_string(x);
    out += '\n';
  }
  write_text_file(path, out);
}

inline std::vector<std::int64_t> read_int_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::vector<std::int64_t> v;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line(text.data() + pos,
                          (nl == std::string::npos ? text.size() : nl) - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::int64_t x;
    if (!try_parse_int(line, x))
      throw data_error(path + " line " + std::to_string(line_no) + ": invalid integer");
    v.push_back(x);
  }
  return v;
}

// ---------------------------------------------------------------------------
// key=value files
// ---------------------------------------------------------------------------

template <typename Err>
inline std::map<std::string, std::string> parse_kv(const std::string& text,
                                                   const std::string& what) {
  std::map<std::string, std::string> kv;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line(text.data() + pos,
                          (nl == std::string::npos ? text.size() : nl) - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Err(what + " line " + std::to_string(line_no) + ": expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string val(trim(line.substr(eq + 1)));
    if (key.empty())
      throw Err(what + " line " + std::to_string(line_no) + ": empty key");
    if (!kv.emplace(key, val).second)
      throw Err(what + " line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  return kv;
}

namespace detail {

inline double kv_double(const std::string& k, const std::string& v) {
  double d;
  if (!try_parse_double(v, d))
    throw config_error("config key '" + k + "': invalid number '" + v + "'");
  return d;
}

inline std::int64_t kv_int64(const std::string& k, const std::string& v) {
  std::int64_t i;
  if (!try_parse_int(v, i))
    throw config_error("config key '" + k + "': invalid integer '" + v + "'");
  return i;
}

inline int kv_int(const std::string& k, const std::string& v) {
  const std::int64_t i = kv_int64(k, v);
  if (i < std::numeric_limits<int>::min() || i > std::numeric_limits<int>::max())
    throw config_error("config key '" + k + "': integer out of range");
  return static_cast<int>(i);
}

inline std::uint64_t kv_u64(const std::string& k, const std::string& v) {
  std::uint64_t u;
  if (!try_parse_int(v, u))
    throw config_error("config key '" + k + "': invalid unsigned integer '" + v + "'");
  return u;
}

inline bool kv_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error("config key '" + k + "': expected true/false, got '" + v + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

// Flat key=value configuration covering every subcommand. Unknown keys are
// rejected. Prior overrides are applied on top of the data-dependent defaults
// once the column coordinates are known.
struct RunConfig {
  McmcConfig mcmc;
  std::map<std::string, double> prior_overrides;
  std::string data_csv, coords_s_csv, coords_x_csv;
  std::string h1_csv, h2_csv;
  std::string truth_csv;
  std::string chain_dir;  // predict input
  bool resume = false;
  double level = 0.95;
  oracle::SimSpec sim;
  int validate_instances = 200;
};

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  const auto kv = parse_kv<config_error>(text, "config");
  using namespace detail;
  for (const auto& [k, v] : kv) {
    if (k == "iterations") rc.mcmc.iterations = kv_int64(k, v);
    else if (k == "burn_in") rc.mcmc.burn_in = kv_double(k, v);
    else if (k == "thinning") rc.mcmc.thinning = kv_int64(k, v);
    else if (k == "prop_sd_beta0") rc.mcmc.prop_sd_beta0 = kv_double(k, v);
    else if (k == "prop_sd_factor") rc.mcmc.prop_sd_factor = kv_double(k, v);
    else if (k == "d") rc.mcmc.d = kv_int(k, v);
    else if (k == "eigen_fraction") rc.mcmc.eigen_fraction = kv_double(k, v);
    else if (k == "kron_d1") rc.mcmc.kron_d1 = kv_int(k, v);
    else if (k == "kron_d2") rc.mcmc.kron_d2 = kv_int(k, v);
    else if (k == "family_s") rc.mcmc.family_s = kernel_family_from_string(v);
    else if (k == "family_x") rc.mcmc.family_x = kernel_family_from_string(v);
    else if (k == "mean") rc.mcmc.mean = mean_kind_from_string(v);
    else if (k == "shared_kernel") rc.mcmc.shared_kernel = kv_bool(k, v);
    else if (k == "seed") { rc.mcmc.seed = kv_u64(k, v); rc.sim.seed = rc.mcmc.seed; }
    else if (k == "init_log_beta0") rc.mcmc.init_log_beta0 = kv_double(k, v);
    else if (k == "init_log_beta") rc.mcmc.init_log_beta = kv_double(k, v);
    else if (k == "init_log_eta") rc.mcmc.init_log_eta = kv_double(k, v);
    else if (k == "init_sigma0_sq") rc.mcmc.init_sigma0_sq = kv_double(k, v);
    else if (k == "imputed_budget") rc.mcmc.imputed_budget = kv_int64(k, v);
    else if (k == "store_coefficients") rc.mcmc.store_coefficients = kv_bool(k, v);
    else if (k == "fix_kernel_params") rc.mcmc.fix_kernel_params = kv_bool(k, v);
    else if (k == "fix_sigma0") rc.mcmc.fix_sigma0 = kv_bool(k, v);
    else if (k == "check_observed") rc.mcmc.check_observed = kv_bool(k, v);
    else if (k == "prior_jr_c1" || k == "prior_jr_c2" || k == "prior_jr_c3" ||
             k == "prior_jr_exp_coef" || k == "prior_beta0_shape" || k == "prior_beta0_rate")
      rc.prior_overrides[k] = kv_double(k, v);
    else if (k == "data") rc.data_csv = v;
    else if (k == "coords_s") rc.coords_s_csv = v;
    else if (k == "coords_x") rc.coords_x_csv = v;
    else if (k == "h1") rc.h1_csv = v;
    else if (k == "h2") rc.h2_csv = v;
    else if (k == "truth") rc.truth_csv = v;
    else if (k == "chain") rc.chain_dir = v;
    else if (k == "resume") rc.resume = kv_bool(k, v);
    else if (k == "level") rc.level = kv_double(k, v);
    else if (k == "sim_n1") rc.sim.n1 = kv_int(k, v);
    else if (k == "sim_n2") rc.sim.n2 = kv_int(k, v);
    else if (k == "sim_n11") rc.sim.n11 = kv_int(k, v);
    else if (k == "sim_n12") rc.sim.n12 = kv_int(k, v);
    else if (k == "sim_kron_d1") rc.sim.kron_d1 = kv_int(k, v);
    else if (k == "sim_kron_d2") rc.sim.kron_d2 = kv_int(k, v);
    else if (k == "sim_family_s") rc.sim.family_s = kernel_family_from_string(v);
    else if (k == "sim_family_x") rc.sim.family_x = kernel_family_from_string(v);
    else if (k == "sim_gamma0") rc.sim.gamma0 = kv_double(k, v);
    else if (k == "sim_gamma0_2") rc.sim.gamma0_2 = kv_double(k, v);
    else if (k == "sim_gamma_rule") {
      if (v == "constant") rc.sim.gamma_rule = oracle::SimSpec::GammaRule::Constant;
      else if (v == "inverse_index") rc.sim.gamma_rule = oracle::SimSpec::GammaRule::InverseIndex;
      else throw config_error("config key 'sim_gamma_rule': expected constant/inverse_index");
    } else if (k == "sim_gamma_x") rc.sim.gamma_x = kv_double(k, v);
    else if (k == "sim_d_true") rc.sim.d_true = kv_int(k, v);
    else if (k == "sim_factor_variance") {
      if (v == "eigen_scaled") rc.sim.variance = oracle::SimSpec::FactorVariance::EigenScaled;
      else if (v == "unit") rc.sim.variance = oracle::SimSpec::FactorVariance::Unit;
      else throw config_error("config key 'sim_factor_variance': expected eigen_scaled/unit");
    } else if (k == "sim_sigma2") rc.sim.sigma2 = kv_double(k, v);
    else if (k == "sim_noise_sd") rc.sim.noise_sd = kv_double(k, v);
    else if (k == "sim_missing") {
      if (v == "none") rc.sim.missing = oracle::SimSpec::Missing::None;
      else if (v == "random") rc.sim.missing = oracle::SimSpec::Missing::Random;
      else if (v == "disk") rc.sim.missing = oracle::SimSpec::Missing::CenterDisk;
      else throw config_error("config key 'sim_missing': expected none/random/disk");
    } else if (k == "sim_missing_param") rc.sim.missing_param = kv_double(k, v);
    else if (k == "sim_mean") {
      if (v == "zero") rc.sim.mean = oracle::SimSpec::Mean::Zero;
      else if (v == "row") rc.sim.mean = oracle::SimSpec::Mean::Row;
      else if (v == "col") rc.sim.mean = oracle::SimSpec::Mean::Col;
      else if (v == "mixed") rc.sim.mean = oracle::SimSpec::Mean::Mixed;
      else throw config_error("config key 'sim_mean': expected zero/row/col/mixed");
    } else if (k == "sim_mean_scale") rc.sim.mean_scale = kv_double(k, v);
    else if (k == "validate_instances") rc.validate_instances = kv_int(k, v);
    else throw config_error("unknown config key '" + k + "'");
  }
  return rc;
}

// Prior overrides sit on top of the data-dependent defaults, so they can only
// be resolved once the column coordinates are available.
inline void apply_prior_overrides(RunConfig& rc, const Eigen::VectorXd& coords_x) {
  if (rc.prior_overrides.empty()) return;
  PriorSpec p = rc.mcmc.priors ? *rc.mcmc.priors : default_priors(coords_x, 1);
  for (const auto& [k, v] : rc.prior_overrides) {
    if (k == "prior_jr_c1") p.jr_c1 = v;
    else if (k == "prior_jr_c2") p.jr_c2 = v;
    else if (k == "prior_jr_c3") p.jr_c3 = v;
    else if (k == "prior_jr_exp_coef") p.jr_exp_coef = v;
    else if (k == "prior_beta0_shape") p.beta0_shape = v;
    else if (k == "prior_beta0_rate") p.beta0_rate = v;
  }
  rc.mcmc.priors = p;
}

// ---------------------------------------------------------------------------
// Lattice files
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<int, int> parse_int_pair(const std::string& path, std::string_view rest) {
  const std::size_t comma = rest.find(',');
  int a, b;
  if (comma == std::string_view::npos || !try_parse_int(trim(rest.substr(0, comma)), a) ||
      !try_parse_int(trim(rest.substr(comma + 1)), b) || a < 1 || b < 1)
    throw data_error(path + ": malformed kron directive");
  return {a, b};
}

}  // namespace detail

// data.csv: n1 x n2 with empty fields at unobserved cells. coords_s.csv: n1
// rows of 1 or 2 coordinates; a leading "# kron=n11,n12" comment declares the
// Kronecker row grid (optionally "# kron_d=d1,d2" for the loading truncation
// written with the data). coords_x.csv: one sorted column.
inline LatticeData read_lattice(const std::string& data_csv, const std::string& coords_s_csv,
                                const std::string& coords_x_csv) {
  LatticeData d;
  CsvTable dm = read_csv(data_csv);
  d.y = std::move(dm.values);
  d.observed = std::move(dm.present);

  CsvTable cs = read_csv(coords_s_csv);
  if (!cs.complete()) throw data_error(coords_s_csv + ": coordinates cannot be missing");
  d.coords_s = std::move(cs.values);
  std::optional<std::pair<int, int>> kr, krd;
  for (const std::string& c : cs.comments) {
    const std::string_view sv = c;
    if (sv.rfind("kron=", 0) == 0)
      kr = detail::parse_int_pair(coords_s_csv, sv.substr(5));
    else if (sv.rfind("kron_d=", 0) == 0)
      krd = detail::parse_int_pair(coords_s_csv, sv.substr(7));
  }
  if (krd && !kr) throw data_error(coords_s_csv + ": kron_d directive without kron");
  if (kr) {
    KronInfo ki;
    ki.n11 = kr->first;
    ki.n12 = kr->second;
    ki.d1 = krd ? krd->first : ki.n11;
    ki.d2 = krd ? krd->second : ki.n12;
    d.kron = ki;
  }

  CsvTable cx = read_csv(coords_x_csv);
  if (cx.values.cols() != 1) throw data_error(coords_x_csv + ": expected a single column");
  if (!cx.complete()) throw data_error(coords_x_csv + ": coordinates cannot be missing");
  d.coords_x = cx.values.col(0);

  d.validate();
  return d;
}

// Writes data.csv / mask.csv / coords_s.csv / coords_x.csv (and truth.csv
// when provided) into dir.
inline void write_lattice(const std::string& dir, const LatticeData& data,
                          const Eigen::MatrixXd* truth = nullptr) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw data_error("cannot create directory: " + dir);
  write_csv(dir + "/data.csv", data.y, &data.observed);
  Eigen::MatrixXd mask(data.y.rows(), data.y.cols());
  for (Eigen::Index j = 0; j < mask.cols(); ++j)
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
      mask(i, j) = data.observed(i, j) ? 1.0 : 0.0;
  write_csv(dir + "/mask.csv", mask);
  std::vector<std::string> cm;
  if (data.kron) {
    cm.push_back("kron=" + std::to_string(data.kron->n11) + "," +
                 std::to_string(data.kron->n12));
    if (data.kron->d1 != data.kron->n11 || data.kron->d2 != data.kron->n12)
      cm.push_back("kron_d=" + std::to_string(data.kron->d1) + "," +
                   std::to_string(data.kron->d2));
  }
  write_csv(dir + "/coords_s.csv", data.coords_s, nullptr, cm);
  write_csv(dir + "/coords_x.csv", data.coords_x);
  if (truth) write_csv(dir + "/truth.csv", *truth);
}

// ---------------------------------------------------------------------------
// Chain directories
// ---------------------------------------------------------------------------
//
// Layout: meta.txt (dims, counters, state vectors, config echo),
// trace_beta0/beta/eta/sigma0.csv, trace_B.csv (when coefficients are
// stored), latent_sum.csv, missing_idx.csv, state_y.csv (+ state_b1/b2.csv),
// h1/h2.csv (when user-supplied), and imputed/ holding one draw_NNNNNN.csv
// per stored draw or sketch.csv with the streaming-estimator state. Only the
// run summary carries timestamps; everything here is deterministic.

namespace detail {

inline std::string join_doubles(const Eigen::VectorXd& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i > 0) s += ',';
    s += format_double(v[i]);
  }
  return s;
}

inline Eigen::VectorXd split_doubles(const std::string& what, const std::string& s) {
  if (s.empty()) return Eigen::VectorXd();
  std::vector<double> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    const std::string_view field(s.data() + start,
                                 (comma == std::string::npos ? s.size() : comma) - start);
    double v;
    if (!try_parse_double(trim(field), v))
      throw data_error(what + ": invalid number '" + std::string(field) + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return Eigen::Map<const Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

inline std::string draw_file(std::int64_t g) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "draw_%06lld.csv", static_cast<long long>(g));
  return buf;
}

}  // namespace detail

inline void save_chain(const std::string& dir, const Chain& chain) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir + "/imputed", ec);
  if (ec) throw data_error("cannot create chain directory: " + dir);
  const McmcConfig& c = chain.config;
  const std::int64_t rows = chain.rows();
  const std::int64_t nu = static_cast<std::int64_t>(chain.missing_idx.size());

  std::string meta;
  const auto put = [&](const char* k, const std::string& v) {
    meta += k;
    meta += '=';
    meta += v;
    meta += '\n';
  };
  const auto put_i = [&](const char* k, std::int64_t v) { put(k, std::to_string(v)); };
  const auto put_d = [&](const char* k, double v) { put(k, format_double(v)); };
  const auto put_b = [&](const char* k, bool v) { put(k, v ? "1" : "0"); };

  put_i("format", 1);
  put_i("n1", chain.n1);
  put_i("n2", chain.n2);
  put_i("d", chain.d);
  put_i("kernel_blocks", chain.kernel_blocks);
  put_i("rows", rows);
  put_i("rows_before", chain.rows_before);
  put_i("trials", chain.trials);
  put_i("post_rows", chain.post_rows);
  put_b("sketch", chain.sketch);
  put_i("missing", nu);
  put_i("accept_beta0", chain.accept_beta0);
  {
    std::string s;
    for (std::size_t i = 0; i < chain.accept_kernel.size(); ++i) {
      if (i > 0) s += ',';
      s += std::to_string(chain.accept_kernel[i]);
    }
    put("accept_kernel", s);
  }
  put_i("b1_cols", chain.b1.cols());
  put_i("b2_cols", chain.b2.cols());
  put_i("state_iteration", chain.state.iteration);
  put_d("state_sigma0_sq", chain.state.sigma0_sq);
  put("state_log_beta0", detail::join_doubles(chain.state.log_beta0));
  put("state_log_beta", detail::join_doubles(chain.state.log_beta));
  put("state_log_eta", detail::join_doubles(chain.state.log_eta));
  put_i("state_b1_rows", chain.state.b1.rows());
  put_i("state_b1_cols", chain.state.b1.cols());
  put_i("state_b2_rows", chain.state.b2.rows());
  put_i("state_b2_cols", chain.state.b2.cols());
  put_i("config_iterations", c.iterations);
  put_d("config_burn_in", c.burn_in);
  put_i("config_thinning", c.thinning);
  put_d("config_prop_sd_beta0", c.prop_sd_beta0);
  put_d("config_prop_sd_factor", c.prop_sd_factor);
  put_i("config_d", c.d);
  put_d("config_eigen_fraction", c.eigen_fraction);
  put_i("config_kron_d1", c.kron_d1);
  put_i("config_kron_d2", c.kron_d2);
  put("config_family_s", to_string(c.family_s));
  put("config_family_x", to_string(c.family_x));
  put("config_mean", to_string(c.mean));
  put_b("config_shared_kernel", c.shared_kernel);
  put("config_seed", std::to_string(c.seed));
  put_d("config_init_log_beta0", c.init_log_beta0);
  put_d("config_init_log_beta", c.init_log_beta);
  put_d("config_init_log_eta", c.init_log_eta);
  put_d("config_init_sigma0_sq", c.init_sigma0_sq);
  put_i("config_imputed_budget", c.imputed_budget);
  put_b("config_store_coefficients", c.store_coefficients);
  put_b("config_fix_kernel_params", c.fix_kernel_params);
  put_b("config_fix_sigma0", c.fix_sigma0);
  put_b("config_check_observed", c.check_observed);
  put_b("config_has_priors", c.priors.has_value());
  if (c.priors) {
    put_d("prior_jr_c1", c.priors->jr_c1);
    put_d("prior_jr_c2", c.priors->jr_c2);
    put_d("prior_jr_c3", c.priors->jr_c3);
    put_d("prior_jr_exp_coef", c.priors->jr_exp_coef);
    put_d("prior_beta0_shape", c.priors->beta0_shape);
    put_d("prior_beta0_rate", c.priors->beta0_rate);
  }
  put_b("config_has_h1", c.h1.size() > 0);
  put_b("config_has_h2", c.h2.size() > 0);
  write_text_file(dir + "/meta.txt", meta);

  if (c.h1.size() > 0) write_csv(dir + "/h1.csv", c.h1);
  if (c.h2.size() > 0) write_csv(dir + "/h2.csv", c.h2);
  if (rows > 0) {
    write_csv(dir + "/trace_beta0.csv", chain.beta0);
    write_csv(dir + "/trace_beta.csv", chain.beta);
    write_csv(dir + "/trace_eta.csv", chain.eta);
    write_csv(dir + "/trace_sigma0.csv", chain.sigma0_sq);
    if (chain.b1.cols() + chain.b2.cols() > 0) {
      Eigen::MatrixXd b(rows, chain.b1.cols() + chain.b2.cols());
      if (chain.b1.cols() > 0) b.leftCols(chain.b1.cols()) = chain.b1;
      if (chain.b2.cols() > 0) b.rightCols(chain.b2.cols()) = chain.b2;
      write_csv(dir + "/trace_B.csv", b);
    }
  }
  write_csv(dir + "/latent_sum.csv", chain.latent_sum);
  if (nu > 0) write_int_csv(dir + "/missing_idx.csv", chain.missing_idx);
  write_csv(dir + "/state_y.csv", chain.state.y);
  if (chain.state.b1.size() > 0) write_csv(dir + "/state_b1.csv", chain.state.b1);
  if (chain.state.b2.size() > 0) write_csv(dir + "/state_b2.csv", chain.state.b2);

  if (chain.sketch) {
    Eigen::MatrixXd s(nu, 33);
    const auto pack = [&](Eigen::Index k, int off, const P2Quantile& q) {
      s(k, off) = static_cast<double>(q.count());
      for (int i = 0; i < 5; ++i) {
        s(k, off + 1 + i) = q.marker_heights()[i];
        s(k, off + 6 + i) = q.marker_positions()[i];
        s(k, off + 11 + i) = q.marker_targets()[i];
      }
    };
    for (Eigen::Index k = 0; k < nu; ++k) {
      s(k, 0) = chain.sketch_sum[k];
      pack(k, 1, chain.sketch_lo[static_cast<std::size_t>(k)]);
      pack(k, 17, chain.sketch_hi[static_cast<std::size_t>(k)]);
    }
    write_csv(dir + "/imputed/sketch.csv", s);
  } else {
    for (std::int64_t r = 0; r < rows; ++r)
      write_csv(dir + "/imputed/" + detail::draw_file(chain.rows_before + r + 1),
                chain.imputed.row(r));
  }
}

inline Chain load_chain(const std::string& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir + "/lock"))
    throw config_error("chain directory is locked (another writer?): " + dir);
  const std::string meta_path = dir + "/meta.txt";
  if (!fs::exists(meta_path)) throw data_error("missing chain metadata: " + meta_path);
  const auto kv = parse_kv<data_error>(read_text_file(meta_path), "chain meta");
  const auto need = [&](const char* k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw data_error("chain meta: missing key '" + std::string(k) + "'");
    return it->second;
  };
  const auto meta_i = [&](const char* k) {
    std::int64_t v;
    if (!try_parse_int(need(k), v))
      throw data_error("chain meta: key '" + std::string(k) + "' is not an integer");
    return v;
  };
  const auto meta_d = [&](const char* k) {
    double v;
    if (!try_parse_double(need(k), v))
      throw data_error("chain meta: key '" + std::string(k) + "' is not a number");
    return v;
  };
  const auto meta_b = [&](const char* k) { return meta_i(k) != 0; };

  if (meta_i("format") != 1) throw data_error("chain meta: unsupported format");
  Chain ch;
  ch.n1 = static_cast<int>(meta_i("n1"));
  ch.n2 = static_cast<int>(meta_i("n2"));
  ch.d = static_cast<int>(meta_i("d"));
  ch.kernel_blocks = static_cast<int>(meta_i("kernel_blocks"));
  const std::int64_t rows = meta_i("rows");
  ch.rows_before = meta_i("rows_before");
  ch.trials = meta_i("trials");
  ch.post_rows = meta_i("post_rows");
  ch.sketch = meta_b("sketch");
  const std::int64_t nu = meta_i("missing");
  ch.accept_beta0 = meta_i("accept_beta0");
  {
    const std::string& s = need("accept_kernel");
    std::size_t start = 0;
    while (start <= s.size() && !s.empty()) {
      const std::size_t comma = s.find(',', start);
      std::int64_t v;
      const std::string_view f(s.data() + start,
                               (comma == std::string::npos ? s.size() : comma) - start);
      if (!try_parse_int(f, v)) throw data_error("chain meta: malformed accept_kernel");
      ch.accept_kernel.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (static_cast<int>(ch.accept_kernel.size()) != ch.kernel_blocks)
      throw data_error("chain meta: accept_kernel length mismatch");
  }
  const std::int64_t b1_cols = meta_i("b1_cols");
  const std::int64_t b2_cols = meta_i("b2_cols");

  McmcConfig c;
  c.iterations = meta_i("config_iterations");
  c.burn_in = meta_d("config_burn_in");
  c.thinning = meta_i("config_thinning");
  c.prop_sd_beta0 = meta_d("config_prop_sd_beta0");
  c.prop_sd_factor = meta_d("config_prop_sd_factor");
  c.d = static_cast<int>(meta_i("config_d"));
  c.eigen_fraction = meta_d("config_eigen_fraction");
  c.kron_d1 = static_cast<int>(meta_i("config_kron_d1"));
  c.kron_d2 = static_cast<int>(meta_i("config_kron_d2"));
  c.family_s = kernel_family_from_string(need("config_family_s"));
  c.family_x = kernel_family_from_string(need("config_family_x"));
  c.mean = mean_kind_from_string(need("config_mean"));
  c.shared_kernel = meta_b("config_shared_kernel");
  {
    std::uint64_t seed;
    if (!try_parse_int(need("config_seed"), seed))
      throw data_error("chain meta: malformed seed");
    c.seed = seed;
  }
  c.init_log_beta0 = meta_d("config_init_log_beta0");
  c.init_log_beta = meta_d("config_init_log_beta");
  c.init_log_eta = meta_d("config_init_log_eta");
  c.init_sigma0_sq = meta_d("config_init_sigma0_sq");
  c.imputed_budget = meta_i("config_imputed_budget");
  c.store_coefficients = meta_b("config_store_coefficients");
  c.fix_kernel_params = meta_b("config_fix_kernel_params");
  c.fix_sigma0 = meta_b("config_fix_sigma0");
  c.check_observed = meta_b("config_check_observed");
  if (meta_b("config_has_priors")) {
    PriorSpec p;
    p.jr_c1 = meta_d("prior_jr_c1");
    p.jr_c2 = meta_d("prior_jr_c2");
    p.jr_c3 = meta_d("prior_jr_c3");
    p.jr_exp_coef = meta_d("prior_jr_exp_coef");
    p.beta0_shape = meta_d("prior_beta0_shape");
    p.beta0_rate = meta_d("prior_beta0_rate");
    c.priors = p;
  }
  if (meta_b("config_has_h1")) c.h1 = read_full_matrix(dir + "/h1.csv");
  if (meta_b("config_has_h2")) c.h2 = read_full_matrix(dir + "/h2.csv");
  ch.config = c;

  ch.state.iteration = meta_i("state_iteration");
  ch.state.sigma0_sq = meta_d("state_sigma0_sq");
  ch.state.log_beta0 = detail::split_doubles("chain meta state_log_beta0", need("state_log_beta0"));
  ch.state.log_beta = detail::split_doubles("chain meta state_log_beta", need("state_log_beta"));
  ch.state.log_eta = detail::split_doubles("chain meta state_log_eta", need("state_log_eta"));
  ch.state.y = read_full_matrix(dir + "/state_y.csv");
  if (ch.state.y.rows() != ch.n1 || ch.state.y.cols() != ch.n2)
    throw data_error("chain dir: state matrix shape mismatch");
  const std::int64_t sb1r = meta_i("state_b1_rows"), sb1c = meta_i("state_b1_cols");
  const std::int64_t sb2r = meta_i("state_b2_rows"), sb2c = meta_i("state_b2_cols");
  if (sb1r * sb1c > 0) {
    ch.state.b1 = read_full_matrix(dir + "/state_b1.csv");
    if (ch.state.b1.rows() != sb1r || ch.state.b1.cols() != sb1c)
      throw data_error("chain dir: state_b1 shape mismatch");
  }
  if (sb2r * sb2c > 0) {
    ch.state.b2 = read_full_matrix(dir + "/state_b2.csv");
    if (ch.state.b2.rows() != sb2r || ch.state.b2.cols() != sb2c)
      throw data_error("chain dir: state_b2 shape mismatch");
  }

  const Eigen::Index p1 = ch.state.log_beta0.size();
  if (rows > 0) {
    ch.beta0 = read_full_matrix(dir + "/trace_beta0.csv");
    ch.beta = read_full_matrix(dir + "/trace_beta.csv");
    ch.eta = read_full_matrix(dir + "/trace_eta.csv");
    const Eigen::MatrixXd s0 = read_full_matrix(dir + "/trace_sigma0.csv");
    if (ch.beta0.rows() != rows || ch.beta0.cols() != p1 || ch.beta.rows() != rows ||
        ch.beta.cols() != ch.kernel_blocks || ch.eta.rows() != rows ||
        ch.eta.cols() != ch.kernel_blocks || s0.rows() != rows || s0.cols() != 1)
      throw data_error("chain dir: trace shape mismatch");
    ch.sigma0_sq = s0.col(0);
    if (b1_cols + b2_cols > 0) {
      const Eigen::MatrixXd b = read_full_matrix(dir + "/trace_B.csv");
      if (b.rows() != rows || b.cols() != b1_cols + b2_cols)
        throw data_error("chain dir: trace_B shape mismatch");
      ch.b1 = b.leftCols(b1_cols);
      ch.b2 = b.rightCols(b2_cols);
    } else {
      ch.b1.resize(rows, 0);
      ch.b2.resize(rows, 0);
    }
  } else {
    ch.beta0.resize(0, p1);
    ch.beta.resize(0, ch.kernel_blocks);
    ch.eta.resize(0, ch.kernel_blocks);
    ch.sigma0_sq.resize(0);
    ch.b1.resize(0, b1_cols);
    ch.b2.resize(0, b2_cols);
  }

  ch.latent_sum = read_full_matrix(dir + "/latent_sum.csv");
  if (ch.latent_sum.rows() != ch.n1 || ch.latent_sum.cols() != ch.n2)
    throw data_error("chain dir: latent_sum shape mismatch");
  if (nu > 0) {
    ch.missing_idx = read_int_csv(dir + "/missing_idx.csv");
    if (static_cast<std::int64_t>(ch.missing_idx.size()) != nu)
      throw data_error("chain dir: missing_idx length mismatch");
  }

  if (ch.sketch) {
    const Eigen::MatrixXd s = read_full_matrix(dir + "/imputed/sketch.csv");
    if (s.rows() != nu || s.cols() != 33)
      throw data_error("chain dir: sketch state shape mismatch");
    ch.sketch_sum.resize(nu);
    ch.sketch_lo.reserve(static_cast<std::size_t>(nu));
    ch.sketch_hi.reserve(static_cast<std::size_t>(nu));
    const auto unpack = [&](Eigen::Index k, int off, double p) {
      double q[5], pos[5], want[5];
      for (int i = 0; i < 5; ++i) {
        q[i] = s(k, off + 1 + i);
        pos[i] = s(k, off + 6 + i);
        want[i] = s(k, off + 11 + i);
      }
      return P2Quantile::restore(p, static_cast<std::int64_t>(s(k, off)), q, pos, want);
    };
    for (Eigen::Index k = 0; k < nu; ++k) {
      ch.sketch_sum[k] = s(k, 0);
      ch.sketch_lo.push_back(unpack(k, 1, 0.025));
      ch.sketch_hi.push_back(unpack(k, 17, 0.975));
    }
  } else {
    ch.imputed.resize(rows, nu);
    if (nu > 0)
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::string path = dir + "/imputed/" + detail::draw_file(ch.rows_before + r + 1);
        const Eigen::MatrixXd m = read_full_matrix(path);
        if (m.rows() != 1 || m.cols() != nu)
          throw data_error(path + ": draw shape mismatch");
        ch.imputed.row(r) = m.row(0);
      }
  }
  return ch;
}

// ---------------------------------------------------------------------------
// Prediction and metrics files
// ---------------------------------------------------------------------------

inline void write_prediction(const std::string& dir, const Prediction& pred) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw data_error("cannot create directory: " + dir);
  write_csv(dir + "/pred_mean.csv", pred.mean);
  if (pred.has_intervals) {
    write_csv(dir + "/pred_lo.csv", pred.lower);
    write_csv(dir + "/pred_hi.csv", pred.upper);
  }
  if (pred.latent_mean.size() > 0) write_csv(dir + "/pred_latent.csv", pred.latent_mean);
}

inline void write_metrics(const std::string& path, const oracle::Metrics& m) {
  std::string out = "rmse,coverage,length,cells\n";
  const auto field = [&](double v) { out += std::isfinite(v) ? format_double(v) : ""; };
  field(m.rmse);
  out += ',';
  field(m.coverage);
  out += ',';
  field(m.length);
  out += ',';
  out += std::to_string(m.cells);
  out += '\n';
  write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Run summary
// ---------------------------------------------------------------------------

namespace detail {

struct ColStats {
  double mean, sd, q025, q500, q975;
};

inline ColStats column_stats(const Eigen::VectorXd& v) {
  ColStats s{};
  const Eigen::Index n = v.size();
  KahanSum m;
  for (Eigen::Index i = 0; i < n; ++i) m.add(v[i]);
  s.mean = m.value() / static_cast<double>(n);
  // Deviations are scaled by their largest magnitude so the sum of squares
  // cannot overflow even when the draws sit near the double range.
  double scale = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) scale = std::max(scale, std::abs(v[i] - s.mean));
  if (n > 1 && scale > 0.0) {
    KahanSum ss;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double z = (v[i] - s.mean) / scale;
      ss.add(z * z);
    }
    s.sd = scale * std::sqrt(ss.value() / static_cast<double>(n - 1));
  }
  std::vector<double> buf(v.data(), v.data() + n);
  s.q025 = quantile_type7(buf, 0.025);
  s.q500 = quantile_type7(buf, 0.5);
  s.q975 = quantile_type7(buf, 0.975);
  return s;
}

}  // namespace detail

inline std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Tidy per-parameter posterior table over the post-burn-in stored rows.
inline void write_posterior_csv(const std::string& path, const Chain& chain) {
  std::string out = "parameter,mean,sd,q025,q500,q975\n";
  const std::int64_t burn = chain.burn_rows();
  const std::int64_t n = chain.rows() - burn;
  if (n > 0) {
    const auto row = [&](const std::string& name, const Eigen::VectorXd& tail) {
      const detail::ColStats s = detail::column_stats(tail);
      out += name;
      for (const double v : {s.mean, s.sd, s.q025, s.q500, s.q975}) {
        out += ',';
        out += format_double(v);
      }
      out += '\n';
    };
    for (Eigen::Index j = 0; j < chain.beta0.cols(); ++j)
      row("beta0_" + std::to_string(j + 1), chain.beta0.col(j).tail(n));
    for (Eigen::Index j = 0; j < chain.beta.cols(); ++j)
      row("beta_" + std::to_string(j + 1), chain.beta.col(j).tail(n));
    for (Eigen::Index j = 0; j < chain.eta.cols(); ++j)
      row("eta_" + std::to_string(j + 1), chain.eta.col(j).tail(n));
    row("sigma0_sq", chain.sigma0_sq.tail(n));
  }
  write_text_file(path, out);
}

// Human-readable run report. The only output with timestamps and timings;
// every other artifact of a run is byte-reproducible.
inline void write_summary(const std::string& path, const Chain& chain, double total_seconds) {
  std::string out;
  out += "# run summary\n";
  out += "written=" + utc_timestamp() + "\n";
  out += "iterations=" + std::to_string(chain.config.iterations) + "\n";
  out += "thinning=" + std::to_string(chain.config.thinning) + "\n";
  out += "stored_rows=" + std::to_string(chain.rows()) + "\n";
  out += "burn_rows=" + std::to_string(chain.burn_rows()) + "\n";
  out += "trials=" + std::to_string(chain.trials) + "\n";
  out += "accept_beta0=" + format_double(chain.beta0_accept_rate()) + "\n";
  {
    const Eigen::VectorXd r = chain.kernel_accept_rates();
    std::string s;
    for (Eigen::Index i = 0; i < r.size(); ++i) {
      if (i > 0) s += ',';
      s += format_double(r[i]);
    }
    out += "accept_kernel=" + s + "\n";
  }
  out += "seconds_total=" + format_double(total_seconds) + "\n";
  static const char* block_names[6] = {"kernel", "loadings", "noise",
                                       "trend",  "factors",  "bookkeeping"};
  for (int i = 0; i < 6; ++i)
    out += "seconds_" + std::string(block_names[i]) + "=" + format_double(chain.seconds[i]) +
           "\n";
  const std::int64_t burn = chain.burn_rows();
  const std::int64_t n = chain.rows() - burn;
  out += "# posterior (post-burn-in rows: " + std::to_string(n > 0 ? n : 0) + ")\n";
  if (n > 0) {
    out += "parameter,mean,sd,q025,q500,q975\n";
    const auto row = [&](const std::string& name, const Eigen::VectorXd& tail) {
      const detail::ColStats s = detail::column_stats(tail);
      out += name;
      for (const double v : {s.mean, s.sd, s.q025, s.q500, s.q975}) {
        out += ',';
        out += format_double(v);
      }
      out += '\n';
    };
    for (Eigen::Index j = 0; j < chain.beta0.cols(); ++j)
      row("beta0_" + std::to_string(j + 1), chain.beta0.col(j).tail(n));
    for (Eigen::Index j = 0; j < chain.beta.cols(); ++j)
      row("beta_" + std::to_string(j + 1), chain.beta.col(j).tail(n));
    for (Eigen::Index j = 0; j < chain.eta.cols(); ++j)
      row("eta_" + std::to_string(j + 1), chain.eta.col(j).tail(n));
    row("sigma0_sq", chain.sigma0_sq.tail(n));
  }
  write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Directory lock
// ---------------------------------------------------------------------------

// One writer per chain directory. Creation is atomic (O_EXCL); the file is
// removed on destruction, so a surviving 'lock' marks a crashed run.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) : path_(dir + "/lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw config_error("chain directory is locked (remove '" + path_ +
                           "' if no run is active)");
      throw data_error("cannot create lock file: " + path_);
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    const ssize_t n = ::write(fd_, pid.data(), pid.size());
    (void)n;
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      ::unlink(path_.c_str());
    }
  }

 private:
  std::string path_;
  int fd_ = -1;
};

}  // namespace io
}  // namespace golf
