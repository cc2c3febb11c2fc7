// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"

namespace gd {
namespace {

struct Value {
  enum class Kind { Int, Float, Bool, String, StringArray };
  Kind kind = Kind::Int;
  bool negative = false;           // Sign of an integer literal.
  unsigned long long magnitude = 0;
  double f = 0.0;
  bool b = false;
  std::string s;
  std::vector<std::string> arr;
};

[[noreturn]] void syntax_error(const std::string& name, int line,
                               const std::string& msg) {
  throw FormatError(name + ":" + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Cuts a trailing '#' comment, honoring double-quoted strings.
std::string strip_comment(const std::string& s) {
  bool in_string = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (in_string) {
      if (c == '\\' && i + 1 < s.size()) {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
    } else if (c == '"') {
      in_string = true;
    } else if (c == '#') {
      return s.substr(0, i);
    }
  }
  return s;
}

bool valid_ident(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') return false;
  }
  return true;
}

// Parses a quoted string starting at s[pos] == '"'; advances pos past the
// closing quote.
std::string parse_quoted(const std::string& s, std::size_t& pos,
                         const std::string& name, int line) {
  std::string out;
  ++pos;  // opening quote
  while (pos < s.size()) {
    char c = s[pos];
    if (c == '"') {
      ++pos;
      return out;
    }
    if (c == '\\') {
      ++pos;
      if (pos >= s.size()) break;
      switch (s[pos]) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        default:
          syntax_error(name, line, std::string("unknown escape '\\") + s[pos] +
                                       "' in string");
      }
      ++pos;
    } else {
      out += c;
      ++pos;
    }
  }
  syntax_error(name, line, "unterminated string");
}

Value parse_scalar(const std::string& tok, const std::string& name, int line) {
  Value v;
  if (tok == "true" || tok == "false") {
    v.kind = Value::Kind::Bool;
    v.b = (tok == "true");
    return v;
  }
  bool looks_float = tok.find_first_of(".eE") != std::string::npos;
  // Hex literals contain 'e' but the subset does not support them anyway.
  const char* begin = tok.c_str();
  char* end = nullptr;
  if (!looks_float) {
    v.kind = Value::Kind::Int;
    errno = 0;
    if (tok[0] == '-') {
      long long x = std::strtoll(begin, &end, 10);
      if (end != begin + tok.size() || errno == ERANGE)
        syntax_error(name, line, "invalid integer '" + tok + "'");
      v.negative = true;
      v.magnitude = static_cast<unsigned long long>(-(x + 1)) + 1ull;
    } else {
      unsigned long long x = std::strtoull(begin, &end, 10);
      if (end != begin + tok.size() || errno == ERANGE || tok[0] == '+')
        syntax_error(name, line, "invalid integer '" + tok + "'");
      v.magnitude = x;
    }
    return v;
  }
  v.kind = Value::Kind::Float;
  errno = 0;
  v.f = std::strtod(begin, &end);
  if (end != begin + tok.size())
    syntax_error(name, line, "invalid number '" + tok + "'");
  if (!std::isfinite(v.f))
    syntax_error(name, line, "non-finite number '" + tok + "'");
  return v;
}

Value parse_value(const std::string& text, const std::string& name, int line) {
  if (text.empty()) syntax_error(name, line, "missing value");
  if (text[0] == '"') {
    std::size_t pos = 0;
    Value v;
    v.kind = Value::Kind::String;
    v.s = parse_quoted(text, pos, name, line);
    if (trim(text.substr(pos)) != "")
      syntax_error(name, line, "trailing characters after string");
    return v;
  }
  if (text[0] == '[') {
    if (text.back() != ']') syntax_error(name, line, "unterminated array");
    Value v;
    v.kind = Value::Kind::StringArray;
    std::size_t pos = 1;
    std::size_t stop = text.size() - 1;
    bool expect_element = false;  // True right after a comma.
    while (true) {
      while (pos < stop && std::isspace(static_cast<unsigned char>(text[pos])))
        ++pos;
      if (pos >= stop) {
        if (expect_element)
          syntax_error(name, line, "trailing comma in array");
        break;
      }
      if (text[pos] != '"')
        syntax_error(name, line, "arrays may only hold quoted strings");
      v.arr.push_back(parse_quoted(text, pos, name, line));
      while (pos < stop && std::isspace(static_cast<unsigned char>(text[pos])))
        ++pos;
      if (pos >= stop) break;
      if (text[pos] != ',')
        syntax_error(name, line, "expected ',' between array elements");
      ++pos;
      expect_element = true;
    }
    return v;
  }
  return parse_scalar(text, name, line);
}

[[noreturn]] void type_error(const std::string& full, const char* want) {
  throw ConfigError("config: key '" + full + "' expects " + want);
}

int to_int(const Value& v, const std::string& full) {
  if (v.kind != Value::Kind::Int) type_error(full, "an integer");
  if (v.negative) {
    if (v.magnitude > 2147483648ull) type_error(full, "an integer in range");
    return static_cast<int>(-static_cast<long long>(v.magnitude));
  }
  if (v.magnitude > 2147483647ull) type_error(full, "an integer in range");
  return static_cast<int>(v.magnitude);
}

std::uint64_t to_u64(const Value& v, const std::string& full) {
  if (v.kind != Value::Kind::Int || v.negative)
    type_error(full, "a non-negative integer");
  return v.magnitude;
}

double to_double(const Value& v, const std::string& full) {
  if (v.kind == Value::Kind::Float) return v.f;
  if (v.kind == Value::Kind::Int) {
    double x = static_cast<double>(v.magnitude);
    return v.negative ? -x : x;
  }
  type_error(full, "a number");
}

bool to_bool(const Value& v, const std::string& full) {
  if (v.kind != Value::Kind::Bool) type_error(full, "a boolean");
  return v.b;
}

std::string to_string(const Value& v, const std::string& full) {
  if (v.kind != Value::Kind::String) type_error(full, "a string");
  return v.s;
}

std::vector<std::string> to_string_array(const Value& v,
                                         const std::string& full) {
  if (v.kind != Value::Kind::StringArray) type_error(full, "a string array");
  return v.arr;
}

void apply_key(PipelineConfig& c, const std::string& sec,
               const std::string& key, const std::string& full, const Value& v,
               bool& has_version) {
  if (sec.empty()) {
    if (key == "version") {
      c.version = to_int(v, full);
      has_version = true;
    } else if (key == "seed") {
      c.seed = to_u64(v, full);
    } else if (key == "threads") {
      c.threads = to_int(v, full);
    } else {
      throw ConfigError("config: unknown key '" + full + "'");
    }
    return;
  }
  if (sec == "views") {
    auto& s = c.views;
    if (key == "mode") s.mode = to_string(v, full);
    else if (key == "count") s.count = to_int(v, full);
    else if (key == "azimuth_limit") s.azimuth_limit = to_double(v, full);
    else if (key == "elevation_limit") s.elevation_limit = to_double(v, full);
    else if (key == "radius") s.radius = to_double(v, full);
    else if (key == "width") s.width = to_int(v, full);
    else if (key == "height") s.height = to_int(v, full);
    else if (key == "focal") s.focal = to_double(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  if (sec == "volume") {
    auto& s = c.volume;
    if (key == "dims") s.dims = to_int(v, full);
    else if (key == "extent") s.extent = to_double(v, full);
    else if (key == "extractor") s.extractor = to_string(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  if (sec == "render") {
    auto& s = c.render;
    if (key == "width") s.width = to_int(v, full);
    else if (key == "height") s.height = to_int(v, full);
    else if (key == "samples_per_ray") s.samples_per_ray = to_int(v, full);
    else if (key == "sharpness") s.sharpness = to_double(v, full);
    else if (key == "near") s.near = to_double(v, full);
    else if (key == "far") s.far = to_double(v, full);
    else if (key == "stratified") s.stratified = to_bool(v, full);
    else if (key == "focal_scale") s.focal_scale = to_double(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  if (sec == "refine") {
    auto& s = c.refine;
    if (key == "iterations") s.iterations = to_int(v, full);
    else if (key == "particles") s.particles = to_int(v, full);
    else if (key == "eta1_lo") s.eta1_lo = to_double(v, full);
    else if (key == "eta1_hi") s.eta1_hi = to_double(v, full);
    else if (key == "ramp_fraction") s.ramp_fraction = to_double(v, full);
    else if (key == "eta2_hi") s.eta2_hi = to_double(v, full);
    else if (key == "eta2_lo") s.eta2_lo = to_double(v, full);
    else if (key == "eta3") s.eta3 = to_double(v, full);
    else if (key == "eta4") s.eta4 = to_double(v, full);
    else if (key == "grad_clip") s.grad_clip = to_double(v, full);
    else if (key == "condition_id") s.condition_id = to_int(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  if (sec == "mesh") {
    auto& s = c.mesh;
    if (key == "resolution") s.resolution = to_int(v, full);
    else if (key == "extent") s.extent = to_double(v, full);
    else if (key == "geometry_iterations")
      s.geometry_iterations = to_int(v, full);
    else if (key == "texture_iterations")
      s.texture_iterations = to_int(v, full);
    else if (key == "eta_sdf") s.eta_sdf = to_double(v, full);
    else if (key == "eta_deform") s.eta_deform = to_double(v, full);
    else if (key == "eta_texture") s.eta_texture = to_double(v, full);
    else if (key == "eta_tables") s.eta_tables = to_double(v, full);
    else if (key == "grad_clip") s.grad_clip = to_double(v, full);
    else if (key == "width") s.width = to_int(v, full);
    else if (key == "height") s.height = to_int(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  if (sec == "providers") {
    auto& s = c.providers;
    if (key == "score") s.score = to_string(v, full);
    else if (key == "analytic_mu") s.analytic_mu = to_double(v, full);
    else if (key == "analytic_s2") s.analytic_s2 = to_double(v, full);
    else if (key == "schedule_steps") s.schedule_steps = to_int(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  if (sec == "metrics") {
    auto& s = c.metrics;
    if (key == "views") s.views = to_int(v, full);
    else if (key == "elevation_deg") s.elevation_deg = to_double(v, full);
    else if (key == "radius") s.radius = to_double(v, full);
    else if (key == "resolution") s.resolution = to_int(v, full);
    else if (key == "dimension") s.dimension = to_int(v, full);
    else if (key == "captions") s.captions = to_string_array(v, full);
    else if (key == "correct") s.correct = to_int(v, full);
    else throw ConfigError("config: unknown key '" + full + "'");
    return;
  }
  throw ConfigError("config: unknown section '" + sec + "'");
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  out += '"';
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void check(bool ok, const char* msg) {
  if (!ok) throw ConfigError(std::string("config: ") + msg);
}

}  // namespace

void PipelineConfig::validate() const {
  check(version == 1, "version must be 1");
  check(threads >= 1, "threads must be >= 1");

  check(views.mode == "sd_front" || views.mode == "mvdream_four",
        "views.mode must be \"sd_front\" or \"mvdream_four\"");
  check(views.count >= 1, "views.count must be >= 1");
  check(views.azimuth_limit > 0.0 && views.azimuth_limit <= 360.0,
        "views.azimuth_limit must be in (0, 360]");
  check(views.elevation_limit >= 0.0 && views.elevation_limit < 90.0,
        "views.elevation_limit must be in [0, 90)");
  check(views.radius > 0.0, "views.radius must be positive");
  check(views.width >= 1 && views.height >= 1,
        "views.width and views.height must be >= 1");

  check(volume.dims >= 2, "volume.dims must be >= 2");
  check(volume.extent > 0.0, "volume.extent must be positive");
  check(volume.extractor == "identity" || volume.extractor == "gradient_aug",
        "volume.extractor must be \"identity\" or \"gradient_aug\"");

  check(render.width >= 1 && render.height >= 1,
        "render.width and render.height must be >= 1");
  check(render.samples_per_ray >= 1, "render.samples_per_ray must be >= 1");
  check(render.sharpness > 0.0, "render.sharpness must be positive");
  check(render.near > 0.0 && render.far > render.near,
        "render.near/far must satisfy 0 < near < far");
  check(render.focal_scale > 0.0, "render.focal_scale must be positive");

  check(refine.iterations >= 0, "refine.iterations must be >= 0");
  check(refine.particles >= 1, "refine.particles must be >= 1");
  check(refine.eta1_lo > 0.0 && refine.eta1_hi > 0.0,
        "refine.eta1_lo and refine.eta1_hi must be positive");
  check(refine.ramp_fraction >= 0.0 && refine.ramp_fraction <= 1.0,
        "refine.ramp_fraction must be in [0, 1]");
  check(refine.eta2_lo > 0.0 && refine.eta2_hi > 0.0,
        "refine.eta2_lo and refine.eta2_hi must be positive");
  check(refine.eta3 > 0.0 && refine.eta4 > 0.0,
        "refine.eta3 and refine.eta4 must be positive");
  check(refine.grad_clip > 0.0, "refine.grad_clip must be positive");
  check(refine.condition_id >= 0, "refine.condition_id must be >= 0");

  check(mesh.resolution >= 2, "mesh.resolution must be >= 2");
  check(mesh.extent > 0.0, "mesh.extent must be positive");
  check(mesh.geometry_iterations >= 0 && mesh.texture_iterations >= 0,
        "mesh iteration counts must be >= 0");
  check(mesh.eta_sdf > 0.0 && mesh.eta_deform > 0.0 && mesh.eta_texture > 0.0 &&
            mesh.eta_tables > 0.0,
        "mesh learning rates must be positive");
  check(mesh.grad_clip > 0.0, "mesh.grad_clip must be positive");
  check(mesh.width >= 1 && mesh.height >= 1,
        "mesh.width and mesh.height must be >= 1");

  check(providers.score == "analytic" || providers.score == "trainable",
        "providers.score must be \"analytic\" or \"trainable\"");
  check(providers.analytic_s2 > 0.0, "providers.analytic_s2 must be positive");
  check(providers.schedule_steps >= 2,
        "providers.schedule_steps must be >= 2");

  check(metrics.views >= 1, "metrics.views must be >= 1");
  check(metrics.elevation_deg > -90.0 && metrics.elevation_deg < 90.0,
        "metrics.elevation_deg must be in (-90, 90)");
  check(metrics.radius > 0.0, "metrics.radius must be positive");
  check(metrics.resolution >= 1, "metrics.resolution must be >= 1");
  check(metrics.dimension >= 1, "metrics.dimension must be >= 1");
  check(!metrics.captions.empty(), "metrics.captions must not be empty");
  check(metrics.correct >= 0 &&
            metrics.correct < static_cast<int>(metrics.captions.size()),
        "metrics.correct must index into metrics.captions");
}

PipelineConfig config_from_toml(const std::string& text,
                                const std::string& name) {
  PipelineConfig cfg;
  std::set<std::string> seen;
  bool has_version = false;
  std::string section;
  int lineno = 0;
  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        syntax_error(name, lineno, "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_ident(section))
        syntax_error(name, lineno, "malformed section name");
      static const std::set<std::string> kSections = {
          "views", "volume", "render", "refine",
          "mesh",  "providers", "metrics"};
      if (!kSections.count(section))
        throw ConfigError("config: unknown section '" + section + "'");
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      syntax_error(name, lineno, "expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string valtext = trim(line.substr(eq + 1));
    if (!valid_ident(key)) syntax_error(name, lineno, "malformed key");
    Value v = parse_value(valtext, name, lineno);
    std::string full = section.empty() ? key : section + "." + key;
    if (!seen.insert(full).second)
      throw ConfigError("config: duplicate key '" + full + "'");
    apply_key(cfg, section, key, full, v, has_version);
  }
  if (!has_version)
    throw ConfigError("config: missing required key 'version'");
  cfg.validate();
  return cfg;
}

std::string config_to_toml(const PipelineConfig& c) {
  std::ostringstream os;
  os << "version = " << c.version << "\n";
  os << "seed = " << c.seed << "\n";
  os << "threads = " << c.threads << "\n";
  os << "\n[views]\n";
  os << "mode = " << quote(c.views.mode) << "\n";
  os << "count = " << c.views.count << "\n";
  os << "azimuth_limit = " << num(c.views.azimuth_limit) << "\n";
  os << "elevation_limit = " << num(c.views.elevation_limit) << "\n";
  os << "radius = " << num(c.views.radius) << "\n";
  os << "width = " << c.views.width << "\n";
  os << "height = " << c.views.height << "\n";
  os << "focal = " << num(c.views.focal) << "\n";
  os << "\n[volume]\n";
  os << "dims = " << c.volume.dims << "\n";
  os << "extent = " << num(c.volume.extent) << "\n";
  os << "extractor = " << quote(c.volume.extractor) << "\n";
  os << "\n[render]\n";
  os << "width = " << c.render.width << "\n";
  os << "height = " << c.render.height << "\n";
  os << "samples_per_ray = " << c.render.samples_per_ray << "\n";
  os << "sharpness = " << num(c.render.sharpness) << "\n";
  os << "near = " << num(c.render.near) << "\n";
  os << "far = " << num(c.render.far) << "\n";
  os << "stratified = " << (c.render.stratified ? "true" : "false") << "\n";
  os << "focal_scale = " << num(c.render.focal_scale) << "\n";
  os << "\n[refine]\n";
  os << "iterations = " << c.refine.iterations << "\n";
  os << "particles = " << c.refine.particles << "\n";
  os << "eta1_lo = " << num(c.refine.eta1_lo) << "\n";
  os << "eta1_hi = " << num(c.refine.eta1_hi) << "\n";
  os << "ramp_fraction = " << num(c.refine.ramp_fraction) << "\n";
  os << "eta2_hi = " << num(c.refine.eta2_hi) << "\n";
  os << "eta2_lo = " << num(c.refine.eta2_lo) << "\n";
  os << "eta3 = " << num(c.refine.eta3) << "\n";
  os << "eta4 = " << num(c.refine.eta4) << "\n";
  os << "grad_clip = " << num(c.refine.grad_clip) << "\n";
  os << "condition_id = " << c.refine.condition_id << "\n";
  os << "\n[mesh]\n";
  os << "resolution = " << c.mesh.resolution << "\n";
  os << "extent = " << num(c.mesh.extent) << "\n";
  os << "geometry_iterations = " << c.mesh.geometry_iterations << "\n";
  os << "texture_iterations = " << c.mesh.texture_iterations << "\n";
  os << "eta_sdf = " << num(c.mesh.eta_sdf) << "\n";
  os << "eta_deform = " << num(c.mesh.eta_deform) << "\n";
  os << "eta_texture = " << num(c.mesh.eta_texture) << "\n";
  os << "eta_tables = " << num(c.mesh.eta_tables) << "\n";
  os << "grad_clip = " << num(c.mesh.grad_clip) << "\n";
  os << "width = " << c.mesh.width << "\n";
  os << "height = " << c.mesh.height << "\n";
  os << "\n[providers]\n";
  os << "score = " << quote(c.providers.score) << "\n";
  os << "analytic_mu = " << num(c.providers.analytic_mu) << "\n";
  os << "analytic_s2 = " << num(c.providers.analytic_s2) << "\n";
  os << "schedule_steps = " << c.providers.schedule_steps << "\n";
  os << "\n[metrics]\n";
  os << "views = " << c.metrics.views << "\n";
  os << "elevation_deg = " << num(c.metrics.elevation_deg) << "\n";
  os << "radius = " << num(c.metrics.radius) << "\n";
  os << "resolution = " << c.metrics.resolution << "\n";
  os << "dimension = " << c.metrics.dimension << "\n";
  os << "captions = [";
  for (std::size_t i = 0; i < c.metrics.captions.size(); ++i) {
    if (i) os << ", ";
    os << quote(c.metrics.captions[i]);
  }
  os << "]\n";
  os << "correct = " << c.metrics.correct << "\n";
  return os.str();
}

PipelineConfig load_config(const std::string& path) {
  return config_from_toml(read_file(path), path);
}

void save_config(const std::string& path, const PipelineConfig& cfg) {
  atomic_write_file(path, config_to_toml(cfg));
}

std::uint64_t config_hash(const PipelineConfig& cfg) {
  std::string text = config_to_toml(cfg);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace gd
