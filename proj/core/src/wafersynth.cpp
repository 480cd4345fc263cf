// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/wafersynth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "fabgpt/errors.hpp"
#include "fabgpt/image.hpp"
#include "fabgpt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fabgpt::synth {

namespace {

// Text marks occupy rows [0, kMarkRows); defects are confined below them so
// a defect never overwrites the rendered characters.
constexpr std::size_t kMarkRows = 10;
constexpr double kDeformThreshold = 0.03;

constexpr std::uint64_t kStreamBackground = 0xB6;
constexpr std::uint64_t kStreamDefect = 0xDF;

const char* kStepCodes[6] = {"ETCH", "LITH", "DEPO", "CMP", "IMPL", "DIFF"};

// 5x7 bitmap font, one byte per row, 5 low bits used, MSB-left.
struct Glyph {
  char ch;
  unsigned char rows[7];
};
constexpr Glyph kFont[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
};

const unsigned char* glyph_rows(char c) {
  for (const auto& g : kFont)
    if (g.ch == c) return g.rows;
  return nullptr;
}

double clamp01(double v, double lo = 0.02, double hi = 0.95) {
  return v < lo ? lo : (v > hi ? hi : v);
}

Tensor render_background(std::uint64_t sample_seed, const GenConfig& cfg) {
  Rng rng(Rng::mix(sample_seed, kStreamBackground));
  const std::size_t h = cfg.height, w = cfg.width;
  const double base = rng.uniform(0.35, 0.55);
  const int mode = static_cast<int>(rng.uniform_int(3));  // 0 h-lines, 1 v-lines, 2 grid
  const std::size_t py = 6 + rng.uniform_int(7);
  const std::size_t px = 6 + rng.uniform_int(7);
  const std::size_t phy = rng.uniform_int(py);
  const std::size_t phx = rng.uniform_int(px);
  const double amp = rng.uniform(0.15, 0.30);
  const std::size_t lw = 1 + rng.uniform_int(2);
  const double sigma = rng.uniform(0.01, 0.03);

  Tensor img({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool on_h = ((y + phy) % py) < lw;
      const bool on_v = ((x + phx) % px) < lw;
      bool on = false;
      if (mode == 0) on = on_h;
      else if (mode == 1) on = on_v;
      else on = on_h || on_v;
      img.at2(y, x) = clamp01(base + (on ? amp : 0.0) + sigma * rng.gaussian());
    }
  return img;
}

void render_marks(Tensor& img, const std::string& text) {
  std::size_t cx = 1;
  const std::size_t h = img.rows(), w = img.cols();
  for (char c : text) {
    if (cx + 5 >= w) break;
    const unsigned char* rows = glyph_rows(c);
    if (rows) {
      for (std::size_t ry = 0; ry < 7 && 1 + ry < h; ++ry)
        for (std::size_t rx = 0; rx < 5; ++rx)
          if (rows[ry] & (0x10 >> rx)) img.at2(1 + ry, cx + rx) = 0.92;
    }
    cx += 6;
  }
}

std::string marks_for_seed(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "W%04u-%s", static_cast<unsigned>(seed % 10000),
                kStepCodes[(seed / 10000) % 6]);
  return buf;
}

struct Region {
  std::size_t y0, y1, x0, x1;  // half-open
};

Region defect_region(const GenConfig& cfg) {
  return {kMarkRows + 2, cfg.height - 1, 1, cfg.width - 1};
}

void draw_hole(Tensor& img, Tensor& mask, Rng& rng, const GenConfig& cfg) {
  const Region r = defect_region(cfg);
  const std::size_t ry = 3 + rng.uniform_int(5);
  const std::size_t rx = 3 + rng.uniform_int(5);
  const std::size_t cy = r.y0 + ry + rng.uniform_int(r.y1 - r.y0 - 2 * ry);
  const std::size_t cx = r.x0 + rx + rng.uniform_int(r.x1 - r.x0 - 2 * rx);
  const double theta = rng.uniform(0.0, 3.14159265358979);
  const double ct = std::cos(theta), st = std::sin(theta);
  const long ext = static_cast<long>(rx + ry);
  for (long y = static_cast<long>(cy) - ext; y <= static_cast<long>(cy) + ext; ++y) {
    if (y < static_cast<long>(kMarkRows) || y >= static_cast<long>(img.rows())) continue;
    for (long x = static_cast<long>(cx) - ext; x <= static_cast<long>(cx) + ext; ++x) {
      if (x < 0 || x >= static_cast<long>(img.cols())) continue;
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
      if ((u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0) {
        img.at2(y, x) = clamp01(img.at2(y, x) * 0.25);
        mask.at2(y, x) = 1.0;
      }
    }
  }
}

void draw_particle(Tensor& img, Tensor& mask, Rng& rng, const GenConfig& cfg) {
  const Region r = defect_region(cfg);
  const std::size_t n = 1 + rng.uniform_int(3);
  for (std::size_t b = 0; b < n; ++b) {
    const double rad = 2.0 + rng.uniform() * 2.0;  // [2,4]
    const std::size_t cy = r.y0 + 4 + rng.uniform_int(r.y1 - r.y0 - 8);
    const std::size_t cx = r.x0 + 4 + rng.uniform_int(r.x1 - r.x0 - 8);
    const double phase = rng.uniform(0.0, 6.2831853);
    const double lift = rng.uniform(0.30, 0.45);
    const long ext = static_cast<long>(rad * 1.3) + 1;
    for (long dy = -ext; dy <= ext; ++dy)
      for (long dx = -ext; dx <= ext; ++dx) {
        const long y = static_cast<long>(cy) + dy, x = static_cast<long>(cx) + dx;
        if (y < static_cast<long>(kMarkRows) || y >= static_cast<long>(img.rows()) || x < 0 ||
            x >= static_cast<long>(img.cols()))
          continue;
        const double d = std::sqrt(static_cast<double>(dy * dy + dx * dx));
        const double ang = std::atan2(static_cast<double>(dy), static_cast<double>(dx));
        const double edge = rad * (1.0 + 0.2 * std::sin(4.0 * ang + phase));
        if (d <= edge) {
          img.at2(y, x) = std::min(0.98, img.at2(y, x) + lift);
          mask.at2(y, x) = 1.0;
        }
      }
  }
}

void draw_scratch(Tensor& img, Tensor& mask, Rng& rng, const GenConfig& cfg) {
  const Region r = defect_region(cfg);
  double y = static_cast<double>(r.y0) + rng.uniform() * (r.y1 - r.y0);
  double x = static_cast<double>(r.x0) + rng.uniform() * 6.0;
  double dir = rng.uniform(-0.5, 0.5);
  const bool bright = rng.uniform_int(2) == 1;
  const double width = 0.8 + 0.5 * rng.uniform_int(2);
  const std::size_t segments = 2 + rng.uniform_int(3);
  for (std::size_t s = 0; s < segments; ++s) {
    const double len = rng.uniform(8.0, 18.0);
    double ny = y + len * std::sin(dir);
    double nx = x + len * std::cos(dir);
    ny = std::clamp(ny, static_cast<double>(r.y0), static_cast<double>(r.y1 - 1));
    nx = std::clamp(nx, static_cast<double>(r.x0), static_cast<double>(r.x1 - 1));
    const long y_lo = static_cast<long>(std::floor(std::min(y, ny) - 2));
    const long y_hi = static_cast<long>(std::ceil(std::max(y, ny) + 2));
    const long x_lo = static_cast<long>(std::floor(std::min(x, nx) - 2));
    const long x_hi = static_cast<long>(std::ceil(std::max(x, nx) + 2));
    const double vy = ny - y, vx = nx - x;
    const double vv = std::max(1e-9, vy * vy + vx * vx);
    for (long py = y_lo; py <= y_hi; ++py)
      for (long px = x_lo; px <= x_hi; ++px) {
        if (py < static_cast<long>(kMarkRows) || py >= static_cast<long>(img.rows()) || px < 0 ||
            px >= static_cast<long>(img.cols()))
          continue;
        const double t = std::clamp(((py - y) * vy + (px - x) * vx) / vv, 0.0, 1.0);
        const double dy = py - (y + t * vy), dx = px - (x + t * vx);
        if (dy * dy + dx * dx <= width * width) {
          img.at2(py, px) =
              bright ? std::min(0.98, img.at2(py, px) + 0.35) : clamp01(img.at2(py, px) * 0.35);
          mask.at2(py, px) = 1.0;
        }
      }
    y = ny;
    x = nx;
    // Keep heading mostly rightward so clamping at the band edges cannot
    // stall the polyline into a single point.
    dir = std::clamp(dir + rng.uniform(-0.5, 0.5), -0.9, 0.9);
  }
}

double bilinear(const Tensor& t, double y, double x) {
  const double yc = std::clamp(y, 0.0, static_cast<double>(t.rows() - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(t.cols() - 1));
  const std::size_t y0 = static_cast<std::size_t>(yc);
  const std::size_t x0 = static_cast<std::size_t>(xc);
  const std::size_t y1 = std::min(y0 + 1, t.rows() - 1);
  const std::size_t x1 = std::min(x0 + 1, t.cols() - 1);
  const double fy = yc - y0, fx = xc - x0;
  return t.at2(y0, x0) * (1 - fy) * (1 - fx) + t.at2(y0, x1) * (1 - fy) * fx +
         t.at2(y1, x0) * fy * (1 - fx) + t.at2(y1, x1) * fy * fx;
}

void draw_deformation(Tensor& img, Tensor& mask, const Tensor& base, Rng& rng,
                      const GenConfig& cfg) {
  const Region r = defect_region(cfg);
  const double sg = rng.uniform(5.0, 9.0);
  const std::size_t cy = r.y0 + 6 + rng.uniform_int(std::max<std::size_t>(1, r.y1 - r.y0 - 12));
  const std::size_t cx = r.x0 + 6 + rng.uniform_int(std::max<std::size_t>(1, r.x1 - r.x0 - 12));
  double alpha = (rng.uniform_int(2) ? 1.0 : -1.0) * rng.uniform(0.5, 0.9);

  for (int attempt = 0; attempt < 8; ++attempt) {
    Tensor trial = base;
    Tensor tmask({img.rows(), img.cols()});
    std::size_t area = 0;
    const double reach = 3.0 * sg;
    for (long y = static_cast<long>(cy - std::min<double>(cy, reach));
         y <= static_cast<long>(cy + reach) && y < static_cast<long>(img.rows()); ++y) {
      if (y < static_cast<long>(kMarkRows)) continue;
      for (long x = std::max<long>(0, static_cast<long>(cx) - static_cast<long>(reach));
           x <= static_cast<long>(cx + reach) && x < static_cast<long>(img.cols()); ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double d2 = dy * dy + dx * dx;
        if (d2 > reach * reach) continue;
        const double g = std::exp(-d2 / (2.0 * sg * sg));
        const double a = alpha * g;
        const double ca = std::cos(a), sa = std::sin(a);
        const double sy = cy + sa * dx + ca * dy;
        const double sx = cx + ca * dx - sa * dy;
        const double v = bilinear(base, sy, sx);
        trial.at2(y, x) = v;
        if (std::fabs(v - base.at2(y, x)) > kDeformThreshold) {
          tmask.at2(y, x) = 1.0;
          ++area;
        }
      }
    }
    if (area >= cfg.deformation_area_min && area <= cfg.deformation_area_max) {
      img = std::move(trial);
      mask = std::move(tmask);
      return;
    }
    alpha *= (area > cfg.deformation_area_max) ? 0.75 : 1.3;
  }
  throw NumericError("deformation area could not be brought within configured bounds");
}

std::size_t count_pixels(const Tensor& mask) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.at(i) > 0.5) ++n;
  return n;
}

void area_check(Label l, std::size_t area, const GenConfig& cfg) {
  std::size_t lo = 0, hi = SIZE_MAX;
  switch (l) {
    case Label::hole: lo = cfg.hole_area_min; hi = cfg.hole_area_max; break;
    case Label::particle: lo = cfg.particle_area_min; hi = cfg.particle_area_max; break;
    case Label::scratch: lo = cfg.scratch_area_min; hi = cfg.scratch_area_max; break;
    case Label::pattern_deformation:
      lo = cfg.deformation_area_min;
      hi = cfg.deformation_area_max;
      break;
    case Label::good: return;
  }
  if (area < lo || area > hi)
    throw NumericError("defect area " + std::to_string(area) + " outside [" + std::to_string(lo) +
                       "," + std::to_string(hi) + "] for class " + label_name(l));
}

const char* pick_cause(Label l, Rng& rng) {
  switch (l) {
    case Label::good: return "none";
    case Label::hole: return rng.uniform_int(2) ? "overetch" : "resist_bubble";
    case Label::particle: return rng.uniform_int(2) ? "contamination" : "film_flaking";
    case Label::scratch: return rng.uniform_int(2) ? "handling_damage" : "chuck_debris";
    case Label::pattern_deformation: return rng.uniform_int(2) ? "litho_defocus" : "film_stress";
  }
  return "none";
}

json config_to_json(const GenConfig& c) {
  return json{{"height", c.height},
              {"width", c.width},
              {"seed", c.seed},
              {"counts",
               {{"good", c.count_good},
                {"hole", c.count_hole},
                {"particle", c.count_particle},
                {"scratch", c.count_scratch},
                {"pattern_deformation", c.count_deformation}}},
              {"train_fraction", c.train_fraction},
              {"area_bounds",
               {{"hole", {c.hole_area_min, c.hole_area_max}},
                {"particle", {c.particle_area_min, c.particle_area_max}},
                {"scratch", {c.scratch_area_min, c.scratch_area_max}},
                {"pattern_deformation", {c.deformation_area_min, c.deformation_area_max}}}}};
}

GenConfig config_from_json(const json& j) {
  GenConfig c;
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& n = j.at("counts");
  c.count_good = n.at("good").get<std::size_t>();
  c.count_hole = n.at("hole").get<std::size_t>();
  c.count_particle = n.at("particle").get<std::size_t>();
  c.count_scratch = n.at("scratch").get<std::size_t>();
  c.count_deformation = n.at("pattern_deformation").get<std::size_t>();
  c.train_fraction = j.at("train_fraction").get<double>();
  const auto& b = j.at("area_bounds");
  c.hole_area_min = b.at("hole")[0].get<std::size_t>();
  c.hole_area_max = b.at("hole")[1].get<std::size_t>();
  c.particle_area_min = b.at("particle")[0].get<std::size_t>();
  c.particle_area_max = b.at("particle")[1].get<std::size_t>();
  c.scratch_area_min = b.at("scratch")[0].get<std::size_t>();
  c.scratch_area_max = b.at("scratch")[1].get<std::size_t>();
  c.deformation_area_min = b.at("pattern_deformation")[0].get<std::size_t>();
  c.deformation_area_max = b.at("pattern_deformation")[1].get<std::size_t>();
  return c;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

const std::vector<std::string>& label_names() {
  static const std::vector<std::string> names = {"good", "hole", "particle", "scratch",
                                                 "pattern_deformation"};
  return names;
}

const std::string& label_name(Label l) { return label_names()[static_cast<std::size_t>(l)]; }

Label label_from_name(const std::string& name) {
  const auto& names = label_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<Label>(i);
  throw InputError("unknown label: " + name);
}

std::string label_phrase(Label l) {
  std::string s = label_name(l);
  std::replace(s.begin(), s.end(), '_', ' ');
  return s;
}

std::size_t GenConfig::count_for(Label l) const {
  switch (l) {
    case Label::good: return count_good;
    case Label::hole: return count_hole;
    case Label::particle: return count_particle;
    case Label::scratch: return count_scratch;
    case Label::pattern_deformation: return count_deformation;
  }
  return 0;
}

void GenConfig::validate() const {
  if (height % 16 != 0 || width % 16 != 0)
    throw ConfigError("image dimensions must be multiples of 16");
  if (height < 32 || width < 32)
    throw ConfigError("image dimensions must be at least 32 (text-mark strip + defect region)");
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw ConfigError("train_fraction must be in (0,1)");
}

WaferSample generate_sample(std::uint64_t seed, Label label, const GenConfig& cfg) {
  cfg.validate();
  WaferSample s;
  s.seed = seed;
  s.label = label;
  s.text_marks = marks_for_seed(seed);

  Tensor base = render_background(seed, cfg);
  render_marks(base, s.text_marks);
  s.image = base;
  s.mask = Tensor({cfg.height, cfg.width});

  Rng defect_rng(Rng::mix(seed, kStreamDefect));
  s.cause_key = pick_cause(label, defect_rng);
  switch (label) {
    case Label::good: break;
    case Label::hole: draw_hole(s.image, s.mask, defect_rng, cfg); break;
    case Label::particle: draw_particle(s.image, s.mask, defect_rng, cfg); break;
    case Label::scratch: draw_scratch(s.image, s.mask, defect_rng, cfg); break;
    case Label::pattern_deformation: draw_deformation(s.image, s.mask, base, defect_rng, cfg); break;
  }

  s.defect_pixel_count = count_pixels(s.mask);
  area_check(label, s.defect_pixel_count, cfg);
  if (label != Label::good && s.defect_pixel_count == 0)
    throw NumericError("defect sample produced an empty mask");

  if (s.defect_pixel_count > 0) {
    std::size_t ymin = cfg.height, ymax = 0, xmin = cfg.width, xmax = 0;
    for (std::size_t y = 0; y < cfg.height; ++y)
      for (std::size_t x = 0; x < cfg.width; ++x)
        if (s.mask.at2(y, x) > 0.5) {
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
        }
    s.has_bbox = true;
    s.bbox[0] = xmin;
    s.bbox[1] = ymin;
    s.bbox[2] = xmax;
    s.bbox[3] = ymax;
  }
  return s;
}

DatasetManifest generate_dataset(const GenConfig& cfg, const std::string& root_dir) {
  cfg.validate();
  std::size_t total = 0;
  for (std::size_t i = 0; i < kNumLabels; ++i) total += cfg.count_for(static_cast<Label>(i));
  if (total == 0) throw ConfigError("dataset has zero total count");

  std::error_code ec;
  fs::create_directories(fs::path(root_dir) / "images", ec);
  fs::create_directories(fs::path(root_dir) / "masks", ec);
  fs::create_directories(fs::path(root_dir) / "meta", ec);
  if (!fs::is_directory(fs::path(root_dir) / "meta"))
    throw IoError("cannot create dataset directories under " + root_dir);

  DatasetManifest m;
  m.seed = cfg.seed;
  m.config = cfg;

  std::size_t global_index = 0;
  for (std::size_t li = 0; li < kNumLabels; ++li) {
    const Label label = static_cast<Label>(li);
    const std::size_t count = cfg.count_for(label);
    const std::size_t n_train =
        static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(count)));
    for (std::size_t k = 0; k < count; ++k, ++global_index) {
      const std::uint64_t sseed = Rng::mix(cfg.seed, global_index);
      WaferSample s = generate_sample(sseed, label, cfg);
      char idbuf[48];
      std::snprintf(idbuf, sizeof(idbuf), "%s_%04zu", label_name(label).c_str(), k);
      s.sample_id = idbuf;

      ManifestEntry e;
      e.sample_id = s.sample_id;
      e.label = label_name(label);
      e.image = "images/" + s.sample_id + ".png";
      e.mask = "masks/" + s.sample_id + ".png";
      e.meta = "meta/" + s.sample_id + ".json";

      io::write_png_gray((fs::path(root_dir) / e.image).string(), s.image);
      io::write_png_gray((fs::path(root_dir) / e.mask).string(), s.mask);

      json meta{{"sample_id", s.sample_id},
                {"label", e.label},
                {"text_marks", s.text_marks},
                {"seed", s.seed},
                {"defect_pixel_count", s.defect_pixel_count},
                {"cause_key", s.cause_key}};
      meta["defect_bbox"] =
          s.has_bbox ? json::array({s.bbox[0], s.bbox[1], s.bbox[2], s.bbox[3]}) : json();
      write_text_atomic(fs::path(root_dir) / e.meta, meta.dump(2) + "\n");

      if (k < n_train)
        m.train.push_back(e);
      else
        m.test.push_back(e);
    }
  }

  json doc{{"seed", cfg.seed}, {"config", config_to_json(cfg)}};
  auto dump_entries = [](const std::vector<ManifestEntry>& es) {
    json arr = json::array();
    for (const auto& e : es)
      arr.push_back({{"sample_id", e.sample_id},
                     {"label", e.label},
                     {"image", e.image},
                     {"mask", e.mask},
                     {"meta", e.meta}});
    return arr;
  };
  doc["train"] = dump_entries(m.train);
  doc["test"] = dump_entries(m.test);
  write_text_atomic(fs::path(root_dir) / "manifest.json", doc.dump(2) + "\n");
  return m;
}

DatasetManifest load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + manifest_path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FormatError("manifest parse failure: " + std::string(e.what()));
  }
  DatasetManifest m;
  try {
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.config = config_from_json(doc.at("config"));
    auto read_entries = [](const json& arr, std::vector<ManifestEntry>& out) {
      for (const auto& je : arr) {
        ManifestEntry e;
        e.sample_id = je.at("sample_id").get<std::string>();
        e.label = je.at("label").get<std::string>();
        e.image = je.at("image").get<std::string>();
        e.mask = je.at("mask").get<std::string>();
        e.meta = je.at("meta").get<std::string>();
        out.push_back(std::move(e));
      }
    };
    read_entries(doc.at("train"), m.train);
    read_entries(doc.at("test"), m.test);
  } catch (const json::exception& e) {
    throw FormatError("manifest missing fields: " + std::string(e.what()));
  }
  const fs::path dir = fs::path(manifest_path).parent_path();
  for (const auto* split : {&m.train, &m.test})
    for (const auto& e : *split)
      for (const auto* rel : {&e.image, &e.mask, &e.meta})
        if (!fs::exists(dir / *rel)) throw InputError("manifest references missing file: " + *rel);
  return m;
}

WaferSample load_sample(const std::string& manifest_dir, const ManifestEntry& entry) {
  const fs::path dir(manifest_dir);
  WaferSample s;
  s.sample_id = entry.sample_id;
  s.label = label_from_name(entry.label);
  s.image = io::read_png_gray((dir / entry.image).string());
  s.mask = io::read_png_gray((dir / entry.mask).string());
  for (std::size_t i = 0; i < s.mask.size(); ++i) s.mask.at(i) = s.mask.at(i) > 0.5 ? 1.0 : 0.0;

  std::ifstream in(dir / entry.meta, std::ios::binary);
  if (!in) throw IoError("cannot open metadata: " + entry.meta);
  json meta;
  try {
    in >> meta;
    s.text_marks = meta.at("text_marks").get<std::string>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    s.defect_pixel_count = meta.at("defect_pixel_count").get<std::size_t>();
    s.cause_key = meta.at("cause_key").get<std::string>();
    if (!meta.at("defect_bbox").is_null()) {
      s.has_bbox = true;
      for (int i = 0; i < 4; ++i) s.bbox[i] = meta.at("defect_bbox")[i].get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw FormatError("metadata parse failure for " + entry.meta + ": " + e.what());
  }
  return s;
}

std::string extract_text_marks(const WaferSample& sample) { return sample.text_marks; }

}  // namespace fabgpt::synth
