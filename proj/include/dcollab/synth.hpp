#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dcollab/errors.hpp"
#include "dcollab/hash.hpp"
#include "dcollab/rng.hpp"

namespace dcollab {

// Deterministic "toy face" generator: an ellipse head with eye/nose dots, a
// mouth arc and an optional glasses bar, rendered from latent orientation /
// scale / position factors. Landmarks are the exact transformed template
// points; attribute labels are either derived from the latents (correlated
// mode) or resampled independently of the image (uncorrelated mode).

struct SynthConfig {
  std::int64_t num_samples = 1000;
  int image_size = 40;  // square, single channel
  double min_angle_deg = -60.0;
  double max_angle_deg = 60.0;
  double min_scale = 0.7;
  double max_scale = 1.1;
  double center_jitter = 2.0;  // uniform [-j, j] per axis, pixels
  double p_smile = 0.5;
  double p_glasses = 0.3;
  double pixel_noise = 0.05;  // additive uniform noise amplitude
  double label_noise = 0.0;   // per-attribute corruption probability
  bool correlated = true;
  std::uint64_t seed = 0;
};

// Landmark order: left eye, right eye, nose tip, left mouth corner, right
// mouth corner. Eye centers are landmarks 0 and 1.
constexpr int kNumLandmarks = 5;
constexpr int kNumAttributes = 4;  // profile, smile, glasses, gender
constexpr int kNumProfileBins = 5;
constexpr int kLeftEye = 0;
constexpr int kRightEye = 1;

struct SampleRecord {
  std::vector<std::uint8_t> image;  // row-major, image_size^2, [0,255]
  std::array<std::array<float, 2>, kNumLandmarks> landmarks;  // (x, y) pixels
  std::uint8_t profile = 0;  // 24-degree-wide orientation bin, 0..4
  std::uint8_t smile = 0;
  std::uint8_t glasses = 0;
  std::uint8_t gender = 0;  // proxy drawn from the face-width latent
};

struct Dataset {
  int image_size = 0;
  std::vector<SampleRecord> samples;

  std::int64_t size() const {
    return static_cast<std::int64_t>(samples.size());
  }

  // FNV-1a over the serialized per-sample payload (identical to the bytes
  // following the file header).
  std::uint64_t content_hash() const;
};

namespace detail {

// Canonical landmark template, face units relative to the face center
// (y grows downward). Scaled by image_size/40 so defaults are size-relative.
inline const std::array<std::array<double, 2>, kNumLandmarks>&
landmark_template() {
  static const std::array<std::array<double, 2>, kNumLandmarks> pts = {{
      {-6.5, -4.5},  // left eye
      {6.5, -4.5},   // right eye
      {0.0, 1.5},    // nose tip
      {-5.0, 7.5},   // left mouth corner
      {5.0, 7.5},    // right mouth corner
  }};
  return pts;
}

inline double template_radius() {
  double r = 0;
  for (const auto& p : landmark_template())
    r = std::max(r, std::hypot(p[0], p[1]));
  return r;
}

struct FacePose {
  double cx, cy;    // face center, pixels
  double cos_t, sin_t;
  double scale;     // includes the image_size/40 unit factor
  double width;     // ellipse width factor (gender latent)

  // face-local units -> image pixels
  std::array<double, 2> map(double x, double y) const {
    const double sx = x * scale, sy = y * scale;
    return {cx + cos_t * sx - sin_t * sy, cy + sin_t * sx + cos_t * sy};
  }
};

inline void stamp_disc(std::vector<double>& img, int s, double px, double py,
                       double radius) {
  const int x0 = std::max(0, static_cast<int>(std::floor(px - radius - 1)));
  const int x1 = std::min(s - 1, static_cast<int>(std::ceil(px + radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(py - radius - 1)));
  const int y1 = std::min(s - 1, static_cast<int>(std::ceil(py + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x - px, y - py);
      const double v = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      double& cell = img[static_cast<std::size_t>(y * s + x)];
      cell = std::max(cell, v);
    }
}

inline void stamp_capsule(std::vector<double>& img, int s, double ax,
                          double ay, double bx, double by, double radius) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  const int x0 = std::max(
      0, static_cast<int>(std::floor(std::min(ax, bx) - radius - 1)));
  const int x1 = std::min(
      s - 1, static_cast<int>(std::ceil(std::max(ax, bx) + radius + 1)));
  const int y0 = std::max(
      0, static_cast<int>(std::floor(std::min(ay, by) - radius - 1)));
  const int y1 = std::min(
      s - 1, static_cast<int>(std::ceil(std::max(ay, by) + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double t = len2 > 0 ? ((x - ax) * vx + (y - ay) * vy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double d = std::hypot(x - (ax + t * vx), y - (ay + t * vy));
      const double v = std::clamp(radius + 0.5 - d, 0.0, 1.0);
      double& cell = img[static_cast<std::size_t>(y * s + x)];
      cell = std::max(cell, v);
    }
}

inline void stamp_ellipse_ring(std::vector<double>& img, int s,
                               const FacePose& pose, double a, double b) {
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      // rotate into face-local coordinates
      const double dx = x - pose.cx, dy = y - pose.cy;
      const double lx = pose.cos_t * dx + pose.sin_t * dy;
      const double ly = -pose.sin_t * dx + pose.cos_t * dy;
      const double q = std::sqrt((lx / a) * (lx / a) + (ly / b) * (ly / b));
      const double d = std::abs(q - 1.0) * 0.5 * (a + b);  // approx px dist
      const double v = std::clamp(1.2 - d, 0.0, 1.0) * 0.8;
      double& cell = img[static_cast<std::size_t>(y * s + x)];
      cell = std::max(cell, v);
    }
}

}  // namespace detail

inline int profile_bin_of_angle(double theta_deg, const SynthConfig& cfg) {
  const double span = (cfg.max_angle_deg - cfg.min_angle_deg) / kNumProfileBins;
  int b = static_cast<int>(std::floor((theta_deg - cfg.min_angle_deg) / span));
  return std::clamp(b, 0, kNumProfileBins - 1);
}

// Exact landmark positions for a pose; exposed for geometry oracles.
inline std::array<std::array<double, 2>, kNumLandmarks> transformed_landmarks(
    double theta_deg, double scl, double cx, double cy, int image_size) {
  const double rad = theta_deg * 3.14159265358979323846 / 180.0;
  detail::FacePose pose{cx,
                        cy,
                        std::cos(rad),
                        std::sin(rad),
                        scl * image_size / 40.0,
                        1.0};
  std::array<std::array<double, 2>, kNumLandmarks> out;
  for (int i = 0; i < kNumLandmarks; ++i) {
    const auto& p = detail::landmark_template()[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = pose.map(p[0], p[1]);
  }
  return out;
}

inline void validate_config(const SynthConfig& cfg) {
  if (cfg.num_samples < 0)
    throw UsageError("synth: num_samples must be non-negative");
  if (cfg.image_size < 8)
    throw UsageError("synth: image_size must be at least 8");
  if (cfg.min_scale <= 0 || cfg.max_scale < cfg.min_scale)
    throw UsageError("synth: invalid scale range");
  if (cfg.max_angle_deg < cfg.min_angle_deg)
    throw UsageError("synth: invalid angle range");
  if (cfg.center_jitter < 0)
    throw UsageError("synth: center jitter must be non-negative");

  // Worst-case landmark excursion must stay inside the image, and the eye
  // separation must not collapse below 4 px (metric denominator).
  const double unit = cfg.image_size / 40.0;
  const double reach = detail::template_radius() * cfg.max_scale * unit +
                       cfg.center_jitter;
  const double half = cfg.image_size / 2.0;
  if (reach >= half)
    throw UsageError(
        "synth: configuration can place landmarks outside the image "
        "(worst-case reach " +
        std::to_string(reach) + " px from center, image half-size " +
        std::to_string(half) + ")");
  const double eye_sep = 13.0 * cfg.min_scale * unit;
  if (eye_sep < 4.0)
    throw UsageError("synth: min scale makes inter-ocular distance " +
                     std::to_string(eye_sep) + " px, below the 4 px floor");
}

inline Dataset generate(const SynthConfig& cfg) {
  validate_config(cfg);
  Dataset ds;
  ds.image_size = cfg.image_size;
  ds.samples.resize(static_cast<std::size_t>(cfg.num_samples));

  const int s = cfg.image_size;
  const double unit = s / 40.0;
  const Rng data_root = Rng(cfg.seed).child("data");

  for (std::int64_t i = 0; i < cfg.num_samples; ++i) {
    Rng rs = data_root.child(static_cast<std::uint64_t>(i));
    SampleRecord& rec = ds.samples[static_cast<std::size_t>(i)];

    const double theta = rs.uniform(cfg.min_angle_deg, cfg.max_angle_deg);
    const double scl = rs.uniform(cfg.min_scale, cfg.max_scale);
    const double jx = rs.uniform(-cfg.center_jitter, cfg.center_jitter);
    const double jy = rs.uniform(-cfg.center_jitter, cfg.center_jitter);
    const double width = rs.uniform(0.85, 1.15);
    const bool smile = rs.bernoulli(cfg.p_smile);
    const bool glasses = rs.bernoulli(cfg.p_glasses);

    const double rad = theta * 3.14159265358979323846 / 180.0;
    detail::FacePose pose{s / 2.0 + jx, s / 2.0 + jy, std::cos(rad),
                          std::sin(rad), scl * unit, width};

    for (int k = 0; k < kNumLandmarks; ++k) {
      const auto& p = detail::landmark_template()[static_cast<std::size_t>(k)];
      const auto q = pose.map(p[0], p[1]);
      rec.landmarks[static_cast<std::size_t>(k)] = {
          static_cast<float>(q[0]), static_cast<float>(q[1])};
    }

    // Render
    std::vector<double> img(static_cast<std::size_t>(s) * s, 0.0);
    detail::stamp_ellipse_ring(img, s, pose, 11.0 * pose.scale * width,
                               14.0 * pose.scale);
    for (int k : {kLeftEye, kRightEye}) {
      const auto& q = rec.landmarks[static_cast<std::size_t>(k)];
      detail::stamp_disc(img, s, q[0], q[1], 1.3 * pose.scale);
    }
    detail::stamp_disc(img, s, rec.landmarks[2][0], rec.landmarks[2][1],
                       0.9 * pose.scale);
    {
      // Mouth: quadratic Bezier through the corners; smiling bends it down
      // in face-local coordinates (corners end up above the middle).
      const double bend = smile ? 2.4 : -0.8;
      const auto p0 = pose.map(-5.0, 7.5);
      const auto p1 = pose.map(5.0, 7.5);
      const auto pm = pose.map(0.0, 7.5 + bend);
      const int steps = 24;
      for (int t = 0; t <= steps; ++t) {
        const double u = static_cast<double>(t) / steps;
        const double w0 = (1 - u) * (1 - u), w1 = 2 * (1 - u) * u,
                     w2 = u * u;
        const double x = w0 * p0[0] + w1 * pm[0] + w2 * p1[0];
        const double y = w0 * p0[1] + w1 * pm[1] + w2 * p1[1];
        detail::stamp_disc(img, s, x, y, 0.7 * pose.scale);
      }
    }
    if (glasses) {
      const auto a = pose.map(-9.5, -4.5);
      const auto b = pose.map(9.5, -4.5);
      detail::stamp_capsule(img, s, a[0], a[1], b[0], b[1],
                            1.3 * pose.scale);
    }

    if (cfg.pixel_noise > 0) {
      Rng rn = rs.child("pixels");
      for (auto& v : img)
        v = std::clamp(v + cfg.pixel_noise * rn.uniform(-1.0, 1.0), 0.0, 1.0);
    }
    rec.image.resize(static_cast<std::size_t>(s) * s);
    for (std::size_t k = 0; k < rec.image.size(); ++k)
      rec.image[k] = static_cast<std::uint8_t>(std::lround(img[k] * 255.0));

    // Labels: derived from latents, or resampled independently of the image.
    if (cfg.correlated) {
      rec.profile = static_cast<std::uint8_t>(profile_bin_of_angle(theta, cfg));
      rec.smile = smile ? 1 : 0;
      rec.glasses = glasses ? 1 : 0;
      rec.gender = width >= 1.0 ? 1 : 0;
    } else {
      Rng rl = rs.child("labels");
      rec.profile =
          static_cast<std::uint8_t>(rl.randint(kNumProfileBins));
      rec.smile = rl.bernoulli(cfg.p_smile) ? 1 : 0;
      rec.glasses = rl.bernoulli(cfg.p_glasses) ? 1 : 0;
      rec.gender = rl.bernoulli(0.5) ? 1 : 0;
    }
    if (cfg.label_noise > 0) {
      Rng rn = rs.child("label_noise");
      if (rn.bernoulli(cfg.label_noise))
        rec.profile = static_cast<std::uint8_t>(rn.randint(kNumProfileBins));
      if (rn.bernoulli(cfg.label_noise)) rec.smile ^= 1;
      if (rn.bernoulli(cfg.label_noise)) rec.glasses ^= 1;
      if (rn.bernoulli(cfg.label_noise)) rec.gender ^= 1;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------
//
// 40-byte header, little endian:
//   bytes 0..3   magic "TOYF"
//   u32 version (1), u32 num_samples, u32 image_size,
//   u32 num_landmarks (5), u32 num_attributes (4), u32 x2 reserved,
//   u64 payload hash (FNV-1a of everything after the header)
// Then per sample: image_size^2 bytes of 8-bit grayscale, 5 landmarks as
// (x, y) float32 pairs, 4 attribute bytes (profile, smile, glasses, gender).

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "dataset container assumes a little-endian host");

inline void append_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void append_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline std::string sample_payload(const Dataset& ds) {
  std::string payload;
  const std::size_t per = static_cast<std::size_t>(ds.image_size) *
                              static_cast<std::size_t>(ds.image_size) +
                          kNumLandmarks * 2 * sizeof(float) + kNumAttributes;
  payload.reserve(per * ds.samples.size());
  for (const auto& rec : ds.samples) {
    payload.append(reinterpret_cast<const char*>(rec.image.data()),
                   rec.image.size());
    for (const auto& lm : rec.landmarks) {
      char b[8];
      std::memcpy(b, &lm[0], 4);
      std::memcpy(b + 4, &lm[1], 4);
      payload.append(b, 8);
    }
    const std::uint8_t attrs[kNumAttributes] = {rec.profile, rec.smile,
                                                rec.glasses, rec.gender};
    payload.append(reinterpret_cast<const char*>(attrs), kNumAttributes);
  }
  return payload;
}

}  // namespace detail

inline std::uint64_t Dataset::content_hash() const {
  const std::string payload = detail::sample_payload(*this);
  return fnv1a64(payload.data(), payload.size());
}

inline void save(const Dataset& ds, const std::string& path) {
  const std::string payload = detail::sample_payload(ds);
  std::string header;
  header.reserve(40);
  header.append("TOYF", 4);
  detail::append_u32(header, 1);
  detail::append_u32(header, static_cast<std::uint32_t>(ds.samples.size()));
  detail::append_u32(header, static_cast<std::uint32_t>(ds.image_size));
  detail::append_u32(header, kNumLandmarks);
  detail::append_u32(header, kNumAttributes);
  detail::append_u32(header, 0);
  detail::append_u32(header, 0);
  detail::append_u64(header, fnv1a64(payload.data(), payload.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("save: cannot open '" + path + "' for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("save: short write to '" + path + "'");
}

inline Dataset load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load: cannot open '" + path + "'");
  char header[40];
  in.read(header, sizeof(header));
  if (in.gcount() != sizeof(header))
    throw FormatError("load: '" + path + "' truncated before header end");
  if (std::memcmp(header, "TOYF", 4) != 0)
    throw FormatError("load: '" + path + "' is not a toy-face dataset (bad "
                      "magic)");
  auto read_u32 = [&](int off) {
    std::uint32_t v;
    std::memcpy(&v, header + off, 4);
    return v;
  };
  const std::uint32_t version = read_u32(4);
  if (version != 1)
    throw FormatError("load: unsupported container version " +
                      std::to_string(version));
  const std::uint32_t count = read_u32(8);
  const std::uint32_t image_size = read_u32(12);
  const std::uint32_t n_land = read_u32(16);
  const std::uint32_t n_attr = read_u32(20);
  if (n_land != kNumLandmarks || n_attr != kNumAttributes)
    throw FormatError("load: unexpected landmark/attribute counts " +
                      std::to_string(n_land) + "/" + std::to_string(n_attr));
  std::uint64_t stored_hash;
  std::memcpy(&stored_hash, header + 32, 8);

  const std::size_t per = static_cast<std::size_t>(image_size) * image_size +
                          kNumLandmarks * 2 * sizeof(float) + kNumAttributes;
  std::string payload(per * count, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    throw FormatError("load: '" + path + "' truncated (expected " +
                      std::to_string(payload.size()) + " payload bytes, got " +
                      std::to_string(in.gcount()) + ")");
  if (fnv1a64(payload.data(), payload.size()) != stored_hash)
    throw FormatError("load: '" + path + "' payload hash mismatch");

  Dataset ds;
  ds.image_size = static_cast<int>(image_size);
  ds.samples.resize(count);
  const char* p = payload.data();
  for (auto& rec : ds.samples) {
    rec.image.resize(static_cast<std::size_t>(image_size) * image_size);
    std::memcpy(rec.image.data(), p, rec.image.size());
    p += rec.image.size();
    for (auto& lm : rec.landmarks) {
      std::memcpy(&lm[0], p, 4);
      std::memcpy(&lm[1], p + 4, 4);
      p += 8;
    }
    rec.profile = static_cast<std::uint8_t>(p[0]);
    rec.smile = static_cast<std::uint8_t>(p[1]);
    rec.glasses = static_cast<std::uint8_t>(p[2]);
    rec.gender = static_cast<std::uint8_t>(p[3]);
    p += 4;
  }
  return ds;
}

}  // namespace dcollab
