#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "rep/checkpoint.hpp"
#include "rep/errors.hpp"
#include "rep/rng.hpp"
#include "rep/tensor.hpp"

namespace rep {

struct Sample {
  std::vector<std::uint8_t> pixels;  // image_side^2, row-major
  std::uint16_t label = 0;
};

struct Task {
  std::vector<int> classes;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

struct TaskStream {
  std::size_t image_side = 32;
  std::uint64_t seed = 0;
  std::vector<Task> tasks;

  std::size_t n_classes() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.classes.size();
    return n;
  }
};

struct SyntheticSpec {
  std::size_t image_side = 32;
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double noise = 0.5;
  std::uint64_t seed = 1;
  /// Separates pattern families: the pre-training distribution uses a
  /// different family so its classes never coincide with stream classes.
  std::string family = "stream";
};

/// Appearance of one class: an oriented grating plus a Gaussian blob.
struct ClassTemplate {
  double orientation, frequency, phase;
  double blob_x, blob_y, blob_radius, blob_amp;

  static ClassTemplate draw(RngStream rng, std::size_t side) {
    const double s = static_cast<double>(side);
    ClassTemplate t{};
    t.orientation = rng.uniform(0.0, std::numbers::pi);
    t.frequency = rng.uniform(1.0, 4.0);
    t.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    t.blob_x = rng.uniform(0.2 * s, 0.8 * s);
    t.blob_y = rng.uniform(0.2 * s, 0.8 * s);
    t.blob_radius = rng.uniform(0.08 * s, 0.2 * s);
    t.blob_amp = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return t;
  }

  /// Renders with per-sample jitter (phase, blob offset, pixel noise) all
  /// scaled by `noise`; noise == 0 reproduces the template exactly.
  std::vector<std::uint8_t> render(std::size_t side, double noise, const RngStream& rng) const {
    const double s = static_cast<double>(side);
    const double jitter_phase = noise * rng.normal_at(0);
    const double jx = noise * 1.5 * rng.normal_at(1), jy = noise * 1.5 * rng.normal_at(2);
    const double c = std::cos(orientation), sn = std::sin(orientation);
    std::vector<std::uint8_t> px(side * side);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        double v = 0.5 * std::sin(2.0 * std::numbers::pi * frequency * (fx * c + fy * sn) / s + phase + jitter_phase);
        const double dx = fx - blob_x - jx, dy = fy - blob_y - jy;
        v += blob_amp * std::exp(-(dx * dx + dy * dy) / (2.0 * blob_radius * blob_radius));
        v += noise * 0.5 * rng.normal_at(3 + y * side + x);
        px[y * side + x] = static_cast<std::uint8_t>(std::clamp(std::lround(128.0 + 60.0 * v), 0L, 255L));
      }
    }
    return px;
  }
};

/// Class-incremental stream of disjoint synthetic classes. Task k owns
/// classes [k * classes_per_task, (k + 1) * classes_per_task).
inline TaskStream gen_synthetic_stream(const SyntheticSpec& spec) {
  if (spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.train_per_class == 0 || spec.image_side == 0) {
    throw ConfigError("synthetic stream parameters must be positive");
  }
  if (spec.n_tasks * spec.classes_per_task > 65535) throw ConfigError("too many classes for u16 labels");
  TaskStream stream;
  stream.image_side = spec.image_side;
  stream.seed = spec.seed;
  const RngStream root(spec.seed, "data/" + spec.family);
  for (std::size_t k = 0; k < spec.n_tasks; ++k) {
    Task task;
    for (std::size_t i = 0; i < spec.classes_per_task; ++i) {
      const int cls = static_cast<int>(k * spec.classes_per_task + i);
      task.classes.push_back(cls);
      const RngStream crng = root.child("class" + std::to_string(cls));
      const ClassTemplate tpl = ClassTemplate::draw(crng.child("template"), spec.image_side);
      auto make = [&](const char* split, std::size_t count, std::vector<Sample>& out) {
        for (std::size_t n = 0; n < count; ++n) {
          const RngStream srng = crng.child(std::string(split) + std::to_string(n));
          out.push_back(Sample{tpl.render(spec.image_side, spec.noise, srng), static_cast<std::uint16_t>(cls)});
        }
      };
      make("train", spec.train_per_class, task.train);
      make("test", spec.test_per_class, task.test);
    }
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

/// u8 pixels -> centred floats, images[B, S, S].
inline Tensor images_tensor(const std::vector<const Sample*>& batch, std::size_t side) {
  Tensor t({batch.size(), side, side});
  auto d = t.data();
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < side * side; ++i) d[b * side * side + i] = (static_cast<double>(batch[b]->pixels[i]) - 128.0) / 64.0;
  return t;
}

// Dataset file:
//   "REPD1", u32 image_side, u32 task count,
//   per task: u32 class count, u32 train count, u32 test count, class ids as u16,
//             then train and test samples, each side^2 u8 pixels + u16 label.
// All integers little-endian.

inline std::vector<char> encode_dataset(const TaskStream& s) {
  detail::ByteWriter w;
  for (char c : {'R', 'E', 'P', 'D', '1'}) w.bytes.push_back(c);
  w.u32(static_cast<std::uint32_t>(s.image_side));
  w.u32(static_cast<std::uint32_t>(s.tasks.size()));
  for (const auto& t : s.tasks) {
    w.u32(static_cast<std::uint32_t>(t.classes.size()));
    w.u32(static_cast<std::uint32_t>(t.train.size()));
    w.u32(static_cast<std::uint32_t>(t.test.size()));
    for (int c : t.classes) w.u16(static_cast<std::uint16_t>(c));
    for (const auto* split : {&t.train, &t.test})
      for (const auto& smp : *split) {
        w.bytes.insert(w.bytes.end(), smp.pixels.begin(), smp.pixels.end());
        w.u16(smp.label);
      }
  }
  return std::move(w.bytes);
}

inline TaskStream decode_dataset(const std::vector<char>& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), "REPD1", 5) != 0) throw InputError("not a dataset file (bad magic)");
  detail::ByteReader r(bytes);
  r.skip(5);
  TaskStream s;
  s.image_side = r.u32();
  const std::uint32_t nt = r.u32();
  const std::size_t px = s.image_side * s.image_side;
  for (std::uint32_t k = 0; k < nt; ++k) {
    Task t;
    const std::uint32_t nc = r.u32(), ntr = r.u32(), nte = r.u32();
    for (std::uint32_t i = 0; i < nc; ++i) t.classes.push_back(r.u16());
    for (auto [split, count] : {std::pair{&t.train, ntr}, std::pair{&t.test, nte}}) {
      for (std::uint32_t n = 0; n < count; ++n) {
        Sample smp;
        r.need(px + 2);
        smp.pixels.resize(px);
        for (auto& p : smp.pixels) p = r.u8();
        smp.label = r.u16();
        split->push_back(std::move(smp));
      }
    }
    s.tasks.push_back(std::move(t));
  }
  if (r.pos() != bytes.size()) throw InputError("trailing bytes after dataset");
  return s;
}

/// Gatekeeper between the trainer and the stream. Every training read is
/// checked against the active task; reads of other tasks' training data are
/// logged, so an empty audit log certifies the run was rehearsal-free.
class AuditedLoader {
 public:
  explicit AuditedLoader(const TaskStream& stream) : stream_(&stream) {}

  void begin_task(std::size_t k) {
    if (k >= stream_->tasks.size()) throw ConfigError("task index out of range");
    active_ = k;
  }
  std::size_t active_task() const { return active_; }

  const Sample& train_sample(std::size_t task, std::size_t index) {
    if (task != active_) {
      audit_.push_back("read train sample " + std::to_string(index) + " of task " + std::to_string(task) +
                       " while training task " + std::to_string(active_));
    }
    ++reads_;
    return stream_->tasks.at(task).train.at(index);
  }

  const std::vector<Sample>& test_set(std::size_t task) const { return stream_->tasks.at(task).test; }
  const TaskStream& stream() const { return *stream_; }
  const std::vector<std::string>& audit_log() const { return audit_; }
  std::size_t reads() const { return reads_; }

 private:
  const TaskStream* stream_;
  std::size_t active_ = 0;
  std::size_t reads_ = 0;
  std::vector<std::string> audit_;
};

}  // namespace rep
