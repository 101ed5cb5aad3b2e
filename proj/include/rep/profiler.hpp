#pragma once

#include <cstdint>

namespace rep {

/// Deterministic compute/memory accountant. Ops report multiply-accumulates
/// and the bytes they retain for the backward pass; nothing is timed.
struct Profiler {
  std::uint64_t macs = 0;
  std::uint64_t retained_bytes = 0;

  std::uint64_t flops() const noexcept { return 2 * macs; }
  void reset() noexcept { *this = Profiler{}; }
};

namespace detail {
inline thread_local Profiler* active_profiler = nullptr;
}

/// Installs a profiler for the current thread for the lifetime of the scope.
class ProfileScope {
 public:
  explicit ProfileScope(Profiler& p) noexcept : prev_(detail::active_profiler) {
    detail::active_profiler = &p;
  }
  ~ProfileScope() { detail::active_profiler = prev_; }
  ProfileScope(const ProfileScope&) = delete;
  ProfileScope& operator=(const ProfileScope&) = delete;

 private:
  Profiler* prev_;
};

inline void record_macs(std::uint64_t n) noexcept {
  if (detail::active_profiler) detail::active_profiler->macs += n;
}

inline void record_retained(std::uint64_t bytes) noexcept {
  if (detail::active_profiler) detail::active_profiler->retained_bytes += bytes;
}

}  // namespace rep
