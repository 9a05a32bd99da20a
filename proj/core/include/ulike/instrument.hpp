#pragma once

#include <cstdint>

namespace ulike {

namespace detail {
extern thread_local std::uint64_t* active_mac_counter;
}

/// Adds `n` multiply-accumulates to the innermost active MacCounter on this
/// thread. Kernels call this with the work they actually execute.
inline void count_macs(std::uint64_t n) {
  if (detail::active_mac_counter != nullptr) *detail::active_mac_counter += n;
}

/// RAII scope that records every MAC executed on this thread while alive.
/// Scopes nest; only the innermost one receives counts.
class MacCounter {
 public:
  MacCounter() : previous_(detail::active_mac_counter) {
    detail::active_mac_counter = &count_;
  }
  ~MacCounter() { detail::active_mac_counter = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t macs() const noexcept { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

}  // namespace ulike
