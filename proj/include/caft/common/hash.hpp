#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

namespace caft {

// 64-bit FNV-1a. Used for batch-order logs, split digests and run-directory
// names, where stability across builds matters more than collision strength.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  void update_values(std::span<const T> values) {
    update(std::as_bytes(values));
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view text) {
  Fnv1a h;
  h.update(text);
  return h.digest();
}

std::string hex64(std::uint64_t value);

}  // namespace caft
