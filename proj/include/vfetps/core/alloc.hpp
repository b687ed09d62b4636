#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace vfetps {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every step. Call once at program start; no-op off glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace vfetps
