#include "hmnas/platform.hpp"

#include <cstdlib>  // defines __GLIBC__ where applicable

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hmnas {

void tune_allocator() {
#if defined(__GLIBC__)
  // a generous top pad stops the heap from shrinking and regrowing with every step
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace hmnas
