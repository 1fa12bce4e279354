#pragma once

namespace hmnas {

// Keeps glibc from handing heap pages back to the kernel after each step; the
// autograd tape allocates and frees many of them per step. No-op elsewhere.
void tune_allocator();

}  // namespace hmnas
