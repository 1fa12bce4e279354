#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "hmnas/platform.hpp"

int main(int argc, char** argv) {
  hmnas::tune_allocator();
  return doctest::Context(argc, argv).run();
}
