#include <malloc.h>

#include <iostream>

#include "cfsl/cli/app.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees the same large activation buffers every
  // step; keeping them on the heap instead of mmap/munmap saves ~20%.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return cfsl::cli::run(argc, argv, std::cout, std::cerr);
}
