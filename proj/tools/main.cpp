#include "fctn/cli.hpp"

#include <malloc.h>

#include <iostream>

int main(int argc, char** argv) {
  // Keep large scratch buffers (im2col, activations) on the heap instead of
  // fresh mmap pages every step; page faults otherwise dominate conv time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return fctn::cli_main(argc, argv, std::cout, std::cerr);
}
