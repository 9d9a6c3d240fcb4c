#include <iostream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "cli.hpp"

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Graph tensors are allocated and freed every batch; keep them off mmap
    // and stop trimming the heap, which otherwise dominates system time.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
    return fgd::cli::run(argc, argv, std::cout, std::cerr);
}
