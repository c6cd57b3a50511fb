// Prints the OpenBLAS core type matching the host ISA, or nothing when the
// default runtime detection can be trusted to do at least as well.
#include <cstdio>

int main() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    if (__builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512dq") &&
        __builtin_cpu_supports("avx512bw")) {
        std::printf("SKYLAKEX");
    } else if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
        std::printf("HASWELL");
    }
#endif
    return 0;
}
