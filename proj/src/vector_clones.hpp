#pragma once

// Hot numeric kernels get an AVX2 clone picked at load time on x86-64. FMA is
// not enabled, so every clone rounds exactly like the baseline build.
#if defined(__x86_64__) && defined(__GNUC__) && !defined(__clang__) && !defined(__AVX2__)
#define PREFIXPROP_VECTOR_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define PREFIXPROP_VECTOR_CLONES
#endif
