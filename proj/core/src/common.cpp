#include "adbench/common.hpp"

#include <cstdio>
#include <cstdlib>

#ifdef ADBENCH_HAVE_OPENMP
#include <omp.h>
#endif

namespace adbench {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

namespace {

bool read_strict_env() {
  const char* v = std::getenv("ADBENCH_STRICT");
  return v != nullptr && v[0] == '1';
}

int default_threads() {
  if (read_strict_env()) return 1;
#ifdef ADBENCH_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

int g_threads = default_threads();

}  // namespace

int kernel_threads() { return g_threads; }

void set_kernel_threads(int n) { g_threads = n < 1 ? 1 : n; }

bool strict_mode() {
  static const bool strict = read_strict_env();
  return strict;
}

}  // namespace adbench
