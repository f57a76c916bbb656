#include "tandem/kernels.hpp"

#include <cstdlib>
#include <string>

namespace tandem::kernels {

void configure_threads_from_env() {
  const char* env = std::getenv("TANDEM_NUM_THREADS");
  if (!env || !*env) return;
  const int n = std::atoi(env);
  if (n <= 0) return;
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace tandem::kernels
