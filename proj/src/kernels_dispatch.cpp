#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "prunelab/kernels.hpp"

namespace prunelab::kernels {
namespace {

bool cpu_has_avx2() {
#if (defined(__x86_64__) || defined(_M_X64)) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* table_for(Backend b) {
  switch (b) {
    case Backend::kScalar: return &scalar_table();
    case Backend::kAvx2: return cpu_has_avx2() ? avx2_table() : nullptr;
    case Backend::kNeon: return neon_table();
  }
  return nullptr;
}

const KernelTable* pick_default() {
  const char* env = std::getenv("PRUNELAB_KERNELS");
  const std::string want = env ? env : "auto";
  if (want == "scalar") return &scalar_table();
  if (want == "avx2" && table_for(Backend::kAvx2)) return table_for(Backend::kAvx2);
  if (want == "neon" && table_for(Backend::kNeon)) return table_for(Backend::kNeon);
  if (const KernelTable* t = table_for(Backend::kAvx2)) return t;
  if (const KernelTable* t = table_for(Backend::kNeon)) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar: return "scalar";
    case Backend::kAvx2: return "avx2";
    case Backend::kNeon: return "neon";
  }
  return "unknown";
}

std::vector<Backend> available_backends() {
  std::vector<Backend> out;
  for (Backend b : {Backend::kScalar, Backend::kAvx2, Backend::kNeon}) {
    if (table_for(b)) out.push_back(b);
  }
  return out;
}

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

void set_backend(Backend b) {
  const KernelTable* t = table_for(b);
  if (!t) {
    throw std::invalid_argument("kernel backend not available: " + std::string(backend_name(b)));
  }
  current().store(t, std::memory_order_release);
}

}  // namespace prunelab::kernels
