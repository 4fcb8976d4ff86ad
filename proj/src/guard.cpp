#include "iedp/guard.hpp"

#include "iedp/common.hpp"

namespace iedp::guard {

namespace {
thread_local int g_depth = 0;
thread_local std::uint64_t g_reads = 0;
}  // namespace

bool inference_active() { return g_depth > 0; }

std::uint64_t label_reads() { return g_reads; }

void note_label_read(const std::string& path) {
  if (g_depth > 0)
    throw LeakError("ground-truth read attempted during inference: " + path);
  ++g_reads;
}

LeakGuard::LeakGuard() { ++g_depth; }
LeakGuard::~LeakGuard() { --g_depth; }

}  // namespace iedp::guard
