#ifndef IEDP_GUARD_HPP
#define IEDP_GUARD_HPP

#include <cstdint>
#include <string>

namespace iedp::guard {

// Leak guard: while active on the current thread, any attempt to read a
// ground-truth annotation (mask or depth file) throws LeakError. Inference
// paths run under this guard so no label can influence predictions.

bool inference_active();
std::uint64_t label_reads();

// called by every label/depth loader before touching the file
void note_label_read(const std::string& path);

struct LeakGuard {
  LeakGuard();
  ~LeakGuard();
  LeakGuard(const LeakGuard&) = delete;
};

}  // namespace iedp::guard

#endif  // IEDP_GUARD_HPP
