#pragma once

namespace sldm {

/// Keeps freed heap blocks for reuse instead of returning them to the OS.
/// Training allocates many short-lived megabyte-sized matrices; without this
/// glibc maps and unmaps each one, and page faults dominate the step time.
/// No-op on other C libraries. Call once at program start.
void tune_allocator();

}  // namespace sldm
