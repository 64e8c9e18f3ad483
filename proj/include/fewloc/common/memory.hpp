#pragma once

namespace fewloc {

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel, so training steps stop paying for fresh zeroed pages. Idempotent.
void retain_freed_memory();

}  // namespace fewloc
