#pragma once

namespace prorseg {

// Keeps freed tensor buffers in the heap instead of returning them to the OS,
// which removes page-fault churn from the training loop. Idempotent; a no-op
// off glibc.
void configure_allocator();

}  // namespace prorseg
