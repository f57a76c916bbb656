#pragma once

#include <cstdint>
#include <ostream>

namespace tandem::tools {

/// Invariant suite on random micro-models. Prints one line per check and
/// returns the number of failures.
int run_selfcheck(std::ostream& out, std::uint64_t seed);

}  // namespace tandem::tools
