#pragma once

#include <string>
#include <vector>

#include "conlab/manifest.hpp"

namespace conlab::report {

// Assembles the audit document from completed run manifests. Numbers come
// from the referenced artifacts only, never recomputed. The order of eval
// reports matters: first is the baseline column, second the trained column.
// The generated-at stamp is confined to a single header line.
std::string assemble(const std::vector<std::string>& manifest_paths, bool with_timestamp = true);

}  // namespace conlab::report
