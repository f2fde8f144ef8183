#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace caft::eval {

// Concept proxies found in a code snippet by three surface rules:
//   bracketed expressions, (..) [..] {..}, brackets included; nested
//     brackets give the outer span and every inner span;
//   quoted strings, '..' "..", triple-quoted forms, quotes included;
//   identifier chains joined by periods, such as os.path.join.
// Quoted text is opaque: nothing inside a string is scanned further.
struct Extraction {
  std::vector<std::string> spans;  // ordered by start offset, longer span first
  bool unbalanced = false;         // a bracket or quote never closed or closed by the wrong character
};

Extraction extract_code_concepts(std::string_view source);

struct SampleConcepts {
  std::size_t sample_id = 0;
  std::vector<std::string> concepts;
  std::size_t count = 0;
};

// Samples split around the mean concept count. A sample is conceptual iff
// its count is strictly greater than the mean.
struct ConceptInventory {
  std::vector<SampleConcepts> per_sample;
  double mean_count = 0.0;
  std::set<std::size_t> conceptual;
  std::set<std::size_t> non_conceptual;
};

// Logs a warning when every sample lands in one bin. Duplicate ids are an
// InputError.
ConceptInventory make_inventory(std::vector<SampleConcepts> samples);

// Convenience: extract from each source, ids are positions in `sources`.
ConceptInventory inventory_from_sources(const std::vector<std::string>& sources);

// Per-sample outcome: `correct` of `total` items solved.
struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;
  double pct() const { return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total); }
};

using SampleResults = std::map<std::size_t, Tally>;

struct BinComparison {
  double mean_count = 0.0;
  std::size_t n_conceptual = 0;
  std::size_t n_non_conceptual = 0;
  double conceptual_a = 0.0;  // accuracy, percent
  double conceptual_b = 0.0;
  double non_conceptual_a = 0.0;
  double non_conceptual_b = 0.0;
  double conceptual_delta() const { return conceptual_a - conceptual_b; }
  double non_conceptual_delta() const { return non_conceptual_a - non_conceptual_b; }
};

nlohmann::json to_json(const BinComparison& b);

// Pools each system's tallies within each bin. Both result sets must cover
// exactly the inventory's sample ids (InputError listing the offenders).
BinComparison bin_by_conceptual_density(const ConceptInventory& inventory, const SampleResults& results_a,
                                        const SampleResults& results_b);

}  // namespace caft::eval
