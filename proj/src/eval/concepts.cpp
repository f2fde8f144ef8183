#include "caft/eval/concepts.hpp"

#include <algorithm>
#include <cctype>
#include <tuple>

#include <spdlog/spdlog.h>

#include "caft/common/error.hpp"

namespace caft::eval {

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

char closer_for(char open) {
  switch (open) {
    case '(': return ')';
    case '[': return ']';
    default: return '}';
  }
}

// End offset (one past the closing quote) of the string starting at `i`, or
// npos when it never closes. Single-quoted forms end at a newline.
std::size_t string_end(std::string_view s, std::size_t i) {
  const char q = s[i];
  const bool triple = s.compare(i, 3, std::string(3, q)) == 0;
  std::size_t j = i + (triple ? 3 : 1);
  while (j < s.size()) {
    if (s[j] == '\\') {
      j += 2;
      continue;
    }
    if (triple) {
      if (s.compare(j, 3, std::string(3, q)) == 0) return j + 3;
    } else {
      if (s[j] == q) return j + 1;
      if (s[j] == '\n') return std::string_view::npos;
    }
    ++j;
  }
  return std::string_view::npos;
}

}  // namespace

Extraction extract_code_concepts(std::string_view s) {
  std::vector<std::tuple<std::size_t, std::size_t>> found;  // (start, end)
  std::vector<std::pair<char, std::size_t>> open;
  Extraction out;

  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '"' || c == '\'') {
      const std::size_t end = string_end(s, i);
      if (end == std::string_view::npos) {
        out.unbalanced = true;
        ++i;
        continue;
      }
      found.emplace_back(i, end);
      i = end;
    } else if (c == '(' || c == '[' || c == '{') {
      open.emplace_back(c, i);
      ++i;
    } else if (c == ')' || c == ']' || c == '}') {
      auto match = std::find_if(open.rbegin(), open.rend(), [&](const auto& o) { return closer_for(o.first) == c; });
      if (match == open.rend()) {
        out.unbalanced = true;
      } else {
        if (match != open.rbegin()) out.unbalanced = true;
        found.emplace_back(match->second, i + 1);
        open.erase(std::next(match).base(), open.end());
      }
      ++i;
    } else if (std::isdigit(static_cast<unsigned char>(c))) {
      while (i < s.size() && (ident_char(s[i]) || s[i] == '.')) ++i;
    } else if (ident_start(c)) {
      const bool attribute = i > 0 && s[i - 1] == '.';
      const std::size_t start = i;
      std::size_t parts = 0;
      for (;;) {
        while (i < s.size() && ident_char(s[i])) ++i;
        ++parts;
        if (i + 1 < s.size() && s[i] == '.' && ident_start(s[i + 1])) {
          ++i;
          continue;
        }
        break;
      }
      if (parts >= 2 && !attribute) found.emplace_back(start, i);
    } else {
      ++i;
    }
  }
  if (!open.empty()) out.unbalanced = true;

  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) < std::get<0>(b);
    return std::get<1>(a) > std::get<1>(b);
  });
  for (const auto& [start, end] : found) out.spans.emplace_back(s.substr(start, end - start));
  return out;
}

ConceptInventory make_inventory(std::vector<SampleConcepts> samples) {
  if (samples.empty()) throw InputError("concept inventory needs at least one sample");
  ConceptInventory inv;
  double total = 0.0;
  std::set<std::size_t> seen;
  for (const auto& s : samples) {
    if (!seen.insert(s.sample_id).second) throw InputError("duplicate sample id " + std::to_string(s.sample_id));
    total += static_cast<double>(s.count);
  }
  inv.mean_count = total / static_cast<double>(samples.size());
  for (const auto& s : samples) {
    (static_cast<double>(s.count) > inv.mean_count ? inv.conceptual : inv.non_conceptual).insert(s.sample_id);
  }
  if (inv.conceptual.empty() || inv.non_conceptual.empty()) {
    spdlog::warn("conceptual-density binning is degenerate: all {} samples fall in one bin (mean count {:.3f})",
                 samples.size(), inv.mean_count);
  }
  inv.per_sample = std::move(samples);
  return inv;
}

ConceptInventory inventory_from_sources(const std::vector<std::string>& sources) {
  std::vector<SampleConcepts> samples;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    Extraction e = extract_code_concepts(sources[i]);
    const std::size_t n = e.spans.size();
    samples.push_back({i, std::move(e.spans), n});
  }
  return make_inventory(std::move(samples));
}

nlohmann::json to_json(const BinComparison& b) {
  return {{"mean_count", b.mean_count},
          {"n_conceptual", b.n_conceptual},
          {"n_non_conceptual", b.n_non_conceptual},
          {"conceptual_a", b.conceptual_a},
          {"conceptual_b", b.conceptual_b},
          {"non_conceptual_a", b.non_conceptual_a},
          {"non_conceptual_b", b.non_conceptual_b},
          {"conceptual_delta", b.conceptual_delta()},
          {"non_conceptual_delta", b.non_conceptual_delta()}};
}

namespace {

void check_coverage(const ConceptInventory& inv, const SampleResults& results, const std::string& label) {
  std::vector<std::size_t> missing, extra;
  for (const auto& s : inv.per_sample) {
    if (!results.contains(s.sample_id)) missing.push_back(s.sample_id);
  }
  std::set<std::size_t> ids;
  for (const auto& s : inv.per_sample) ids.insert(s.sample_id);
  for (const auto& [id, tally] : results) {
    if (!ids.contains(id)) extra.push_back(id);
  }
  if (missing.empty() && extra.empty()) return;
  auto list = [](const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
    return out;
  };
  std::string msg = "results of system " + label + " do not match the inventory:";
  if (!missing.empty()) msg += " missing ids [" + list(missing) + "]";
  if (!extra.empty()) msg += " unknown ids [" + list(extra) + "]";
  throw InputError(msg);
}

double pooled_pct(const std::set<std::size_t>& ids, const SampleResults& results) {
  Tally t;
  for (std::size_t id : ids) {
    t.correct += results.at(id).correct;
    t.total += results.at(id).total;
  }
  return t.pct();
}

}  // namespace

BinComparison bin_by_conceptual_density(const ConceptInventory& inventory, const SampleResults& results_a,
                                        const SampleResults& results_b) {
  check_coverage(inventory, results_a, "A");
  check_coverage(inventory, results_b, "B");
  BinComparison b;
  b.mean_count = inventory.mean_count;
  b.n_conceptual = inventory.conceptual.size();
  b.n_non_conceptual = inventory.non_conceptual.size();
  b.conceptual_a = pooled_pct(inventory.conceptual, results_a);
  b.conceptual_b = pooled_pct(inventory.conceptual, results_b);
  b.non_conceptual_a = pooled_pct(inventory.non_conceptual, results_a);
  b.non_conceptual_b = pooled_pct(inventory.non_conceptual, results_b);
  return b;
}

}  // namespace caft::eval
