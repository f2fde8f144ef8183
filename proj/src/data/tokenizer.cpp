#include "caft/data/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "caft/common/error.hpp"
#include "caft/common/hash.hpp"

namespace caft::data {

namespace {

const std::string kSpecialNames[kNumSpecials] = {"<pad>", "<bos>", "<eos>"};

}  // namespace

std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> units;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    if (text[j] == ' ') ++j;
    while (j < text.size() && text[j] != ' ') ++j;
    units.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return units;
}

Vocabulary::Vocabulary(std::vector<std::string> pieces, std::vector<Merge> merges)
    : pieces_(std::move(pieces)), merges_(std::move(merges)) {
  if (pieces_.size() < kNumSpecials) throw FormatError("vocabulary lacks the special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (pieces_[i] != kSpecialNames[i]) {
      throw FormatError("vocabulary id " + std::to_string(i) + " must be " + kSpecialNames[i] + ", found '" +
                        pieces_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw FormatError("vocabulary piece " + std::to_string(i) + " is empty");
    if (!index_.emplace(pieces_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("vocabulary piece '" + pieces_[i] + "' appears twice");
    }
    if (i >= kNumSpecials) longest_piece_ = std::max(longest_piece_, pieces_[i].size());
  }
  base_size_ = kNumSpecials;
  while (base_size_ < pieces_.size() && pieces_[base_size_].size() == 1) ++base_size_;
  for (const auto& [a, b] : merges_) {
    if (!index_.contains(a) || !index_.contains(b) || !index_.contains(a + b)) {
      throw FormatError("merge ('" + a + "', '" + b + "') refers to unknown pieces");
    }
  }
}

const std::string& Vocabulary::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(pieces_.size()));
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view piece) const {
  const auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t pos = 0;
  std::string probe;
  while (pos < text.size()) {
    std::size_t len = std::min(longest_piece_, text.size() - pos);
    TokenId match = -1;
    for (; len > 0; --len) {
      probe.assign(text.substr(pos, len));
      const auto it = index_.find(probe);
      if (it != index_.end() && !is_special(it->second)) {
        match = it->second;
        break;
      }
    }
    if (match < 0) {
      throw InputError("character '" + std::string(1, text[pos]) + "' (byte " +
                       std::to_string(static_cast<unsigned char>(text[pos])) + ") at offset " + std::to_string(pos) +
                       " is not in the vocabulary");
    }
    ids.push_back(match);
    pos += len;
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (!is_special(id)) out += piece(id);
  }
  return out;
}

std::string Vocabulary::fingerprint() const { return hex64(fnv1a(to_json().dump())); }

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : merges_) merges.push_back({a, b});
  return {{"pieces", pieces_}, {"merges", merges}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  try {
    std::vector<Merge> merges;
    for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    return Vocabulary(j.at("pieces").get<std::vector<std::string>>(), std::move(merges));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("vocabulary: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary '" + path.string() + "'");
  out << to_json().dump(1) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary '" + path.string() + "'");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t vocab_size) {
  std::map<std::string, std::size_t> unit_counts;
  std::set<char> alphabet;
  for (const auto& text : corpus) {
    for (auto& unit : pretokenize(text)) {
      alphabet.insert(unit.begin(), unit.end());
      ++unit_counts[std::move(unit)];
    }
  }
  if (unit_counts.empty()) throw InputError("train_bpe: corpus is empty");

  std::vector<std::string> pieces(std::begin(kSpecialNames), std::end(kSpecialNames));
  for (char c : alphabet) pieces.emplace_back(1, c);
  if (vocab_size < pieces.size()) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " is below the base size " +
                      std::to_string(pieces.size()) + " (3 specials + " + std::to_string(alphabet.size()) +
                      " characters)");
  }

  struct Word {
    std::vector<std::string> symbols;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [unit, count] : unit_counts) {
    Word w{{}, count};
    for (char c : unit) w.symbols.emplace_back(1, c);
    words.push_back(std::move(w));
  }

  std::set<std::string> known(pieces.begin(), pieces.end());
  std::vector<Merge> merges;
  while (pieces.size() < vocab_size) {
    std::map<Merge, std::size_t> pair_counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;
    }
    if (pair_counts.empty()) {
      spdlog::info("train_bpe: no pairs left after {} merges; vocabulary has {} pieces", merges.size(), pieces.size());
      break;
    }
    // std::map iterates pairs in lexicographic order, so the first maximum
    // is the smallest pair among ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const Merge merge = best->first;
    const std::string joined = merge.first + merge.second;
    for (auto& w : words) {
      std::vector<std::string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == merge.first && w.symbols[i + 1] == merge.second) {
          next.push_back(joined);
          ++i;
        } else {
          next.push_back(w.symbols[i]);
        }
      }
      w.symbols = std::move(next);
    }
    merges.push_back(merge);
    if (known.insert(joined).second) pieces.push_back(joined);
  }
  return Vocabulary(std::move(pieces), std::move(merges));
}

}  // namespace caft::data
