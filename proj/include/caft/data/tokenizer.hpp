#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "caft/engine/ops.hpp"
#include "json.hpp"

namespace caft::data {

using engine::TokenId;
using Merge = std::pair<std::string, std::string>;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr std::size_t kNumSpecials = 3;

// Splits text into BPE units: each unit is an optional single leading space
// followed by a maximal run of non-space characters.
std::vector<std::string> pretokenize(std::string_view text);

// Piece table learned by BPE over the characters of a training corpus.
// Ids 0..2 are <pad>, <bos>, <eos>; the single characters follow in byte
// order, then one piece per merge in merge order.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> pieces, std::vector<Merge> merges);

  std::size_t size() const { return pieces_.size(); }
  std::size_t base_size() const { return base_size_; }
  const std::string& piece(TokenId id) const;
  std::optional<TokenId> find(std::string_view piece) const;
  const std::vector<Merge>& merges() const { return merges_; }
  bool is_special(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < kNumSpecials; }

  // Greedy longest match over non-special pieces. Throws InputError on a
  // character outside the vocabulary.
  std::vector<TokenId> encode(std::string_view text) const;
  // Concatenated pieces; special ids render as nothing.
  std::string decode(std::span<const TokenId> ids) const;

  std::string fingerprint() const;
  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> pieces_;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t base_size_ = 0;
  std::size_t longest_piece_ = 0;
};

// Byte-pair encoding: start from the corpus characters and repeatedly merge
// the most frequent adjacent pair (ties: lexicographically smallest pair)
// until `vocab_size` pieces exist, specials included, or no pair remains.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t vocab_size);

}  // namespace caft::data
