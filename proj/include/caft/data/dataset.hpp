#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "caft/data/target_grid.hpp"
#include "caft/data/tokenizer.hpp"
#include "caft/model/caft_model.hpp"

namespace caft::data {

struct Example {
  std::string prompt;
  std::string completion;

  bool operator==(const Example&) const = default;
};

// One JSON object {"prompt": ..., "completion": ...} per line.
std::vector<Example> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples);
std::string to_jsonl(std::span<const Example> examples);
std::uint64_t dataset_hash(std::span<const Example> examples);

// [bos] prompt completion [eos]; loss covers the completion and eos.
struct EncodedExample {
  std::vector<TokenId> ids;
  std::size_t completion_start = 0;
};

EncodedExample encode_example(const Vocabulary& vocab, const Example& example);
std::vector<EncodedExample> encode_all(const Vocabulary& vocab, std::span<const Example> examples);

struct Batch {
  model::TokenBatch tokens;
  TargetGrid grid;
};

// Pads with kPadId to the longest sequence (or `pad_to` if larger).
Batch make_batch(std::span<const EncodedExample> examples, std::size_t n_future, std::size_t pad_to = 0);
Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> order, std::size_t n_future);

// Fingerprint of the token ids in a batch, used to verify matched data order.
std::uint64_t batch_hash(const Batch& batch);

}  // namespace caft::data
