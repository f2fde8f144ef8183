#include "caft/data/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "caft/common/error.hpp"
#include "caft/common/hash.hpp"
#include "json.hpp"

namespace caft::data {

std::vector<Example> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("prompt").get<std::string>(), j.at("completion").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string to_jsonl(std::span<const Example> examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += nlohmann::json{{"prompt", ex.prompt}, {"completion", ex.completion}}.dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write dataset '" + path.string() + "'");
  out << to_jsonl(examples);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::uint64_t dataset_hash(std::span<const Example> examples) { return fnv1a(to_jsonl(examples)); }

EncodedExample encode_example(const Vocabulary& vocab, const Example& example) {
  EncodedExample e;
  e.ids.push_back(kBosId);
  const auto prompt = vocab.encode(example.prompt);
  e.ids.insert(e.ids.end(), prompt.begin(), prompt.end());
  e.completion_start = e.ids.size();
  const auto completion = vocab.encode(example.completion);
  e.ids.insert(e.ids.end(), completion.begin(), completion.end());
  e.ids.push_back(kEosId);
  return e;
}

std::vector<EncodedExample> encode_all(const Vocabulary& vocab, std::span<const Example> examples) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode_example(vocab, ex));
  return out;
}

Batch make_batch(std::span<const EncodedExample> examples, std::size_t n_future, std::size_t pad_to) {
  if (examples.empty()) throw InputError("make_batch: no examples");
  std::size_t seq = pad_to;
  for (const auto& e : examples) seq = std::max(seq, e.ids.size());
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> starts;
  Batch b;
  b.tokens = {std::vector<TokenId>(examples.size() * seq, kPadId), examples.size(), seq};
  for (std::size_t i = 0; i < examples.size(); ++i) {
    std::copy(examples[i].ids.begin(), examples[i].ids.end(), b.tokens.ids.begin() + static_cast<long>(i * seq));
    seqs.push_back(examples[i].ids);
    starts.push_back(examples[i].completion_start);
  }
  b.grid = build_batch_grid(seqs, starts, n_future, seq);
  return b;
}

Batch make_batch(std::span<const EncodedExample> examples, std::span<const std::size_t> order, std::size_t n_future) {
  std::vector<EncodedExample> picked;
  picked.reserve(order.size());
  for (std::size_t i : order) picked.push_back(examples[i]);
  return make_batch(picked, n_future);
}

std::uint64_t batch_hash(const Batch& batch) {
  Fnv1a h;
  h.update_values<std::size_t>(std::vector<std::size_t>{batch.tokens.batch, batch.tokens.seq});
  h.update_values<TokenId>(batch.tokens.ids);
  return h.digest();
}

}  // namespace caft::data
