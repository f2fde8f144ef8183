#include "caft/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "caft/common/error.hpp"

namespace caft::model {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'F', 'T'};
constexpr std::uint64_t kMaxHeaderBytes = 1u << 24;
constexpr std::uint32_t kMaxNameBytes = 4096;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  template <typename T>
  T get(const char* what) {
    T value;
    need(sizeof(T), what);
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t offset() const { return pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(source_ + ": " + msg + " (at byte offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      fail(std::string("truncated while reading ") + what + ": need " + std::to_string(n) + " bytes, " +
           std::to_string(remaining()) + " left");
    }
  }

  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = archive.header.dump();
  put<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint64_t>(out, archive.tensors.size());
  for (const auto& [name, tensor] : archive.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) put<std::uint64_t>(out, d);
    const auto data = tensor.data();
    put<std::uint64_t>(out, data.size() * sizeof(double));
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot open '" + tmp.string() + "' for writing");
    const std::string bytes = out.str();
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << file.rdbuf();
  Reader r(buf.str(), path.string());

  const std::string magic = r.get_bytes(4, "magic");
  if (magic != std::string(kMagic, 4)) r.fail("bad magic bytes, not a CAFT checkpoint");
  const auto version = r.get<std::uint32_t>("format version");
  if (version != kCheckpointVersion) {
    r.fail("unsupported format version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = r.get<std::uint64_t>("header length");
  if (header_len > kMaxHeaderBytes) r.fail("implausible header length " + std::to_string(header_len));
  TensorArchive archive;
  try {
    archive.header = nlohmann::json::parse(r.get_bytes(header_len, "header"));
  } catch (const nlohmann::json::parse_error& e) {
    r.fail(std::string("header is not valid JSON: ") + e.what());
  }

  const auto count = r.get<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    if (name_len == 0 || name_len > kMaxNameBytes) r.fail("implausible tensor name length " + std::to_string(name_len));
    std::string name = r.get_bytes(name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > kMaxRank) r.fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    engine::Shape shape(rank);
    std::uint64_t elems = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>("tensor dimension");
      if (d != 0 && elems > r.remaining() / d) r.fail("tensor '" + name + "' dimensions exceed file size");
      elems *= d;
    }
    const auto byte_len = r.get<std::uint64_t>("tensor byte length");
    if (byte_len != elems * sizeof(double)) {
      r.fail("tensor '" + name + "' declares " + std::to_string(byte_len) + " bytes but shape " +
             engine::to_string(shape) + " needs " + std::to_string(elems * sizeof(double)));
    }
    const std::string raw = r.get_bytes(byte_len, "tensor data");
    std::vector<double> values(elems);
    std::memcpy(values.data(), raw.data(), byte_len);
    archive.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (r.remaining() != 0) r.fail(std::to_string(r.remaining()) + " trailing bytes after last tensor");
  return archive;
}

void save_model(const std::filesystem::path& path, CaftModel& model) {
  if (model.has_adapters()) throw ContractError("save_model: merge LoRA adapters before saving");
  TensorArchive archive;
  archive.header = {{"kind", "model"}, {"config", to_json(model.config())}};
  archive.tensors = model.parameters();
  write_archive(path, archive);
}

CaftModel load_model(const std::filesystem::path& path) {
  TensorArchive archive = read_archive(path);
  if (!archive.header.is_object() || archive.header.value("kind", "") != "model") {
    throw FormatError(path.string() + ": header kind is not 'model'");
  }
  if (!archive.header.contains("config")) throw FormatError(path.string() + ": header lacks a model config");
  try {
    return model_from_parameters(model_config_from_json(archive.header.at("config")), std::move(archive.tensors));
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace caft::model
