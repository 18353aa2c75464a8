#include "td3d/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <tuple>
#include <sstream>

#include "td3d/errors.hpp"
#include "td3d/hashing.hpp"
#include "td3d/text_io.hpp"

namespace td3d {
namespace {

constexpr char kMagic[8] = {'T', 'D', '3', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kBlobVersion = 1;
constexpr const char* kManifestHeader = "TD3D-CHECKPOINT v1";

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class BlobReader {
 public:
  BlobReader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename T>
  T get() {
    T v;
    read(&v, sizeof(T));
    return v;
  }
  void read(void* dst, std::size_t n) {
    if (n > data_.size() - pos_) throw DataError(source_ + ": truncated checkpoint blob");
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

bool is_token(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') return false;
  }
  return true;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

const nn::Matrix* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return &m;
  }
  return nullptr;
}

std::string Checkpoint::config_hash() const { return sha256_hex(config_text); }

std::filesystem::path manifest_path_for(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".manifest");
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::string blob(kMagic, sizeof(kMagic));
  put<std::uint32_t>(blob, kBlobVersion);
  put<std::uint64_t>(blob, checkpoint.tensors.size());
  std::set<std::string> seen;
  for (const auto& [name, m] : checkpoint.tensors) {
    if (!is_token(name) || !seen.insert(name).second) throw DataError("checkpoint: bad or duplicate tensor name '" + name + "'");
    put<std::uint32_t>(blob, static_cast<std::uint32_t>(name.size()));
    blob += name;
    put<std::uint64_t>(blob, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(blob, static_cast<std::uint64_t>(m.cols()));
    blob.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }

  std::ostringstream man;
  man << kManifestHeader << '\n';
  man << "config_hash " << checkpoint.config_hash() << '\n';
  man << "blob_sha256 " << sha256_hex(blob) << '\n';
  for (const auto& [k, v] : checkpoint.meta) {
    if (!is_token(k) || !is_token(v)) throw DataError("checkpoint: metadata must be single tokens ('" + k + "')");
    man << "meta " << k << ' ' << v << '\n';
  }
  man << "tensors " << checkpoint.tensors.size() << '\n';
  for (const auto& [name, m] : checkpoint.tensors) man << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  std::size_t config_lines = 0;
  for (char c : checkpoint.config_text) config_lines += c == '\n' ? 1 : 0;
  if (!checkpoint.config_text.empty() && checkpoint.config_text.back() != '\n') {
    throw DataError("checkpoint: config text must end with a newline");
  }
  man << "config " << config_lines << '\n' << checkpoint.config_text;

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw DataError("cannot write " + path.string());
  }
  std::ofstream out(manifest_path_for(path), std::ios::binary | std::ios::trunc);
  out << man.str();
  if (!out) throw DataError("cannot write " + manifest_path_for(path).string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto mpath = manifest_path_for(path);
  const std::string source = mpath.string();
  std::ifstream min(mpath, std::ios::binary);
  if (!min) throw DataError("cannot open " + source);
  text::LineReader reader(min);
  std::string line;

  auto next = [&](const char* what) {
    if (!reader.next(line)) throw ParseError(source, reader.line_number() + 1, std::string("missing ") + what);
    std::vector<std::string> tokens;
    for (auto tok : text::split_ws(line)) tokens.emplace_back(tok);
    return tokens;
  };
  auto integer = [&](const std::string& tok) {
    long long v = 0;
    if (!text::parse_int(tok, v)) throw ParseError(source, reader.line_number(), "bad integer '" + tok + "'");
    return v;
  };
  auto expect_key = [&](const std::vector<std::string>& t, const char* key, std::size_t n) {
    if (t.size() != n || t[0] != key) throw ParseError(source, reader.line_number(), std::string("expected '") + key + "'");
  };

  if (!reader.next(line)) throw ParseError(source, 1, "empty manifest");
  if (line != kManifestHeader) throw ParseError(source, reader.line_number(), "bad manifest header");
  auto t = next("config_hash");
  expect_key(t, "config_hash", 2);
  const std::string config_hash = t[1];
  t = next("blob_sha256");
  expect_key(t, "blob_sha256", 2);
  const std::string blob_sha = t[1];

  Checkpoint ck;
  t = next("tensors");
  while (!t.empty() && t[0] == "meta") {
    expect_key(t, "meta", 3);
    ck.meta[t[1]] = t[2];
    t = next("tensors");
  }
  expect_key(t, "tensors", 2);
  const long long count = integer(t[1]);
  if (count < 0) throw ParseError(source, reader.line_number(), "negative tensor count");
  std::vector<std::tuple<std::string, long long, long long>> listed;
  for (long long i = 0; i < count; ++i) {
    t = next("tensor entry");
    expect_key(t, "tensor", 4);
    listed.emplace_back(t[1], integer(t[2]), integer(t[3]));
  }
  t = next("config");
  expect_key(t, "config", 2);
  const long long config_lines = integer(t[1]);
  for (long long i = 0; i < config_lines; ++i) {
    if (!reader.next(line)) throw ParseError(source, reader.line_number() + 1, "truncated embedded config");
    ck.config_text += line + '\n';
  }
  if (reader.next(line)) throw ParseError(source, reader.line_number(), "trailing content after embedded config");
  if (ck.config_hash() != config_hash) throw DataError(source + ": config_hash does not match the embedded config");

  const std::string blob = read_all(path);
  if (sha256_hex(blob) != blob_sha) throw DataError(path.string() + ": blob_sha256 mismatch (file corrupted)");
  BlobReader br(blob, path.string());
  char magic[sizeof(kMagic)];
  br.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError(path.string() + ": not a checkpoint blob");
  if (br.get<std::uint32_t>() != kBlobVersion) throw DataError(path.string() + ": unsupported blob version");
  const auto n = br.get<std::uint64_t>();
  if (n != static_cast<std::uint64_t>(count)) throw DataError(path.string() + ": tensor count differs from manifest");
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto len = br.get<std::uint32_t>();
    std::string name(len, '\0');
    br.read(name.data(), len);
    const auto rows = br.get<std::uint64_t>();
    const auto cols = br.get<std::uint64_t>();
    const auto& [lname, lrows, lcols] = listed[i];
    if (name != lname || static_cast<long long>(rows) != lrows || static_cast<long long>(cols) != lcols) {
      throw DataError(path.string() + ": tensor '" + name + "' does not match manifest entry '" + lname + "'");
    }
    if (rows > (1u << 28) || cols > (1u << 28)) throw DataError(path.string() + ": implausible tensor shape");
    nn::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    br.read(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (!br.done()) throw DataError(path.string() + ": trailing bytes in checkpoint blob");
  return ck;
}

void append_tensors(Checkpoint& checkpoint, const std::string& prefix, const nn::ParameterSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i) checkpoint.tensors.emplace_back(prefix + params[i].name, params[i].value);
}

void check_tensors(const Checkpoint& checkpoint, const std::string& prefix, const nn::ParameterSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = prefix + params[i].name;
    const nn::Matrix* m = checkpoint.find(name);
    if (m == nullptr) throw DataError("checkpoint is missing tensor '" + name + "'");
    if (m->rows() != params[i].value.rows() || m->cols() != params[i].value.cols()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + std::to_string(m->rows()) + "x" +
                      std::to_string(m->cols()) + ", expected " + std::to_string(params[i].value.rows()) + "x" +
                      std::to_string(params[i].value.cols()));
    }
  }
}

void copy_tensors(const Checkpoint& checkpoint, const std::string& prefix, nn::ParameterSet& params) {
  check_tensors(checkpoint, prefix, params);
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = *checkpoint.find(prefix + params[i].name);
}

}  // namespace td3d
