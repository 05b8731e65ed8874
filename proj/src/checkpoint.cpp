#include "ulab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ulab::lm {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'U', 'L', 'A', 'B'};
constexpr std::uint32_t kVersion = 1;

template <typename I>
void put(std::string& out, I v) {
  char buf[sizeof(I)];
  std::memcpy(buf, &v, sizeof(I));
  out.append(buf, sizeof(I));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(I));
    pos_ += sizeof(I);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  void scalars(std::vector<T>& out) {
    need(out.size() * sizeof(T));
    std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(T));
    pos_ += out.size() * sizeof(T);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint: truncated file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
std::string serialize_impl(const ModelParams<T>& params) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape) put<std::uint64_t>(out, d);
    put<std::uint8_t>(out, std::is_same_v<T, float> ? 0 : 1);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(T));
  }
  return out;
}

}  // namespace

std::string serialize(const ModelParams<float>& params) { return serialize_impl(params); }
std::string serialize(const ModelParams<double>& params) { return serialize_impl(params); }

template <typename T>
ModelParams<T> deserialize(const std::string& bytes, const ModelConfig& config) {
  Reader in(bytes);
  if (in.str(4) != std::string(kMagic, 4)) throw Error("checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();
  const auto expected = param_shapes(config);
  if (count != expected.size()) {
    throw Error("checkpoint: holds " + std::to_string(count) + " tensors, config expects " +
                std::to_string(expected.size()));
  }
  ModelParams<T> p;
  p.config = config;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = in.str(in.get<std::uint16_t>());
    Shape shape(in.get<std::uint8_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(in.get<std::uint64_t>());
    const auto dtype = in.get<std::uint8_t>();
    if (name != expected[i].first || shape != expected[i].second) {
      throw Error("checkpoint: tensor " + std::to_string(i) + " is '" + name + "' " +
                  shape_str(shape) + ", config expects '" + expected[i].first + "' " +
                  shape_str(expected[i].second));
    }
    Tensor<T> t(shape);
    if (dtype == 0) {
      std::vector<float> raw(t.numel());
      in.scalars(raw);
      for (std::size_t k = 0; k < raw.size(); ++k) t.data[k] = static_cast<T>(raw[k]);
    } else if (dtype == 1) {
      std::vector<double> raw(t.numel());
      in.scalars(raw);
      for (std::size_t k = 0; k < raw.size(); ++k) t.data[k] = static_cast<T>(raw[k]);
    } else {
      throw Error("checkpoint: unknown dtype " + std::to_string(dtype));
    }
    p.tensors.emplace_back(name, std::move(t));
  }
  if (!in.done()) throw Error("checkpoint: trailing bytes");
  return p;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot write " + path.string());
  const auto bytes = serialize(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("checkpoint: write failed for " + path.string());
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize<T>(ss.str(), config);
}

std::string fingerprint(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template ModelParams<float> deserialize(const std::string&, const ModelConfig&);
template ModelParams<double> deserialize(const std::string&, const ModelConfig&);
template void save_checkpoint(const std::filesystem::path&, const ModelParams<float>&);
template void save_checkpoint(const std::filesystem::path&, const ModelParams<double>&);
template ModelParams<float> load_checkpoint(const std::filesystem::path&, const ModelConfig&);
template ModelParams<double> load_checkpoint(const std::filesystem::path&, const ModelConfig&);

}  // namespace ulab::lm
