#include "gammadesk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "gammadesk/errors.hpp"

namespace gammadesk {

namespace {

constexpr char kCkptMagic[8] = {'G', 'D', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr char kTensorMagic[8] = {'G', 'D', 'T', 'E', 'N', 'S', 'O', 'R'};

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IngestionError(origin_ + ": truncated file");
  }
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

void put_tensor_body(std::string& out, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

Tensor get_tensor_body(Reader& r) {
  const auto rank = r.get<std::uint32_t>();
  if (rank == 0 || rank > 8) throw IngestionError(r.origin() + ": bad tensor rank " + std::to_string(rank));
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    n *= shape.back();
  }
  std::vector<double> data(n);
  for (auto& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>());
  return Tensor(std::move(shape), std::move(data));
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestionError("write failed for " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  std::string out(kCkptMagic, sizeof kCkptMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_tensor_body(out, p.value);
  }
  spit(path, out);
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string());
  if (r.take(8) != std::string(kCkptMagic, 8)) throw IngestionError(path.string() + ": not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IngestionError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.take(len);
    params.add(std::move(name), get_tensor_body(r));
  }
  if (!r.done()) throw IngestionError(path.string() + ": trailing bytes");
  return params;
}

void load_checkpoint_into(const std::filesystem::path& path, ParameterSet& params) {
  ParameterSet loaded = load_checkpoint(path);
  if (loaded.size() != params.size())
    throw IngestionError(path.string() + ": expected " + std::to_string(params.size()) + " parameters, found " +
                         std::to_string(loaded.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (loaded[i].name != params[i].name || loaded[i].value.shape() != params[i].value.shape())
      throw IngestionError(path.string() + ": parameter " + std::to_string(i) + " is '" + loaded[i].name + "' " +
                           shape_str(loaded[i].value.shape()) + ", expected '" + params[i].name + "' " +
                           shape_str(params[i].value.shape()));
    params[i].value = loaded[i].value;
  }
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::string out(kTensorMagic, sizeof kTensorMagic);
  put_le<std::uint32_t>(out, 1);
  put_tensor_body(out, t);
  spit(path, out);
}

Tensor load_tensor(const std::filesystem::path& path) {
  Reader r(slurp(path), path.string());
  if (r.take(8) != std::string(kTensorMagic, 8)) throw IngestionError(path.string() + ": not a tensor dump");
  if (r.get<std::uint32_t>() != 1) throw IngestionError(path.string() + ": unsupported tensor dump version");
  Tensor t = get_tensor_body(r);
  if (!r.done()) throw IngestionError(path.string() + ": trailing bytes");
  return t;
}

}  // namespace gammadesk
