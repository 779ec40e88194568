#include "fragpredict/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fragpredict/error.hpp"

namespace fragpredict {

namespace {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

constexpr char kMagic[4] = {'G', 'C', 'V', 'T'};

void PutU32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::uint32_t U32() {
    Need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  void Copy(void* dst, std::size_t n) {
    Need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool AtEnd() const { return pos_ == bytes_.size(); }

 private:
  void Need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorKind::kIo, "weight file truncated");
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> EncodeWeights(const std::vector<WeightRecord>& records) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  PutU32(out, kWeightFileVersion);
  PutU32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    PutU32(out, static_cast<std::uint32_t>(rec.name.size()));
    out.insert(out.end(), rec.name.begin(), rec.name.end());
    PutU32(out, static_cast<std::uint32_t>(rec.dims.size()));
    std::size_t expected = 1;
    for (auto d : rec.dims) {
      PutU32(out, d);
      expected *= d;
    }
    if (expected != rec.data.size()) {
      throw Error(ErrorKind::kShape, "weight record '" + rec.name + "' data length mismatch");
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(rec.data.data());
    out.insert(out.end(), raw, raw + rec.data.size() * sizeof(float));
  }
  return out;
}

std::vector<WeightRecord> DecodeWeights(const std::vector<unsigned char>& bytes) {
  Reader in(bytes);
  char magic[4];
  in.Copy(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorKind::kIo, "bad weight file magic");
  const auto version = in.U32();
  if (version != kWeightFileVersion) {
    throw Error(ErrorKind::kIo, "unsupported weight file version " + std::to_string(version));
  }
  const auto count = in.U32();
  std::vector<WeightRecord> records;
  records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    WeightRecord rec;
    rec.name.resize(in.U32());
    in.Copy(rec.name.data(), rec.name.size());
    const auto rank = in.U32();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.dims.push_back(in.U32());
      n *= rec.dims.back();
    }
    rec.data.resize(n);
    in.Copy(rec.data.data(), n * sizeof(float));
    records.push_back(std::move(rec));
  }
  if (!in.AtEnd()) throw Error(ErrorKind::kIo, "trailing bytes after weight records");
  return records;
}

void WriteWeightFile(const std::filesystem::path& path, const std::vector<WeightRecord>& records) {
  const auto bytes = EncodeWeights(records);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "short write to " + path.string());
}

std::vector<WeightRecord> ReadWeightFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open weight file " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  return DecodeWeights(bytes);
}

template <typename Scalar>
std::size_t ParamStore<Scalar>::Add(std::string name, std::vector<Eigen::Index> shape) {
  if (shape.empty() || shape.size() > 2) {
    throw Error(ErrorKind::kShape, "parameter '" + name + "' must have rank 1 or 2");
  }
  if (index_.count(name)) throw Error(ErrorKind::kConfig, "duplicate parameter name '" + name + "'");
  const Eigen::Index rows = shape.size() == 1 ? 1 : shape[0];
  const Eigen::Index cols = shape.back();
  const std::size_t i = values_.size();
  index_.emplace(name, i);
  names_.push_back(std::move(name));
  shapes_.push_back(std::move(shape));
  values_.push_back(Mat::Zero(rows, cols));
  grads_.push_back(Mat::Zero(rows, cols));
  return i;
}

template <typename Scalar>
bool ParamStore<Scalar>::Contains(std::string_view name) const {
  return index_.count(std::string(name)) > 0;
}

template <typename Scalar>
std::size_t ParamStore<Scalar>::IndexOf(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error(ErrorKind::kState, "unknown parameter '" + std::string(name) + "'");
  return it->second;
}

template <typename Scalar>
Eigen::Index ParamStore<Scalar>::ParameterCount() const {
  Eigen::Index n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

template <typename Scalar>
void ParamStore<Scalar>::ZeroGrad() {
  for (auto& g : grads_) g.setZero();
}

template <typename Scalar>
typename ParamStore<Scalar>::Gradients ParamStore<Scalar>::ZeroGradients() const {
  Gradients g;
  g.reserve(values_.size());
  for (const auto& v : values_) g.push_back(Mat::Zero(v.rows(), v.cols()));
  return g;
}

template <typename Scalar>
void ParamStore<Scalar>::SetGradients(Gradients g) {
  if (g.size() != grads_.size()) throw Error(ErrorKind::kShape, "gradient count mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i].rows() != values_[i].rows() || g[i].cols() != values_[i].cols()) {
      throw Error(ErrorKind::kShape, "gradient shape mismatch for '" + names_[i] + "'");
    }
  }
  grads_ = std::move(g);
}

template <typename Scalar>
std::vector<WeightRecord> ParamStore<Scalar>::ToRecords() const {
  std::vector<WeightRecord> records;
  records.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) {
    WeightRecord rec;
    rec.name = names_[i];
    for (auto d : shapes_[i]) rec.dims.push_back(static_cast<std::uint32_t>(d));
    const Matrix<float> as_float = values_[i].template cast<float>();
    rec.data.assign(as_float.data(), as_float.data() + as_float.size());
    records.push_back(std::move(rec));
  }
  return records;
}

template <typename Scalar>
ParamStore<Scalar> ParamStore<Scalar>::FromRecords(const std::vector<WeightRecord>& records) {
  ParamStore store;
  for (const auto& rec : records) {
    std::vector<Eigen::Index> shape(rec.dims.begin(), rec.dims.end());
    store.Add(rec.name, shape);
  }
  store.LoadRecords(records);
  return store;
}

template <typename Scalar>
void ParamStore<Scalar>::LoadRecords(const std::vector<WeightRecord>& records) {
  if (records.size() != size()) {
    throw Error(ErrorKind::kShape, "weight file has " + std::to_string(records.size()) +
                                       " tensors, model expects " + std::to_string(size()));
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (rec.name != names_[i]) {
      throw Error(ErrorKind::kShape, "weight file tensor " + std::to_string(i) + " is '" + rec.name +
                                         "', expected '" + names_[i] + "'");
    }
    const std::vector<Eigen::Index> dims(rec.dims.begin(), rec.dims.end());
    if (dims != shapes_[i]) throw Error(ErrorKind::kShape, "shape mismatch for '" + rec.name + "'");
    values_[i] = Eigen::Map<const Matrix<float>>(rec.data.data(), values_[i].rows(), values_[i].cols())
                     .template cast<Scalar>();
  }
}

template <typename Scalar>
bool ParamStore<Scalar>::operator==(const ParamStore& other) const {
  if (names_ != other.names_ || shapes_ != other.shapes_) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    if (values_[i] != other.values_[i]) return false;
  }
  return true;
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace fragpredict
