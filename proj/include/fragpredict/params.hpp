#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace fragpredict {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// One named tensor as stored on disk: row-major f32 payload.
struct WeightRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

// Container layout (all integers little-endian u32):
//   "GCVT" | version | count | count x (name_len | name | rank | dims... | f32 data)
inline constexpr std::uint32_t kWeightFileVersion = 1;

void WriteWeightFile(const std::filesystem::path& path, const std::vector<WeightRecord>& records);
std::vector<WeightRecord> ReadWeightFile(const std::filesystem::path& path);
std::vector<unsigned char> EncodeWeights(const std::vector<WeightRecord>& records);
std::vector<WeightRecord> DecodeWeights(const std::vector<unsigned char>& bytes);

// Named trainable tensors with parallel gradients, kept in insertion order.
// Rank-1 tensors are stored as 1 x n matrices, rank-2 as rows x cols.
template <typename Scalar>
class ParamStore {
 public:
  using Mat = Matrix<Scalar>;
  using Gradients = std::vector<Mat>;

  std::size_t Add(std::string name, std::vector<Eigen::Index> shape);

  std::size_t size() const { return values_.size(); }
  bool Contains(std::string_view name) const;
  std::size_t IndexOf(std::string_view name) const;

  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<Eigen::Index>& shape(std::size_t i) const { return shapes_[i]; }

  Mat& value(std::size_t i) { return values_[i]; }
  const Mat& value(std::size_t i) const { return values_[i]; }
  Mat& value(std::string_view n) { return values_[IndexOf(n)]; }
  const Mat& value(std::string_view n) const { return values_[IndexOf(n)]; }

  Mat& grad(std::size_t i) { return grads_[i]; }
  const Mat& grad(std::size_t i) const { return grads_[i]; }
  Mat& grad(std::string_view n) { return grads_[IndexOf(n)]; }

  Eigen::Index ParameterCount() const;

  void ZeroGrad();
  Gradients ZeroGradients() const;
  void SetGradients(Gradients g);

  std::vector<WeightRecord> ToRecords() const;
  static ParamStore FromRecords(const std::vector<WeightRecord>& records);
  // Copies values from records into this store; names and shapes must match exactly.
  void LoadRecords(const std::vector<WeightRecord>& records);

  template <typename Other>
  ParamStore<Other> Cast() const {
    ParamStore<Other> out;
    for (std::size_t i = 0; i < size(); ++i) {
      out.Add(names_[i], shapes_[i]);
      out.value(i) = values_[i].template cast<Other>();
    }
    return out;
  }

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<Eigen::Index>> shapes_;
  std::vector<Mat> values_;
  std::vector<Mat> grads_;
  std::unordered_map<std::string, std::size_t> index_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace fragpredict
