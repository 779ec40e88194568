#pragma once

// Toy-scale global-context vision transformer. Each stage alternates
// local-window self-attention blocks (even block index) with blocks whose
// queries are a shared set of global tokens pooled from the whole stage
// (odd block index); stages are joined by 2x2 patch merging.
//
// Tokens are stored one per row in row-major grid order. All layers are
// templated on the scalar type and explicitly instantiated for float and
// double.

#include <cstdint>
#include <string>
#include <vector>

#include "fragpredict/nn.hpp"
#include "fragpredict/params.hpp"

namespace fragpredict {

struct BackboneConfig {
  int input_size = 64;
  int patch_size = 4;
  std::vector<int> stage_dims{32, 64};
  std::vector<int> depths{2, 2};
  int window_size = 4;
  std::vector<int> num_heads{2, 4};
  int mlp_ratio = 4;
  double layer_norm_eps = 1e-5;
  // Only "avgpool_linear" is implemented: average-pool to a window-sized grid,
  // then a linear projection.
  std::string global_extractor = "avgpool_linear";

  int num_stages() const { return static_cast<int>(stage_dims.size()); }
  int feature_dim() const { return stage_dims.back(); }
  int GridSide(int stage) const { return (input_size / patch_size) >> stage; }

  // Throws kConfig naming the violated constraint.
  void Validate() const;

  // 16x16 input, one stage of width 8: the gradient-check configuration.
  static BackboneConfig Micro();
};

bool operator==(const BackboneConfig& a, const BackboneConfig& b);

template <typename Scalar>
struct AttentionBlockCache {
  nn::LayerNormCache<Scalar> norm;
  Matrix<Scalar> normed;
  Matrix<Scalar> projected;  // qkv (local) or kv (global), N x {3C, 2C}
  std::vector<nn::AttentionCache<Scalar>> windows;
  Matrix<Scalar> mixed;  // attention output before the output projection
};

template <typename Scalar>
struct MlpBlockCache {
  nn::LayerNormCache<Scalar> norm;
  Matrix<Scalar> normed;
  Matrix<Scalar> hidden;  // before GELU
  Matrix<Scalar> activated;
};

template <typename Scalar>
struct StageCache {
  Matrix<Scalar> pooled;         // global token generator input
  Matrix<Scalar> global_tokens;  // window_size^2 x C
  std::vector<AttentionBlockCache<Scalar>> attention;
  std::vector<MlpBlockCache<Scalar>> mlp;
  Matrix<Scalar> merged;  // downsample input, (N/4) x 4C
};

template <typename Scalar>
struct BackboneCache {
  bool valid = false;
  Matrix<Scalar> patches;  // N x patch_size^2
  std::vector<StageCache<Scalar>> stages;
  Matrix<Scalar> final_tokens;
  nn::LayerNormCache<Scalar> final_norm;
};

// Closed-form parameter count for a config.
std::int64_t BackboneParameterCount(const BackboneConfig& config);

// Truncated-normal (std 0.02, cut at 2 std) weights, zero biases, unit
// layer-norm gains. Identical seeds give bit-identical stores.
template <typename Scalar>
ParamStore<Scalar> InitBackboneParams(const BackboneConfig& config, std::uint64_t seed);

// Rows of the grid (side x side, row-major) belonging to each window, windows
// in row-major order and rows within a window in row-major order.
std::vector<std::vector<int>> WindowPartition(int side, int window);

template <typename Scalar>
Matrix<Scalar> PatchEmbed(const Matrix<Scalar>& image, const ParamStore<Scalar>& params,
                          const BackboneConfig& config, Matrix<Scalar>* patches = nullptr);

template <typename Scalar>
Matrix<Scalar> LocalWindowAttention(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                                    const BackboneConfig& config, int stage, int block,
                                    AttentionBlockCache<Scalar>* cache = nullptr);

template <typename Scalar>
Matrix<Scalar> GlobalQueryAttention(const Matrix<Scalar>& tokens, const Matrix<Scalar>& global_tokens,
                                    const ParamStore<Scalar>& params, const BackboneConfig& config,
                                    int stage, int block, AttentionBlockCache<Scalar>* cache = nullptr);

template <typename Scalar>
Matrix<Scalar> GlobalTokenGen(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                              const BackboneConfig& config, int stage, Matrix<Scalar>* pooled = nullptr);

template <typename Scalar>
Matrix<Scalar> MlpSubBlock(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                           const BackboneConfig& config, int stage, int block,
                           MlpBlockCache<Scalar>* cache = nullptr);

template <typename Scalar>
Matrix<Scalar> Downsample(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                          const BackboneConfig& config, int stage, Matrix<Scalar>* merged = nullptr);

// Image (input_size x input_size, values in [0,1]) to a feature_dim row.
template <typename Scalar>
RowVector<Scalar> BackboneForward(const Matrix<Scalar>& image, const ParamStore<Scalar>& params,
                                  const BackboneConfig& config, BackboneCache<Scalar>* cache = nullptr);

// Reverse pass from d(loss)/d(features); accumulates into grads (one matrix
// per parameter, in store order). Throws kState without a valid cache.
template <typename Scalar>
void BackboneBackward(const RowVector<Scalar>& feature_grad, const BackboneCache<Scalar>& cache,
                      const ParamStore<Scalar>& params, const BackboneConfig& config,
                      typename ParamStore<Scalar>::Gradients& grads);

}  // namespace fragpredict
