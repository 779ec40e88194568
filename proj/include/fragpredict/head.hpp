#pragma once

// Classifier MLP: input -> hidden... -> 1 logit, GELU between layers.

#include <cstdint>
#include <vector>

#include "fragpredict/params.hpp"

namespace fragpredict {

inline const std::vector<int> kDefaultHeadHidden{64, 32};

template <typename Scalar>
struct HeadCache {
  bool valid = false;
  std::vector<Matrix<Scalar>> inputs;  // input to each linear layer
  std::vector<Matrix<Scalar>> pre;     // output of each hidden linear layer, before GELU
};

// Weights uniform in +-1/sqrt(fan_in), zero biases. Layers are named fc0, fc1, ...
template <typename Scalar>
ParamStore<Scalar> InitHeadParams(int input_dim, const std::vector<int>& hidden, std::uint64_t seed);

int HeadInputDim(const ParamStore<float>& head);
int HeadInputDim(const ParamStore<double>& head);

template <typename Scalar>
Scalar HeadForward(const RowVector<Scalar>& input, const ParamStore<Scalar>& params,
                   HeadCache<Scalar>* cache = nullptr);

// Accumulates parameter gradients for d(loss)/d(logit) and returns d(loss)/d(input).
template <typename Scalar>
RowVector<Scalar> HeadBackward(Scalar logit_grad, const HeadCache<Scalar>& cache, const ParamStore<Scalar>& params,
                               typename ParamStore<Scalar>::Gradients& grads);

}  // namespace fragpredict
