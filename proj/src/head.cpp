#include "fragpredict/head.hpp"

#include <cmath>
#include <random>
#include <string>

#include "fragpredict/error.hpp"
#include "fragpredict/nn.hpp"

namespace fragpredict {

namespace {

std::string Layer(std::size_t i) { return "fc" + std::to_string(i) + "."; }

template <typename Scalar>
std::size_t LayerCount(const ParamStore<Scalar>& params) {
  if (params.size() == 0 || params.size() % 2 != 0) throw Error(ErrorKind::kShape, "malformed classifier head");
  return params.size() / 2;
}

}  // namespace

template <typename Scalar>
ParamStore<Scalar> InitHeadParams(int input_dim, const std::vector<int>& hidden, std::uint64_t seed) {
  if (input_dim < 1) throw Error(ErrorKind::kConfig, "classifier input width must be positive");
  std::vector<int> widths{input_dim};
  for (int h : hidden) {
    if (h < 1) throw Error(ErrorKind::kConfig, "classifier hidden widths must be positive");
    widths.push_back(h);
  }
  widths.push_back(1);
  ParamStore<Scalar> store;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::size_t w = store.Add(Layer(i) + "weight", {widths[i], widths[i + 1]});
    store.Add(Layer(i) + "bias", {widths[i + 1]});
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i]));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    for (Eigen::Index k = 0; k < store.value(w).size(); ++k) {
      store.value(w).data()[k] = static_cast<Scalar>(uniform(rng));
    }
  }
  return store;
}

int HeadInputDim(const ParamStore<float>& head) { return static_cast<int>(head.value("fc0.weight").rows()); }
int HeadInputDim(const ParamStore<double>& head) { return static_cast<int>(head.value("fc0.weight").rows()); }

template <typename Scalar>
Scalar HeadForward(const RowVector<Scalar>& input, const ParamStore<Scalar>& params, HeadCache<Scalar>* cache) {
  const std::size_t layers = LayerCount(params);
  if (input.size() != params.value(0).rows()) {
    throw Error(ErrorKind::kShape, "classifier expects " + std::to_string(params.value(0).rows()) +
                                       " inputs, got " + std::to_string(input.size()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix<Scalar> x = input;
  for (std::size_t i = 0; i < layers; ++i) {
    if (cache) cache->inputs.push_back(x);
    Matrix<Scalar> y = nn::Linear(x, params.value(2 * i), params.value(2 * i + 1));
    if (i + 1 < layers) {
      if (cache) cache->pre.push_back(y);
      x = nn::Gelu<Scalar>(y);
    } else {
      x = std::move(y);
    }
  }
  if (cache) cache->valid = true;
  return x(0, 0);
}

template <typename Scalar>
RowVector<Scalar> HeadBackward(Scalar logit_grad, const HeadCache<Scalar>& cache, const ParamStore<Scalar>& params,
                               typename ParamStore<Scalar>::Gradients& grads) {
  if (!cache.valid) throw Error(ErrorKind::kState, "classifier backward called without a cached forward pass");
  const std::size_t layers = LayerCount(params);
  Matrix<Scalar> d = Matrix<Scalar>::Constant(1, 1, logit_grad);
  for (std::size_t i = layers; i-- > 0;) {
    if (i + 1 < layers) d = nn::GeluBackward<Scalar>(cache.pre[i], d);
    d = nn::LinearBackward<Scalar>(cache.inputs[i], params.value(2 * i), d, grads[2 * i], grads[2 * i + 1]);
  }
  return d;
}

template ParamStore<float> InitHeadParams<float>(int, const std::vector<int>&, std::uint64_t);
template ParamStore<double> InitHeadParams<double>(int, const std::vector<int>&, std::uint64_t);
template float HeadForward<float>(const RowVector<float>&, const ParamStore<float>&, HeadCache<float>*);
template double HeadForward<double>(const RowVector<double>&, const ParamStore<double>&, HeadCache<double>*);
template RowVector<float> HeadBackward<float>(float, const HeadCache<float>&, const ParamStore<float>&,
                                              ParamStore<float>::Gradients&);
template RowVector<double> HeadBackward<double>(double, const HeadCache<double>&, const ParamStore<double>&,
                                                ParamStore<double>::Gradients&);

}  // namespace fragpredict
