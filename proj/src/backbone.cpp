#include "fragpredict/backbone.hpp"

#include <random>

#include "fragpredict/error.hpp"

namespace fragpredict {

namespace {

using nn::Mat;

std::string StagePrefix(int stage) { return "stages." + std::to_string(stage) + "."; }

std::string BlockPrefix(int stage, int block) {
  return StagePrefix(stage) + "blocks." + std::to_string(block) + ".";
}

bool IsLocalBlock(int block) { return block % 2 == 0; }

void RequireShape(const char* layer, Eigen::Index rows, Eigen::Index cols, Eigen::Index want_rows,
                  Eigen::Index want_cols) {
  if (rows != want_rows || cols != want_cols) {
    throw Error(ErrorKind::kShape, std::string(layer) + ": expected " + std::to_string(want_rows) +
                                       "x" + std::to_string(want_cols) + " input, got " +
                                       std::to_string(rows) + "x" + std::to_string(cols));
  }
}

template <typename Scalar>
Scalar Eps(const BackboneConfig& config) {
  return static_cast<Scalar>(config.layer_norm_eps);
}

// Reverse of LocalWindowAttention / GlobalQueryAttention. Returns d(tokens);
// for global blocks also accumulates d(global tokens).
template <typename Scalar>
Mat<Scalar> AttentionBackward(const Mat<Scalar>& dout, const AttentionBlockCache<Scalar>& cache,
                              const Mat<Scalar>* global_tokens, Mat<Scalar>* dglobal,
                              const ParamStore<Scalar>& params, const BackboneConfig& config, int stage,
                              int block, typename ParamStore<Scalar>::Gradients& grads) {
  const std::string prefix = BlockPrefix(stage, block) + "attn.";
  const bool local = global_tokens == nullptr;
  const Eigen::Index dim = config.stage_dims[stage];
  const int heads = config.num_heads[stage];
  const auto windows = WindowPartition(config.GridSide(stage), config.window_size);

  const std::size_t wp = params.IndexOf(prefix + "proj.weight");
  const std::size_t bp = params.IndexOf(prefix + "proj.bias");
  const Mat<Scalar> dmixed = nn::LinearBackward<Scalar>(cache.mixed, params.value(wp), dout, grads[wp], grads[bp]);

  Mat<Scalar> dprojected = Mat<Scalar>::Zero(cache.projected.rows(), cache.projected.cols());
  Mat<Scalar> dq, dk, dv;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const Mat<Scalar> rows = nn::GatherRows(cache.projected, windows[w]);
    const Mat<Scalar> dmix_w = nn::GatherRows(dmixed, windows[w]);
    if (local) {
      nn::MultiHeadAttentionBackward<Scalar>(rows.leftCols(dim), rows.middleCols(dim, dim), rows.rightCols(dim),
                                             heads, cache.windows[w], dmix_w, dq, dk, dv);
      Mat<Scalar> dqkv(rows.rows(), 3 * dim);
      dqkv << dq, dk, dv;
      nn::ScatterAddRows(dqkv, windows[w], dprojected);
    } else {
      nn::MultiHeadAttentionBackward<Scalar>(*global_tokens, rows.leftCols(dim), rows.rightCols(dim), heads,
                                             cache.windows[w], dmix_w, dq, dk, dv);
      *dglobal += dq;
      Mat<Scalar> dkv(rows.rows(), 2 * dim);
      dkv << dk, dv;
      nn::ScatterAddRows(dkv, windows[w], dprojected);
    }
  }
  const std::string proj_name = prefix + (local ? "qkv" : "kv");
  const std::size_t wq = params.IndexOf(proj_name + ".weight");
  const std::size_t bq = params.IndexOf(proj_name + ".bias");
  const Mat<Scalar> dnormed = nn::LinearBackward<Scalar>(cache.normed, params.value(wq), dprojected, grads[wq], grads[bq]);

  const std::string norm = BlockPrefix(stage, block) + "norm1.";
  const std::size_t g = params.IndexOf(norm + "weight");
  const std::size_t b = params.IndexOf(norm + "bias");
  Mat<Scalar> dtokens = dout;
  dtokens += nn::LayerNormBackward<Scalar>(cache.norm, params.value(g), dnormed, grads[g], grads[b]);
  return dtokens;
}

template <typename Scalar>
Mat<Scalar> MlpBackward(const Mat<Scalar>& dout, const MlpBlockCache<Scalar>& cache,
                        const ParamStore<Scalar>& params, int stage, int block,
                        typename ParamStore<Scalar>::Gradients& grads) {
  const std::string prefix = BlockPrefix(stage, block);
  const std::size_t w2 = params.IndexOf(prefix + "mlp.fc2.weight");
  const std::size_t b2 = params.IndexOf(prefix + "mlp.fc2.bias");
  const Mat<Scalar> dact = nn::LinearBackward<Scalar>(cache.activated, params.value(w2), dout, grads[w2], grads[b2]);
  const Mat<Scalar> dhidden = nn::GeluBackward<Scalar>(cache.hidden, dact);
  const std::size_t w1 = params.IndexOf(prefix + "mlp.fc1.weight");
  const std::size_t b1 = params.IndexOf(prefix + "mlp.fc1.bias");
  const Mat<Scalar> dnormed = nn::LinearBackward<Scalar>(cache.normed, params.value(w1), dhidden, grads[w1], grads[b1]);
  const std::size_t g = params.IndexOf(prefix + "norm2.weight");
  const std::size_t b = params.IndexOf(prefix + "norm2.bias");
  Mat<Scalar> dtokens = dout;
  dtokens += nn::LayerNormBackward<Scalar>(cache.norm, params.value(g), dnormed, grads[g], grads[b]);
  return dtokens;
}

template <typename Scalar>
Mat<Scalar> GlobalTokenGenBackward(const Mat<Scalar>& dglobal, const Mat<Scalar>& pooled,
                                   const ParamStore<Scalar>& params, const BackboneConfig& config, int stage,
                                   typename ParamStore<Scalar>::Gradients& grads) {
  const std::string prefix = StagePrefix(stage) + "global_gen.";
  const std::size_t w = params.IndexOf(prefix + "weight");
  const std::size_t b = params.IndexOf(prefix + "bias");
  const Mat<Scalar> dpooled = nn::LinearBackward<Scalar>(pooled, params.value(w), dglobal, grads[w], grads[b]);
  const int side = config.GridSide(stage);
  const int window = config.window_size;
  const int cell = side / window;
  const Scalar inv = static_cast<Scalar>(1) / static_cast<Scalar>(cell * cell);
  Mat<Scalar> dtokens(static_cast<Eigen::Index>(side) * side, pooled.cols());
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      dtokens.row(y * side + x) = dpooled.row((y / cell) * window + x / cell) * inv;
    }
  }
  return dtokens;
}

template <typename Scalar>
Mat<Scalar> DownsampleBackward(const Mat<Scalar>& dout, const Mat<Scalar>& merged,
                               const ParamStore<Scalar>& params, const BackboneConfig& config, int stage,
                               typename ParamStore<Scalar>::Gradients& grads) {
  const std::string prefix = StagePrefix(stage) + "downsample.";
  const std::size_t w = params.IndexOf(prefix + "weight");
  const std::size_t b = params.IndexOf(prefix + "bias");
  const Mat<Scalar> dmerged = nn::LinearBackward<Scalar>(merged, params.value(w), dout, grads[w], grads[b]);
  const int side = config.GridSide(stage);
  const int half = side / 2;
  const Eigen::Index dim = config.stage_dims[stage];
  Mat<Scalar> dtokens(static_cast<Eigen::Index>(side) * side, dim);
  for (int y = 0; y < half; ++y) {
    for (int x = 0; x < half; ++x) {
      const auto row = dmerged.row(y * half + x);
      dtokens.row((2 * y) * side + 2 * x) = row.segment(0, dim);
      dtokens.row((2 * y) * side + 2 * x + 1) = row.segment(dim, dim);
      dtokens.row((2 * y + 1) * side + 2 * x) = row.segment(2 * dim, dim);
      dtokens.row((2 * y + 1) * side + 2 * x + 1) = row.segment(3 * dim, dim);
    }
  }
  return dtokens;
}

}  // namespace

BackboneConfig BackboneConfig::Micro() {
  BackboneConfig c;
  c.input_size = 16;
  c.patch_size = 4;
  c.stage_dims = {8};
  c.depths = {2};
  c.window_size = 2;
  c.num_heads = {2};
  c.mlp_ratio = 2;
  return c;
}

bool operator==(const BackboneConfig& a, const BackboneConfig& b) {
  return a.input_size == b.input_size && a.patch_size == b.patch_size && a.stage_dims == b.stage_dims &&
         a.depths == b.depths && a.window_size == b.window_size && a.num_heads == b.num_heads &&
         a.mlp_ratio == b.mlp_ratio && a.layer_norm_eps == b.layer_norm_eps &&
         a.global_extractor == b.global_extractor;
}

void BackboneConfig::Validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kConfig, "invalid backbone config: " + what); };
  if (patch_size < 1 || input_size < patch_size) fail("input_size must be >= patch_size >= 1");
  if (input_size % patch_size != 0) {
    fail("input_size " + std::to_string(input_size) + " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (stage_dims.empty()) fail("at least one stage is required");
  if (depths.size() != stage_dims.size() || num_heads.size() != stage_dims.size()) {
    fail("stage_dims, depths and num_heads must have the same length");
  }
  if (window_size < 1) fail("window_size must be positive");
  if (mlp_ratio < 1) fail("mlp_ratio must be positive");
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
  if (global_extractor != "avgpool_linear") fail("unsupported global_extractor '" + global_extractor + "'");
  int side = input_size / patch_size;
  for (int s = 0; s < num_stages(); ++s) {
    if (s > 0) {
      if (side % 2 != 0) fail("token grid side " + std::to_string(side) + " before stage " + std::to_string(s) + " is odd");
      side /= 2;
    }
    if (side % window_size != 0) {
      fail("token grid side " + std::to_string(side) + " at stage " + std::to_string(s) +
           " not divisible by window_size " + std::to_string(window_size));
    }
    if (depths[s] < 1) fail("depth of stage " + std::to_string(s) + " must be positive");
    if (num_heads[s] < 1 || stage_dims[s] % num_heads[s] != 0) {
      fail("stage_dims[" + std::to_string(s) + "]=" + std::to_string(stage_dims[s]) +
           " not divisible by num_heads " + std::to_string(num_heads[s]));
    }
  }
}

std::int64_t BackboneParameterCount(const BackboneConfig& config) {
  config.Validate();
  const std::int64_t p2 = static_cast<std::int64_t>(config.patch_size) * config.patch_size;
  std::int64_t total = p2 * config.stage_dims[0] + config.stage_dims[0];
  for (int s = 0; s < config.num_stages(); ++s) {
    const std::int64_t c = config.stage_dims[s];
    const std::int64_t hidden = c * config.mlp_ratio;
    total += c * c + c;  // global token projection
    for (int b = 0; b < config.depths[s]; ++b) {
      const std::int64_t qkv = IsLocalBlock(b) ? 3 : 2;
      total += 2 * c + qkv * c * c + qkv * c + c * c + c + 2 * c + 2 * c * hidden + hidden + c;
    }
    if (s + 1 < config.num_stages()) total += 4 * c * config.stage_dims[s + 1] + config.stage_dims[s + 1];
  }
  return total + 2 * config.feature_dim();
}

template <typename Scalar>
ParamStore<Scalar> InitBackboneParams(const BackboneConfig& config, std::uint64_t seed) {
  config.Validate();
  ParamStore<Scalar> store;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto weight = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const std::size_t i = store.Add(name, {rows, cols});
    for (Eigen::Index k = 0; k < store.value(i).size(); ++k) {
      double z;
      do {
        z = normal(rng);
      } while (std::abs(z) > 2.0);
      store.value(i).data()[k] = static_cast<Scalar>(0.02 * z);
    }
  };
  auto bias = [&](const std::string& name, Eigen::Index n) { store.Add(name, {n}); };
  auto norm = [&](const std::string& name, Eigen::Index n) {
    store.value(store.Add(name + "weight", {n})).setOnes();
    store.Add(name + "bias", {n});
  };

  const Eigen::Index p2 = static_cast<Eigen::Index>(config.patch_size) * config.patch_size;
  weight("patch_embed.weight", p2, config.stage_dims[0]);
  bias("patch_embed.bias", config.stage_dims[0]);
  for (int s = 0; s < config.num_stages(); ++s) {
    const Eigen::Index c = config.stage_dims[s];
    const Eigen::Index hidden = c * config.mlp_ratio;
    weight(StagePrefix(s) + "global_gen.weight", c, c);
    bias(StagePrefix(s) + "global_gen.bias", c);
    for (int b = 0; b < config.depths[s]; ++b) {
      const std::string p = BlockPrefix(s, b);
      norm(p + "norm1.", c);
      if (IsLocalBlock(b)) {
        weight(p + "attn.qkv.weight", c, 3 * c);
        bias(p + "attn.qkv.bias", 3 * c);
      } else {
        weight(p + "attn.kv.weight", c, 2 * c);
        bias(p + "attn.kv.bias", 2 * c);
      }
      weight(p + "attn.proj.weight", c, c);
      bias(p + "attn.proj.bias", c);
      norm(p + "norm2.", c);
      weight(p + "mlp.fc1.weight", c, hidden);
      bias(p + "mlp.fc1.bias", hidden);
      weight(p + "mlp.fc2.weight", hidden, c);
      bias(p + "mlp.fc2.bias", c);
    }
    if (s + 1 < config.num_stages()) {
      weight(StagePrefix(s) + "downsample.weight", 4 * c, config.stage_dims[s + 1]);
      bias(StagePrefix(s) + "downsample.bias", config.stage_dims[s + 1]);
    }
  }
  norm("norm.", config.feature_dim());
  return store;
}

std::vector<std::vector<int>> WindowPartition(int side, int window) {
  if (window < 1 || side % window != 0) {
    throw Error(ErrorKind::kShape, "token grid side " + std::to_string(side) +
                                       " not divisible by window size " + std::to_string(window));
  }
  const int per_side = side / window;
  std::vector<std::vector<int>> windows(static_cast<std::size_t>(per_side) * per_side);
  for (int wy = 0; wy < per_side; ++wy) {
    for (int wx = 0; wx < per_side; ++wx) {
      auto& rows = windows[wy * per_side + wx];
      rows.reserve(static_cast<std::size_t>(window) * window);
      for (int iy = 0; iy < window; ++iy) {
        for (int ix = 0; ix < window; ++ix) rows.push_back((wy * window + iy) * side + wx * window + ix);
      }
    }
  }
  return windows;
}

template <typename Scalar>
Matrix<Scalar> PatchEmbed(const Matrix<Scalar>& image, const ParamStore<Scalar>& params,
                          const BackboneConfig& config, Matrix<Scalar>* patches) {
  RequireShape("patch_embed", image.rows(), image.cols(), config.input_size, config.input_size);
  const int p = config.patch_size;
  const int side = config.input_size / p;
  Mat<Scalar> flat(static_cast<Eigen::Index>(side) * side, static_cast<Eigen::Index>(p) * p);
  for (int ty = 0; ty < side; ++ty) {
    for (int tx = 0; tx < side; ++tx) {
      for (int py = 0; py < p; ++py) {
        flat.row(ty * side + tx).segment(py * p, p) = image.row(ty * p + py).segment(tx * p, p);
      }
    }
  }
  Mat<Scalar> tokens = nn::Linear(flat, params.value("patch_embed.weight"), params.value("patch_embed.bias"));
  if (patches) *patches = std::move(flat);
  return tokens;
}

template <typename Scalar>
Matrix<Scalar> LocalWindowAttention(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                                    const BackboneConfig& config, int stage, int block,
                                    AttentionBlockCache<Scalar>* cache) {
  const int side = config.GridSide(stage);
  const Eigen::Index dim = config.stage_dims[stage];
  RequireShape("local_window_attention", tokens.rows(), tokens.cols(), static_cast<Eigen::Index>(side) * side, dim);
  const auto windows = WindowPartition(side, config.window_size);
  const std::string prefix = BlockPrefix(stage, block);

  AttentionBlockCache<Scalar> local;
  AttentionBlockCache<Scalar>& c = cache ? *cache : local;
  c.normed = nn::LayerNorm<Scalar>(tokens, params.value(prefix + "norm1.weight"), params.value(prefix + "norm1.bias"),
                                   Eps<Scalar>(config), &c.norm);
  c.projected = nn::Linear(c.normed, params.value(prefix + "attn.qkv.weight"), params.value(prefix + "attn.qkv.bias"));
  c.mixed.resize(tokens.rows(), dim);
  c.windows.resize(windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const Mat<Scalar> rows = nn::GatherRows(c.projected, windows[w]);
    const Mat<Scalar> out = nn::MultiHeadAttention<Scalar>(rows.leftCols(dim), rows.middleCols(dim, dim),
                                                           rows.rightCols(dim), config.num_heads[stage], &c.windows[w]);
    for (std::size_t i = 0; i < windows[w].size(); ++i) c.mixed.row(windows[w][i]) = out.row(static_cast<Eigen::Index>(i));
  }
  Mat<Scalar> result = tokens;
  result += nn::Linear(c.mixed, params.value(prefix + "attn.proj.weight"), params.value(prefix + "attn.proj.bias"));
  return result;
}

template <typename Scalar>
Matrix<Scalar> GlobalQueryAttention(const Matrix<Scalar>& tokens, const Matrix<Scalar>& global_tokens,
                                    const ParamStore<Scalar>& params, const BackboneConfig& config, int stage,
                                    int block, AttentionBlockCache<Scalar>* cache) {
  const int side = config.GridSide(stage);
  const Eigen::Index dim = config.stage_dims[stage];
  const Eigen::Index per_window = static_cast<Eigen::Index>(config.window_size) * config.window_size;
  RequireShape("global_query_attention", tokens.rows(), tokens.cols(), static_cast<Eigen::Index>(side) * side, dim);
  RequireShape("global_query_attention(global tokens)", global_tokens.rows(), global_tokens.cols(), per_window, dim);
  const auto windows = WindowPartition(side, config.window_size);
  const std::string prefix = BlockPrefix(stage, block);

  AttentionBlockCache<Scalar> local;
  AttentionBlockCache<Scalar>& c = cache ? *cache : local;
  c.normed = nn::LayerNorm<Scalar>(tokens, params.value(prefix + "norm1.weight"), params.value(prefix + "norm1.bias"),
                                   Eps<Scalar>(config), &c.norm);
  c.projected = nn::Linear(c.normed, params.value(prefix + "attn.kv.weight"), params.value(prefix + "attn.kv.bias"));
  c.mixed.resize(tokens.rows(), dim);
  c.windows.resize(windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const Mat<Scalar> rows = nn::GatherRows(c.projected, windows[w]);
    const Mat<Scalar> out = nn::MultiHeadAttention<Scalar>(global_tokens, rows.leftCols(dim), rows.rightCols(dim),
                                                           config.num_heads[stage], &c.windows[w]);
    for (std::size_t i = 0; i < windows[w].size(); ++i) c.mixed.row(windows[w][i]) = out.row(static_cast<Eigen::Index>(i));
  }
  Mat<Scalar> result = tokens;
  result += nn::Linear(c.mixed, params.value(prefix + "attn.proj.weight"), params.value(prefix + "attn.proj.bias"));
  return result;
}

template <typename Scalar>
Matrix<Scalar> GlobalTokenGen(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                              const BackboneConfig& config, int stage, Matrix<Scalar>* pooled) {
  const int side = config.GridSide(stage);
  const int window = config.window_size;
  const Eigen::Index dim = config.stage_dims[stage];
  RequireShape("global_token_gen", tokens.rows(), tokens.cols(), static_cast<Eigen::Index>(side) * side, dim);
  if (side % window != 0) throw Error(ErrorKind::kShape, "global_token_gen: grid not divisible by window");
  const int cell = side / window;
  Mat<Scalar> pool = Mat<Scalar>::Zero(static_cast<Eigen::Index>(window) * window, dim);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) pool.row((y / cell) * window + x / cell) += tokens.row(y * side + x);
  }
  pool /= static_cast<Scalar>(cell * cell);
  const std::string prefix = StagePrefix(stage) + "global_gen.";
  Mat<Scalar> out = nn::Linear(pool, params.value(prefix + "weight"), params.value(prefix + "bias"));
  if (pooled) *pooled = std::move(pool);
  return out;
}

template <typename Scalar>
Matrix<Scalar> MlpSubBlock(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                           const BackboneConfig& config, int stage, int block, MlpBlockCache<Scalar>* cache) {
  const std::string prefix = BlockPrefix(stage, block);
  MlpBlockCache<Scalar> local;
  MlpBlockCache<Scalar>& c = cache ? *cache : local;
  c.normed = nn::LayerNorm<Scalar>(tokens, params.value(prefix + "norm2.weight"), params.value(prefix + "norm2.bias"),
                                   Eps<Scalar>(config), &c.norm);
  c.hidden = nn::Linear(c.normed, params.value(prefix + "mlp.fc1.weight"), params.value(prefix + "mlp.fc1.bias"));
  c.activated = nn::Gelu<Scalar>(c.hidden);
  Mat<Scalar> result = tokens;
  result += nn::Linear(c.activated, params.value(prefix + "mlp.fc2.weight"), params.value(prefix + "mlp.fc2.bias"));
  return result;
}

template <typename Scalar>
Matrix<Scalar> Downsample(const Matrix<Scalar>& tokens, const ParamStore<Scalar>& params,
                          const BackboneConfig& config, int stage, Matrix<Scalar>* merged) {
  const int side = config.GridSide(stage);
  const Eigen::Index dim = config.stage_dims[stage];
  RequireShape("downsample", tokens.rows(), tokens.cols(), static_cast<Eigen::Index>(side) * side, dim);
  if (side % 2 != 0) throw Error(ErrorKind::kShape, "downsample: odd token grid side " + std::to_string(side));
  const int half = side / 2;
  Mat<Scalar> cat(static_cast<Eigen::Index>(half) * half, 4 * dim);
  for (int y = 0; y < half; ++y) {
    for (int x = 0; x < half; ++x) {
      cat.row(y * half + x) << tokens.row((2 * y) * side + 2 * x), tokens.row((2 * y) * side + 2 * x + 1),
          tokens.row((2 * y + 1) * side + 2 * x), tokens.row((2 * y + 1) * side + 2 * x + 1);
    }
  }
  const std::string prefix = StagePrefix(stage) + "downsample.";
  Mat<Scalar> out = nn::Linear(cat, params.value(prefix + "weight"), params.value(prefix + "bias"));
  if (merged) *merged = std::move(cat);
  return out;
}

template <typename Scalar>
RowVector<Scalar> BackboneForward(const Matrix<Scalar>& image, const ParamStore<Scalar>& params,
                                  const BackboneConfig& config, BackboneCache<Scalar>* cache) {
  BackboneCache<Scalar> local;
  BackboneCache<Scalar>& c = cache ? *cache : local;
  c.valid = false;
  c.stages.assign(config.num_stages(), {});
  Mat<Scalar> tokens = PatchEmbed(image, params, config, &c.patches);
  for (int s = 0; s < config.num_stages(); ++s) {
    StageCache<Scalar>& sc = c.stages[s];
    sc.attention.resize(config.depths[s]);
    sc.mlp.resize(config.depths[s]);
    sc.global_tokens = GlobalTokenGen(tokens, params, config, s, &sc.pooled);
    for (int b = 0; b < config.depths[s]; ++b) {
      tokens = IsLocalBlock(b) ? LocalWindowAttention(tokens, params, config, s, b, &sc.attention[b])
                               : GlobalQueryAttention(tokens, sc.global_tokens, params, config, s, b, &sc.attention[b]);
      tokens = MlpSubBlock(tokens, params, config, s, b, &sc.mlp[b]);
    }
    if (s + 1 < config.num_stages()) tokens = Downsample(tokens, params, config, s, &sc.merged);
  }
  const Mat<Scalar> normed = nn::LayerNorm<Scalar>(tokens, params.value("norm.weight"), params.value("norm.bias"),
                                                   Eps<Scalar>(config), &c.final_norm);
  c.final_tokens = std::move(tokens);
  RowVector<Scalar> features = normed.colwise().mean();
  if (!features.allFinite()) throw Error(ErrorKind::kDivergence, "backbone produced non-finite features");
  c.valid = cache != nullptr;
  return features;
}

template <typename Scalar>
void BackboneBackward(const RowVector<Scalar>& feature_grad, const BackboneCache<Scalar>& cache,
                      const ParamStore<Scalar>& params, const BackboneConfig& config,
                      typename ParamStore<Scalar>::Gradients& grads) {
  if (!cache.valid) throw Error(ErrorKind::kState, "backbone backward called without a cached forward pass");
  if (grads.size() != params.size()) throw Error(ErrorKind::kShape, "gradient buffer does not match parameters");
  if (feature_grad.size() != config.feature_dim()) {
    throw Error(ErrorKind::kShape, "feature gradient has length " + std::to_string(feature_grad.size()));
  }
  const Eigen::Index n_final = cache.final_tokens.rows();
  Mat<Scalar> dnormed = feature_grad.replicate(n_final, 1) / static_cast<Scalar>(n_final);
  const std::size_t g = params.IndexOf("norm.weight");
  const std::size_t b = params.IndexOf("norm.bias");
  Mat<Scalar> dtokens = nn::LayerNormBackward<Scalar>(cache.final_norm, params.value(g), dnormed, grads[g], grads[b]);

  for (int s = config.num_stages() - 1; s >= 0; --s) {
    const StageCache<Scalar>& sc = cache.stages[s];
    if (s + 1 < config.num_stages()) dtokens = DownsampleBackward(dtokens, sc.merged, params, config, s, grads);
    Mat<Scalar> dglobal = Mat<Scalar>::Zero(sc.global_tokens.rows(), sc.global_tokens.cols());
    for (int blk = config.depths[s] - 1; blk >= 0; --blk) {
      dtokens = MlpBackward(dtokens, sc.mlp[blk], params, s, blk, grads);
      if (IsLocalBlock(blk)) {
        dtokens = AttentionBackward<Scalar>(dtokens, sc.attention[blk], nullptr, nullptr, params, config, s, blk, grads);
      } else {
        dtokens = AttentionBackward<Scalar>(dtokens, sc.attention[blk], &sc.global_tokens, &dglobal, params, config,
                                            s, blk, grads);
      }
    }
    dtokens += GlobalTokenGenBackward(dglobal, sc.pooled, params, config, s, grads);
  }
  const std::size_t wp = params.IndexOf("patch_embed.weight");
  const std::size_t bp = params.IndexOf("patch_embed.bias");
  grads[wp].noalias() += cache.patches.transpose() * dtokens;
  grads[bp] += dtokens.colwise().sum();
}

#define FRAGPREDICT_INSTANTIATE_BACKBONE(S)                                                                          \
  template ParamStore<S> InitBackboneParams<S>(const BackboneConfig&, std::uint64_t);                               \
  template Matrix<S> PatchEmbed<S>(const Matrix<S>&, const ParamStore<S>&, const BackboneConfig&, Matrix<S>*);      \
  template Matrix<S> LocalWindowAttention<S>(const Matrix<S>&, const ParamStore<S>&, const BackboneConfig&, int,    \
                                             int, AttentionBlockCache<S>*);                                         \
  template Matrix<S> GlobalQueryAttention<S>(const Matrix<S>&, const Matrix<S>&, const ParamStore<S>&,              \
                                             const BackboneConfig&, int, int, AttentionBlockCache<S>*);             \
  template Matrix<S> GlobalTokenGen<S>(const Matrix<S>&, const ParamStore<S>&, const BackboneConfig&, int,          \
                                       Matrix<S>*);                                                                 \
  template Matrix<S> MlpSubBlock<S>(const Matrix<S>&, const ParamStore<S>&, const BackboneConfig&, int, int,        \
                                    MlpBlockCache<S>*);                                                             \
  template Matrix<S> Downsample<S>(const Matrix<S>&, const ParamStore<S>&, const BackboneConfig&, int, Matrix<S>*); \
  template RowVector<S> BackboneForward<S>(const Matrix<S>&, const ParamStore<S>&, const BackboneConfig&,           \
                                           BackboneCache<S>*);                                                      \
  template void BackboneBackward<S>(const RowVector<S>&, const BackboneCache<S>&, const ParamStore<S>&,             \
                                    const BackboneConfig&, typename ParamStore<S>::Gradients&);

FRAGPREDICT_INSTANTIATE_BACKBONE(float)
FRAGPREDICT_INSTANTIATE_BACKBONE(double)

#undef FRAGPREDICT_INSTANTIATE_BACKBONE

}  // namespace fragpredict
