#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "uasr/attention.hpp"

using namespace uasr;
using test::max_abs_diff;
using test::max_grad_rel_err;
using test::random_tensor;
using test::reduce_weighted;

namespace {

SanMLayerParams make_layer(RngStream& rng, int64_t d, int64_t heads,
                           int64_t d_ff, int64_t l_left, int64_t l_right,
                           bool requires_grad = false) {
  SanMLayerParams p;
  p.attn.wq = random_tensor({d, d}, rng, 0.5, requires_grad);
  p.attn.wk = random_tensor({d, d}, rng, 0.5, requires_grad);
  p.attn.wv = random_tensor({d, d}, rng, 0.5, requires_grad);
  p.attn.wo = random_tensor({d, d}, rng, 0.5, requires_grad);
  p.attn.heads = heads;
  p.fsmn_left_taps = random_tensor({l_left, d}, rng, 0.5, requires_grad);
  if (l_right > 0)
    p.fsmn_right_taps = random_tensor({l_right, d}, rng, 0.5, requires_grad);
  p.ln1_gamma = Tensor::full({d}, 1.0, requires_grad);
  p.ln1_beta = Tensor::zeros({d}, requires_grad);
  p.ln2_gamma = Tensor::full({d}, 1.0, requires_grad);
  p.ln2_beta = Tensor::zeros({d}, requires_grad);
  p.ffn_w1 = random_tensor({d, d_ff}, rng, 0.5, requires_grad);
  p.ffn_b1 = Tensor::zeros({d_ff}, requires_grad);
  p.ffn_w2 = random_tensor({d_ff, d}, rng, 0.5, requires_grad);
  p.ffn_b2 = Tensor::zeros({d}, requires_grad);
  return p;
}

std::vector<Tensor> layer_tensors(SanMLayerParams& p) {
  std::vector<Tensor> out{p.attn.wq, p.attn.wk,  p.attn.wv,  p.attn.wo,
                          p.fsmn_left_taps,      p.ln1_gamma, p.ln1_beta,
                          p.ln2_gamma, p.ln2_beta, p.ffn_w1,  p.ffn_b1,
                          p.ffn_w2,    p.ffn_b2};
  if (p.fsmn_right_taps.defined()) out.push_back(p.fsmn_right_taps);
  return out;
}

Tensor run_chunked(const Tensor& x, const SanMLayerParams& p, int64_t c,
                   const FwdCtx& ctx) {
  LayerStreamState state;
  std::vector<Tensor> outs;
  int64_t T = x.rows();
  for (int64_t f = 0; f < T; f += c) {
    int64_t len = std::min(c, T - f);
    outs.push_back(lc_san_m_chunk_step(slice_rows(x, f, len, ctx.tape), p,
                                       state, ctx));
  }
  return outs.size() == 1 ? outs[0] : concat_rows(outs, ctx.tape);
}

// Plain-loop re-computation of the whole pre-norm layer, sharing no code
// with the library path.
std::vector<double> straight_line_layer(const Tensor& xt,
                                        const SanMLayerParams& p,
                                        int64_t heads) {
  int64_t T = xt.rows(), d = xt.cols();
  auto x = xt.data();
  auto ln = [&](const std::vector<double>& in, std::span<const double> g,
                std::span<const double> b) {
    std::vector<double> out(in.size());
    for (int64_t r = 0; r < static_cast<int64_t>(in.size()) / d; ++r) {
      double mean = 0, var = 0;
      for (int64_t c = 0; c < d; ++c) mean += in[r * d + c];
      mean /= d;
      for (int64_t c = 0; c < d; ++c) {
        double dv = in[r * d + c] - mean;
        var += dv * dv;
      }
      var /= d;
      double inv = 1.0 / std::sqrt(var + 1e-5);
      for (int64_t c = 0; c < d; ++c)
        out[r * d + c] = (in[r * d + c] - mean) * inv * g[c] + b[c];
    }
    return out;
  };
  auto mm = [&](const std::vector<double>& a, std::span<const double> w,
                int64_t rows, int64_t k, int64_t cols) {
    std::vector<double> out(rows * cols, 0.0);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t p2 = 0; p2 < k; ++p2)
        for (int64_t j = 0; j < cols; ++j)
          out[i * cols + j] += a[i * k + p2] * w[p2 * cols + j];
    return out;
  };

  std::vector<double> xin(x.begin(), x.end());
  std::vector<double> a = ln(xin, p.ln1_gamma.data(), p.ln1_beta.data());
  std::vector<double> q = mm(a, p.attn.wq.data(), T, d, d);
  std::vector<double> k = mm(a, p.attn.wk.data(), T, d, d);
  std::vector<double> v = mm(a, p.attn.wv.data(), T, d, d);

  int64_t dk = d / heads;
  std::vector<double> ctx(T * d, 0.0);
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t t = 0; t < T; ++t) {
      std::vector<double> scores(T);
      double mx = -1e300;
      for (int64_t s = 0; s < T; ++s) {
        double acc = 0;
        for (int64_t c = 0; c < dk; ++c)
          acc += q[t * d + h * dk + c] * k[s * d + h * dk + c];
        scores[s] = acc / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, scores[s]);
      }
      double sum = 0;
      for (int64_t s = 0; s < T; ++s) {
        scores[s] = std::exp(scores[s] - mx);
        sum += scores[s];
      }
      for (int64_t s = 0; s < T; ++s)
        for (int64_t c = 0; c < dk; ++c)
          ctx[t * d + h * dk + c] += scores[s] / sum * v[s * d + h * dk + c];
    }
  }
  std::vector<double> attn = mm(ctx, p.attn.wo.data(), T, d, d);

  int64_t ll = p.fsmn_left_taps.rows();
  int64_t lr = p.fsmn_right_taps.defined() ? p.fsmn_right_taps.rows() : 0;
  std::vector<double> mem(T * d, 0.0);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t c = 0; c < d; ++c) {
      double acc = v[t * d + c];
      for (int64_t i = 0; i < ll; ++i)
        if (t - i >= 0)
          acc += p.fsmn_left_taps.data()[i * d + c] * v[(t - i) * d + c];
      for (int64_t j = 1; j <= lr; ++j)
        if (t + j < T)
          acc += p.fsmn_right_taps.data()[(j - 1) * d + c] * v[(t + j) * d + c];
      mem[t * d + c] = acc;
    }

  std::vector<double> h1(T * d);
  for (int64_t i = 0; i < T * d; ++i) h1[i] = xin[i] + attn[i] + mem[i];
  std::vector<double> f = ln(h1, p.ln2_gamma.data(), p.ln2_beta.data());
  int64_t dff = p.ffn_w1.cols();
  std::vector<double> ff1 = mm(f, p.ffn_w1.data(), T, d, dff);
  for (int64_t i = 0; i < T * dff; ++i) {
    ff1[i] += p.ffn_b1.data()[i % dff];
    if (ff1[i] < 0) ff1[i] = 0;
  }
  std::vector<double> ff2 = mm(ff1, p.ffn_w2.data(), T, dff, d);
  std::vector<double> out(T * d);
  for (int64_t i = 0; i < T * d; ++i)
    out[i] = h1[i] + ff2[i] + p.ffn_b2.data()[i % d];
  return out;
}

}  // namespace

TEST_CASE("multi_head_attention hand values") {
  MhaProj p;
  p.wq = p.wk = p.wv = p.wo = Tensor::from_data({1, 1}, {1.0});
  p.heads = 1;
  Tensor x = Tensor::from_data({2, 1}, {1.0, 2.0});
  Tensor y = multi_head_attention(x, x, p, nullptr, nullptr);
  CHECK(y.data()[0] == doctest::Approx(1.7310585786300049).epsilon(1e-9));
  CHECK(y.data()[1] == doctest::Approx(1.8807970779778823).epsilon(1e-9));

  // a single key gets weight exactly one
  RngStream rng(5);
  MhaProj pr;
  pr.wq = random_tensor({4, 4}, rng);
  pr.wk = random_tensor({4, 4}, rng);
  pr.wv = random_tensor({4, 4}, rng);
  pr.wo = random_tensor({4, 4}, rng);
  pr.heads = 2;
  Tensor xq = random_tensor({1, 4}, rng);
  Tensor y1 = multi_head_attention(xq, xq, pr, nullptr, nullptr);
  Tensor expected =
      matmul(matmul(xq, pr.wv, nullptr), pr.wo, nullptr);
  CHECK(test::bitwise_equal(y1, expected));

  // all-zero projections produce zeros
  MhaProj pz;
  pz.wq = pz.wk = pz.wv = pz.wo = Tensor::zeros({4, 4});
  pz.heads = 2;
  Tensor yz = multi_head_attention(random_tensor({3, 4}, rng), xq, pz,
                                   nullptr, nullptr);
  for (double v : yz.data()) CHECK(v == 0.0);

  // fully masked rows are rejected
  AttnMask dead{1, 1, {0}};
  CHECK_THROWS_AS(multi_head_attention(xq, xq, pr, &dead, nullptr),
                  ContractError);
}

TEST_CASE("fsmn_memory contracts and values") {
  Tensor v = Tensor::from_data({3, 1}, {1, 2, 3});
  Tensor lt = Tensor::from_data({2, 1}, {1, 1});
  Tensor rt = Tensor::from_data({1, 1}, {1});

  Tensor m = fsmn_memory(v, lt, rt, false, Tensor(), nullptr);
  CHECK(m.data()[0] == doctest::Approx(4));
  CHECK(m.data()[1] == doctest::Approx(8));
  CHECK(m.data()[2] == doctest::Approx(8));

  // zero taps: memory equals the values exactly
  Tensor mz = fsmn_memory(v, Tensor::zeros({2, 1}), Tensor::zeros({1, 1}),
                          false, Tensor(), nullptr);
  CHECK(test::bitwise_equal(mz, v));

  // unidirectional hand case
  Tensor v2 = Tensor::from_data({2, 1}, {1, 2});
  Tensor uni = fsmn_memory(v2, Tensor::from_data({2, 1}, {1, 1}), Tensor(),
                           true, Tensor(), nullptr);
  CHECK(uni.data()[0] == doctest::Approx(2));
  CHECK(uni.data()[1] == doctest::Approx(5));

  CHECK_THROWS_AS(fsmn_memory(v, lt, rt, true, Tensor(), nullptr),
                  ContractError);
  CHECK_THROWS_AS(
      fsmn_memory(v, lt, rt, false, Tensor::zeros({1, 1}), nullptr),
      ContractError);
}

TEST_CASE("san_m_core zero-tap identity") {
  RngStream rng(17);
  SanMLayerParams p = make_layer(rng, 8, 2, 16, 3, 2);
  p.fsmn_left_taps = Tensor::zeros({3, 8});
  p.fsmn_right_taps = Tensor::zeros({2, 8});
  Tensor x = random_tensor({5, 8}, rng);

  Tensor core = san_m_core(x, p, nullptr, nullptr);
  Tensor v = matmul(x, p.attn.wv, nullptr);
  Tensor mha = matmul(
      mha_core(matmul(x, p.attn.wq, nullptr), matmul(x, p.attn.wk, nullptr),
               v, 2, nullptr, nullptr),
      p.attn.wo, nullptr);
  CHECK(test::bitwise_equal(core, add(mha, v, nullptr)));
}

TEST_CASE("san_m_layer matches a straight-line re-implementation") {
  RngStream rng(41);
  SanMLayerParams p = make_layer(rng, 8, 2, 12, 2, 1);
  // exercise non-trivial norm parameters too
  p.ln1_gamma = random_tensor({8}, rng);
  p.ln1_beta = random_tensor({8}, rng);
  p.ln2_gamma = random_tensor({8}, rng);
  p.ln2_beta = random_tensor({8}, rng);
  p.ffn_b1 = random_tensor({12}, rng);
  p.ffn_b2 = random_tensor({8}, rng);
  Tensor x = random_tensor({5, 8}, rng);

  Tensor lib = san_m_layer(x, p, nullptr, FwdCtx{});
  std::vector<double> oracle = straight_line_layer(x, p, 2);
  double worst = 0;
  for (std::size_t i = 0; i < oracle.size(); ++i)
    worst = std::max(worst, std::fabs(oracle[i] - lib.data()[i]));
  CHECK(worst < 1e-10);
}

TEST_CASE("chunk-incremental layer equals the block-masked oracle") {
  RngStream rng(53);
  for (int64_t c : {1, 2, 3, 5}) {
    SanMLayerParams p = make_layer(rng, 8, 4, 16, 4, 0);
    int64_t T = 1 + static_cast<int64_t>(rng.uniform_index(32));
    Tensor x = random_tensor({T, 8}, rng);
    Tensor chunked = run_chunked(x, p, c, FwdCtx{});
    Tensor oracle = lc_san_m_oracle_full(x, p, c, FwdCtx{});
    CHECK(max_abs_diff(chunked, oracle) < 1e-9);
  }
  // c >= T: the oracle mask is all-true, i.e. plain bidirectional attention
  SanMLayerParams p = make_layer(rng, 8, 2, 16, 3, 0);
  Tensor x = random_tensor({4, 8}, rng);
  Tensor wide = lc_san_m_oracle_full(x, p, 64, FwdCtx{});
  Tensor plain = san_m_layer(x, p, nullptr, FwdCtx{});
  CHECK(test::bitwise_equal(wide, plain));
}

TEST_CASE("chunk causality and cache growth") {
  RngStream rng(67);
  SanMLayerParams p = make_layer(rng, 6, 2, 12, 3, 0);
  int64_t T = 12, c = 3;
  Tensor x = random_tensor({T, 6}, rng);

  // perturb a frame in chunk 2; chunks 0 and 1 must be bitwise unchanged
  std::vector<double> bumped(x.data().begin(), x.data().end());
  bumped[(2 * c) * 6 + 1] += 0.75;
  Tensor x2 = Tensor::from_data({T, 6}, std::move(bumped));

  LayerStreamState s1, s2;
  for (int64_t k = 0; k < T / c; ++k) {
    Tensor o1 = lc_san_m_chunk_step(slice_rows(x, k * c, c, nullptr), p, s1,
                                    FwdCtx{});
    Tensor o2 = lc_san_m_chunk_step(slice_rows(x2, k * c, c, nullptr), p, s2,
                                    FwdCtx{});
    if (k < 2)
      CHECK(test::bitwise_equal(o1, o2));
    else if (k == 2)
      CHECK_FALSE(test::bitwise_equal(o1, o2));
    CHECK(s1.key_cache.rows() == (k + 1) * c);
    CHECK(s1.value_cache.rows() == (k + 1) * c);
    CHECK(s1.frames == (k + 1) * c);
  }
  // short final chunk is processed as-is
  LayerStreamState tail_state;
  lc_san_m_chunk_step(slice_rows(x, 0, 2, nullptr), p, tail_state, FwdCtx{});
  CHECK(tail_state.key_cache.rows() == 2);
  CHECK(tail_state.fsmn_tail.rows() == 2);  // min(frames, L-1)
}

TEST_CASE("gradients of both layer forms pass the oracle") {
  RngStream rng(71);
  SUBCASE("full-sequence layer") {
    SanMLayerParams p = make_layer(rng, 4, 2, 8, 2, 1, true);
    Tensor x = random_tensor({4, 4}, rng);
    Tensor w = random_tensor({4, 4}, rng, 1.0, false);
    auto f = [&](Tape* t) {
      return reduce_weighted(san_m_layer(x, p, nullptr, FwdCtx{t}), w, t);
    };
    std::vector<Tensor> wrt = layer_tensors(p);
    wrt.push_back(x);
    CHECK(max_grad_rel_err(wrt, f) < 1e-6);
  }
  SUBCASE("chunk-incremental layer") {
    SanMLayerParams p = make_layer(rng, 4, 2, 8, 3, 0, true);
    Tensor x = random_tensor({6, 4}, rng);
    Tensor w = random_tensor({6, 4}, rng, 1.0, false);
    auto f = [&](Tape* t) {
      return reduce_weighted(run_chunked(x, p, 2, FwdCtx{t}), w, t);
    };
    std::vector<Tensor> wrt = layer_tensors(p);
    wrt.push_back(x);
    CHECK(max_grad_rel_err(wrt, f) < 1e-6);
  }
}
