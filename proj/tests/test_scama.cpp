#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "uasr/scama.hpp"

using namespace uasr;
using test::max_grad_rel_err;
using test::random_tensor;

TEST_CASE("splice_chunk") {
  Tensor chunk = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor s = splice_chunk(chunk, 2, nullptr);
  CHECK(s.shape() == Shape{1, 4});
  CHECK(s.data()[0] == 1);
  CHECK(s.data()[3] == 4);

  Tensor z = splice_chunk(Tensor::zeros({2, 2}), 2, nullptr);
  for (double v : z.data()) CHECK(v == 0.0);

  // short final chunk zero-pads to the fixed splice width
  Tensor one = splice_chunk(Tensor::from_data({1, 2}, {5, 6}), 2, nullptr);
  CHECK(one.shape() == Shape{1, 4});
  CHECK(one.data()[0] == 5);
  CHECK(one.data()[2] == 0.0);
  CHECK(one.data()[3] == 0.0);

  CHECK_THROWS_AS(splice_chunk(Tensor::zeros({3, 2}), 2, nullptr),
                  ContractError);
}

TEST_CASE("predictor_forward") {
  PredictorParams p;
  p.w1 = Tensor::zeros({4, 3});
  p.b1 = Tensor::zeros({3});
  p.w2 = Tensor::zeros({3, 7});
  p.b2 = Tensor::zeros({7});
  Tensor h = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  Tensor probs = predictor_forward(h, p, nullptr);
  for (double v : probs.data())
    CHECK(v == doctest::Approx(1.0 / 7.0).epsilon(1e-12));

  // bias-only head: class 0 carries e^10 / (e^10 + n_max)
  std::vector<double> b2(7, 0.0);
  b2[0] = 10.0;
  p.b2 = Tensor::from_data({7}, std::move(b2));
  Tensor peaked = predictor_forward(h, p, nullptr);
  double expect = std::exp(10.0) / (std::exp(10.0) + 6.0);
  CHECK(peaked.data()[0] == doctest::Approx(expect).epsilon(1e-12));

  // random heads still produce a distribution
  RngStream rng(3);
  p.w1 = random_tensor({4, 3}, rng);
  p.b1 = random_tensor({3}, rng);
  p.w2 = random_tensor({3, 7}, rng);
  p.b2 = random_tensor({7}, rng);
  Tensor r = predictor_forward(h, p, nullptr);
  double sum = 0.0;
  for (double v : r.data()) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("chunk_counts_from_alignment") {
  // spans [0..2] and [3..5] with T=6, c=4: last frames 2 and 5
  ChunkAlignment a =
      chunk_counts_from_alignment({{0, 3}, {3, 3}}, 6, 4, 6);
  CHECK(a.counts == std::vector<int>{1, 1});
  CHECK(a.token_chunk == std::vector<int>{0, 1});

  // no tokens
  ChunkAlignment none = chunk_counts_from_alignment({}, 4, 2, 6);
  CHECK(none.counts == std::vector<int>{0, 0});
  CHECK(none.total_tokens() == 0);

  // both spans inside chunk 0 when the chunk covers the utterance
  ChunkAlignment both =
      chunk_counts_from_alignment({{0, 3}, {3, 3}}, 6, 8, 6);
  CHECK(both.counts == std::vector<int>{2});
  CHECK(both.token_chunk == std::vector<int>{0, 0});

  // a chunk holding more than n_max tokens is a label error naming it
  CHECK_THROWS_WITH_AS(
      chunk_counts_from_alignment({{0, 1}, {1, 1}, {2, 1}}, 4, 4, 2),
      doctest::Contains("chunk 0"), LabelError);

  // malformed spans
  CHECK_THROWS_AS(chunk_counts_from_alignment({{2, 2}, {1, 2}}, 8, 2, 6),
                  ContractError);
}

TEST_CASE("scama masks") {
  ChunkAlignment a;
  a.chunk_size = 2;
  a.counts = {1, 1};
  a.token_chunk = {0, 1};
  AttnMask m = scama_cross_attention_mask(a, 2, 2);
  CHECK(m.allowed(0, 0));
  CHECK_FALSE(m.allowed(0, 1));
  CHECK(m.allowed(1, 0));
  CHECK(m.allowed(1, 1));

  // all tokens in the last chunk: all-true
  ChunkAlignment last;
  last.chunk_size = 2;
  last.counts = {0, 2};
  last.token_chunk = {1, 1};
  AttnMask ml = scama_cross_attention_mask(last, 2, 2);
  for (int64_t t = 0; t < 2; ++t)
    for (int64_t k = 0; k < 2; ++k) CHECK(ml.allowed(t, k));

  // single chunk: an all-true column
  ChunkAlignment single;
  single.chunk_size = 8;
  single.counts = {2};
  single.token_chunk = {0, 0};
  AttnMask ms = scama_cross_attention_mask(single, 2, 1);
  CHECK(ms.allowed(0, 0));
  CHECK(ms.allowed(1, 0));

  // frame expansion repeats chunk columns (short last chunk included)
  AttnMask mf = scama_frame_mask(a, 2, 3);  // chunks: {0,1}, {2}
  CHECK(mf.cols == 3);
  CHECK(mf.allowed(0, 0));
  CHECK(mf.allowed(0, 1));
  CHECK_FALSE(mf.allowed(0, 2));
  CHECK(mf.allowed(1, 2));

  // mask rows are monotone prefixes, nondecreasing over tokens
  for (int64_t t = 0; t + 1 < mf.rows; ++t) {
    bool seen_false = false;
    for (int64_t f = 0; f < mf.cols; ++f) {
      if (!mf.allowed(t, f)) seen_false = true;
      if (seen_false) CHECK_FALSE(mf.allowed(t, f));
      if (mf.allowed(t, f)) CHECK(mf.allowed(t + 1, f));
    }
  }
}

TEST_CASE("predictor_loss") {
  // perfect one-hot predictions: zero loss
  Tensor perfect = Tensor::from_data({2, 3}, {1, 0, 0, 0, 1, 0});
  CHECK(predictor_loss(perfect, {0, 1}, nullptr).item() ==
        doctest::Approx(0.0).epsilon(1e-12));

  // uniform over N_max+1=4 classes, 3 chunks: 3 ln 4
  Tensor uniform = Tensor::full({3, 4}, 0.25);
  CHECK(predictor_loss(uniform, {0, 3, 1}, nullptr).item() ==
        doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));

  // p=0.5 on two chunks: 2 ln 2
  Tensor half = Tensor::from_data({2, 2}, {0.5, 0.5, 0.5, 0.5});
  CHECK(predictor_loss(half, {0, 1}, nullptr).item() ==
        doctest::Approx(1.3862943611).epsilon(1e-9));

  CHECK_THROWS_AS(predictor_loss(half, {0, 5}, nullptr), IndexError);
}

TEST_CASE("joint_loss") {
  Tensor e2e = Tensor::scalar(1.0);
  Tensor pred = Tensor::scalar(2.0);
  CHECK(joint_loss(e2e, pred, 0.1, nullptr).item() ==
        doctest::Approx(1.2).epsilon(1e-12));
  CHECK(joint_loss(e2e, pred, 0.0, nullptr).item() == 1.0);
  CHECK(joint_loss(Tensor::scalar(0.0), Tensor::scalar(0.0), 0.1, nullptr)
            .item() == 0.0);
  CHECK_THROWS_AS(joint_loss(Tensor::scalar(-1.0), pred, 0.1, nullptr),
                  ContractError);
  CHECK_THROWS_AS(
      joint_loss(Tensor::scalar(std::nan("")), pred, 0.1, nullptr),
      ContractError);
}

TEST_CASE("predictor pipeline is differentiable") {
  RngStream rng(9);
  PredictorParams p;
  p.w1 = random_tensor({6, 4}, rng);
  p.b1 = random_tensor({4}, rng);
  p.w2 = random_tensor({4, 5}, rng);
  p.b2 = random_tensor({5}, rng);
  Tensor chunk = random_tensor({2, 3}, rng);
  auto f = [&](Tape* t) {
    Tensor probs = predictor_forward(splice_chunk(chunk, 2, t), p, t);
    return predictor_loss(probs, {3}, t);
  };
  CHECK(max_grad_rel_err({p.w1, p.b1, p.w2, p.b2, chunk}, f) < 1e-6);
}
