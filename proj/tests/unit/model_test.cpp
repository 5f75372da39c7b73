// Copyright 2026 The LTD Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "ltd/model.hpp"
#include "ltd/tokenizer.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace ltd;
using namespace ltd::testing;

namespace {

const std::vector<std::string> kNames = {"red", "cube", "ball"};

Vocabulary vocab() { return Vocabulary::from_phrases(kNames); }

TokenSequence tokens_for(const ModelConfig& cfg, std::vector<std::string> phrases) {
  return tokenize(vocab(), phrases, cfg.n_target_queries, cfg.max_targets_per_sample);
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t w = t.dim(1);
  return {t.data().begin() + static_cast<std::ptrdiff_t>(r * w), t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w)};
}

bool values_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Tensor encoder_input(const Model& model, const Image& img) {
  const ModelConfig& c = model.config();
  return add(model.extract_features(img), positional_encoding(c.sequence_length(), c.d_model, c.grid_size(), c.grid_size()));
}

}  // namespace

TEST_CASE("tokenizer layout") {
  const Vocabulary v = vocab();
  CHECK(v.size() == 8);
  CHECK(v.id("[all]") == Vocabulary::kAll);
  CHECK(v.encode_phrase("Red") == std::vector<int>{v.id("red")});
  CHECK(v.id("zebra") == Vocabulary::kUnk);

  const TokenSequence empty = tokenize(v, std::vector<std::string>{}, 6, 3);
  CHECK(empty.token_ids == std::vector<int>{Vocabulary::kCls, Vocabulary::kSep, 0, 0, 0, 0});
  CHECK(empty.pad_mask == std::vector<bool>{false, false, true, true, true, true});
  CHECK(empty.active_length() == 2);
  CHECK(empty.phrase_count == 0);

  const TokenSequence all = tokenize(v, std::vector<std::string>{"[all]"}, 6, 3);
  CHECK(all.active_length() == 3);
  CHECK(std::vector<int>(all.token_ids.begin(), all.token_ids.begin() + 3) ==
        std::vector<int>{Vocabulary::kCls, Vocabulary::kAll, Vocabulary::kSep});

  const TokenSequence two = tokenize(v, std::vector<std::string>{"red cube", "ball"}, 8, 3);
  CHECK(two.token_ids == std::vector<int>{1, v.id("red"), v.id("cube"), 2, v.id("ball"), 2, 0, 0});
  CHECK(two.segment_ids == std::vector<int>{0, 0, 0, 0, 1, 1, 0, 0});
  CHECK(two.phrase_count == 2);

  // "ball" does not fit after "red cube"; it is dropped whole.
  const TokenSequence cut = tokenize(v, std::vector<std::string>{"red cube", "ball"}, 5, 3);
  CHECK(cut.token_ids == std::vector<int>{1, v.id("red"), v.id("cube"), 2, 0});
  CHECK(cut.phrase_count == 1);

  const TokenSequence capped = tokenize(v, std::vector<std::string>{"red", "cube", "ball"}, 12, 2);
  CHECK(capped.phrase_count == 2);
}

TEST_CASE("feature extraction") {
  ModelConfig cfg;
  Model model(cfg, 1);
  const Image black(64, 64);
  const Tensor f = model.extract_features(black);
  CHECK(f.shape() == Shape{64, static_cast<std::size_t>(cfg.d_model)});
  CHECK(std::all_of(f.data().begin(), f.data().end(), [](double v) { return v == 0.0; }));

  // One white patch at grid (row 2, column 5) lights up exactly row 2·8 + 5.
  Image patch(64, 64);
  for (int y = 16; y < 24; ++y)
    for (int x = 40; x < 48; ++x)
      for (int c = 0; c < 3; ++c) patch.at(x, y, c) = 1.0;
  const Tensor g = model.extract_features(patch);
  for (std::size_t r = 0; r < 64; ++r) {
    const auto values = row(g, r);
    const bool nonzero = std::any_of(values.begin(), values.end(), [](double v) { return v != 0.0; });
    CHECK(nonzero == (r == 21));
  }
  CHECK_THROWS_AS(model.extract_features(Image(32, 32)), DimensionError);
}

TEST_CASE("positional encoding") {
  const Tensor pe = positional_encoding(12, 8, 3, 4);
  CHECK(pe.shape() == Shape{12, 8});
  CHECK(std::all_of(pe.data().begin(), pe.data().end(), [](double v) { return v >= -1.0 && v <= 1.0; }));
  // Position (0, 0).
  for (std::size_t c = 0; c < 8; ++c) CHECK(pe.at(0, c) == (c % 2 == 0 ? 0.0 : 1.0));
  // Same row, different columns: identical row half.
  for (std::size_t c = 0; c < 4; ++c) CHECK(pe.at(5, c) == pe.at(7, c));
  CHECK(pe.at(5, 4) != pe.at(7, 4));
  // Position index 6 is (row 1, column 2); half width 4 gives frequencies 1 and 1/100.
  const double expected[] = {std::sin(1.0), std::cos(1.0), std::sin(0.01), std::cos(0.01),
                             std::sin(2.0), std::cos(2.0), std::sin(0.02), std::cos(0.02)};
  for (std::size_t c = 0; c < 8; ++c) CHECK(pe.at(6, c) == doctest::Approx(expected[c]).epsilon(1e-14));

  CHECK_THROWS_AS(positional_encoding(12, 6, 3, 4), DimensionError);
  CHECK_THROWS_AS(positional_encoding(12, 8, 3, 3), DimensionError);
}

TEST_CASE("encoder contracts") {
  std::mt19937_64 rng(3);
  ModelConfig cfg = tiny_config();
  cfg.n_encoder_layers = 0;
  const Model identity(cfg, 5);
  const Tensor x = random_tensor({4, static_cast<std::size_t>(cfg.d_model)}, rng);
  const Tensor same = identity.encode(x);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));

  cfg.n_encoder_layers = 2;
  const Model model(cfg, 5);
  for (std::size_t len : {1u, 4u, 7u}) {
    CHECK(model.encode(random_tensor({len, static_cast<std::size_t>(cfg.d_model)}, rng)).shape() ==
          Shape{len, static_cast<std::size_t>(cfg.d_model)});
  }

  // Permuting inputs (features plus their positional rows) permutes outputs.
  const Tensor features = random_tensor({4, 8}, rng);
  const Tensor pos = positional_encoding(4, 8, 2, 2);
  const std::vector<int> perm = {2, 0, 3, 1};
  const Tensor out = model.encode(add(features, pos));
  const Tensor out_perm = model.encode(add(embedding_lookup(features, perm), embedding_lookup(pos, perm)));
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = row(out_perm, i), b = row(out, static_cast<std::size_t>(perm[i]));
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(a[c] - b[c]) < 1e-12);
  }
}

TEST_CASE("query construction") {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, 9);
  const Tensor& table = model.parameters().get("query_embed");
  const Tensor& token = model.parameters().get("token_embed");
  const Tensor& segment = model.parameters().get("segment_embed");
  const TokenSequence seq = tokens_for(cfg, {"red", "ball"});
  const QuerySet q = model.build_queries(seq);
  const std::size_t n = static_cast<std::size_t>(cfg.n_object_queries);
  for (std::size_t i = 0; i < n; ++i) CHECK(row(q.object_queries, i) == row(table, i));

  for (std::size_t j = 0; j < seq.token_ids.size(); ++j) {
    const auto got = row(q.target_queries, j);
    const auto t = row(token, static_cast<std::size_t>(seq.token_ids[j]));
    const auto s = row(segment, static_cast<std::size_t>(seq.segment_ids[j]));
    const auto e = row(table, n + j);
    for (std::size_t c = 0; c < got.size(); ++c) CHECK(got[c] == doctest::Approx(t[c] + s[c] + e[c]).epsilon(1e-15));
  }
  // The two [SEP] rows (positions 2 and 4) differ only by segment and query embeddings.
  const auto sep0 = row(q.target_queries, 2), sep1 = row(q.target_queries, 4);
  for (std::size_t c = 0; c < sep0.size(); ++c) {
    const double expected = segment.at(0, c) + table.at(n + 2, c) - segment.at(1, c) - table.at(n + 4, c);
    CHECK(sep0[c] - sep1[c] == doctest::Approx(expected).epsilon(1e-12));
  }

  const QuerySet all = model.build_queries(tokens_for(cfg, {"[all]"}));
  CHECK(std::count(all.target_pad_mask.begin(), all.target_pad_mask.end(), false) == 3);

  TokenSequence bad = seq;
  bad.token_ids[1] = cfg.vocab_size;
  CHECK_THROWS_AS(model.build_queries(bad), LookupError);
  bad = seq;
  bad.segment_ids[1] = cfg.max_targets_per_sample;
  CHECK_THROWS_AS(model.build_queries(bad), LookupError);
  bad = seq;
  bad.token_ids.pop_back();
  CHECK_THROWS_AS(model.build_queries(bad), DimensionError);
}

TEST_CASE("decoder leaves target rows untouched through target-attention and masks padding") {
  const ModelConfig cfg = tiny_config();
  const std::size_t n = static_cast<std::size_t>(cfg.n_object_queries), k = static_cast<std::size_t>(cfg.n_target_queries);
  std::mt19937_64 rng(101);
  const std::vector<std::vector<std::string>> phrase_sets = {{}, {"[all]"}, {"red"}, {"red cube", "ball"}, {"ball", "cube"}};
  for (int pass = 0; pass < 50; ++pass) {
    const Model model(cfg, 1000 + static_cast<std::uint64_t>(pass));
    const Image img = random_image(cfg.image_size, rng);
    const TokenSequence seq = tokens_for(cfg, phrase_sets[static_cast<std::size_t>(pass) % phrase_sets.size()]);
    const Tensor memory = model.encode(encoder_input(model, img));
    AttentionCapture capture;
    std::vector<DecoderLayerTrace> trace;
    DecodeOptions options;
    options.capture = &capture;
    options.trace = &trace;
    model.decode(memory, model.build_queries(seq), options);
    REQUIRE(trace.size() == static_cast<std::size_t>(cfg.n_decoder_layers));
    for (const DecoderLayerTrace& t : trace) {
      for (std::size_t r = n; r < n + k; ++r) CHECK(row(t.after_self_attention, r) == row(t.after_target_attention, r));
    }
    for (const auto& layer : capture.self_attention) {
      REQUIRE(layer.size() == static_cast<std::size_t>(cfg.n_heads));
      for (const Tensor& w : layer) {
        for (std::size_t r = 0; r < n + k; ++r) {
          for (std::size_t c = 0; c < k; ++c) {
            if (seq.pad_mask[c]) CHECK(w.at(r, n + c) == 0.0);
          }
        }
      }
    }
  }
}

TEST_CASE("decoder conditioning") {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, 44);
  std::mt19937_64 rng(8);
  const Image img = random_image(cfg.image_size, rng);
  const Tensor memory = model.encode(encoder_input(model, img));
  const QuerySet red = model.build_queries(tokens_for(cfg, {"red"}));
  const QuerySet ball = model.build_queries(tokens_for(cfg, {"ball"}));
  const QuerySet longer = model.build_queries(tokens_for(cfg, {"red cube", "ball"}));

  DecodeOptions blocked;
  blocked.block_object_to_target = true;
  const Tensor a = model.decode(memory, red, blocked);
  CHECK(values_equal(a, model.decode(memory, ball, blocked)));
  CHECK(values_equal(a, model.decode(memory, longer, blocked)));

  const Tensor open_red = model.decode(memory, red);
  const Tensor open_ball = model.decode(memory, ball);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < open_red.numel(); ++i) max_diff = std::max(max_diff, std::abs(open_red.data()[i] - open_ball.data()[i]));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("object outputs coincide when the query table is zero") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg, 12);
  auto table = model.parameters().get("query_embed").mutable_data();
  std::fill(table.begin(), table.end(), 0.0);
  std::mt19937_64 rng(1);
  const DetectionSet det = model.forward(random_image(cfg.image_size, rng), tokens_for(cfg, {"cube"})).detections;
  for (std::size_t i = 1; i < det.size(); ++i) {
    const auto first = row(det.class_logits, 0), other = row(det.class_logits, i);
    for (std::size_t c = 0; c < first.size(); ++c) CHECK(std::abs(first[c] - other[c]) < 1e-12);
  }
}

TEST_CASE("token embeddings reach the object outputs") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg, 21);
  std::mt19937_64 rng(2);
  const Image img = random_image(cfg.image_size, rng);
  const TokenSequence seq = tokens_for(cfg, {"red"});
  Tensor& token = model.parameters().get("token_embed");
  const std::size_t red = static_cast<std::size_t>(vocab().id("red")), d = static_cast<std::size_t>(cfg.d_model);
  const double before = model.forward(img, seq).detections.class_logits.at(0, 0);
  token.mutable_data()[red * d] += 1e-4;
  const double after = model.forward(img, seq).detections.class_logits.at(0, 0);
  CHECK(std::abs(after - before) > 1e-10);
}

TEST_CASE("prediction heads and forward output") {
  const ModelConfig cfg = tiny_config();
  const Model model(cfg, 30);
  std::mt19937_64 rng(77);

  const Tensor states = random_tensor({3, static_cast<std::size_t>(cfg.d_model)}, rng);
  const Tensor repeated = embedding_lookup(states, std::vector<int>{1, 1});
  const DetectionSet twin = model.predict_heads(repeated);
  CHECK(row(twin.boxes, 0) == row(twin.boxes, 1));
  CHECK(row(twin.class_logits, 0) == row(twin.class_logits, 1));
  CHECK(row(twin.target_index_logits, 0) == row(twin.target_index_logits, 1));

  for (int trial = 0; trial < 5; ++trial) {
    const ForwardResult r = model.forward(random_image(cfg.image_size, rng), tokens_for(cfg, {"red cube"}), true);
    const DetectionSet& det = r.detections;
    CHECK(det.size() == static_cast<std::size_t>(cfg.n_object_queries));
    CHECK(det.class_logits.dim(1) == static_cast<std::size_t>(cfg.n_classes + 1));
    CHECK(det.target_index_logits.dim(1) == static_cast<std::size_t>(cfg.max_targets_per_sample + 1));
    CHECK(std::all_of(det.boxes.data().begin(), det.boxes.data().end(), [](double v) { return v >= 0.0 && v <= 1.0; }));
    const Tensor p = softmax(det.class_logits, 1);
    for (std::size_t i = 0; i < det.size(); ++i) {
      const auto pr = row(p, i);
      CHECK(std::abs(std::accumulate(pr.begin(), pr.end(), 0.0) - 1.0) < 1e-9);
    }

    REQUIRE(r.attention.self_attention.size() == static_cast<std::size_t>(cfg.n_decoder_layers));
    REQUIRE(r.attention.target_attention.size() == static_cast<std::size_t>(cfg.n_decoder_layers));
    for (const auto* maps : {&r.attention.self_attention, &r.attention.target_attention}) {
      for (const auto& layer : *maps) {
        REQUIRE(layer.size() == static_cast<std::size_t>(cfg.n_heads));
        for (const Tensor& w : layer) {
          for (std::size_t q = 0; q < w.dim(0); ++q) {
            const auto wr = row(w, q);
            CHECK(std::abs(std::accumulate(wr.begin(), wr.end(), 0.0) - 1.0) < 1e-9);
          }
        }
      }
    }
    CHECK(r.attention.target_attention[0][0].shape() ==
          Shape{static_cast<std::size_t>(cfg.n_object_queries), static_cast<std::size_t>(cfg.sequence_length())});
  }
}

TEST_CASE("model construction is seed-deterministic") {
  const ModelConfig cfg = tiny_config();
  const Model a(cfg, 5), b(cfg, 5), c(cfg, 6);
  bool all_equal = true, any_differs = false;
  for (std::size_t i = 0; i < a.parameters().entries().size(); ++i) {
    const Tensor& x = a.parameters().entries()[i].second;
    all_equal = all_equal && values_equal(x, b.parameters().entries()[i].second);
    any_differs = any_differs || !values_equal(x, c.parameters().entries()[i].second);
  }
  CHECK(all_equal);
  CHECK(any_differs);
}

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.patch_size = 5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.n_target_queries = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("external token embeddings overwrite matching rows") {
  const ModelConfig cfg = tiny_config();
  Model model(cfg, 3);
  std::istringstream table("red 1 2 3 4 5 6 7 8\nzebra 1 1 1 1 1 1 1 1\n\n");
  CHECK(model.load_token_embeddings(table, vocab()) == 1);
  const auto red = row(model.parameters().get("token_embed"), static_cast<std::size_t>(vocab().id("red")));
  CHECK(red == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  std::istringstream short_row("cube 1 2\n");
  CHECK_THROWS_AS(model.load_token_embeddings(short_row, vocab()), DimensionError);
}
