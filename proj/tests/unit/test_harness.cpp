#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "support/test_util.hpp"
#include "tandem/checkpoint.hpp"
#include "tandem/config.hpp"
#include "tandem/metrics.hpp"

using namespace tandem;
using tandem::testing::random_tensor;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TensorMap sample_tensors() {
  std::mt19937_64 gen(1);
  TensorMap m;
  m["a"] = random_tensor<float>({3, 4}, gen);
  m["b/bias"] = random_tensor<float>({7}, gen);
  m["c"] = random_tensor<float>({2, 3, 2}, gen);
  m["nan"] = Tensor<float>({2}, std::vector<float>{NAN, -0.0f});
  return m;
}

bool bit_identical(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto path = temp_file("tandem_ckpt_rt.bin");
  const auto m = sample_tensors();
  save_checkpoint(m, path);
  const auto back = load_checkpoint(path);
  ASSERT_EQ(back.size(), m.size());
  for (const auto& [k, t] : m) EXPECT_TRUE(bit_identical(t, back.at(k))) << k;
  std::filesystem::remove(path);
}

TEST(Checkpoint, LayoutStartsWithMagicAndVersion) {
  const auto path = temp_file("tandem_ckpt_layout.bin");
  save_checkpoint({{"x", Tensor<float>({1}, 1.0f)}}, path);
  const auto b = read_bytes(path);
  // magic, version, count, name len, 'x', rank, dim, payload, crc
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 4 + 1 + 4 + 4 + 4 + 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "TNDM");
  EXPECT_EQ(b[4], kCheckpointVersion);
  EXPECT_EQ(b[8], 1);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptedPayloadIsRejected) {
  const auto path = temp_file("tandem_ckpt_crc.bin");
  save_checkpoint(sample_tensors(), path);
  auto b = read_bytes(path);
  b[b.size() / 2] ^= 0x01;
  write_bytes(path, b);
  try {
    load_checkpoint(path);
    FAIL() << "corruption not detected";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("CRC"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, VersionAndTruncationErrors) {
  const auto path = temp_file("tandem_ckpt_ver.bin");
  save_checkpoint(sample_tensors(), path, kCheckpointVersion + 1);
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  save_checkpoint(sample_tensors(), path);
  auto b = read_bytes(path);
  b.resize(b.size() - 9);
  write_bytes(path, b);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  write_bytes(path, {'N', 'O', 'P', 'E', 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  EXPECT_THROW(load_checkpoint(temp_file("tandem_missing.bin")), CheckpointError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ModelBundlesRoundTrip) {
  const auto path = temp_file("tandem_ckpt_models.bin");
  TandemConfig tc;
  tc.primary = {.vocab_size = 20, .d_model = 8, .n_layers = 3, .n_heads = 2, .d_ff = 16, .max_context = 16};
  tc.secondary = {.vocab_size = 20, .d_model = 4, .n_layers = 2, .n_heads = 1, .d_ff = 8, .max_context = 16};
  tc.gamma = 3;
  TandemModel<float> tm(tc, 5);
  save_checkpoint(bundle_tandem(tm), path);
  auto tm2 = unbundle_tandem(load_checkpoint(path));
  EXPECT_EQ(tm2->config().gamma, 3);
  EXPECT_EQ(tm2->layer_map(), tm.layer_map());
  const std::vector<int> toks{1, 2, 3, 4, 5, 6, 7};
  EXPECT_TRUE(tandem_forward_teacher(tm, toks) == tandem_forward_teacher(*tm2, toks));
  EXPECT_THROW(unbundle_decoder(load_checkpoint(path)), CheckpointError);

  DecoderModel<float> dm(tc.primary, "primary.", 6);
  save_checkpoint(bundle_decoder(dm), path);
  auto dm2 = unbundle_decoder(load_checkpoint(path));
  EXPECT_TRUE(forward_full(dm, toks) == forward_full(*dm2, toks));

  DeepTandemModel<float> deep({tc.primary, tc.secondary, 2, 19}, 7);
  save_checkpoint(bundle_deep(deep), path);
  auto deep2 = unbundle_deep(load_checkpoint(path));
  EXPECT_TRUE(deep_forward(deep, toks, 1, 7, false).logits == deep_forward(*deep2, toks, 1, 7, false).logits);

  RouterMLP<float> r(9, 4, 8);
  RouterDataset ds;
  std::mt19937_64 gen(2);
  ds.features = random_tensor<float>({5, 9}, gen);
  ds.targets = {0.1f, 0.2f, 0.3f, 0.4f, 0.5f};
  RouterConfig rc{.k = 2, .hidden_dim = 4, .tau = 0.7, .gamma_max = 9};
  save_checkpoint(bundle_router(r, rc, &ds), path);
  auto lr = unbundle_router(load_checkpoint(path));
  EXPECT_EQ(lr.config.k, 2);
  EXPECT_EQ(lr.config.gamma_max, 9);
  EXPECT_NEAR(lr.config.tau, 0.7, 1e-7);
  EXPECT_TRUE(lr.dataset.features == ds.features);
  EXPECT_EQ(lr.dataset.targets, ds.targets);
  EXPECT_EQ(lr.router->predict(ds.features), r.predict(ds.features));
  std::filesystem::remove(path);
}

TEST(Config, ParsesCommentsAndDefaults) {
  auto c = parse_config("# run\nvariant = tandem-distil  # trailing\nsteps=300\nlambda = 0.25\n\nprimary.d_model = 48\n");
  EXPECT_EQ(c.train.variant, Variant::TANDEM_DISTIL);
  EXPECT_EQ(c.train.steps, 300);
  EXPECT_EQ(c.train.lr.total, 300);
  EXPECT_EQ(c.train.lambda, 0.25);
  EXPECT_EQ(c.primary.d_model, 48);
}

TEST(Config, FormatParsesBackLosslessly) {
  auto c = parse_config("variant = deep-tandem\nlr = 0.0012345678901234567\nseed = 18446744073709551615\ngamma = 3\n");
  const auto text = format_config(c);
  const auto back = parse_config(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.train.lr.peak, c.train.lr.peak);
  EXPECT_EQ(back.seed, 18446744073709551615ULL);
  EXPECT_EQ(config_hash(back), config_hash(c));
  c.gamma = 4;
  EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("colour = blue\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("steps\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("steps = ten\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("steps = 0\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("lambda = 2\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("variant = huge\n"), std::invalid_argument);
}

namespace {

// Logits for a vocab-3 model from a fixed table indexed by window row.
EvalModel table_model(std::vector<std::vector<float>> rows) {
  return {[rows](std::span<const int>, int b, int s) {
            Tensor<float> t({static_cast<std::size_t>(b * s), 3});
            for (int r = 0; r < b * s; ++r)
              for (int k = 0; k < 3; ++k) t.at(r, k) = rows[r][k];
            return t;
          },
          false};
}

}  // namespace

TEST(Evaluate, HandComputedMetrics) {
  // One window: tokens 0 1 2 0 1 2, five scored positions with targets 1 2 0 1 2.
  TokenDataset data(std::vector<int>{0, 1, 2, 0, 1, 2});
  const float L = std::log(2.0f);
  auto model = table_model({{0, 0, 0}, {0, 0, L}, {L, 0, 0}, {0, 0, 0}, {0, L, 0}});
  auto ref = table_model({{0, L, 0}, {0, 0, L}, {0, L, 0}, {L, 0, 0}, {0, L, 0}});
  auto rep = evaluate(model, data, &ref, {.seq_len = 5, .max_windows = 1, .batch = 1});
  // argmax: 0, 2, 0, 0, 1 vs targets 1, 2, 0, 1, 2 -> 2 of 5.
  EXPECT_DOUBLE_EQ(rep.accuracy_gt, 0.4);
  // p(target): 1/3, 1/2, 1/2, 1/3, 1/4.
  const double ce = -(std::log(1.0 / 3) + std::log(0.5) + std::log(0.5) + std::log(1.0 / 3) + std::log(0.25)) / 5;
  EXPECT_NEAR(rep.ce_gt, ce, 1e-6);
  // Reference argmax: 1, 2, 1, 0, 1 -> agreements at rows 1, 3, 4.
  EXPECT_DOUBLE_EQ(rep.relative_accuracy, 0.6);
  // TV per row: uniform vs (1/4,1/2,1/4) = 1/6; equal = 0; (1/2,1/4,1/4) vs (1/4,1/2,1/4) = 1/4;
  // uniform vs (1/2,1/4,1/4) = 1/6; equal = 0.
  EXPECT_NEAR(rep.relative_tv, (1.0 / 6 + 0 + 0.25 + 1.0 / 6 + 0) / 5, 1e-6);
  EXPECT_EQ(rep.positions, 5u);
}

TEST(Evaluate, SelfReferenceAndUniformModel) {
  DecoderConfig c{.vocab_size = 258, .d_model = 8, .n_layers = 1, .n_heads = 2, .d_ff = 16, .max_context = 16};
  DecoderModel<float> m(c, "", 3);
  TokenDataset data(pack_documents(synthetic_documents(2000, 1)));
  auto em = eval_decoder(m);
  auto rep = evaluate(em, data, &em, {.seq_len = 16, .max_windows = 6, .batch = 4});
  EXPECT_EQ(rep.relative_accuracy, 1.0);
  EXPECT_EQ(rep.relative_tv, 0.0);
  EXPECT_EQ(rep.windows, 6u);
  m.unembed.value.zero();
  auto uni = evaluate(eval_decoder(m), data, nullptr, {.seq_len = 16, .max_windows = 6, .batch = 4});
  EXPECT_NEAR(uni.ce_gt, std::log(258.0), 1e-5);
  EXPECT_TRUE(std::isnan(uni.relative_tv));
  const auto json = metrics_to_json(uni, R"({"seed": 3})");
  for (const char* key : {"accuracy_gt", "ce_gt", "relative_accuracy", "relative_tv", "seed"}) {
    EXPECT_NE(json.find(key), std::string::npos) << key;
  }
  EXPECT_THROW(evaluate(em, TokenDataset({1, 2}), nullptr, {.seq_len = 16}), std::invalid_argument);
}

TEST(Evaluate, SamePositionAlignment) {
  // A deep model and a next-token model that predict identically must score
  // identical metrics on the aligned targets.
  TokenDataset data(std::vector<int>{0, 1, 2, 0, 1, 2, 0, 1, 2});
  auto next = table_model({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 0}});
  EvalModel same{[](std::span<const int>, int b, int s) {
                   Tensor<float> t({static_cast<std::size_t>(b * s), 3});
                   const float rows[4][3] = {{9, 9, 9}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
                   for (int r = 0; r < b * s; ++r)
                     for (int k = 0; k < 3; ++k) t.at(r, k) = rows[r % 4][k];
                   return t;
                 },
                 true};
  EvalOptions o{.seq_len = 4, .max_windows = 1, .batch = 1, .align_same_position = true};
  auto a = evaluate(next, data, nullptr, o), b = evaluate(same, data, nullptr, o);
  EXPECT_EQ(a.positions, 3u);
  EXPECT_EQ(b.positions, 3u);
  EXPECT_DOUBLE_EQ(a.ce_gt, b.ce_gt);
  EXPECT_DOUBLE_EQ(a.accuracy_gt, b.accuracy_gt);
}

TEST(Metrics, StandardErrors) {
  EXPECT_DOUBLE_EQ(MetricsReport::standard_error({1, 1, 1}), 0.0);
  EXPECT_NEAR(MetricsReport::standard_error({1, 2, 3, 4}), std::sqrt(5.0 / 3 / 4), 1e-12);
  EXPECT_NEAR(MetricsReport::paired_standard_error({2, 3, 4}, {1, 2, 3}), 0.0, 1e-15);
}
