#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lsf/checkpoint.hpp"
#include "lsf/encoder.hpp"
#include "test_util.hpp"

using lsf::BnMode;
using lsf::Encoder;
using lsf::EncoderForm;
using lsf::Shape;
using lsf::Tensor;
using T64 = Tensor<double>;
using T32 = Tensor<float>;

namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}

lsf::EncoderConfig small_cfg() {
  lsf::EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 24;
  cfg.blocks = 3;
  cfg.downsample_after = 1;
  cfg.upsample_before = 3;
  cfg.feature_dim = 8;
  return cfg;
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("named tensors round-trip bit-identically") {
  auto rng = lsf::make_rng(3);
  lsf::NamedTensorList<double> tensors;
  tensors.emplace_back("a.weight", testutil::randn<double>(Shape{4, 5}, rng));
  tensors.emplace_back("a.bias", testutil::randn<double>(Shape{5}, rng));
  tensors.emplace_back("scalar", T64::scalar(-2.5));
  const std::string path = tmp_path("lsf_ckpt_roundtrip.lsf");
  lsf::save_checkpoint(path, tensors);
  auto loaded = lsf::load_checkpoint<double>(path);
  REQUIRE(loaded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded[i].first == tensors[i].first);
    CHECK(loaded[i].second.shape() == tensors[i].second.shape());
    CHECK(testutil::max_abs_diff(loaded[i].second,
                                 testutil::to_doubles(tensors[i].second)) == 0.0);
  }
  fs::remove(path);
}

TEST_CASE("dtype tags prevent silent FP32/FP64 mixing") {
  auto rng = lsf::make_rng(5);
  lsf::NamedTensorList<float> tensors;
  tensors.emplace_back("w", testutil::randn<float>(Shape{3}, rng));
  const std::string path = tmp_path("lsf_ckpt_dtype.lsf");
  lsf::save_checkpoint(path, tensors);
  CHECK(lsf::peek_checkpoint_dtype(path) == 0);
  CHECK_THROWS_AS(lsf::load_checkpoint<double>(path), lsf::IoError);
  CHECK(lsf::load_checkpoint<float>(path).size() == 1);
  fs::remove(path);
}

TEST_CASE("truncated checkpoints fail loudly") {
  auto rng = lsf::make_rng(7);
  lsf::NamedTensorList<double> tensors;
  tensors.emplace_back("w", testutil::randn<double>(Shape{8, 8}, rng));
  const std::string path = tmp_path("lsf_ckpt_trunc.lsf");
  lsf::save_checkpoint(path, tensors);
  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign((std::istreambuf_iterator<char>(f)),
                 std::istreambuf_iterator<char>());
  }
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(lsf::load_checkpoint<double>(path), lsf::IoError);
  fs::remove(path);
}

TEST_CASE("bad magic is rejected") {
  const std::string path = tmp_path("lsf_ckpt_magic.lsf");
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "NOPE then some bytes";
  }
  CHECK_THROWS_AS(lsf::load_checkpoint<double>(path), lsf::IoError);
  fs::remove(path);
}

TEST_CASE("encoder save/load round-trips bit-identically") {
  auto rng = lsf::make_rng(11);
  auto enc = Encoder<double>::make(small_cfg(), rng, /*random_bn_stats=*/true);
  const std::string path = tmp_path("lsf_enc_roundtrip.lsf");
  lsf::save_encoder(path, enc);
  auto loaded =
      lsf::build_from_checkpoint<double>(path, EncoderForm::Train);
  T64 x = testutil::randn<double>(Shape{15, 8}, rng);
  T64 a = lsf::encoder_forward(x, enc, BnMode::Eval);
  T64 b = lsf::encoder_forward(x, loaded, BnMode::Eval);
  CHECK(testutil::max_abs_diff(a, testutil::to_doubles(b)) == 0.0);
  fs::remove(path);
}

TEST_CASE("train-form load vs fused-form load agree on the forward pass") {
  auto rng = lsf::make_rng(13);
  auto enc = Encoder<float>::make(small_cfg(), rng, /*random_bn_stats=*/true);
  const std::string path = tmp_path("lsf_enc_forms.lsf");
  lsf::save_encoder(path, enc);
  auto as_train =
      lsf::build_from_checkpoint<float>(path, EncoderForm::Train);
  auto as_fused =
      lsf::build_from_checkpoint<float>(path, EncoderForm::Fused);
  T32 x = testutil::randn<float>(Shape{22, 8}, rng);
  T32 a = lsf::encoder_forward(x, as_train, BnMode::Eval);
  T32 b = lsf::encoder_forward(x, as_fused, BnMode::Eval);
  CHECK(testutil::max_abs_diff(a, b) <= 1e-5);
  fs::remove(path);
}

TEST_CASE("fused checkpoints cannot load as train form") {
  auto rng = lsf::make_rng(17);
  auto enc = Encoder<double>::make(small_cfg(), rng);
  auto fused = lsf::fuse_encoder(enc);
  const std::string path = tmp_path("lsf_enc_fusedonly.lsf");
  lsf::save_encoder(path, fused);
  CHECK_THROWS_AS(
      lsf::build_from_checkpoint<double>(path, EncoderForm::Train),
      lsf::ContractError);
  auto reloaded =
      lsf::build_from_checkpoint<double>(path, EncoderForm::Fused);
  T64 x = testutil::randn<double>(Shape{9, 8}, rng);
  T64 a = lsf::encoder_forward(x, fused, BnMode::Eval);
  T64 b = lsf::encoder_forward(x, reloaded, BnMode::Eval);
  CHECK(testutil::max_abs_diff(a, testutil::to_doubles(b)) == 0.0);
  fs::remove(path);
}

TEST_CASE("missing tensors are listed in the load error") {
  auto rng = lsf::make_rng(19);
  auto enc = Encoder<double>::make(small_cfg(), rng);
  const std::string path = tmp_path("lsf_enc_missing.lsf");
  lsf::NamedTensorList<double> partial;
  lsf::append_encoder(partial, enc);
  // Drop two tensors.
  lsf::NamedTensorList<double> kept;
  for (auto& [name, t] : partial) {
    if (name == "enc.final_norm.gamma" || name == "enc.block1.attn.wk") continue;
    kept.emplace_back(name, t);
  }
  lsf::save_checkpoint(path, kept);
  try {
    lsf::build_from_checkpoint<double>(path, EncoderForm::Train);
    FAIL("expected an IoError");
  } catch (const lsf::IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("enc.final_norm.gamma") != std::string::npos);
    CHECK(msg.find("enc.block1.attn.wk") != std::string::npos);
  }
  fs::remove(path);
}

TEST_SUITE_END();
