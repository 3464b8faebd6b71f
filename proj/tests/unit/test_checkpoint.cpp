#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "apf/checkpoint.hpp"
#include "apf/errors.hpp"

namespace apf {
namespace {

namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("apf_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
    cfg_.input_dim = 3;
    cfg_.queries = 2;
    cfg_.num_classes = 2;
    cfg_.set_width(8, 2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  ParseError::Kind load_error(const fs::path& p) {
    try {
      load_checkpoint(p);
    } catch (const ParseError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "expected ParseError";
    return ParseError::Kind::kIo;
  }

  fs::path dir_;
  ModelConfig cfg_;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
  Model model(cfg_, 4);
  save_checkpoint(dir_ / "m.apf", model, {{"epoch", 3}});
  const Checkpoint ckpt = load_checkpoint(dir_ / "m.apf");
  EXPECT_EQ(ckpt.config, cfg_);
  EXPECT_EQ(ckpt.metadata["epoch"], 3);
  ASSERT_EQ(ckpt.params.size(), model.params().size());
  for (const Parameter& p : model.params()) EXPECT_EQ(ckpt.params.get(p.name).value, p.value) << p.name;
  Model loaded = load_model(dir_ / "m.apf");
  EXPECT_EQ(loaded.config(), cfg_);
}

TEST_F(CheckpointTest, CorruptFilesRaiseDistinctErrors) {
  Model model(cfg_, 4);
  const fs::path good = dir_ / "good.apf";
  save_checkpoint(good, model);
  std::ifstream in(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir_ / name, std::ios::binary) << content;
    return dir_ / name;
  };
  std::string bad_magic = bytes;
  bad_magic[3] = 'X';
  EXPECT_EQ(load_error(write("magic.apf", bad_magic)), ParseError::Kind::kBadMagic);
  EXPECT_EQ(load_error(write("cut.apf", bytes.substr(0, bytes.size() - 5))), ParseError::Kind::kTruncated);
  EXPECT_EQ(load_error(write("long.apf", bytes + std::string(8, '\0'))), ParseError::Kind::kSizeMismatch);
  EXPECT_EQ(load_error(write("header.apf", bytes.substr(0, 6))), ParseError::Kind::kTruncated);
  EXPECT_EQ(load_error(dir_ / "missing.apf"), ParseError::Kind::kIo);
}

TEST(FirstDivergentField, NamesDottedPath) {
  const nlohmann::json a = {{"taa", {{"window", 5}, {"heads", 4}}}, {"queries", 10}};
  nlohmann::json b = a;
  EXPECT_EQ(first_divergent_field(a, b), "");
  b["taa"]["window"] = 7;
  EXPECT_EQ(first_divergent_field(a, b), "taa.window");
  b = a;
  b.erase("queries");
  EXPECT_EQ(first_divergent_field(a, b), "queries");
}

}  // namespace
}  // namespace apf
