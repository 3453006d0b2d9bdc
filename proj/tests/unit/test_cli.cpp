#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "txnet/cli.hpp"

using namespace txnet;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "txnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("txnet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST(WeightFile, RoundTripIsByteExact) {
  const auto store = initialize<float>(model_manifest(presets::micro()), 4);
  const auto bytes = serialize(to_weight_file(store));
  const auto back = store_from_weight_file<float>(parse_weight_file(bytes), model_manifest(presets::micro()));
  EXPECT_EQ(serialize(to_weight_file(back)), bytes);
}

TEST(WeightFile, RejectsCorruptInput) {
  const auto store = initialize<double>(model_manifest(presets::micro()), 4);
  auto bytes = serialize(to_weight_file(store));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_weight_file(bad), FormatError);
  auto cut = bytes;
  cut.resize(bytes.size() - 3);
  EXPECT_THROW(parse_weight_file(cut), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(parse_weight_file(extra), FormatError);
}

TEST_F(CliTest, BuildIsDeterministicAndForwardReusesWeights) {
  ASSERT_EQ(cli({"build", "--config", "micro", "--seed", "3", "--out", path("a.txnw")}).code, 0);
  ASSERT_EQ(cli({"build", "--config", "micro", "--seed", "3", "--out", path("b.txnw")}).code, 0);
  EXPECT_EQ(read_bytes(path("a.txnw")), read_bytes(path("b.txnw")));

  const auto seeded = cli({"forward", "--config", "micro", "--seed", "3", "--batch", "2"});
  const auto loaded = cli({"forward", "--config", "micro", "--seed", "3", "--batch", "2", "--weights", path("a.txnw")});
  ASSERT_EQ(seeded.code, 0) << seeded.err;
  EXPECT_EQ(seeded.out, loaded.out);
  EXPECT_NE(seeded.out.find("image 1:"), std::string::npos);
}

TEST_F(CliTest, ForwardDumpsLogitsAndAcceptsRawInput) {
  auto imgs = random_images<float>(5, 2, 3, 64);
  ParamStore<float> in;
  in.add({"images", imgs.shape(), Init::kZeros, false}, imgs);
  save_weights(path("in.txnw"), in);
  const auto r = cli({"forward", "--config", "micro", "--seed", "1", "--input", path("in.txnw"), "--out",
                      path("logits.txnw")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto f = parse_weight_file(read_bytes(path("logits.txnw")));
  ASSERT_EQ(f.entries.size(), 1u);
  EXPECT_EQ(f.entries[0].extents, (std::vector<std::uint32_t>{2, 10}));

  auto m = build_model<float>(presets::micro(), 1);
  const auto direct = m.forward(imgs);
  const auto dumped = detail::from_le_bytes<float>(f.entries[0].bytes);
  for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_EQ(dumped[i], direct[i]);
}

TEST_F(CliTest, MismatchedWeightsNameTheTensor) {
  ASSERT_EQ(cli({"build", "--config", "micro_dwconv", "--out", path("w.txnw")}).code, 0);
  const auto r = cli({"forward", "--config", "micro", "--weights", path("w.txnw")});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("missing tensor stage0."), std::string::npos) << r.err;
}

TEST_F(CliTest, OddChannelConfigIsUsageError) {
  auto j = to_json(presets::micro());
  j["stages"][1]["channels"] = 15;
  std::ofstream(path("odd.json")) << j.dump();
  const auto r = cli({"summary", "--config", path("odd.json")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("stage 1"), std::string::npos) << r.err;
}

TEST_F(CliTest, UnknownTapIsUsageError) {
  const auto r = cli({"erf", "--config", "micro", "--tap", "stage5", "--images", "1", "--out", path("x.pgm")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("stage0.embed"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingRequiredOptionIsUsageError) {
  EXPECT_EQ(cli({"erf", "--config", "micro"}).code, 2);
  EXPECT_EQ(cli({}).code, 2);
}

TEST_F(CliTest, ErfWritesPgmAndSidecar) {
  const auto a = cli({"erf", "--config", "micro", "--seed", "2", "--tap", "stage0.block0.osra", "--images", "4",
                      "--out", path("osra.pgm")});
  const auto b = cli({"erf", "--config", "micro", "--seed", "2", "--tap", "stage0.block0.idconv", "--images", "4",
                      "--out", path("idconv.pgm")});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;

  const auto pgm = read_bytes(path("osra.pgm"));
  const std::string header = "P5\n64 64\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 64 * 64);
  EXPECT_EQ(std::string(pgm.begin(), pgm.begin() + long(header.size())), header);
  EXPECT_EQ(*std::max_element(pgm.begin() + long(header.size()), pgm.end()), 255);

  auto side = [&](const std::string& f) {
    std::ifstream in(path(f));
    return nlohmann::json::parse(in);
  };
  const auto so = side("osra.json"), si = side("idconv.json");
  EXPECT_EQ(so["tap"], "stage0.block0.osra");
  EXPECT_EQ(so["num_images"], 4);
  EXPECT_GT(so["support_fraction"].get<double>(), si["support_fraction"].get<double>());
}

TEST(Cli, SummaryReportsPerStageAndJson) {
  const auto text = cli({"summary", "--config", "tiny"});
  ASSERT_EQ(text.code, 0);
  EXPECT_NE(text.out.find("stage2"), std::string::npos);
  const auto js = cli({"summary", "--config", "micro", "--json"});
  const auto j = nlohmann::json::parse(js.out);
  EXPECT_EQ(j["total_params"].get<std::uint64_t>(), count_params(presets::micro()).total_params);
}

TEST(Cli, CheckPassesAndCorruptedCaseFails) {
  const auto ok = cli({"check"});
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("all checks passed"), std::string::npos);
  EXPECT_EQ(cli({"check", "--precision", "f32"}).code, 2);

  // Backward claims d(3x)/dx = 2.
  GradCase bad{"scaled_wrong",
               [](const std::vector<Tensor<double>>& in) {
                 const auto& x = in[0];
                 std::vector<double> v(x.numel());
                 for (std::size_t i = 0; i < v.size(); ++i) v[i] = 3 * x[i];
                 auto xn = x.node();
                 return detail::finish<double>("scaled_wrong", Tensor<double>(x.shape(), v), {x},
                                               [xn](std::span<const double> g) {
                                                 auto gx = detail::grad_of(xn);
                                                 for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2 * g[i];
                                               });
               },
               {random_tensor({1, 2, 3, 3}, 1, "x")},
               kSmoothTolerance};
  CliConfig c;
  c.subcommand = "check";
  c.precision = "f64";
  std::ostringstream out, err;
  EXPECT_EQ(run_command(c, out, err, {bad}), 1);
  EXPECT_NE(out.str().find("FAIL scaled_wrong"), std::string::npos) << out.str();
}

TEST(Cli, ToolBinaryRuns) {
  const std::string cmd = std::string(TXNET_TOOL) + " summary --config micro > /dev/null";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  const std::string bad = std::string(TXNET_TOOL) + " summary --config /nonexistent.json 2> /dev/null";
  const int st = std::system(bad.c_str());
  EXPECT_EQ(WEXITSTATUS(st), 2);
}
