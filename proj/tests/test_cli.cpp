#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "queueseq/cli.hpp"

using namespace queueseq;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("queueseq_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string write_config(const std::string& name, const Json& j) {
  const auto p = scratch() / name;
  std::ofstream(p) << j.dump();
  return p.string();
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "queueseq");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string out(const std::string& name) { return (scratch() / name).string(); }

Json mm1_sim(int K = 12, int n = 60) {
  return {{"version", 1}, {"system", {{"type", "mmn"}, {"lambdas", {0.5}}, {"nus", {1.0}}}},
          {"n_trajectories", K}, {"n_events", n}};
}

Json tiny_train(const std::string& data) {
  return {{"version", 1},
          {"data", data},
          {"model", {{"d_model", 8}, {"d_hidden", 8}, {"n_layers", 1}, {"max_seq_len", 256}}},
          {"optimizer", {{"epochs", 3}, {"warmup", 1}, {"batch", 4}}}};
}

}  // namespace

TEST(Cli, SimulateWritesDataAndResolvedConfig) {
  const auto cfg = write_config("sim.json", mm1_sim());
  ASSERT_EQ(run({"simulate", "--config", cfg, "--out", out("sim"), "--seed", "5"}), 0);
  const auto data = read_jsonl_file(out("sim") + "/data.jsonl");
  ASSERT_EQ(data.size(), 12u);
  for (const auto& t : data) EXPECT_EQ(t.records.size(), 60u);
  const auto resolved = Json::parse(slurp(out("sim") + "/resolved_config.json"));
  EXPECT_EQ(resolved["seed"], 5);
  EXPECT_EQ(resolved["system"]["n_servers"], 1);
}

TEST(Cli, SameOutputAcrossJobCountsAndFromResolvedConfig) {
  const auto cfg = write_config("simj.json", mm1_sim(30, 50));
  ASSERT_EQ(run({"simulate", "--config", cfg, "--out", out("j1"), "--seed", "9"}), 0);
  ASSERT_EQ(run({"simulate", "--config", cfg, "--out", out("j4"), "--seed", "9", "--jobs", "4"}), 0);
  EXPECT_EQ(slurp(out("j1") + "/data.jsonl"), slurp(out("j4") + "/data.jsonl"));
  ASSERT_EQ(run({"simulate", "--config", out("j1") + "/resolved_config.json", "--out", out("jr")}), 0);
  EXPECT_EQ(slurp(out("j1") + "/data.jsonl"), slurp(out("jr") + "/data.jsonl"));
}

TEST(Cli, ConfigErrorsExitTwo) {
  auto bad = mm1_sim();
  bad["system"]["lambdaz"] = {0.5};
  EXPECT_EQ(run({"simulate", "--config", write_config("bad1.json", bad), "--out", out("bad")}), 2);
  auto extra = mm1_sim();
  extra["n_trajectorys"] = 3;
  EXPECT_EQ(run({"simulate", "--config", write_config("bad2.json", extra), "--out", out("bad")}), 2);
  auto nover = mm1_sim();
  nover.erase("version");
  EXPECT_EQ(run({"simulate", "--config", write_config("bad3.json", nover), "--out", out("bad")}), 2);
  auto wrong = mm1_sim();
  wrong["command"] = "train";
  EXPECT_EQ(run({"simulate", "--config", write_config("bad4.json", wrong), "--out", out("bad")}), 2);
  {
    std::ofstream(scratch() / "bad5.json") << "{not json";
  }
  EXPECT_EQ(run({"simulate", "--config", out("bad5.json"), "--out", out("bad")}), 2);
  EXPECT_EQ(run({"simulate"}), 2);
  EXPECT_EQ(run({"nonsense"}), 2);
}

TEST(Cli, MissingFilesExitFour) {
  EXPECT_EQ(run({"simulate", "--config", out("does_not_exist.json"), "--out", out("x")}), 4);
  auto t = tiny_train(out("no_such_data.jsonl"));
  EXPECT_EQ(run({"train", "--config", write_config("nodata.json", t), "--out", out("x")}), 4);
}

TEST(Cli, TrainResumeMatchesUninterrupted) {
  ASSERT_EQ(run({"simulate", "--config", write_config("tsim.json", mm1_sim(10, 30)), "--out", out("tsim")}), 0);
  const auto data = out("tsim") + "/data.jsonl";
  auto full = tiny_train(data);
  ASSERT_EQ(run({"train", "--config", write_config("full.json", full), "--out", out("full")}), 0);
  auto part = full;
  part["stop_after_epoch"] = 2;
  ASSERT_EQ(run({"train", "--config", write_config("part.json", part), "--out", out("part")}), 0);
  const Json resume = {{"version", 1}, {"data", data}, {"resume", out("part") + "/model.ckpt"}};
  ASSERT_EQ(run({"train", "--config", write_config("resume.json", resume), "--out", out("resumed")}), 0);
  EXPECT_EQ(slurp(out("full") + "/loss.csv"), slurp(out("resumed") + "/loss.csv"));
  EXPECT_EQ(slurp(out("full") + "/model.ckpt"), slurp(out("resumed") + "/model.ckpt"));
}

TEST(Cli, DivergenceExitsThreeAndKeepsLastGood) {
  ASSERT_EQ(run({"simulate", "--config", write_config("dsim.json", mm1_sim(6, 20)), "--out", out("dsim")}), 0);
  auto t = tiny_train(out("dsim") + "/data.jsonl");
  t["optimizer"] = {{"epochs", 3}, {"warmup", 0}, {"lr", 1e300}, {"clip", 0.0}, {"init_head_biases", false}};
  EXPECT_EQ(run({"train", "--config", write_config("div.json", t), "--out", out("div")}), 3);
  const auto ck = load_checkpoint(out("div") + "/last_good.ckpt");
  EXPECT_TRUE(ck.state.model.params.all_finite());
}

TEST(Cli, GenerateWithHistoryAndPolicyFlag) {
  ASSERT_EQ(run({"simulate", "--config", write_config("gsim.json", mm1_sim(6, 30)), "--out", out("gsim")}), 0);
  ASSERT_EQ(run({"train", "--config", write_config("gtrain.json", tiny_train(out("gsim") + "/data.jsonl")), "--out",
                 out("gtrain")}),
            0);
  const Json g = {{"version", 1}, {"checkpoint", out("gtrain") + "/model.ckpt"}, {"n_trajectories", 4}, {"n_events", 20},
                  {"n_history", 10}};
  const auto cfg = write_config("gen.json", g);
  ASSERT_EQ(run({"generate", "--config", cfg, "--out", out("gen"), "--history", out("gsim") + "/data.jsonl"}), 0);
  const auto gen = read_jsonl_file(out("gen") + "/generated.jsonl");
  ASSERT_EQ(gen.size(), 4u);
  const auto src = read_jsonl_file(out("gsim") + "/data.jsonl");
  for (std::size_t k = 0; k < gen.size(); ++k) {
    EXPECT_EQ(gen[k].meta["n_history"], 10);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(gen[k].records[i].dt, src[k].records[i].dt);
  }
  // This model has no policy token.
  EXPECT_EQ(run({"generate", "--config", cfg, "--out", out("gen2"), "--policy", "c=2", "N=5"}), 2);
}

TEST(Cli, PolicyFlagParsing) {
  const auto p = cli::parse_policy_flag({"c=2", "N=5"});
  EXPECT_EQ(p.c, 2.0);
  EXPECT_EQ(p.n_servers, 5);
  const auto q = cli::parse_policy_flag({"c=-1.5,N=10"});
  EXPECT_EQ(q.c, -1.5);
  EXPECT_EQ(q.n_servers, 10);
  EXPECT_THROW(cli::parse_policy_flag({"c=2"}), ConfigError);
  EXPECT_THROW(cli::parse_policy_flag({"c=x", "N=2"}), ConfigError);
}

TEST(Cli, ThreeNodeMixtureUsesEveryNetwork) {
  Json j = {{"version", 1}, {"system", {{"type", "threenode"}, {"network_id", 0}}}, {"n_trajectories", 80},
            {"n_events", 40}};
  ASSERT_EQ(run({"simulate", "--config", write_config("tn.json", j), "--out", out("tn")}), 0);
  std::set<int> ids;
  for (const auto& t : read_jsonl_file(out("tn") + "/data.jsonl")) {
    const int id = t.meta["network_id"].get<int>();
    ids.insert(id);
    EXPECT_EQ(classify_network(t).value_or(id), id);
  }
  EXPECT_EQ(ids, (std::set<int>{1, 2, 3, 4}));
}

TEST(Cli, CounterfactualOrdering) {
  const Json j = {{"version", 1}, {"n_trajectories", 40}};
  ASSERT_EQ(run({"counterfactual", "--config", write_config("cf.json", j), "--out", out("cf")}), 0);
  const auto r = Json::parse(slurp(out("cf") + "/report.json"));
  EXPECT_TRUE(r["hourly_ordering_simulator"].get<bool>());
  const auto& sim = r["simulator"];
  ASSERT_EQ(sim.size(), 3u);
  EXPECT_GT(sim[0]["mean"].get<double>(), sim[1]["mean"].get<double>());
  EXPECT_GT(sim[1]["mean"].get<double>(), sim[2]["mean"].get<double>());
}
