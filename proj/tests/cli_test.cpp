#include "support.hpp"

#include "ddnn/checkpoint.hpp"
#include "ddnn/commands.hpp"
#include "ddnn/config.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace ddnn;
using namespace ddnn::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small synthetic run that finishes in a few seconds.
GlobalOptions tiny_run(const fs::path& out, int epochs = 1) {
  GlobalOptions g;
  g.out = out.string();
  g.deterministic = true;
  g.sets = {"dataset=synthetic",     "synthetic_size=8",   "synthetic_train=64", "synthetic_test=32",
            "input_shape=3,8,8",     "num_classes=4",      "stage_channels=4,8,8",
            "stage_blocks=2,2,2",    "subnets=2,1,1",      "batch_size=16",
            "epochs=" + std::to_string(epochs), "lr_drops=", "eval_batch_size=32"};
  return g;
}

struct Run {
  int code;
  std::string out;
};

Run run_cli(const std::string& args) {
  const fs::path log = testing::scratch_dir("cli_bin") / "out.txt";
  const std::string cmd = std::string("\"") + DDNN_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int raw = std::system(cmd.c_str());
  const int code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return {code, slurp(log)};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config text round-trips and hashes stably") {
  RunConfig a;
  a.merge_text("# comment\n\nlr = 0.05\nstage_blocks=3,4,6,3\n");
  CHECK(a.get("lr") == "0.05");
  RunConfig b;
  b.merge_text(a.to_text());
  CHECK(b.to_text() == a.to_text());
  CHECK(b.hash() == a.hash());
  CHECK(a.hash() == fnv1a64(a.to_text()));
  b.set("lr", "0.06");
  CHECK(b.hash() != a.hash());
  // FNV-1a reference values.
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("unknown keys are usage errors") {
  RunConfig c;
  CHECK_THROWS_AS(c.merge_text("lerning_rate = 0.1"), UsageError);
  CHECK_THROWS_AS(c.apply_override("nope=1"), UsageError);
  CHECK_THROWS_AS(c.apply_override("missing_equals"), UsageError);
  c.set("epochs", "ten");
  CHECK_THROWS_AS(c.train_config(), UsageError);

  const auto r = run_cli("count --set lerning_rate=0.1");
  CHECK(r.code == kExitUsage);
  CHECK(r.out.find("lerning_rate") != std::string::npos);
}

TEST_CASE("checkpoint bytes are stable") {
  auto net = testing::tiny_resnet({1, 1, 1});
  net::Ddnn<float> ddnn(net, {}, {}, 3);
  auto ckpt = snapshot(ddnn, {{"note", "x"}});
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", ckpt);
  auto back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", back);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));
  CHECK(back.meta.at("note") == "x");

  net::Ddnn<float> other(net, {}, {}, 4);
  restore(other, back);
  CHECK(snapshot(other, {{"note", "x"}}).tensors.size() == ckpt.tensors.size());
  CHECK(serialize_checkpoint(snapshot(other, {{"note", "x"}})) == serialize_checkpoint(ckpt));
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto ddnn = net::Ddnn<float>(testing::tiny_resnet({1, 1, 1}), {}, {}, 3);
  const auto bytes = serialize_checkpoint(snapshot(ddnn));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(bad_magic), CheckpointError);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 4);
  CHECK_THROWS_AS(parse_checkpoint(truncated), CheckpointError);

  // Manifest size pointing past the end of the file.
  auto huge = bytes;
  for (int i = 12; i < 20; ++i) huge[i] = 0xff;
  CHECK_THROWS_AS(parse_checkpoint(huge), CheckpointError);

  auto wrong_version = bytes;
  wrong_version[8] = 99;
  CHECK_THROWS_AS(parse_checkpoint(wrong_version), CheckpointError);

  CHECK_THROWS_AS(load_checkpoint(testing::scratch_dir("ckpt_missing") / "none.ckpt"), std::runtime_error);

  auto mismatched = net::Ddnn<float>(testing::tiny_resnet({2, 1, 1}), {}, {}, 3);
  CHECK_THROWS_AS(restore(mismatched, parse_checkpoint(bytes)), CheckpointError);
}

TEST_CASE("dropped block listing") {
  CHECK(format_dropped_blocks({{}, {}, {5, 6}, {}}) == "stage3:{5,6}");
  CHECK(format_dropped_blocks({{3}, {}, {2, 3}}) == "stage1:{3} stage3:{2,3}");
  CHECK(format_dropped_blocks({{}, {}}).empty());
  CHECK(format_count(21.8e6) == "21.80M");
  CHECK(format_count(3.6e9) == "3.60G");
  CHECK(format_count(12) == "12");
}

TEST_CASE("count reports published ResNet-34 figures") {
  GlobalOptions g;
  g.sets = {"family=resnet-basic", "stem=imagenet", "stage_blocks=3,4,6,3", "stage_channels=64,128,256,512",
            "num_classes=1000", "input_shape=3,224,224", "subnets=3,4,4,3"};
  std::ostringstream out, err;
  REQUIRE(cmd_count(g, out, err) == kExitOk);
  const auto text = out.str();
  CHECK(text.find("21.80M") != std::string::npos);
  CHECK(text.find("3.6") != std::string::npos);
  CHECK(text.find("sub1") != std::string::npos);

  g.sets.push_back("subnets=3,4,7,3");
  std::ostringstream out2, err2;
  CHECK(cmd_count(g, out2, err2) == kExitUsage);
}

TEST_CASE("gradcheck command passes") {
  std::ostringstream out, err;
  CHECK(cmd_gradcheck("all", out, err) == kExitOk);
  CHECK(out.str().find("FAIL") == std::string::npos);
  std::ostringstream out2, err2;
  CHECK(cmd_gradcheck("nonsense", out2, err2) == kExitUsage);
}

TEST_CASE("plot draws one line per series") {
  const auto dir = testing::scratch_dir("plot");
  {
    std::ofstream f(dir / "m.csv");
    f << "epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs\n"
      << "0,full,test,50,1,0,0,1,0.1,1\n"
      << "0,sub1,test,60,1,0,0,1,0.1,1\n";
  }
  std::ostringstream out, err;
  REQUIRE(cmd_plot(dir / "m.csv", dir / "m.svg", out, err) == kExitOk);
  const auto svg = slurp(dir / "m.svg");
  std::size_t lines = 0;
  for (auto p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++lines;
  CHECK(lines == 2);
  CHECK(svg.find("data-series=\"full/test\"") != std::string::npos);
  std::ostringstream out2, err2;
  CHECK(cmd_plot(dir / "absent.csv", dir / "x.svg", out2, err2) == kExitFailure);
}

TEST_CASE("train, eval and extract end to end") {
  const auto dir = testing::scratch_dir("train");
  std::ostringstream out, err;
  const auto t0 = std::chrono::steady_clock::now();
  REQUIRE(cmd_train(tiny_run(dir), out, err) == kExitOk);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 60);
  for (const char* f : {"config.cfg", "metrics.csv", "final.ckpt", "best_full.ckpt", "best_sub1.ckpt", "summary.txt"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  const auto csv = slurp(dir / "metrics.csv");
  CHECK(csv.rfind("epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs\n", 0) == 0);

  std::ostringstream ev, everr;
  REQUIRE(cmd_eval({}, dir / "final.ckpt", ev, everr) == kExitOk);
  CHECK(ev.str().find("full") != std::string::npos);
  CHECK(ev.str().find("sub1") != std::string::npos);

  std::ostringstream ex, exerr;
  REQUIRE(cmd_extract({}, dir / "final.ckpt", 1, dir / "sub1.ckpt", ex, exerr) == kExitOk);
  CHECK(ex.str().find("stage2:{2} stage3:{2}") != std::string::npos);

  // The extracted sub-net scores exactly what it scored inside the DDNN.
  std::ostringstream ev2, ev2err;
  REQUIRE(cmd_eval({}, dir / "sub1.ckpt", ev2, ev2err) == kExitOk);
  const auto line_of = [](const std::string& text, const std::string& name) {
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
      if (line.rfind(name, 0) == 0) return line;
    }
    return std::string();
  };
  CHECK(!line_of(ev.str(), "sub1").empty());
  CHECK(line_of(ev2.str(), "sub1") == line_of(ev.str(), "sub1"));

  std::ostringstream bad, baderr;
  CHECK(cmd_extract({}, dir / "final.ckpt", 5, dir / "x.ckpt", bad, baderr) == kExitUsage);
}

TEST_CASE("a saved config reproduces its run") {
  const auto a = testing::scratch_dir("rerun_a"), b = testing::scratch_dir("rerun_b");
  std::ostringstream o1, e1, o2, e2;
  REQUIRE(cmd_train(tiny_run(a, 2), o1, e1) == kExitOk);
  GlobalOptions again;
  again.config = a / "config.cfg";
  again.out = b.string();
  REQUIRE(cmd_train(again, o2, e2) == kExitOk);

  // Identical apart from the wall-clock column.
  const auto strip = [](const std::string& csv) {
    std::istringstream in(csv);
    std::string result;
    for (std::string line; std::getline(in, line);) result += line.substr(0, line.rfind(',')) + '\n';
    return result;
  };
  CHECK(strip(slurp(a / "metrics.csv")) == strip(slurp(b / "metrics.csv")));
  CHECK(slurp(a / "final.ckpt").size() == slurp(b / "final.ckpt").size());
}

TEST_CASE("bad invocations exit with status 2") {
  std::ostringstream out, err;
  GlobalOptions g = tiny_run(testing::scratch_dir("bad"));
  g.sets.push_back("regime=sideways");
  CHECK(cmd_train(g, out, err) == kExitUsage);
  CHECK(err.str().find("regime") != std::string::npos);

  CHECK(run_cli("").code == kExitUsage);
  CHECK(run_cli("eval").code == kExitUsage);
  CHECK(run_cli("--help").code == kExitOk);
}

}  // TEST_SUITE
