#include <doctest.h>

#include <fstream>
#include <sstream>

#include "resprobe/experiment.hpp"
#include "resprobe/ops.hpp"
#include "support/testing.hpp"

using namespace resprobe;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE_MESSAGE(bool(is), "missing file: " << p.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

nlohmann::json smoke_config_json(const std::string& run_id, uint64_t seed = 3) {
  return nlohmann::json{
      {"run_id", run_id},
      {"output_dir", "runs"},
      {"architecture",
       {{"family", "single_repr"},
        {"stages", {{{"blocks", 2}, {"channels", 4}}}},
        {"stem_channels", 4},
        {"input", {1, 4, 4}},
        {"num_classes", 2},
        {"shortcut", "none"}}},
      {"train",
       {{"epochs", 2},
        {"batch_size", 8},
        {"momentum", 0.9},
        {"lr_schedule", {{{"until", 1}, {"lr", 0.05}}, {{"lr", 0.01}}}},
        {"augment", {{"flip", false}, {"translate_pixels", 0}}},
        {"seed", seed}}},
      {"probes",
       {{"every_epochs", 0},
        {"enabled", {"cosine", "l2_ratio", "drop", "intermediate", "borderline", "grad_norm"}},
        {"batch_size", 16}}},
      {"data",
       {{"kind", "clusters"},
        {"n_per_class", 20},
        {"test_per_class", 10},
        {"class_count", 2},
        {"image_shape", {1, 4, 4}},
        {"separation", 4.0},
        {"seed", 5}}}};
}

}  // namespace

TEST_CASE("experiment config round-trips and fails closed") {
  auto j = smoke_config_json("r1");
  auto cfg = runner::ExperimentConfig::from_json(j);
  auto j2 = cfg.to_json();
  auto cfg2 = runner::ExperimentConfig::from_json(j2);
  CHECK(cfg2.to_json() == j2);  // lossless after one canonicalization

  SUBCASE("unknown top-level key") {
    j["mystery"] = 1;
    CHECK_THROWS_WITH_AS(runner::ExperimentConfig::from_json(j), doctest::Contains("mystery"),
                         std::invalid_argument);
  }
  SUBCASE("unknown nested key") {
    j["train"]["warmup"] = 3;
    CHECK_THROWS_WITH_AS(runner::ExperimentConfig::from_json(j), doctest::Contains("warmup"),
                         std::invalid_argument);
  }
  SUBCASE("unknown probe name") {
    j["probes"]["enabled"].push_back("saliency");
    CHECK_THROWS_WITH_AS(runner::ExperimentConfig::from_json(j), doctest::Contains("saliency"),
                         std::invalid_argument);
  }
  SUBCASE("unknown data kind") {
    j["data"] = {{"kind", "imagenet"}};
    CHECK_THROWS_AS(runner::ExperimentConfig::from_json(j), std::invalid_argument);
  }
}

TEST_CASE("run_train writes a self-describing run directory") {
  auto root = testing_support::scratch_dir("run_smoke");
  auto cfg = runner::ExperimentConfig::from_json(smoke_config_json("smoke"));
  auto result = runner::run_train(cfg, root.string());

  CHECK(fs::exists(result.run_dir / "config.json"));
  CHECK(fs::exists(result.run_dir / "metrics.csv"));
  CHECK(fs::exists(result.run_dir / "probes.csv"));
  CHECK(fs::exists(result.run_dir / "final.ckpt"));
  CHECK(fs::exists(result.run_dir / "best.ckpt"));
  CHECK(fs::exists(result.run_dir / "summary.json"));

  // files parse and carry the schema version column
  auto metrics = slurp(result.run_dir / "metrics.csv");
  CHECK(metrics.rfind("schema_version,epoch,lr,", 0) == 0);
  std::istringstream lines(metrics);
  std::string line;
  std::getline(lines, line);
  int rows = 0;
  while (std::getline(lines, line))
    if (!line.empty()) {
      CHECK(line.rfind("1,", 0) == 0);
      ++rows;
    }
  CHECK(rows == 2);  // one per epoch

  auto parsed = nlohmann::json::parse(slurp(result.run_dir / "config.json"));
  CHECK(runner::ExperimentConfig::from_json(parsed).run_id == "smoke");
  auto summary = nlohmann::json::parse(slurp(result.run_dir / "summary.json"));
  CHECK(summary.at("run_id") == "smoke");

  // a second run with the same id in the same root fails closed
  CHECK_THROWS_WITH_AS(runner::run_train(cfg, root.string()), doctest::Contains("unique"),
                       std::runtime_error);
}

TEST_CASE("identical configs produce byte-identical checkpoints and probe rows") {
  auto root1 = testing_support::scratch_dir("det_a");
  auto root2 = testing_support::scratch_dir("det_b");
  auto cfg = runner::ExperimentConfig::from_json(smoke_config_json("det"));
  auto r1 = runner::run_train(cfg, root1.string());
  auto r2 = runner::run_train(cfg, root2.string());
  CHECK(slurp(r1.run_dir / "final.ckpt") == slurp(r2.run_dir / "final.ckpt"));
  CHECK(slurp(r1.run_dir / "best.ckpt") == slurp(r2.run_dir / "best.ckpt"));
  CHECK(slurp(r1.run_dir / "probes.csv") == slurp(r2.run_dir / "probes.csv"));
  CHECK(slurp(r1.run_dir / "config.json") == slurp(r2.run_dir / "config.json"));
}

TEST_CASE("run_probe emits one row per probe and block, reproducibly") {
  auto root = testing_support::scratch_dir("probe_run");
  auto cfg = runner::ExperimentConfig::from_json(smoke_config_json("probed"));
  auto result = runner::run_train(cfg, root.string());

  std::ostringstream log1, log2;
  auto out1 = root / "p1";
  auto out2 = root / "p2";
  runner::run_probe((result.run_dir / "final.ckpt").string(), cfg, "train", out1, log1);
  runner::run_probe((result.run_dir / "final.ckpt").string(), cfg, "train", out2, log2);
  auto csv1 = slurp(out1 / "probes.csv");
  CHECK(csv1 == slurp(out2 / "probes.csv"));  // identical bytes on re-run

  // grad_norm is skipped on the single-stage model with a logged reason
  CHECK(log1.str().find("grad_norm") != std::string::npos);
  CHECK(csv1.find("grad_norm_ratio") == std::string::npos);
  CHECK(csv1.find("cosine") != std::string::npos);
  CHECK(csv1.find("borderline_count") != std::string::npos);
}

TEST_CASE("drop scan emits a baseline row plus one row per block") {
  auto root = testing_support::scratch_dir("drop_run");
  auto cfg = runner::ExperimentConfig::from_json(smoke_config_json("dropscan"));
  auto result = runner::run_train(cfg, root.string());
  std::ostringstream log;
  runner::run_drop_scan((result.run_dir / "final.ckpt").string(), cfg, "val", root / "ds", log);
  auto csv = slurp(root / "ds" / "drop_scan.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);  // header
  int drop_rows = 0, baseline_rows = 0;
  while (std::getline(lines, line)) {
    if (line.find(",drop_acc,") != std::string::npos) ++drop_rows;
    if (line.find(",baseline_acc,") != std::string::npos) ++baseline_rows;
  }
  CHECK(drop_rows == 2);  // number of residual blocks
  CHECK(baseline_rows == 1);
}

TEST_CASE("run_unroll emits rows for steps 0..extra_steps and three groups") {
  auto root = testing_support::scratch_dir("unroll_run");
  auto j = smoke_config_json("unrolled");
  j["unroll"] = {{"extra_steps", 2}, {"alpha", 0.5}};
  auto cfg = runner::ExperimentConfig::from_json(j);
  auto result = runner::run_train(cfg, root.string());
  std::ostringstream log;
  runner::run_unroll((result.run_dir / "final.ckpt").string(), cfg, "train", root / "u", log);
  auto csv = slurp(root / "u" / "unroll.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "schema_version,step,split,group,loss,accuracy,entropy,cosine,l2_ratio");
  std::vector<int> step_rows(3, 0);
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    int step = std::stoi(line.substr(2, line.find(',', 2) - 2));
    REQUIRE(step <= 2);
    ++step_rows[step];
  }
  for (int s = 0; s <= 2; ++s) CHECK(step_rows[s] == 3);  // borderline, correct, all

  SUBCASE("extra_steps 0 gives a single step of rows equal to baseline evaluation") {
    auto j0 = smoke_config_json("unrolled0");
    j0["unroll"] = {{"extra_steps", 0}, {"alpha", 0.5}};
    auto cfg0 = runner::ExperimentConfig::from_json(j0);
    auto res0 = runner::run_train(cfg0, root.string());
    std::ostringstream log0;
    runner::run_unroll((res0.run_dir / "final.ckpt").string(), cfg0, "val", root / "u0", log0);
    auto csv0 = slurp(root / "u0" / "unroll.csv");
    int rows = -1;  // header
    std::istringstream ls(csv0);
    std::string l;
    while (std::getline(ls, l))
      if (!l.empty()) ++rows;
    CHECK(rows == 3);
    // the "all" group loss at step 0 equals the evaluate() loss
    auto ck = nn::load_checkpoint((res0.run_dir / "final.ckpt").string());
    auto loaded = runner::load_data(cfg0.data);
    auto ev = train::evaluate(ck.model, loaded.val);
    std::istringstream again(csv0);
    std::getline(again, l);
    while (std::getline(again, l)) {
      if (l.find(",all,") == std::string::npos) continue;
      auto pos = l.find(",all,") + 5;
      double loss = std::stod(l.substr(pos, l.find(',', pos) - pos));
      CHECK(loss == doctest::Approx(ev.loss).epsilon(1e-9));
    }
  }
}

TEST_CASE("gradcheck suite passes and the report names every check") {
  auto report = runner::run_gradcheck(3);
  CHECK(report.pass);
  std::vector<std::string> want = {"sum",
                                   "matmul",
                                   "conv2d",
                                   "batchnorm_train",
                                   "batchnorm_eval",
                                   "softmax_cross_entropy",
                                   "model_original",
                                   "model_shared_naive",
                                   "model_shared_ubn",
                                   "shared_weight_accumulation",
                                   "first_layer_step_identity",
                                   "taylor_slope_median"};
  for (const auto& name : want) {
    bool found = false;
    for (const auto& e : report.entries)
      if (e.name == name) found = true;
    CHECK_MESSAGE(found, "missing gradcheck entry: " << name);
  }
  for (const auto& e : report.entries) {
    if (e.name == "first_layer_step_identity") CHECK(e.value < 1e-6);
    if (e.name == "model_original") CHECK(e.value < 1e-4);
  }
  std::ostringstream os;
  runner::print_report(report, os);
  CHECK(os.str().find("gradcheck passed") != std::string::npos);
}

TEST_CASE("a corrupted batchnorm backward is caught and named") {
  ops::testing::bn_backward_gamma_scale = 1.05;
  auto report = runner::run_gradcheck(3);
  ops::testing::bn_backward_gamma_scale = 1.0;
  CHECK_FALSE(report.pass);
  bool bn_failed = false;
  for (const auto& e : report.entries)
    if (e.name.rfind("batchnorm", 0) == 0 && !e.pass) bn_failed = true;
  CHECK(bn_failed);
}

TEST_CASE("load_data standardizes by train statistics and serves splits") {
  auto cfg = runner::ExperimentConfig::from_json(smoke_config_json("ld"));
  auto loaded = runner::load_data(cfg.data);
  CHECK(loaded.train.size() == 40);
  CHECK(loaded.val.size() == 20);
  CHECK(&runner::pick_split(loaded, "train") == &loaded.train);
  CHECK(&runner::pick_split(loaded, "val") == &loaded.val);
  CHECK(&runner::pick_split(loaded, "test") == &loaded.val);
  CHECK_THROWS_AS(runner::pick_split(loaded, "holdout"), std::invalid_argument);
}
