#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ntkmeta/csv.hpp"
#include "ntkmeta/error.hpp"
#include "ntkmeta/harness.hpp"

using namespace ntkmeta;
namespace fs = std::filesystem;

namespace {

RunConfig small_config(Algorithm a = Algorithm::meta_rkhs_1) {
  RunConfig c;
  c.algorithm = a;
  c.meta.meta_lr = default_meta_lr(a);
  c.network.hidden = {8};
  c.meta.meta_batch = 3;
  c.meta.inner_lr = 1e-3;
  c.meta_iterations = 4;
  c.eval_tasks = 3;
  c.seed = 11;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ntkmeta_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Error config_error(const nlohmann::json& doc) {
  try {
    run_config_from_json(doc).validate();
  } catch (const Error& e) {
    return e;
  }
  FAIL("expected a config error");
  return Error(ErrorCode::config, "");
}

}  // namespace

TEST_CASE("config JSON round trip") {
  RunConfig c = small_config(Algorithm::meta_rkhs_2);
  c.meta.adapt_time = AdaptTime::infinite();
  c.tasks.sine.x_lo = -2.0;
  c.attack.config.clip_lo = {0.0};
  c.ablation_times = {AdaptTime::finite(0.5), AdaptTime::infinite()};
  const nlohmann::json j = to_json(c);
  const RunConfig back = run_config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(to_json(back) == j);
  CHECK(back.hash() == c.hash());
  CHECK(back.meta.adapt_time.is_infinite());
}

TEST_CASE("config defaults") {
  const RunConfig c = run_config_from_json(nlohmann::json::object());
  CHECK(c.algorithm == Algorithm::meta_rkhs_1);
  CHECK(c.meta.meta_lr == default_meta_lr(Algorithm::meta_rkhs_1));
  const RunConfig r2 = run_config_from_json({{"algorithm", "meta-rkhs-2"}});
  CHECK(r2.meta.meta_lr == default_meta_lr(Algorithm::meta_rkhs_2));
  CHECK(r2.meta.meta_lr != c.meta.meta_lr);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config errors name the field") {
  CHECK(config_error({{"bogus", 1}}).field() == "bogus");
  CHECK(config_error({{"meta", {{"inner_lr", -1.0}}}}).field() == "meta.inner_lr");
  CHECK(config_error({{"meta", {{"inner_lr", "fast"}}}}).field() == "meta.inner_lr");
  CHECK(config_error({{"tasks", {{"sine", {{"colour", 1}}}}}}).field() == "tasks.sine.colour");
  CHECK(config_error({{"algorithm", "sgd"}}).field() == "algorithm");
  CHECK(config_error({{"schema_version", 7}}).field() == "schema_version");
  CHECK(config_error({{"experiment", "blob-classification"}}).field() == "tasks.kind");
  CHECK(config_error({{"workers", 0}}).field() == "workers");
}

TEST_CASE("dotted overrides") {
  nlohmann::json doc = nlohmann::json::object();
  set_config_value(doc, "meta.inner_lr", "0.5");
  set_config_value(doc, "algorithm", "maml");
  set_config_value(doc, "network.hidden", "[4,4]");
  set_config_value(doc, "meta.adapt_time", "inf");
  const RunConfig c = run_config_from_json(doc);
  CHECK(c.meta.inner_lr == 0.5);
  CHECK(c.algorithm == Algorithm::maml);
  CHECK(c.network.hidden == std::vector<std::size_t>{4, 4});
  CHECK(c.meta.adapt_time.is_infinite());
  CHECK_THROWS_AS(set_config_value(doc, "meta..x", "1"), Error);
}

TEST_CASE("hash ignores execution-only fields") {
  RunConfig a = small_config(), b = small_config();
  b.workers = 4;
  b.output_dir = "elsewhere";
  CHECK(a.hash() == b.hash());
  b.seed = 12;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("output directory override") {
  RunConfig c = small_config();
  c.output_dir = "configured";
  ::unsetenv("NTKMETA_OUTPUT_DIR");
  CHECK(resolve_output_dir(c) == "configured");
  ::setenv("NTKMETA_OUTPUT_DIR", "/tmp/from_env", 1);
  CHECK(resolve_output_dir(c) == "/tmp/from_env");
  ::unsetenv("NTKMETA_OUTPUT_DIR");
}

TEST_CASE("zero meta-iterations leave the initialization untouched") {
  RunConfig c = small_config();
  c.meta_iterations = 0;
  const TrainResult r = train(c, "", false);
  CHECK(r.checkpoint.theta == initial_checkpoint(c).theta);
  CHECK(r.checkpoint.iteration == 0);
}

TEST_CASE("training writes identical files across runs and worker counts") {
  for (Algorithm a : {Algorithm::meta_rkhs_1, Algorithm::meta_rkhs_2, Algorithm::maml, Algorithm::reptile}) {
    CAPTURE(std::string(to_string(a)));
    RunConfig c = small_config(a);
    const fs::path d1 = fresh_dir("repro1"), d2 = fresh_dir("repro2"), d3 = fresh_dir("repro3");
    train(c, d1.string());
    train(c, d2.string());
    c.workers = 2;
    train(c, d3.string());
    for (const char* f : {"metrics.csv", "checkpoint.json", "config.json"}) {
      CAPTURE(f);
      const std::string ref = slurp(d1 / f);
      CHECK(!ref.empty());
      CHECK(slurp(d2 / f) == ref);
      if (std::string(f) != "config.json") CHECK(slurp(d3 / f) == ref);
    }
    CHECK(fs::exists(d1 / "wall_time.csv"));
    const std::string metrics = slurp(d1 / "metrics.csv");
    CHECK(metrics.rfind("iter,meta_loss,grad_norm,status,config_hash\n", 0) == 0);
    CHECK(metrics.find(c.hash()) != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  RunConfig c = small_config(Algorithm::fomaml);
  const fs::path d = fresh_dir("ckpt");
  const TrainResult r = train(c, d.string());
  const Checkpoint back = checkpoint_from_json(load_json((d / "checkpoint.json").string()));
  CHECK(back.theta == r.checkpoint.theta);
  CHECK(back.iteration == 4);
  CHECK(back.config_hash == c.hash());
  CHECK(back.optimizer == r.checkpoint.optimizer);

  nlohmann::json j = checkpoint_to_json(r.checkpoint);
  j["format_version"] = 99;
  CHECK_THROWS_AS(checkpoint_from_json(j), Error);
}

TEST_CASE("evaluating a checkpoint for another network fails") {
  RunConfig c = small_config();
  const Checkpoint ck = initial_checkpoint(c);
  c.network.hidden = {9};
  try {
    evaluate(c, ck);
    FAIL("expected spec mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::spec_mismatch);
  }
}

TEST_CASE("evaluation rows") {
  RunConfig c = small_config(Algorithm::meta_rkhs_2);
  c.experiment = ExperimentKind::ablation_t;
  const EvalResult r = evaluate(c, initial_checkpoint(c));
  REQUIRE(r.rows.size() == 5);
  CHECK(r.rows[4].adaptation == "t=inf");
  for (const EvalRow& row : r.rows) {
    CHECK(row.metric == "mse");
    CHECK(row.n_tasks == 3);
    CHECK(std::isfinite(row.mean));
  }
  RunConfig g = small_config(Algorithm::maml);
  const EvalResult e = evaluate(g, initial_checkpoint(g));
  REQUIRE(e.rows.size() == 1);
  CHECK(e.rows[0].adaptation == "steps=10");

  // Workers do not change evaluation output.
  RunConfig w = c;
  w.workers = 3;
  CHECK(evaluate(w, initial_checkpoint(w)).csv == r.csv);
}

TEST_CASE("repeated kernel-singular iterations abort the run") {
  RunConfig c = small_config(Algorithm::meta_rkhs_2);
  // Inputs this large overflow the kernel, so no jitter can rescue it.
  c.tasks.sine.x_lo = 1e199;
  c.tasks.sine.x_hi = 1e200;
  c.max_consecutive_failures = 3;
  c.meta_iterations = 10;
  try {
    train(c, "", false);
    FAIL("expected abort");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kernel_singular);
  }
}

TEST_CASE("task serialization round trip") {
  TaskDistributionSpec s;
  s.kind = TaskKind::blobs;
  const Task t = sample_task(s, 4);
  const Task back = task_from_json(nlohmann::json::parse(task_to_json(t).dump()));
  CHECK(back.support.x == t.support.x);
  CHECK(back.query.y == t.query.y);
  CHECK(back.query_labels == t.query_labels);
  CHECK(back.meta.centers == t.meta.centers);
}

TEST_CASE("optimizers") {
  ParamVector theta = {1.0, -2.0};
  Sgd sgd(0.5);
  sgd.step(theta, {2.0, 2.0});
  CHECK(theta == ParamVector{0.0, -3.0});
  // The first Adam step moves every coordinate by lr·sign(g) up to eps.
  Adam adam(0.1);
  ParamVector p = {0.0, 0.0};
  adam.step(p, {3.0, -1e-3});
  CHECK(p[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(0.1).epsilon(1e-4));
}
