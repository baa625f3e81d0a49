#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "ibg/pipeline.hpp"
#include "ibg/util.hpp"

using namespace ibg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kRoot = "/tmp/test_pipeline";

json tiny_cfg(const std::string& out) {
  json j;
  j["task"] = "modadd";
  j["out"] = out;
  j["p"] = 5;
  j["seed"] = 11;
  j["train"] = {{"epochs", 300}, {"warmup", 20},    {"eval_every", 50}, {"train_on_full", true},
                {"d_model", 16}, {"heads", 2},      {"d_head", 8},      {"d_mlp", 48}};
  return j;
}

json slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return json::parse(in);
}

std::string slurp_text(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> artifact_hashes(const json& manifest) {
  std::map<std::string, std::string> m;
  for (const auto& [name, st] : manifest.at("stages").items())
    if (st.contains("artifacts"))
      for (const auto& [f, h] : st.at("artifacts").items()) m[f] = h.get<std::string>();
  return m;
}

long count_of(const std::string& text, const std::string& needle) {
  long n = 0;
  for (size_t at = text.find(needle); at != std::string::npos; at = text.find(needle, at + 1)) ++n;
  return n;
}

// The first full run is shared across cases; later cases resume from it.
const std::string kRun1 = kRoot + "/run1";

json ensure_run1() {
  if (fs::exists(kRun1 + "/manifest.json")) return slurp(kRun1 + "/manifest.json");
  fs::remove_all(kRun1);
  return run_pipeline(parse_pipeline_config(tiny_cfg(kRun1)));
}

}  // namespace

TEST_CASE("config parsing fills defaults and rejects unknown keys") {
  PipelineConfig cfg = parse_pipeline_config(tiny_cfg("/tmp/x"));
  CHECK(cfg.task == "modadd");
  CHECK(cfg.out == "/tmp/x");
  CHECK(cfg.p == 5);
  CHECK(cfg.seed == 11);
  CHECK(cfg.deterministic);
  CHECK(cfg.threads == 1);
  CHECK(cfg.analysis_basis == "lib");
  REQUIRE(cfg.basis.kinds.size() == 2);
  CHECK(cfg.basis.kinds[0] == BasisKind::Lib);
  CHECK(cfg.basis.kinds[1] == BasisKind::Pca);
  CHECK(cfg.stages == std::vector<std::string>{"train", "basis", "edges", "graph", "fourier",
                                               "ablate", "cluster"});
  CHECK(cfg.train.epochs == 300);
  CHECK(cfg.train.arch.d_model == 16);
  CHECK(cfg.ablate.drop == 0.001);
  CHECK(cfg.ablate.metric == Metric::Accuracy);
  CHECK(cfg.cluster.gamma == 0.5);
  CHECK(cfg.cluster.eps == -1.0);
  CHECK(cfg.edges.alpha_steps == 50);

  json bad = tiny_cfg("/tmp/x");
  bad["tolerence"] = 1.0;
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["train"]["epoch"] = 5;
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["stages"] = {"train", "frobnicate"};
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["basis"] = {{"kinds", {"lda"}}};
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["task"] = "mnist";
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["seed"] = "zero";
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["analysis_basis"] = "gib";  // not among the computed kinds
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["stages"] = {"probe"};  // needs binary labels, so cifar only
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  bad = tiny_cfg("/tmp/x");
  bad["model"] = "/tmp/test_pipeline/does-not-exist.ibgm";
  CHECK_THROWS_AS(parse_pipeline_config(bad), ConfigError);

  json cf;
  cf["task"] = "cifar";
  cf["out"] = "/tmp/x";
  cf["stages"] = {"fourier"};  // needs the token grid, so modadd only
  CHECK_THROWS_AS(parse_pipeline_config(cf), ConfigError);

  cf = json{{"task", "cifar"}, {"out", "/tmp/x"}, {"p", 7}};  // p is a modadd knob
  CHECK_THROWS_AS(parse_pipeline_config(cf), ConfigError);

  json ok = tiny_cfg("/tmp/x");
  ok["cluster"] = {{"eps", "ablation"}};
  CHECK(parse_pipeline_config(ok).cluster.eps == -1.0);
  ok["cluster"]["eps"] = 0.25;
  CHECK(parse_pipeline_config(ok).cluster.eps == 0.25);
  ok["cluster"]["eps"] = "bogus";
  CHECK_THROWS_AS(parse_pipeline_config(ok), ConfigError);
}

TEST_CASE("a pretrained model drops the train stage from the defaults") {
  fs::create_directories(kRoot);
  const std::string model = kRoot + "/stub.ibgm";
  {
    std::ofstream out(model);
    out << "placeholder";
  }
  json j = tiny_cfg("/tmp/x");
  j["model"] = model;
  PipelineConfig cfg = parse_pipeline_config(j);
  CHECK(cfg.stages == std::vector<std::string>{"basis", "edges", "graph", "fourier", "ablate",
                                               "cluster"});
  j["stages"] = {"train", "basis"};  // a model path and a train stage conflict
  CHECK_THROWS_AS(parse_pipeline_config(j), ConfigError);
}

TEST_CASE("a full tiny run writes a complete hashed manifest") {
  json manifest = ensure_run1();

  for (const auto& [name, st] : manifest.at("stages").items()) {
    CAPTURE(name);
    CHECK(st.at("status") == "ok");
  }
  CHECK(!manifest.contains("failed"));
  CHECK(manifest.at("stages").size() == 7);

  auto hashes = artifact_hashes(manifest);
  for (const char* f :
       {"model.ibgm", "summary.json", "train_log.jsonl", "basis-lib.ibgb", "basis-pca.ibgb",
        "edges-lib-gap0.ibge", "edges-lib-gap1.ibge", "edges-pca-gap0.ibge", "edges-pca-gap1.ibge",
        "graph.json", "labels.json", "ablation.json", "clusters.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(kRun1 + "/" + std::string(f)));
    CHECK(hashes.count(f) == 1);
  }

  // Every file in the run directory is listed under the hash it actually has.
  for (const auto& ent : fs::directory_iterator(kRun1)) {
    const std::string f = ent.path().filename().string();
    if (f == "manifest.json") continue;
    CAPTURE(f);
    REQUIRE(hashes.count(f) == 1);
    CHECK(hashes[f].size() == 64);
    CHECK(hashes[f] == sha256_file_hex(ent.path().string()));
  }

  CHECK(manifest.at("config").at("task") == "modadd");
  CHECK(manifest.at("config").at("p") == 5);
  CHECK(manifest.at("config").at("seed") == 11);
  CHECK(manifest.at("config").at("deterministic") == true);
  CHECK(slurp(kRun1 + "/manifest.json") == manifest);

  json g = slurp(kRun1 + "/graph.json");
  REQUIRE(g.at("sections").size() == 3);
  for (const auto& sec : g.at("sections")) {
    bool some_label = false;
    for (const auto& nd : sec.at("nodes")) {
      CHECK(nd.at("community").get<int>() >= 0);
      if (nd.at("id").get<int>() == 0)
        CHECK(nd.at("label").get<std::string>().empty());
      else if (!nd.at("label").get<std::string>().empty())
        some_label = true;
    }
    CHECK(some_label);
  }

  json ab = slurp(kRun1 + "/ablation.json");
  CHECK(ab.at("config").at("drop") == 0.001);
  CHECK(ab.at("metric") == "accuracy");
  REQUIRE(ab.at("gaps").size() == 2);
  for (const auto& gp : ab.at("gaps")) {
    CHECK(gp.at("kept").get<long>() >= 0);
    CHECK(gp.at("kept").get<long>() <= gp.at("total").get<long>());
    CHECK(gp.at("threshold").is_number());
    CHECK(gp.at("attainable").is_boolean());
  }

  json cl = slurp(kRun1 + "/clusters.json");
  CHECK(cl.at("gamma") == 0.5);
  CHECK(cl.at("eps").get<double>() > 0.0);
  REQUIRE(cl.at("community").size() == 3);
  CHECK(cl.contains("q"));
}

TEST_CASE("deterministic reruns reproduce every artifact hash") {
  json m1 = ensure_run1();
  auto h1 = artifact_hashes(m1);

  const std::string dir2 = kRoot + "/run2";
  fs::remove_all(dir2);
  json m2 = run_pipeline(parse_pipeline_config(tiny_cfg(dir2)));
  auto h2 = artifact_hashes(m2);
  REQUIRE(h1.size() == h2.size());
  for (const auto& [f, h] : h1) {
    CAPTURE(f);
    REQUIRE(h2.count(f) == 1);
    CHECK(h2[f] == h);
  }

  json m1b = run_pipeline(parse_pipeline_config(tiny_cfg(kRun1)));
  auto h1b = artifact_hashes(m1b);
  REQUIRE(h1b.size() == h1.size());
  for (const auto& [f, h] : h1) {
    CAPTURE(f);
    CHECK(h1b[f] == h);
  }
}

TEST_CASE("a single stage resumes from persisted artifacts") {
  json m1 = ensure_run1();
  auto h1 = artifact_hashes(m1);
  fs::remove(kRun1 + "/labels.json");

  PipelineConfig cfg = parse_pipeline_config(tiny_cfg(kRun1));
  cfg.stages = {"fourier"};
  json m = run_pipeline(cfg);
  CHECK(m.at("stages").size() == 7);  // the manifest keeps the other stages
  CHECK(m.at("stages").at("fourier").at("status") == "ok");
  CHECK(fs::exists(kRun1 + "/labels.json"));
  CHECK(sha256_file_hex(kRun1 + "/labels.json") == h1["labels.json"]);
  CHECK(sha256_file_hex(kRun1 + "/graph.json") == h1["graph.json"]);
}

TEST_CASE("failures leave a marker and halt") {
  const std::string dir3 = kRoot + "/stagefail";
  fs::remove_all(dir3);
  json j3 = tiny_cfg(dir3);
  j3["stages"] = {"basis"};  // no model anywhere
  CHECK_THROWS_AS(run_pipeline(parse_pipeline_config(j3)), ConfigError);
  json m3 = slurp(dir3 + "/manifest.json");
  CHECK(m3.at("failed").get<std::string>().rfind("basis", 0) == 0);
  CHECK(m3.at("stages").at("basis").at("status") == "failed");
  CHECK(!m3.at("stages").at("basis").at("error").get<std::string>().empty());

  const std::string dir4 = kRoot + "/corrupt";
  fs::remove_all(dir4);
  fs::create_directories(dir4);
  {
    std::ofstream out(dir4 + "/model.ibgm");
    out << "garbage bytes";
  }
  json j4 = tiny_cfg(dir4);
  j4["stages"] = {"basis"};
  CHECK_THROWS_AS(run_pipeline(parse_pipeline_config(j4)), ContractError);
  json m4 = slurp(dir4 + "/manifest.json");
  CHECK(m4.at("failed").get<std::string>().rfind("basis:", 0) == 0);
  CHECK(m4.at("stages").at("basis").at("status") == "failed");
}

TEST_CASE("export honors filters and cross-checks the ablation report") {
  ensure_run1();

  ExportOptions jopt;
  jopt.format = "json";
  export_run_graph(kRun1, jopt, kRoot + "/export.json");
  json eg = slurp(kRoot + "/export.json");
  CHECK(eg.at("sections").size() == 3);
  CHECK(eg.at("gaps").size() == 2);

  ExportOptions dopt;
  dopt.format = "dot";
  dopt.keep_from_report = kRun1 + "/ablation.json";
  export_run_graph(kRun1, dopt, kRoot + "/export.dot");
  std::string dot = slurp_text(kRoot + "/export.dot");
  CHECK(dot.find("digraph") != std::string::npos);

  json ab = slurp(kRun1 + "/ablation.json");
  long kept_sum = 0;
  for (const auto& gp : ab.at("gaps")) {
    REQUIRE(gp.at("epsilon").get<double>() > 0.0);
    kept_sum += gp.at("kept").get<long>();
  }
  CHECK(count_of(dot, " -> ") == kept_sum);

  ExportOptions topt;
  topt.format = "dot";
  topt.top_nodes = 2;
  export_run_graph(kRun1, topt, kRoot + "/top.dot");
  std::string top = slurp_text(kRoot + "/top.dot");
  for (int s = 0; s < 3; ++s) {
    long decls = 0;
    std::istringstream lines(top);
    std::string line;
    const std::string prefix = "  s" + std::to_string(s) + "_";
    while (std::getline(lines, line))
      if (line.rfind(prefix, 0) == 0 && line.find("[label=") != std::string::npos) ++decls;
    CAPTURE(s);
    CHECK(decls <= 2);
    CHECK(decls >= 1);
  }

  ExportOptions bad;
  bad.format = "svg";
  CHECK_THROWS_AS(export_run_graph(kRun1, bad, kRoot + "/x.svg"), ConfigError);
}

TEST_CASE("the environment variable overrides the configured output directory") {
  fs::create_directories(kRoot);
  const std::string cfg_path = kRoot + "/env-cfg.json";
  {
    std::ofstream out(cfg_path);
    out << tiny_cfg(kRoot + "/from-config").dump() << "\n";
  }
  setenv("IBG_OUT", (kRoot + "/from-env").c_str(), 1);
  CHECK(load_pipeline_config(cfg_path).out == kRoot + "/from-env");
  unsetenv("IBG_OUT");
  CHECK(load_pipeline_config(cfg_path).out == kRoot + "/from-config");
}
