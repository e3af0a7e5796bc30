#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "prorseg/cli.hpp"
#include "prorseg/dose.hpp"
#include "prorseg/metrics.hpp"
#include "prorseg/volume_io.hpp"

using namespace prorseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  const fs::path p = fs::temp_directory_path() / ("prorseg_cli_" + std::string(name));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  return {code, o.str(), e.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(slurp(dir / "manifest.json")); }

const char* kTinyConfig =
    R"({"epochs_total":2,"lr_constant_epochs":1,"lr_initial":0.001,"n_steps_rrn":2,"n_steps_rsn":3,)"
    R"("hidden":[2,4],"decoder":[4],"augment":{"enabled":false}})";

}  // namespace

TEST_CASE("git blob hashes") {
  CHECK(cli::git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(cli::git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("usage errors exit 1") {
  const auto dir = temp_dir("usage");
  const auto a = run({"ensemble", "a", "b", "--out", (dir / "e").string()});
  CHECK(a.code == cli::kExitUsage);
  CHECK(a.err.find("requires ≥3") != std::string::npos);

  const auto b = run({"phantom", "--out", dir.string(), "--frobnicate"});
  CHECK(b.code == cli::kExitUsage);
  CHECK(b.err.find("--frobnicate") != std::string::npos);
  CHECK(run({}).code == cli::kExitUsage);
  CHECK(run({"evaluate", "--pred", "x", "--out", dir.string()}).code == cli::kExitUsage);
  CHECK(run({"phantom", "--out", dir.string(), "--set", "novalue"}).code == cli::kExitUsage);
  CHECK(run({"--help"}).code == cli::kExitOk);
}

TEST_CASE("data errors exit 2") {
  const auto dir = temp_dir("data");
  const auto r = run({"evaluate", "--pred", (dir / "missing").string(), "--gt", (dir / "missing").string(), "--out",
                      (dir / "o").string()});
  CHECK(r.code == cli::kExitData);
  CHECK(r.err.find("missing.json") != std::string::npos);
  CHECK(run({"phantom", "--out", dir.string(), "--set", "colour=blue"}).code == cli::kExitData);
}

TEST_CASE("register with a zero-flow model on an identical pair") {
  const auto dir = temp_dir("register");
  TrainConfig c;
  c.n_steps_rrn = 2;
  c.n_steps_rsn = 3;
  c.hidden = {2, 4};
  c.decoder = {4};
  c.flow_init_std = 0.0;
  save_checkpoint(dir / "zero.ckpt", c, JointModel::create(c), {}, 0);
  const auto p = generate_phantom(1, GridDims{16, 16, 16});
  write_volume(dir / "img", p.image);
  write_volume(dir / "lab", p.labels);
  const auto r = run({"register", "--checkpoint", (dir / "zero.ckpt").string(), "--moving", (dir / "img").string(),
                      "--fixed", (dir / "img").string(), "--moving-labels", (dir / "lab").string(), "--out",
                      (dir / "out").string()});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(dir / "out" / "jacobian.json"));
  CHECK(j["folding_percent"].get<double>() == 0.0);
  CHECK(j["j_sd"].get<double>() == 0.0);
  const auto dvf = read_field(dir / "out" / "dvf");
  for (double v : dvf.u.data()) CHECK(v == 0.0);
  CHECK(read_labels(dir / "out" / "warped_labels").labels == p.labels.labels);
  const auto m = manifest(dir / "out");
  CHECK(m["checkpoint_sha1"] == cli::git_blob_sha1_file(dir / "zero.ckpt"));
  CHECK(m["outputs"].contains("dvf.raw"));
}

TEST_CASE("phantom, train, segment, evaluate pipeline") {
  const auto dir = temp_dir("pipeline");
  std::ofstream(dir / "cfg.json") << kTinyConfig;
  const std::string data = (dir / "data").string();
  REQUIRE(run({"phantom", "--out", data, "--seed", "4", "--set", "n_patients=2", "--set", "size=16"}).code == 0);
  REQUIRE(run({"phantom", "--out", (dir / "data2").string(), "--seed", "4", "--set", "n_patients=2", "--set", "size=16"})
              .code == 0);
  CHECK(manifest(dir / "data")["outputs"] == manifest(dir / "data2")["outputs"]);
  const auto ds = cli::load_dataset(data);
  REQUIRE(ds.size() == 2);
  CHECK(ds[1].scans.size() == 3);

  auto train = [&](const char* out) {
    return run({"train", "--config", (dir / "cfg.json").string(), "--data", data, "--seed", "9", "--out",
                (dir / out).string()});
  };
  REQUIRE(train("t1").code == 0);
  REQUIRE(train("t2").code == 0);
  const auto m1 = manifest(dir / "t1"), m2 = manifest(dir / "t2");
  CHECK(m1["seed"] == 9);
  CHECK(m1["outputs"] == m2["outputs"]);
  CHECK(m1["checkpoint_sha1"] == m2["checkpoint_sha1"]);
  CHECK(slurp(dir / "t1" / "loss_log.jsonl") == slurp(dir / "t2" / "loss_log.jsonl"));
  CHECK(load_checkpoint(dir / "t1" / "model.ckpt").config.seed == 9);

  const std::string ck = (dir / "t1" / "model.ckpt").string();
  const auto s = run({"segment", "--checkpoint", ck, "--moving", data + "/p00/f0_image", "--moving-labels",
                      data + "/p00/f0_labels", "--fixed", data + "/p00/f1_image", "--fixed-labels",
                      data + "/p00/f1_labels", "--patient", "p00", "--fraction", "1", "--out", (dir / "seg").string()});
  REQUIRE(s.code == 0);
  std::istringstream steps(slurp(dir / "seg" / "step_dsc.jsonl"));
  CHECK(read_jsonl(steps).size() == 3 * 4);

  const auto e = run({"evaluate", "--pred", (dir / "seg" / "labels").string(), "--gt", data + "/p00/f1_labels",
                      "--patient", "p00", "--fraction", "1", "--metrics", "dsc", "--out", (dir / "eval").string()});
  REQUIRE(e.code == 0);
  std::istringstream in(slurp(dir / "eval" / "metrics.jsonl"));
  const auto recs = read_jsonl(in);
  REQUIRE(recs.size() == 4);
  std::set<std::string> organs;
  for (const auto& r : recs) {
    organs.insert(r.organ);
    CHECK(r.patient == "p00");
    CHECK(r.fraction == 1);
    CHECK(r.metric == "dsc");
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0);
  }
  CHECK(organs.size() == 4);

  const auto bad = run({"train", "--config", (dir / "cfg.json").string(), "--data", data, "--set", "lr_initial=1e200",
                        "--out", (dir / "nan").string()});
  CHECK(bad.code == cli::kExitNumeric);
  CHECK(bad.err.find("epoch 0 step") != std::string::npos);
}

TEST_CASE("ensemble writes the majority vote") {
  const auto dir = temp_dir("ensemble");
  std::vector<LabelMap> maps;
  std::vector<std::string> args{"ensemble"};
  for (std::uint64_t s = 0; s < 3; ++s) {
    maps.push_back(generate_phantom(s, GridDims{16, 16, 16}).labels);
    const auto stem = dir / ("m" + std::to_string(s));
    write_volume(stem, maps.back());
    args.push_back(stem.string());
  }
  args.insert(args.end(), {"--out", (dir / "out").string()});
  REQUIRE(run(args).code == 0);
  CHECK(read_labels(dir / "out" / "ensemble").labels == majority_vote(maps).labels);
}

TEST_CASE("accumulate-dose with identity fields") {
  const auto dir = temp_dir("dose");
  const GridDims d{10, 10, 10};
  const Spacing sp{5, 5, 5};  // 0.125 cc voxels
  LabelMap lab{d, sp, std::vector<std::uint8_t>(1000, 0)};
  for (Index i = 0; i < 200; ++i) lab.labels[static_cast<std::size_t>(i)] = organ::small_bowel;  // 25 cc
  for (Index i = 200; i < 400; ++i) lab.labels[static_cast<std::size_t>(i)] = organ::large_bowel;
  write_volume(dir / "lab", lab);
  std::vector<std::string> args{"accumulate-dose", "--labels", (dir / "lab").string(), "--reference", "1", "--patient", "p7"};
  std::vector<double> sum(1000, 0.0);
  for (int f = 0; f < 3; ++f) {
    DoseGrid g{d, sp, std::vector<double>(1000, 0.0)};
    for (std::size_t i = 0; i < 1000; ++i) {
      g.gy[i] = static_cast<double>((i * 7 + static_cast<std::size_t>(f) * 3) % 16) * 0.5 + 5.0;
      sum[i] += g.gy[i];
    }
    write_volume(dir / ("d" + std::to_string(f)), g);
    args.insert(args.end(), {"--dose", (dir / ("d" + std::to_string(f))).string()});
  }
  for (int k = 0; k < 2; ++k) {
    write_field(dir / ("v" + std::to_string(k)), DeformationField::identity(d), sp);
    args.insert(args.end(), {"--dvf", (dir / ("v" + std::to_string(k))).string()});
  }
  args.insert(args.end(), {"--out", (dir / "out").string()});
  const auto r = run(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto total = read_dose(dir / "out" / "accumulated_dose");
  for (std::size_t i = 0; i < 1000; ++i) CHECK(total.gy[i] == static_cast<double>(static_cast<float>(sum[i])));

  std::istringstream in(slurp(dir / "out" / "dvh.jsonl"));
  const auto recs = read_jsonl(in);
  CHECK(recs.size() == 6);
  auto value = [&](std::uint8_t organ_label, const char* metric) {
    for (const auto& x : recs)
      if (x.organ == organ::name(organ_label) && x.metric == metric) return x.value;
    FAIL("missing record");
    return 0.0;
  };
  const auto v = nlohmann::json::parse(slurp(dir / "out" / "violations.json"));
  auto violated = [&](std::uint8_t organ_label, const char* metric) {
    for (const auto& x : v)
      if (x["organ"] == organ::name(organ_label) && x["metric"] == metric) return true;
    return false;
  };
  // every accumulated voxel gets at least 15 Gy
  CHECK(value(organ::small_bowel, "d5cc_gy") >= 15.0);
  CHECK(violated(organ::small_bowel, "D5cc"));
  CHECK(violated(organ::large_bowel, "D5cc") == (value(organ::large_bowel, "d5cc_gy") > 30.0));
  CHECK(violated(organ::small_bowel, "D0.035cc") == (value(organ::small_bowel, "d0035cc_gy") > 33.0));
  for (std::uint8_t l : {organ::small_bowel, organ::large_bowel}) {
    CHECK(value(l, "dmax_gy") >= value(l, "d0035cc_gy"));
    CHECK(value(l, "d0035cc_gy") >= value(l, "d5cc_gy"));
  }

  args.pop_back();
  args.pop_back();
  args.erase(args.end() - 2, args.end());  // drop one --dvf
  args.insert(args.end(), {"--out", (dir / "out2").string()});
  CHECK(run(args).code == cli::kExitUsage);
}
