#include "prorseg/cli.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "prorseg/dose.hpp"
#include "prorseg/metrics.hpp"
#include "prorseg/phantom.hpp"
#include "prorseg/volume_io.hpp"

namespace prorseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

json read_json_file(const fs::path& p) {
  const std::string text = read_file(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": malformed JSON at byte offset " + std::to_string(e.byte));
  }
}

// Common flags plus the record of what a run touched.
struct Context {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  RunManifest manifest;

  fs::path out_dir() const { return out; }

  json merged_config(json defaults) const {
    if (!config.empty()) {
      const json file = read_json_file(config);
      if (!file.is_object()) throw FormatError(config + ": config must be a JSON object");
      defaults.merge_patch(file);
    }
    for (const auto& s : sets) {
      if (s.find('=') == std::string::npos || s.front() == '=') throw UsageError("--set expects key=value, got \"" + s + "\"");
      apply_override(defaults, s);
    }
    return defaults;
  }

  void record(const std::string& rel) { manifest.outputs[rel] = git_blob_sha1_file(out_dir() / rel); }

  template <class V>
  void write(const std::string& stem, const V& v) {
    write_volume(out_dir() / stem, v);
    record(stem + ".json");
    record(stem + ".raw");
  }

  void write_field_out(const std::string& stem, const DeformationField& phi, const Spacing& sp) {
    write_field(out_dir() / stem, phi, sp);
    record(stem + ".json");
    record(stem + ".raw");
  }

  void write_file(const std::string& rel, const std::string& text) {
    write_text(out_dir() / rel, text);
    record(rel);
  }

  void finish() {
    manifest.config_path = config;
    manifest.seed = seed;
    write_text(out_dir() / "manifest.json", to_json(manifest).dump(2) + "\n");
  }
};

void add_common(CLI::App* sub, Context& ctx, bool with_config) {
  if (with_config) {
    sub->add_option("--config", ctx.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--set", ctx.sets, "override key=value (repeatable, last wins)");
    sub->add_option("--seed", ctx.seed, "random seed");
  }
  sub->add_option("--out", ctx.out, "output directory")->required();
}

std::string jsonl(const std::vector<MetricRecord>& records) {
  std::ostringstream s;
  write_jsonl(s, records);
  return s.str();
}

// -------------------------------------------------------------------- phantom

json phantom_defaults() {
  DatasetOptions d;
  return {{"n_patients", d.n_patients},          {"n_fractions", d.n_fractions},
          {"size", {d.dims.x, d.dims.y, d.dims.z}}, {"spacing_mm", d.phantom.spacing.x},
          {"max_disp", d.deform.max_disp},       {"sigma", d.deform.sigma},
          {"noise_std", d.deform.noise_std},     {"seed", 0}};
}

int cmd_phantom(Context& ctx) {
  const json defaults = phantom_defaults();
  json j = ctx.merged_config(defaults);
  for (const auto& [k, v] : j.items())
    if (!defaults.contains(k)) throw FormatError("unknown phantom config key \"" + k + "\"");
  if (ctx.seed) j["seed"] = *ctx.seed;
  DatasetOptions o;
  o.n_patients = j["n_patients"].get<int>();
  o.n_fractions = j["n_fractions"].get<int>();
  const auto size = j["size"].is_array() ? j["size"].get<std::vector<Index>>() : std::vector<Index>(3, j["size"].get<Index>());
  if (size.size() != 3) throw FormatError("size needs 1 or 3 entries");
  o.dims = {size[0], size[1], size[2]};
  const double sp = j["spacing_mm"].get<double>();
  o.phantom.spacing = {sp, sp, sp};
  o.deform.max_disp = j["max_disp"].get<double>();
  o.deform.sigma = j["sigma"].get<double>();
  o.deform.noise_std = j["noise_std"].get<double>();
  if (o.n_patients < 1 || o.n_fractions < 1) throw FormatError("n_patients and n_fractions must be positive");
  const auto seed = j["seed"].get<std::uint64_t>();
  ctx.seed = seed;

  const auto patients = generate_dataset(seed, o);
  ordered_json index;
  index["seed"] = seed;
  index["options"] = j;
  index["patients"] = ordered_json::array();
  for (const auto& p : patients) {
    fs::create_directories(ctx.out_dir() / p.id);
    ordered_json pj;
    pj["id"] = p.id;
    pj["fractions"] = ordered_json::array();
    for (const auto& f : p.fractions) {
      const std::string base = p.id + "/f" + std::to_string(f.fraction);
      ctx.write(base + "_image", f.image);
      ctx.write(base + "_labels", f.labels);
      ctx.write_field_out(base + "_gt_velocity", DeformationField{f.gt_velocity.v}, f.image.spacing);
      pj["fractions"].push_back(
          {{"fraction", f.fraction}, {"image", base + "_image"}, {"labels", base + "_labels"}, {"gt_velocity", base + "_gt_velocity"}});
    }
    index["patients"].push_back(pj);
  }
  ctx.write_file("dataset.json", index.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------- train

int cmd_train(Context& ctx, const std::string& data, const std::vector<std::string>& only) {
  json j = ctx.merged_config(to_json(TrainConfig{}));
  if (ctx.seed) j["seed"] = *ctx.seed;
  const TrainConfig cfg = train_config_from_json(j);
  ctx.seed = cfg.seed;

  Dataset all = load_dataset(data);
  ctx.manifest.inputs.push_back((fs::path(data) / "dataset.json").string());
  Dataset ds;
  if (only.empty()) {
    ds = std::move(all);
  } else {
    for (const auto& id : only) {
      auto it = std::find_if(all.begin(), all.end(), [&](const PatientScans& p) { return p.id == id; });
      if (it == all.end()) throw FormatError("patient \"" + id + "\" is not in " + data);
      ds.push_back(*it);
    }
  }
  const auto pairs = enumerate_training_pairs(ds);
  if (pairs.empty()) throw FormatError("no training pairs: every patient needs at least two fractions");

  const TrainResult r = train_joint(cfg, ds, pairs);
  ctx.write_file("config.json", to_json(cfg).dump(2) + "\n");
  ctx.write_file("loss_log.jsonl", loss_log_jsonl(r.log));
  std::string csv = "epoch,lr,total,sim,smooth,cons,seg\n";
  for (const auto& e : r.log) {
    char line[256];
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.lr, e.mean.total, e.mean.sim,
                  e.mean.smooth, e.mean.cons, e.mean.seg);
    csv += line;
  }
  ctx.write_file("loss_log.csv", csv);
  save_checkpoint(ctx.out_dir() / "model.ckpt", cfg, r.model, r.adam, static_cast<int>(r.log.size()));
  ctx.record("model.ckpt");
  ctx.manifest.checkpoint_sha1 = ctx.manifest.outputs["model.ckpt"];
  return kExitOk;
}

// ------------------------------------------------------- register and segment

struct PairArgs {
  std::string checkpoint, moving, fixed, moving_labels, fixed_labels, patient = "case";
  int fraction = 0;
};

Scan load_scan(const std::string& image, const std::string& labels, RunManifest& m) {
  Scan s;
  s.image = read_image(image);
  m.inputs.push_back(image);
  if (!labels.empty()) {
    s.labels = read_labels(labels);
    m.inputs.push_back(labels);
    if (s.labels.dims != s.image.dims) {
      throw ShapeError(labels + ": label grid " + dims_str(s.labels.dims) + " does not match image grid " + dims_str(s.image.dims));
    }
  } else {
    s.labels = {s.image.dims, s.image.spacing, std::vector<std::uint8_t>(static_cast<std::size_t>(s.image.dims.count()), 0)};
  }
  return s;
}

struct LoadedPair {
  Checkpoint ckpt;
  JointModel model;
  Scan moving, fixed;
};

LoadedPair load_pair(Context& ctx, const PairArgs& a, bool need_moving_labels) {
  if (need_moving_labels && a.moving_labels.empty()) throw UsageError("--moving-labels is required");
  LoadedPair p;
  p.ckpt = load_checkpoint(a.checkpoint);
  ctx.manifest.inputs.push_back(a.checkpoint);
  ctx.manifest.checkpoint_sha1 = git_blob_sha1_file(a.checkpoint);
  ctx.seed = p.ckpt.config.seed;
  p.model = model_from_checkpoint(p.ckpt);
  p.moving = load_scan(a.moving, a.moving_labels, ctx.manifest);
  p.fixed = load_scan(a.fixed, a.fixed_labels, ctx.manifest);
  if (p.moving.image.dims != p.fixed.image.dims) {
    throw ShapeError("moving grid " + dims_str(p.moving.image.dims) + " does not match fixed grid " + dims_str(p.fixed.image.dims));
  }
  return p;
}

ordered_json jacobian_json(const JacobianStats& s) {
  return {{"j_sd", s.j_sd}, {"folding_percent", s.folding_percent}, {"mean_det", s.mean_det}, {"min_det", s.min_det}};
}

int cmd_register(Context& ctx, const PairArgs& a) {
  const LoadedPair p = load_pair(ctx, a, false);
  const Prediction pr = predict(p.model, p.ckpt.config, p.moving, p.fixed);
  const DeformationField& phi = pr.traj.composed;
  const Tensor warped = [&] {
    NoGradGuard ng;
    return warp_trilinear(to_tensor(p.moving.image), phi);
  }();
  ctx.write_field_out("dvf", phi, p.fixed.image.spacing);
  ctx.write("warped_image", volume_from_tensor(warped, p.fixed.image.dims, p.fixed.image.spacing, p.moving.image.modality));
  if (!a.moving_labels.empty()) ctx.write("warped_labels", warp_labels(p.moving.labels, phi, organ::count));
  ctx.write_file("jacobian.json", jacobian_json(jacobian_stats(phi)).dump(2) + "\n");
  return kExitOk;
}

int cmd_segment(Context& ctx, const PairArgs& a) {
  const LoadedPair p = load_pair(ctx, a, true);
  const Prediction pr = predict(p.model, p.ckpt.config, p.moving, p.fixed);
  ctx.write("labels", pr.step_labels.back());
  if (!a.fixed_labels.empty()) {
    std::vector<MetricRecord> recs;
    std::string csv = "step,organ,dsc\n";
    for (std::size_t s = 0; s < pr.step_labels.size(); ++s)
      for (std::uint8_t l = 1; l < organ::count; ++l) {
        const double d = dsc(organ_mask(pr.step_labels[s], l), organ_mask(p.fixed.labels, l));
        recs.push_back({a.patient, a.fraction, organ::name(l), "dsc_step" + std::to_string(s + 1), d});
        char line[128];
        std::snprintf(line, sizeof line, "%zu,%s,%.17g\n", s + 1, organ::name(l).c_str(), d);
        csv += line;
      }
    ctx.write_file("step_dsc.jsonl", jsonl(recs));
    ctx.write_file("step_dsc.csv", csv);
  }
  return kExitOk;
}

// ------------------------------------------------------------------- evaluate

int cmd_evaluate(Context& ctx, const std::vector<std::string>& preds, const std::vector<std::string>& gts,
                 const std::vector<std::string>& patients, const std::vector<int>& fractions,
                 const std::vector<std::string>& metrics) {
  if (preds.size() != gts.size()) throw UsageError("--pred and --gt must be given the same number of times");
  if (!patients.empty() && patients.size() != preds.size()) throw UsageError("--patient must match the number of --pred");
  if (!fractions.empty() && fractions.size() != preds.size()) throw UsageError("--fraction must match the number of --pred");
  for (const auto& m : metrics)
    if (m != "dsc" && m != "hd95") throw UsageError("unknown metric \"" + m + "\" (expected dsc or hd95)");
  std::vector<MetricRecord> recs;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const LabelMap pred = read_labels(preds[i]);
    const LabelMap gt = read_labels(gts[i]);
    ctx.manifest.inputs.push_back(preds[i]);
    ctx.manifest.inputs.push_back(gts[i]);
    const std::string pid = patients.empty() ? "case" + std::to_string(i) : patients[i];
    const int frac = fractions.empty() ? 0 : fractions[i];
    for (std::uint8_t l = 1; l < organ::count; ++l) {
      const OrganMask a = organ_mask(pred, l), b = organ_mask(gt, l);
      for (const auto& m : metrics) {
        if (m == "dsc") recs.push_back({pid, frac, organ::name(l), "dsc", dsc(a, b)});
        // HD95 is undefined when either mask is empty; such organs are skipped.
        if (m == "hd95" && a.count() > 0 && b.count() > 0) recs.push_back({pid, frac, organ::name(l), "hd95_mm", hd95(a, b)});
      }
    }
  }
  ctx.write_file("metrics.jsonl", jsonl(recs));
  return kExitOk;
}

// ------------------------------------------------------------------- ensemble

int cmd_ensemble(Context& ctx, const std::vector<std::string>& inputs) {
  if (inputs.size() < 3) {
    throw UsageError("ensemble requires ≥3 label maps (at least three preceding fractions), got " +
                     std::to_string(inputs.size()));
  }
  std::vector<LabelMap> maps;
  for (const auto& in : inputs) {
    maps.push_back(read_labels(in));
    ctx.manifest.inputs.push_back(in);
  }
  ctx.write("ensemble", majority_vote(maps));
  return kExitOk;
}

// ------------------------------------------------------------ accumulate-dose

int cmd_accumulate(Context& ctx, const std::vector<std::string>& doses, const std::vector<std::string>& dvfs,
                   const std::string& labels, int reference, const std::string& patient) {
  if (doses.empty()) throw UsageError("at least one --dose is required");
  if (dvfs.size() + 1 != doses.size()) {
    throw UsageError("expected " + std::to_string(doses.size() - 1) + " --dvf for " + std::to_string(doses.size()) +
                     " doses, got " + std::to_string(dvfs.size()));
  }
  std::vector<DoseGrid> dg;
  for (const auto& d : doses) {
    dg.push_back(read_dose(d));
    ctx.manifest.inputs.push_back(d);
  }
  std::vector<DeformationField> fields;
  for (const auto& f : dvfs) {
    fields.push_back(read_field(f));
    ctx.manifest.inputs.push_back(f);
  }
  const LabelMap lab = read_labels(labels);
  ctx.manifest.inputs.push_back(labels);
  const DoseGrid total = accumulate(dg, fields, reference);
  if (lab.dims != total.dims) throw ShapeError("label grid " + dims_str(lab.dims) + " does not match dose grid " + dims_str(total.dims));
  ctx.write("accumulated_dose", total);

  std::vector<MetricRecord> recs;
  ordered_json violations = ordered_json::array();
  for (std::uint8_t l = 1; l < organ::count; ++l) {
    OrganMask m = organ_mask(lab, l);
    m.spacing = total.spacing;
    if (m.count() == 0) continue;
    const double voxel_cc = total.spacing.voxel_volume_mm3() / 1000.0;
    const double organ_cc = static_cast<double>(m.count()) * voxel_cc;
    DvhPoints pts;
    pts.dmax = dvh_point(total, m, 0.0);
    pts.d0035cc = organ_cc >= 0.035 ? dvh_point(total, m, 0.035) : pts.dmax;
    recs.push_back({patient, reference, organ::name(l), "dmax_gy", pts.dmax});
    recs.push_back({patient, reference, organ::name(l), "d0035cc_gy", pts.d0035cc});
    // D5cc only exists for organs of at least 5 cc.
    if (organ_cc >= 5.0) {
      pts.d5cc = dvh_point(total, m, 5.0);
      recs.push_back({patient, reference, organ::name(l), "d5cc_gy", pts.d5cc});
    }
    for (const auto& v : check_constraints(pts, l)) {
      if (v.metric == "D5cc" && organ_cc < 5.0) continue;
      violations.push_back({{"organ", v.organ}, {"metric", v.metric}, {"value", v.value}, {"limit", v.limit}});
    }
  }
  ctx.write_file("dvh.jsonl", jsonl(recs));
  ctx.write_file("violations.json", violations.dump(2) + "\n");
  return kExitOk;
}

}  // namespace

ordered_json to_json(const RunManifest& m) {
  ordered_json j;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["config_path"] = m.config_path;
  j["seed"] = m.seed ? ordered_json(*m.seed) : ordered_json(nullptr);
  j["inputs"] = m.inputs;
  j["outputs"] = ordered_json::object();
  for (const auto& [k, v] : m.outputs) j["outputs"][k] = v;
  j["checkpoint_sha1"] = m.checkpoint_sha1;
  return j;
}

std::string git_blob_sha1(const std::string& content) {
  const std::string head = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* c = EVP_MD_CTX_new();
  if (c == nullptr || EVP_DigestInit_ex(c, EVP_sha1(), nullptr) != 1 || EVP_DigestUpdate(c, head.data(), head.size()) != 1 ||
      EVP_DigestUpdate(c, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(c, md, &len) != 1) {
    EVP_MD_CTX_free(c);
    throw std::runtime_error("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(c);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string git_blob_sha1_file(const fs::path& path) { return git_blob_sha1(read_file(path)); }

Dataset load_dataset(const fs::path& dir) {
  const json index = read_json_file(dir / "dataset.json");
  Dataset out;
  try {
    for (const auto& pj : index.at("patients")) {
      PatientScans ps{pj.at("id").get<std::string>(), {}};
      for (const auto& fj : pj.at("fractions")) {
        Scan s;
        s.fraction = fj.at("fraction").get<int>();
        s.image = read_image(dir / fj.at("image").get<std::string>());
        s.labels = read_labels(dir / fj.at("labels").get<std::string>());
        if (s.labels.dims != s.image.dims) throw FormatError(ps.id + ": label and image grids differ");
        ps.scans.push_back(std::move(s));
      }
      out.push_back(std::move(ps));
    }
  } catch (const json::exception& e) {
    throw FormatError((dir / "dataset.json").string() + ": bad index: " + e.what());
  }
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint progressive registration and segmentation of abdominal organs", "prorseg"};
  app.require_subcommand(1);
  Context ctx;
  for (int i = 1; i < argc; ++i) ctx.manifest.argv.emplace_back(argv[i]);

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
  add_common(phantom, ctx, true);

  std::string data;
  std::vector<std::string> only;
  auto* train = app.add_subcommand("train", "train the joint model on a phantom dataset");
  add_common(train, ctx, true);
  train->add_option("--data", data, "dataset directory (with dataset.json)")->required()->check(CLI::ExistingDirectory);
  train->add_option("--patient", only, "restrict training to these patient ids (repeatable)");

  PairArgs pa;
  auto pair_opts = [&](CLI::App* sub) {
    add_common(sub, ctx, false);
    sub->add_option("--checkpoint", pa.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--moving", pa.moving, "moving image stem")->required();
    sub->add_option("--fixed", pa.fixed, "fixed image stem")->required();
    sub->add_option("--moving-labels", pa.moving_labels, "moving contour stem");
  };
  auto* reg = app.add_subcommand("register", "predict the DVF of a moving/fixed pair");
  pair_opts(reg);
  auto* seg = app.add_subcommand("segment", "segment the fixed image using the moving contour as prior");
  pair_opts(seg);
  seg->add_option("--fixed-labels", pa.fixed_labels, "ground-truth fixed contour for per-step DSC");
  seg->add_option("--patient", pa.patient, "patient id for the report");
  seg->add_option("--fraction", pa.fraction, "fraction index for the report");

  std::vector<std::string> preds, gts, patients, metrics{"dsc", "hd95"};
  std::vector<int> fractions;
  auto* eval = app.add_subcommand("evaluate", "score predicted label maps against ground truth");
  add_common(eval, ctx, false);
  eval->add_option("--pred", preds, "predicted labels stem (repeatable)")->required();
  eval->add_option("--gt", gts, "ground-truth labels stem (repeatable, same order)")->required();
  eval->add_option("--patient", patients, "patient id per pair");
  eval->add_option("--fraction", fractions, "fraction index per pair");
  eval->add_option("--metrics", metrics, "dsc and/or hd95")->delimiter(',');

  std::vector<std::string> inputs;
  auto* ens = app.add_subcommand("ensemble", "majority vote over label maps");
  add_common(ens, ctx, false);
  ens->add_option("inputs", inputs, "label map stems");

  std::vector<std::string> doses, dvfs;
  std::string labels, dose_patient = "case";
  int reference = 0;
  auto* acc = app.add_subcommand("accumulate-dose", "accumulate fraction doses in a reference frame");
  add_common(acc, ctx, false);
  acc->add_option("--dose", doses, "fraction dose stems in fraction order (repeatable)")->required();
  acc->add_option("--dvf", dvfs, "field linking fraction k and k+1, pointing toward the reference (repeatable)");
  acc->add_option("--labels", labels, "reference-frame label map")->required();
  acc->add_option("--reference", reference, "reference fraction index");
  acc->add_option("--patient", dose_patient, "patient id for the report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  ctx.manifest.command = sub->get_name();
  try {
    fs::create_directories(ctx.out_dir());
    int code = kExitOk;
    if (sub == phantom) code = cmd_phantom(ctx);
    else if (sub == train) code = cmd_train(ctx, data, only);
    else if (sub == reg) code = cmd_register(ctx, pa);
    else if (sub == seg) code = cmd_segment(ctx, pa);
    else if (sub == eval) code = cmd_evaluate(ctx, preds, gts, patients, fractions, metrics);
    else if (sub == ens) code = cmd_ensemble(ctx, inputs);
    else if (sub == acc) code = cmd_accumulate(ctx, doses, dvfs, labels, reference, dose_patient);
    ctx.finish();
    return code;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << sub->help();
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"prorseg"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace prorseg::cli
