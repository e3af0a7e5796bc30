#pragma once

// Batch command-line driver. Every subcommand writes its outputs plus a
// manifest.json into --out.
//
//   phantom          synthetic dataset (dataset.json index, images, labels, gt velocities)
//   train            TrainConfig JSON + dataset -> model.ckpt, loss logs
//   register         checkpoint + pair -> DVF, warped image/labels, Jacobian stats
//   segment          checkpoint + pair -> labels, per-step DSC when gt is given
//   evaluate         predictions + gt -> metrics.jsonl
//   ensemble         >= 3 label maps -> majority vote
//   accumulate-dose  doses + DVFs + labels -> accumulated dose, DVH points, violations
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "prorseg/trainer.hpp"

namespace prorseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;  // empty when no config file was given
  std::optional<std::uint64_t> seed;
  std::vector<std::string> inputs;
  std::map<std::string, std::string> outputs;  // path relative to --out -> git blob SHA-1
  std::string checkpoint_sha1;               // git blob SHA-1 of the checkpoint read or written
};

nlohmann::ordered_json to_json(const RunManifest& m);

// SHA-1 of "blob <size>\0" + content, as printed by `git hash-object`.
std::string git_blob_sha1(const std::string& content);
std::string git_blob_sha1_file(const std::filesystem::path& path);

// Phantom dataset on disk: <dir>/dataset.json lists every patient's fractions
// with stems relative to <dir>.
Dataset load_dataset(const std::filesystem::path& dir);

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace prorseg::cli
