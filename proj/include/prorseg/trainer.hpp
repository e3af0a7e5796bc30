#pragma once

// Joint optimization of the registration and segmentation networks: config,
// learning-rate schedule, Adam, pairing, folds, augmentation, the training loop
// and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "prorseg/phantom.hpp"
#include "prorseg/rrn.hpp"
#include "prorseg/rsn.hpp"

namespace prorseg {

struct AugmentConfig {
  bool enabled = true;
  double max_rotation_deg = 10.0;
  double max_translation_vox = 5.0;
};

struct TrainConfig {
  int epochs_total = 60;
  double lr_initial = 2e-4;
  int lr_constant_epochs = 30;
  int batch_size = 1;
  double lambda_smooth = 30.0;
  double lambda_cons = 1.0;
  double lambda_seg = 1.0;  // weight of the segmentation loss against the registration loss
  std::string smooth_reduction = "mean";  // "mean" | "sum"
  bool cons_final_only = false;
  std::string sim_mode = "mse";  // "mse" | "lncc"
  int ncc_window = 5;
  int n_steps_rrn = 8;
  int n_steps_rsn = 9;
  int bptt_window = 4;  // detach recurrent state every 4 steps; <= 0: unlimited
  std::uint64_t seed = 0;
  std::vector<Index> hidden{4, 8, 8};
  std::vector<Index> decoder{8, 8};
  // Registration trunk widths; empty falls back to hidden / decoder.
  std::vector<Index> rrn_hidden;
  std::vector<Index> rrn_decoder;
  Index input_pool = 2;      // segmentation trunk
  Index rrn_input_pool = 2;  // registration trunk; also the velocity grid coarsening
  int squaring_steps = 7;
  double flow_init_std = 1e-5;
  bool spatial_prior = true;
  bool detach_priors = false;
  std::optional<std::vector<double>> class_weights;
  AugmentConfig augment;
  int queue_depth = 2;  // 0: samples are prepared on the training thread
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  RrnConfig rrn_config() const;
  RsnConfig rsn_config() const;
  RegistrationLossConfig registration_loss() const;
};

nlohmann::ordered_json to_json(const TrainConfig& c);
// Unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);
// Applies "a.b=value" (value parsed as JSON, falling back to a string).
void apply_override(nlohmann::json& j, const std::string& assignment);
// FNV-1a 64 of the canonical JSON dump.
std::uint64_t config_hash(const TrainConfig& c);

// Constant for lr_constant_epochs, then linear decay reaching 0 at epochs_total.
double lr_schedule(int epoch, const TrainConfig& cfg);

struct AdamState {
  long step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// Standard Adam with bias correction; reads each parameter's gradient buffer.
void adam_step(const ParameterList& params, AdamState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
               double eps = 1e-8);

struct Scan {
  int fraction = 0;
  Volume image;
  LabelMap labels;
};

struct PatientScans {
  std::string id;
  std::vector<Scan> scans;
};

using Dataset = std::vector<PatientScans>;

Dataset dataset_from_phantoms(const std::vector<PhantomPatient>& patients);

struct PairId {
  std::size_t patient = 0;
  std::size_t moving = 0;  // scan indices within the patient
  std::size_t fixed = 0;
  friend bool operator==(const PairId&, const PairId&) = default;
};

// All ordered intra-patient pairs.
std::vector<PairId> enumerate_training_pairs(const Dataset& dataset);

// Partition of patients into k folds of near-equal size, shuffled by seed.
std::vector<std::vector<std::string>> split_folds(const std::vector<std::string>& patient_ids, int k,
                                                  std::uint64_t seed);

// Rigid transform (rotation about the grid centre, then translation) as a
// displacement field.
DeformationField rigid_field(const GridDims& dims, const std::array<double, 3>& angles_rad,
                             const std::array<double, 3>& translation);

// Independent random rigid transform per scan; labels go through
// one-hot/warp/argmax.
std::pair<Scan, Scan> augment(const Scan& moving, const Scan& fixed, std::mt19937_64& rng, const AugmentConfig& cfg);

struct JointModel {
  RrnModel rrn;
  RsnModel rsn;

  static JointModel create(const TrainConfig& cfg);
  ParameterList parameters() const;
};

struct StepLosses {
  double total = 0, sim = 0, smooth = 0, cons = 0, seg = 0;
};

struct LossLogEntry {
  int epoch = 0;
  double lr = 0;
  StepLosses mean;  // averaged over the epoch's pairs
};

struct TrainResult {
  JointModel model;
  AdamState adam;
  std::vector<LossLogEntry> log;
  std::vector<StepLosses> steps;  // every optimizer step, in order
};

struct TrainOptions {
  int epochs = -1;  // < 0: cfg.epochs_total
  std::function<void(const LossLogEntry&)> on_epoch;
};

// Throws NumericError naming the epoch and step when a loss goes non-finite.
TrainResult train_joint(const TrainConfig& cfg, const Dataset& dataset, const std::vector<PairId>& pairs,
                        const TrainOptions& options = {});

// One forward/backward pass on a prepared pair; gradients are accumulated into
// the model parameters.
StepLosses joint_loss_backward(const JointModel& model, const TrainConfig& cfg, const Scan& moving, const Scan& fixed);

std::string loss_log_jsonl(const std::vector<LossLogEntry>& log);

struct Prediction {
  RegistrationTrajectory traj;        // with the composed field
  std::vector<Tensor> probs;          // RSN step outputs
  std::vector<LabelMap> step_labels;  // argmax of every RSN step
  LabelMap registered_labels;         // moving contour warped by the RRN alone
};

Prediction predict(const JointModel& model, const TrainConfig& cfg, const Scan& moving, const Scan& fixed);

// Checkpoint layout (little endian): "PRSG", u32 version, u64 config length,
// config JSON, u64 config hash, i32 epoch, i64 adam step, u32 entry count, then
// per entry u32 name length, name, u32 rank, i64 dims, f64 payload. Entries are
// the model parameters followed by "adam.m/<name>" and "adam.v/<name>".
struct Checkpoint {
  TrainConfig config;
  int epoch = 0;
  AdamState adam;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const JointModel& model,
                     const AdamState& adam, int epoch);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Builds the model from the checkpoint's config and copies every parameter.
JointModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace prorseg
