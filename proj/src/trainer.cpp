#include "prorseg/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <fstream>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "prorseg/ops.hpp"
#include "prorseg/runtime.hpp"

namespace prorseg {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs_total < 1) fail("epochs_total must be >= 1");
  if (!(lr_initial > 0.0)) fail("lr_initial must be > 0");
  if (lr_constant_epochs < 0 || lr_constant_epochs > epochs_total) fail("lr_constant_epochs must lie in [0, epochs_total]");
  if (batch_size != 1) fail("only batch_size 1 is supported");
  if (n_steps_rrn < 1) fail("n_steps_rrn must be >= 1");
  if (n_steps_rsn != n_steps_rrn + 1) fail("n_steps_rsn must equal n_steps_rrn + 1");
  if (smooth_reduction != "mean" && smooth_reduction != "sum") fail("smooth_reduction must be mean or sum");
  if (sim_mode != "mse" && sim_mode != "lncc") fail("sim_mode must be mse or lncc");
  if (class_weights && class_weights->size() != static_cast<std::size_t>(organ::count)) {
    fail("class_weights needs " + std::to_string(organ::count) + " entries");
  }
  if (queue_depth < 0) fail("queue_depth must be >= 0");
  if (squaring_steps < 1) fail("squaring_steps must be >= 1");
  rrn_config().unet.validate();
  rsn_config().unet.validate();
}

RrnConfig TrainConfig::rrn_config() const {
  RrnConfig c;
  c.unet = UNetConfig{2, rrn_hidden.empty() ? hidden : rrn_hidden, rrn_decoder.empty() ? decoder : rrn_decoder,
                      rrn_input_pool};
  c.n_steps = n_steps_rrn;
  c.squaring_steps = squaring_steps;
  c.flow_init_std = flow_init_std;
  return c;
}

RsnConfig TrainConfig::rsn_config() const {
  RsnConfig c;
  c.n_classes = organ::count;
  c.unet = UNetConfig{organ::count + 2, hidden, decoder, input_pool};
  c.n_steps = n_steps_rsn;
  return c;
}

RegistrationLossConfig TrainConfig::registration_loss() const {
  RegistrationLossConfig c;
  c.sim_mode = sim_mode == "lncc" ? SimilarityMode::lncc : SimilarityMode::mse;
  c.ncc_window = ncc_window;
  c.lambda_smooth = lambda_smooth;
  c.lambda_cons = lambda_cons;
  c.smooth_reduction = smooth_reduction == "sum" ? Reduction::sum : Reduction::mean;
  c.cons_final_only = cons_final_only;
  return c;
}

nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["epochs_total"] = c.epochs_total;
  j["lr_initial"] = c.lr_initial;
  j["lr_constant_epochs"] = c.lr_constant_epochs;
  j["batch_size"] = c.batch_size;
  j["lambda_smooth"] = c.lambda_smooth;
  j["lambda_cons"] = c.lambda_cons;
  j["lambda_seg"] = c.lambda_seg;
  j["smooth_reduction"] = c.smooth_reduction;
  j["cons_final_only"] = c.cons_final_only;
  j["sim_mode"] = c.sim_mode;
  j["ncc_window"] = c.ncc_window;
  j["n_steps_rrn"] = c.n_steps_rrn;
  j["n_steps_rsn"] = c.n_steps_rsn;
  j["bptt_window"] = c.bptt_window;
  j["seed"] = c.seed;
  j["hidden"] = c.hidden;
  j["decoder"] = c.decoder;
  j["rrn_hidden"] = c.rrn_hidden;
  j["rrn_decoder"] = c.rrn_decoder;
  j["input_pool"] = c.input_pool;
  j["rrn_input_pool"] = c.rrn_input_pool;
  j["squaring_steps"] = c.squaring_steps;
  j["flow_init_std"] = c.flow_init_std;
  j["spatial_prior"] = c.spatial_prior;
  j["detach_priors"] = c.detach_priors;
  j["class_weights"] = c.class_weights ? nlohmann::ordered_json(*c.class_weights) : nlohmann::ordered_json(nullptr);
  j["augment"] = {{"enabled", c.augment.enabled},
                  {"max_rotation_deg", c.augment.max_rotation_deg},
                  {"max_translation_vox", c.augment.max_translation_vox}};
  j["queue_depth"] = c.queue_depth;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  TrainConfig c;
  const auto known = to_json(c);
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw std::invalid_argument("train config: unknown key \"" + k + "\"");
  }
  try {
    auto get = [&](const char* k, auto& dst) {
      if (j.contains(k)) dst = j.at(k).get<std::remove_reference_t<decltype(dst)>>();
    };
    get("epochs_total", c.epochs_total);
    get("lr_initial", c.lr_initial);
    get("lr_constant_epochs", c.lr_constant_epochs);
    get("batch_size", c.batch_size);
    get("lambda_smooth", c.lambda_smooth);
    get("lambda_cons", c.lambda_cons);
    get("lambda_seg", c.lambda_seg);
    get("smooth_reduction", c.smooth_reduction);
    get("cons_final_only", c.cons_final_only);
    get("sim_mode", c.sim_mode);
    get("ncc_window", c.ncc_window);
    get("n_steps_rrn", c.n_steps_rrn);
    get("n_steps_rsn", c.n_steps_rsn);
    get("bptt_window", c.bptt_window);
    get("seed", c.seed);
    get("hidden", c.hidden);
    get("decoder", c.decoder);
    get("rrn_hidden", c.rrn_hidden);
    get("rrn_decoder", c.rrn_decoder);
    get("input_pool", c.input_pool);
    get("rrn_input_pool", c.rrn_input_pool);
    get("squaring_steps", c.squaring_steps);
    get("flow_init_std", c.flow_init_std);
    get("spatial_prior", c.spatial_prior);
    get("detach_priors", c.detach_priors);
    if (j.contains("class_weights") && !j.at("class_weights").is_null()) {
      c.class_weights = j.at("class_weights").get<std::vector<double>>();
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      for (const auto& [k, v] : a.items()) {
        if (!known["augment"].contains(k)) throw std::invalid_argument("train config: unknown key \"augment." + k + "\"");
      }
      if (a.contains("enabled")) c.augment.enabled = a.at("enabled").get<bool>();
      if (a.contains("max_rotation_deg")) c.augment.max_rotation_deg = a.at("max_rotation_deg").get<double>();
      if (a.contains("max_translation_vox")) c.augment.max_translation_vox = a.at("max_translation_vox").get<double>();
    }
    get("queue_depth", c.queue_depth);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_eps", c.adam_eps);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::uint64_t config_hash(const TrainConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs_total) {
    throw std::out_of_range("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(cfg.epochs_total) + ")");
  }
  if (epoch < cfg.lr_constant_epochs) return cfg.lr_initial;
  const double decay = static_cast<double>(cfg.epochs_total - cfg.lr_constant_epochs);
  return cfg.lr_initial * static_cast<double>(cfg.epochs_total - epoch) / decay;
}

// ---------------------------------------------------------------- adam

void adam_step(const ParameterList& params, AdamState& st, double lr, double b1, double b2, double eps) {
  ++st.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const auto n = static_cast<std::size_t>(t.numel());
    auto& m = st.m[p.name];
    auto& v = st.v[p.name];
    if (m.empty()) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    if (m.size() != n) throw ShapeError("adam_step: moment size mismatch for " + p.name);
    if (!t.has_grad()) {
      // zero gradient: moments decay, parameters still move by the momentum term
      bool any = false;
      for (double x : m) any = any || x != 0.0;
      if (!any) continue;
    }
    const std::vector<double> g = t.grad();
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

// ---------------------------------------------------------------- data

Dataset dataset_from_phantoms(const std::vector<PhantomPatient>& patients) {
  Dataset out;
  for (const auto& p : patients) {
    PatientScans ps{p.id, {}};
    for (const auto& f : p.fractions) ps.scans.push_back({f.fraction, f.image, f.labels});
    out.push_back(std::move(ps));
  }
  return out;
}

std::vector<PairId> enumerate_training_pairs(const Dataset& dataset) {
  std::vector<PairId> out;
  for (std::size_t p = 0; p < dataset.size(); ++p) {
    const std::size_t n = dataset[p].scans.size();
    for (std::size_t m = 0; m < n; ++m)
      for (std::size_t f = 0; f < n; ++f)
        if (m != f) out.push_back({p, m, f});
  }
  return out;
}

std::vector<std::vector<std::string>> split_folds(const std::vector<std::string>& ids, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("split_folds: k must be >= 1");
  const std::set<std::string> unique(ids.begin(), ids.end());
  if (unique.size() != ids.size()) throw std::invalid_argument("split_folds: duplicate patient ids");
  if (static_cast<std::size_t>(k) > ids.size()) {
    throw std::invalid_argument("split_folds: k = " + std::to_string(k) + " exceeds " + std::to_string(ids.size()) +
                                " patients");
  }
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  const std::size_t n = order.size();
  std::size_t pos = 0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::size_t size = n / folds.size() + (f < n % folds.size() ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i) folds[f].push_back(order[pos++]);
  }
  return folds;
}

DeformationField rigid_field(const GridDims& d, const std::array<double, 3>& a, const std::array<double, 3>& t) {
  const double cx = std::cos(a[0]), sx = std::sin(a[0]), cy = std::cos(a[1]), sy = std::sin(a[1]),
               cz = std::cos(a[2]), sz = std::sin(a[2]);
  // R = Rz * Ry * Rx acting on (x, y, z)
  const double r[3][3] = {{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
                          {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
                          {-sy, cy * sx, cy * cx}};
  const double c[3] = {0.5 * static_cast<double>(d.x - 1), 0.5 * static_cast<double>(d.y - 1),
                       0.5 * static_cast<double>(d.z - 1)};
  const Index n = d.count();
  std::vector<double> u(static_cast<std::size_t>(3 * n));
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) {
        const double p[3] = {static_cast<double>(x) - c[0], static_cast<double>(y) - c[1], static_cast<double>(z) - c[2]};
        const Index i = d.index(x, y, z);
        for (int k = 0; k < 3; ++k) {
          const double q = r[k][0] * p[0] + r[k][1] * p[1] + r[k][2] * p[2] + t[static_cast<std::size_t>(k)];
          u[static_cast<std::size_t>(k * n + i)] = q - p[k];
        }
      }
  return {Tensor({1, 3, d.z, d.y, d.x}, std::move(u))};
}

namespace {

Scan augment_scan(const Scan& s, std::mt19937_64& rng, const AugmentConfig& cfg) {
  const double rmax = cfg.max_rotation_deg * std::numbers::pi / 180.0;
  std::uniform_real_distribution<double> rot(-rmax, rmax), tr(-cfg.max_translation_vox, cfg.max_translation_vox);
  std::array<double, 3> a{}, t{};
  for (auto& e : a) e = rmax > 0.0 ? rot(rng) : 0.0;
  for (auto& e : t) e = cfg.max_translation_vox > 0.0 ? tr(rng) : 0.0;
  if (a == std::array<double, 3>{} && t == std::array<double, 3>{}) return s;
  NoGradGuard ng;
  const DeformationField f = rigid_field(s.image.dims, a, t);
  Scan out = s;
  out.image = volume_from_tensor(warp_trilinear(to_tensor(s.image), f), s.image.dims, s.image.spacing, s.image.modality);
  out.labels = warp_labels(s.labels, f, organ::count);
  return out;
}

}  // namespace

std::pair<Scan, Scan> augment(const Scan& moving, const Scan& fixed, std::mt19937_64& rng, const AugmentConfig& cfg) {
  if (!cfg.enabled) return {moving, fixed};
  Scan m = augment_scan(moving, rng, cfg);
  Scan f = augment_scan(fixed, rng, cfg);
  return {std::move(m), std::move(f)};
}

// ---------------------------------------------------------------- model

JointModel JointModel::create(const TrainConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x6d6f64656cULL));
  JointModel m;
  m.rrn = RrnModel::create(cfg.rrn_config(), rng);
  m.rsn = RsnModel::create(cfg.rsn_config(), rng);
  return m;
}

ParameterList JointModel::parameters() const {
  ParameterList out = rrn.parameters();
  for (const auto& p : rsn.parameters()) out.push_back(p);
  return out;
}

StepLosses joint_loss_backward(const JointModel& model, const TrainConfig& cfg, const Scan& moving, const Scan& fixed) {
  const Tensor x_m = to_tensor(moving.image), x_f = to_tensor(fixed.image);
  const Tensor y_m = one_hot(moving.labels, organ::count), y_f = one_hot(fixed.labels, organ::count);
  RrnOptions ro;
  ro.compose = false;
  ro.bptt_window = cfg.bptt_window;
  const RegistrationTrajectory traj = rrn_forward(model.rrn, x_m, x_f, y_m, ro);
  const RegistrationLoss reg = loss_registration_total(traj, x_f, y_f, cfg.registration_loss());
  RsnOptions so;
  so.spatial_prior = cfg.spatial_prior;
  so.detach_priors = cfg.detach_priors;
  so.bptt_window = cfg.bptt_window;
  const auto probs = rsn_forward(model.rsn, x_m, y_m, x_f, traj, so);
  const Tensor seg = loss_seg_deep_supervision(probs, fixed.labels, cfg.class_weights);
  const Tensor total = cfg.lambda_seg == 1.0 ? add(reg.total, seg) : add(reg.total, scale(seg, cfg.lambda_seg));
  StepLosses l{total.item(), reg.sim.item(), reg.smooth.item(), reg.cons.item(), seg.item()};
  if (!std::isfinite(l.total)) {
    Tape::current().clear();
    return l;
  }
  backward(total);
  return l;
}

// ---------------------------------------------------------------- training

namespace {

struct Sample {
  std::size_t index = 0;
  Scan moving, fixed;
};

Sample make_sample(const TrainConfig& cfg, const Dataset& ds, const PairId& id, int epoch, std::size_t index) {
  const auto& pat = ds.at(id.patient);
  std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 1, index));
  auto [m, f] = augment(pat.scans.at(id.moving), pat.scans.at(id.fixed), rng, cfg.augment);
  return {index, std::move(m), std::move(f)};
}

// Single-producer single-consumer queue with a capacity bound.
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t cap) : cap_(cap) {}

  void push(Sample s) {
    std::unique_lock lk(mu_);
    not_full_.wait(lk, [&] { return q_.size() < cap_ || closed_; });
    if (closed_) return;
    q_.push_back(std::move(s));
    not_empty_.notify_one();
  }
  bool pop(Sample& out) {
    std::unique_lock lk(mu_);
    not_empty_.wait(lk, [&] { return !q_.empty() || closed_ || done_; });
    if (q_.empty()) return false;
    out = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return true;
  }
  void finish() {
    std::lock_guard lk(mu_);
    done_ = true;
    not_empty_.notify_all();
  }
  void close() {
    std::lock_guard lk(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t cap_;
  std::deque<Sample> q_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  bool closed_ = false, done_ = false;
};

std::vector<std::size_t> epoch_order(const TrainConfig& cfg, std::size_t n, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x73687566ULL, static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

}  // namespace

TrainResult train_joint(const TrainConfig& cfg, const Dataset& dataset, const std::vector<PairId>& pairs,
                        const TrainOptions& options) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("train_joint: no training pairs");
  configure_allocator();
  const int epochs = options.epochs < 0 ? cfg.epochs_total : std::min(options.epochs, cfg.epochs_total);
  TrainResult r{JointModel::create(cfg), {}, {}, {}};
  const ParameterList params = r.model.parameters();

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const auto order = epoch_order(cfg, pairs.size(), epoch);
    StepLosses acc;

    BoundedQueue queue(static_cast<std::size_t>(std::max(1, cfg.queue_depth)));
    std::thread producer;
    if (cfg.queue_depth > 0) {
      producer = std::thread([&] {
        NoGradGuard ng;
        for (std::size_t s = 0; s < order.size(); ++s) queue.push(make_sample(cfg, dataset, pairs[order[s]], epoch, s));
        queue.finish();
      });
    }
    try {
      for (std::size_t s = 0; s < order.size(); ++s) {
        Sample sample;
        if (cfg.queue_depth > 0) {
          if (!queue.pop(sample)) throw std::logic_error("train_joint: sample queue ended early");
        } else {
          NoGradGuard ng;
          sample = make_sample(cfg, dataset, pairs[order[s]], epoch, s);
        }
        zero_grads(params);
        StepLosses l;
        try {
          l = joint_loss_backward(r.model, cfg, sample.moving, sample.fixed);
        } catch (const NumericError& e) {
          Tape::current().clear();
          throw NumericError("numeric failure at epoch " + std::to_string(epoch) + " step " + std::to_string(s) + ": " +
                             e.what());
        }
        if (!std::isfinite(l.total)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
                             " (sim " + std::to_string(l.sim) + ", smooth " + std::to_string(l.smooth) + ", cons " +
                             std::to_string(l.cons) + ", seg " + std::to_string(l.seg) + ")");
        }
        adam_step(params, r.adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        r.steps.push_back(l);
        acc.total += l.total;
        acc.sim += l.sim;
        acc.smooth += l.smooth;
        acc.cons += l.cons;
        acc.seg += l.seg;
      }
    } catch (...) {
      queue.close();
      if (producer.joinable()) producer.join();
      throw;
    }
    if (producer.joinable()) producer.join();
    const double n = static_cast<double>(order.size());
    LossLogEntry e{epoch, lr, {acc.total / n, acc.sim / n, acc.smooth / n, acc.cons / n, acc.seg / n}};
    r.log.push_back(e);
    if (options.on_epoch) options.on_epoch(e);
  }
  zero_grads(params);
  return r;
}

std::string loss_log_jsonl(const std::vector<LossLogEntry>& log) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["lr"] = e.lr;
    j["total"] = e.mean.total;
    j["sim"] = e.mean.sim;
    j["smooth"] = e.mean.smooth;
    j["cons"] = e.mean.cons;
    j["seg"] = e.mean.seg;
    out << j.dump() << '\n';
  }
  return out.str();
}

Prediction predict(const JointModel& model, const TrainConfig& cfg, const Scan& moving, const Scan& fixed) {
  NoGradGuard ng;
  const Tensor x_m = to_tensor(moving.image), x_f = to_tensor(fixed.image);
  const Tensor y_m = one_hot(moving.labels, organ::count);
  Prediction p;
  p.traj = rrn_forward(model.rrn, x_m, x_f, y_m, {true, 0});
  RsnOptions so;
  so.spatial_prior = cfg.spatial_prior;
  p.probs = rsn_forward(model.rsn, x_m, y_m, x_f, p.traj, so);
  for (const auto& pr : p.probs) p.step_labels.push_back(argmax_labels(pr, fixed.labels.dims, fixed.labels.spacing));
  p.registered_labels = argmax_labels(p.traj.y_m.back(), fixed.labels.dims, fixed.labels.spacing);
  return p;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'P', 'R', 'S', 'G'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : b_(std::move(bytes)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char tmp[sizeof(T)];
    std::memcpy(tmp, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, tmp, sizeof(T));
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > b_.size()) {
      throw std::runtime_error(std::string("checkpoint truncated reading ") + what + " at byte offset " +
                               std::to_string(pos_) + ": need " + std::to_string(n) + " bytes, " +
                               std::to_string(b_.size() - pos_) + " left");
    }
  }
  std::vector<char> b_;
  std::size_t pos_ = 0;
};

void put_tensor(std::ostream& out, const std::string& name, const Shape& shape, std::span<const double> data) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) put<std::int64_t>(out, d);
  for (double v : data) put<double>(out, v);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const JointModel& model,
                     const AdamState& adam, int epoch) {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  const std::string cj = to_json(cfg).dump();
  put<std::uint64_t>(out, cj.size());
  out.write(cj.data(), static_cast<std::streamsize>(cj.size()));
  put<std::uint64_t>(out, config_hash(cfg));
  put<std::int32_t>(out, epoch);
  put<std::int64_t>(out, adam.step);
  const ParameterList params = model.parameters();
  std::uint32_t count = static_cast<std::uint32_t>(params.size());
  for (const auto& p : params)
    if (adam.m.count(p.name)) count += 2;
  put<std::uint32_t>(out, count);
  for (const auto& p : params) put_tensor(out, p.name, p.tensor.shape(), p.tensor.data());
  for (const char* which : {"m", "v"}) {
    const auto& moments = which[0] == 'm' ? adam.m : adam.v;
    for (const auto& p : params) {
      const auto it = moments.find(p.name);
      if (it == moments.end()) continue;
      put_tensor(out, std::string("adam.") + which + "/" + p.name, p.tensor.shape(), it->second);
    }
  }
  const std::string bytes = out.str();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw std::runtime_error("not a checkpoint (bad magic at byte offset 0)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto clen = r.get<std::uint64_t>("config length");
  const std::size_t cpos = r.pos();
  const std::string cj = r.str(clen, "config");
  Checkpoint ck;
  try {
    ck.config = train_config_from_json(nlohmann::json::parse(cj));
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint config at byte offset " + std::to_string(cpos) + " is invalid: " + e.what());
  }
  const auto hash = r.get<std::uint64_t>("config hash");
  if (hash != config_hash(ck.config)) throw std::runtime_error("checkpoint config hash mismatch");
  ck.epoch = r.get<std::int32_t>("epoch");
  ck.adam.step = r.get<std::int64_t>("adam step");
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto nlen = r.get<std::uint32_t>("name length");
    const std::string name = r.str(nlen, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw std::runtime_error("checkpoint entry " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.get<std::int64_t>("dims"));
    const Index n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = r.get<double>("payload");
    if (name.rfind("adam.m/", 0) == 0) ck.adam.m[name.substr(7)] = std::move(data);
    else if (name.rfind("adam.v/", 0) == 0) ck.adam.v[name.substr(7)] = std::move(data);
    else ck.tensors[name] = Tensor(shape, std::move(data), true);
  }
  if (r.pos() != r.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(r.size() - r.pos()) + " trailing bytes at byte offset " +
                             std::to_string(r.pos()));
  }
  return ck;
}

JointModel model_from_checkpoint(const Checkpoint& ck) {
  JointModel m = JointModel::create(ck.config);
  for (const auto& p : m.parameters()) {
    const auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint lacks parameter " + p.name);
    if (it->second.shape() != p.tensor.shape()) {
      throw ShapeError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                       shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    const auto src = it->second.data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
  return m;
}

}  // namespace prorseg
