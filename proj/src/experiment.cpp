#include "rlvr/experiment.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <type_traits>

#include "json.hpp"

namespace rlvr {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// substream tags
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kWarmStartStream = 2;
constexpr std::uint64_t kInterveneStream = 0x696e7476ULL;

std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunError("cannot write " + path.string());
  out << text;
  if (!out) throw RunError("write failed for " + path.string());
}

std::ofstream open_log(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RunError("cannot write " + path.string());
  return out;
}

// ---------------------------------------------------------------------------
// Config reading: consumes known keys, then rejects whatever is left.

class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError((path_.empty() ? "config" : path_) + " must be a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    const json* v = take(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) fail(key, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (!v->is_number_unsigned()) fail(key, "a nonnegative integer");
        out = v->get<T>();
      } else {
        const auto wide = v->get<std::int64_t>();
        if (wide < std::numeric_limits<T>::min() || wide > std::numeric_limits<T>::max()) fail(key, "in range");
        out = static_cast<T>(wide);
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<T>();
    } else {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }

  std::optional<std::string> text(const char* key) {
    std::optional<std::string> out;
    if (node_.contains(key)) {
      std::string s;
      read(key, s);
      out = s;
    }
    return out;
  }

  Reader child(const char* key) {
    static const json empty = json::object();
    const json* v = take(key);
    return Reader(v ? *v : empty, qualified(key));
  }

  void skip(const char* key) { take(key); }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + qualified(it.key()) + "'");
  }

 private:
  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[noreturn]] void fail(const std::string& key, const char* what) const {
    throw ConfigError("config key '" + qualified(key) + "' must be " + what);
  }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "gradient_ascent"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "gradient_ascent") return OptimizerKind::kGradientAscent;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or gradient_ascent)");
}

const char* direction_name(PplDirection d) { return d == PplDirection::kFavorLowPpl ? "favor_low" : "favor_high"; }

PplDirection parse_direction(const std::string& s) {
  if (s == "favor_low") return PplDirection::kFavorLowPpl;
  if (s == "favor_high") return PplDirection::kFavorHighPpl;
  throw ConfigError("unknown ppl direction '" + s + "' (expected favor_low or favor_high)");
}

const char* schedule_name(PositionSchedule s) { return s == PositionSchedule::kWindow ? "window" : "plateau"; }

PositionSchedule parse_schedule(const std::string& s) {
  if (s == "window") return PositionSchedule::kWindow;
  if (s == "plateau") return PositionSchedule::kPlateau;
  throw ConfigError("unknown position schedule '" + s + "' (expected window or plateau)");
}

void read_optimizer(Reader r, OptimizerConfig& o) {
  if (auto k = r.text("kind")) o.kind = parse_optimizer(*k);
  r.read("learning_rate", o.learning_rate);
  r.read("warmup_steps", o.warmup_steps);
  r.read("beta1", o.beta1);
  r.read("beta2", o.beta2);
  r.read("epsilon", o.epsilon);
  r.finish();
}

ojson write_optimizer(const OptimizerConfig& o) {
  ojson j;
  j["kind"] = optimizer_name(o.kind);
  j["learning_rate"] = o.learning_rate;
  j["warmup_steps"] = o.warmup_steps;
  j["beta1"] = o.beta1;
  j["beta2"] = o.beta2;
  j["epsilon"] = o.epsilon;
  return j;
}

void check(bool ok, const char* what) {
  if (!ok) throw ConfigError(std::string("invalid config: ") + what);
}

bool unit_interval(double x) { return x > 0.0 && x <= 1.0; }

}  // namespace

void validate(const ExperimentConfig& c) {
  check(c.steps >= 0, "steps must be nonnegative");
  check(c.threads >= 1, "threads must be positive");
  try {
    Task task(c.task);
    c.trainer.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  const auto& f = c.policy.features;
  check(f.dim >= 1, "policy.dim must be positive");
  check(f.context_width >= 0, "policy.context_width must be nonnegative");
  check(f.prompt_dim >= 1 && f.prompt_dim <= f.dim, "policy.prompt_dim must lie in [1, dim]");
  check(f.context_dim >= 1 && f.context_dim <= f.dim, "policy.context_dim must lie in [1, dim]");
  check(f.context_share > 0.0 && f.context_share < 1.0, "policy.context_share must lie in (0, 1)");
  check(f.prompt_identity_scale >= 0.0, "policy.prompt_identity_scale must be nonnegative");
  check(c.policy.temperature > 0.0 && std::isfinite(c.policy.temperature), "policy.temperature must be positive");
  check(c.policy.init_scale >= 0.0, "policy.init_scale must be nonnegative");
  const auto& w = c.policy.warm_start;
  check(w.steps >= 0, "warm_start.steps must be nonnegative");
  check(w.batch >= 1, "warm_start.batch must be positive");
  check(w.max_reasoning_prefix >= 0, "warm_start.max_reasoning_prefix must be nonnegative");
  check(w.optimizer.learning_rate >= 0.0, "warm_start learning rate must be nonnegative");
  check(unit_interval(c.sampling.top_p), "trainer.top_p must lie in (0, 1]");
  check(c.ppl.alpha >= 0.0 && std::isfinite(c.ppl.alpha), "shaping.ppl.alpha must be nonnegative");
  check(c.position.gamma >= 0.0 && std::isfinite(c.position.gamma), "shaping.position.gamma must be nonnegative");
  check(c.position.direction == 1 || c.position.direction == -1, "shaping.position.direction must be 1 or -1");
  check(c.position.duration >= 0, "shaping.position.duration must be nonnegative");
  const auto& m = c.metrics;
  check(m.bins >= 1, "metrics.bins must be positive");
  check(m.stage.window >= 1, "metrics.stage_window must be positive");
  check(m.stage.threshold > 0.0, "metrics.stage_threshold must be positive");
  check(m.stage.patience >= 1, "metrics.stage_patience must be positive");
  check(m.shift_threshold > 0.0, "metrics.shift_threshold must be positive");
  check(m.intervention_k >= 0, "metrics.intervention_k must be nonnegative");
  check(m.intervention_per_stratum >= 1, "metrics.intervention_per_stratum must be positive");
  check(m.dump_every >= 1, "metrics.dump_every must be positive");
  check(unit_interval(m.drop_fraction), "metrics.drop_fraction must lie in (0, 1]");
  check(unit_interval(m.top_shift_fraction), "metrics.top_shift_fraction must lie in (0, 1]");
  check(m.quality.window >= 1, "metrics.repetition_window must be positive");
  check(m.quality.repeats >= 2, "metrics.repetition_repeats must be at least 2");
}

ExperimentConfig parse_config(std::string_view json_text) {
  json root = json::parse(json_text, nullptr, false);
  if (root.is_discarded()) throw ConfigError("config is not valid JSON");
  ExperimentConfig c;
  Reader r(root, "");
  r.skip("version");
  r.read("seed", c.seed);
  r.read("steps", c.steps);
  r.read("output_dir", c.output_dir);
  r.read("threads", c.threads);
  {
    auto t = r.child("task");
    if (auto kind = t.text("kind")) {
      try {
        c.task.kind = parse_task_kind(*kind);
      } catch (const ContractViolation& e) {
        throw ConfigError(e.what());
      }
    }
    t.read("modulus", c.task.modulus);
    t.read("depth", c.task.depth);
    t.read("max_response_length", c.task.max_response_length);
    t.read("reasoning_tokens", c.task.reasoning_tokens);
    t.finish();
  }
  {
    auto p = r.child("policy");
    auto& f = c.policy.features;
    p.read("dim", f.dim);
    p.read("context_width", f.context_width);
    p.read("prompt_dim", f.prompt_dim);
    p.read("context_dim", f.context_dim);
    p.read("prompt_identity_scale", f.prompt_identity_scale);
    p.read("context_share", f.context_share);
    p.read("temperature", c.policy.temperature);
    p.read("init_scale", c.policy.init_scale);
    auto w = p.child("warm_start");
    w.read("steps", c.policy.warm_start.steps);
    w.read("batch", c.policy.warm_start.batch);
    w.read("max_reasoning_prefix", c.policy.warm_start.max_reasoning_prefix);
    read_optimizer(w.child("optimizer"), c.policy.warm_start.optimizer);
    w.finish();
    p.finish();
  }
  {
    auto t = r.child("trainer");
    t.read("clip_low", c.trainer.clip.low);
    t.read("clip_high", c.trainer.clip.high);
    t.read("kl_beta", c.trainer.kl_beta);
    t.read("batch_groups", c.trainer.batch_groups);
    t.read("mini_batch_groups", c.trainer.mini_batch_groups);
    t.read("epochs", c.trainer.epochs);
    t.read("group_size", c.trainer.group_size);
    t.read("top_p", c.sampling.top_p);
    read_optimizer(t.child("optimizer"), c.trainer.optimizer);
    t.finish();
  }
  {
    auto s = r.child("shaping");
    auto p = s.child("ppl");
    p.read("enabled", c.ppl.enabled);
    p.read("alpha", c.ppl.alpha);
    if (auto d = p.text("direction")) c.ppl.direction = parse_direction(*d);
    p.finish();
    auto q = s.child("position");
    q.read("enabled", c.position.enabled);
    q.read("gamma", c.position.gamma);
    q.read("direction", c.position.direction);
    q.read("scale", c.position.scale);
    q.read("shift", c.position.shift);
    if (auto sc = q.text("schedule")) c.position.schedule = parse_schedule(*sc);
    q.read("start", c.position.start);
    q.read("duration", c.position.duration);
    q.finish();
    s.finish();
  }
  {
    auto m = r.child("metrics");
    auto& o = c.metrics;
    m.read("bins", o.bins);
    m.read("stage_window", o.stage.window);
    m.read("stage_threshold", o.stage.threshold);
    m.read("stage_patience", o.stage.patience);
    m.read("shift_threshold", o.shift_threshold);
    m.read("intervention_k", o.intervention_k);
    m.read("intervention_per_stratum", o.intervention_per_stratum);
    m.read("dump_every", o.dump_every);
    m.read("drop_fraction", o.drop_fraction);
    m.read("top_shift_fraction", o.top_shift_fraction);
    m.read("repetition_window", o.quality.window);
    m.read("repetition_repeats", o.quality.repeats);
    m.read("lexicon", o.lexicon);
    m.finish();
  }
  r.finish();
  validate(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const RunError& e) {
    throw ConfigError(e.what());
  }
  ExperimentConfig c = parse_config(text);
  if (!c.metrics.lexicon.empty()) {
    fs::path lex(c.metrics.lexicon);
    if (lex.is_relative()) c.metrics.lexicon = (path.parent_path() / lex).lexically_normal().string();
  }
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  ojson j;
  j["version"] = kVersionTag;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;

  ojson task;
  task["kind"] = to_string(c.task.kind);
  task["modulus"] = c.task.modulus;
  task["depth"] = c.task.depth;
  task["max_response_length"] = c.task.max_response_length;
  task["reasoning_tokens"] = c.task.reasoning_tokens;
  j["task"] = task;

  const auto& f = c.policy.features;
  ojson policy;
  policy["dim"] = f.dim;
  policy["context_width"] = f.context_width;
  policy["prompt_dim"] = f.prompt_dim;
  policy["context_dim"] = f.context_dim;
  policy["prompt_identity_scale"] = f.prompt_identity_scale;
  policy["context_share"] = f.context_share;
  policy["temperature"] = c.policy.temperature;
  policy["init_scale"] = c.policy.init_scale;
  ojson warm;
  warm["steps"] = c.policy.warm_start.steps;
  warm["batch"] = c.policy.warm_start.batch;
  warm["max_reasoning_prefix"] = c.policy.warm_start.max_reasoning_prefix;
  warm["optimizer"] = write_optimizer(c.policy.warm_start.optimizer);
  policy["warm_start"] = warm;
  j["policy"] = policy;

  ojson trainer;
  trainer["clip_low"] = c.trainer.clip.low;
  trainer["clip_high"] = c.trainer.clip.high;
  trainer["kl_beta"] = c.trainer.kl_beta;
  trainer["batch_groups"] = c.trainer.batch_groups;
  trainer["mini_batch_groups"] = c.trainer.mini_batch_groups;
  trainer["epochs"] = c.trainer.epochs;
  trainer["group_size"] = c.trainer.group_size;
  trainer["top_p"] = c.sampling.top_p;
  trainer["optimizer"] = write_optimizer(c.trainer.optimizer);
  j["trainer"] = trainer;

  ojson ppl;
  ppl["enabled"] = c.ppl.enabled;
  ppl["alpha"] = c.ppl.alpha;
  ppl["direction"] = direction_name(c.ppl.direction);
  ojson pos;
  pos["enabled"] = c.position.enabled;
  pos["gamma"] = c.position.gamma;
  pos["direction"] = c.position.direction;
  pos["scale"] = c.position.scale;
  pos["shift"] = c.position.shift;
  pos["schedule"] = schedule_name(c.position.schedule);
  pos["start"] = c.position.start;
  pos["duration"] = c.position.duration;
  j["shaping"] = ojson{{"ppl", ppl}, {"position", pos}};

  const auto& m = c.metrics;
  ojson metrics;
  metrics["bins"] = m.bins;
  metrics["stage_window"] = m.stage.window;
  metrics["stage_threshold"] = m.stage.threshold;
  metrics["stage_patience"] = m.stage.patience;
  metrics["shift_threshold"] = m.shift_threshold;
  metrics["intervention_k"] = m.intervention_k;
  metrics["intervention_per_stratum"] = m.intervention_per_stratum;
  metrics["dump_every"] = m.dump_every;
  metrics["drop_fraction"] = m.drop_fraction;
  metrics["top_shift_fraction"] = m.top_shift_fraction;
  metrics["repetition_window"] = m.quality.window;
  metrics["repetition_repeats"] = m.quality.repeats;
  metrics["lexicon"] = m.lexicon;
  j["metrics"] = metrics;
  return j.dump(2) + "\n";
}

void save_config(const fs::path& path, const ExperimentConfig& config) { write_text(path, config_to_json(config)); }

AnalysisOptions analysis_options(const MetricOptions& m) {
  AnalysisOptions o;
  o.bins = m.bins;
  o.quality = m.quality;
  o.stage = m.stage;
  o.drop_fraction = m.drop_fraction;
  o.shift_threshold = m.shift_threshold;
  o.top_shift_fraction = m.top_shift_fraction;
  return o;
}

// ---------------------------------------------------------------------------

std::string metrics_line(const StepMetrics& m) {
  ojson j;
  j["schema"] = kMetricsSchema;
  j["step"] = m.step;
  j["mean_entropy"] = m.mean_entropy;
  j["entropy_pos"] = m.entropy_pos ? ojson(*m.entropy_pos) : ojson(nullptr);
  j["entropy_neg"] = m.entropy_neg ? ojson(*m.entropy_neg) : ojson(nullptr);
  j["accuracy"] = m.accuracy;
  j["mean_length"] = m.mean_length;
  j["grad_norm_mean"] = m.grad_norm_mean;
  j["grad_norm_max"] = m.grad_norm_max;
  j["small_shift_fraction"] = m.small_shift_fraction;
  j["stage"] = to_string(m.stage);
  j["active_shapers"] = m.active_shapers;
  return j.dump();
}

std::vector<StepMetrics> read_metrics_log(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<StepMetrics> out;
  std::string line;
  std::size_t lineno = 0;
  auto number = [](const json& j, const char* key) -> double {
    if (!j.contains(key) || !j[key].is_number()) throw std::invalid_argument(key);
    return j[key].get<double>();
  };
  auto maybe = [](const json& j, const char* key) -> std::optional<double> {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    if (!j[key].is_number()) throw std::invalid_argument(key);
    return j[key].get<double>();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw RunError(where + ": not a JSON object");
    StepMetrics m;
    try {
      if (!j.contains("schema") || j["schema"] != kMetricsSchema) throw std::invalid_argument("schema");
      if (!j.contains("step") || !j["step"].is_number_integer()) throw std::invalid_argument("step");
      m.step = j["step"].get<std::int64_t>();
      m.mean_entropy = number(j, "mean_entropy");
      m.entropy_pos = maybe(j, "entropy_pos");
      m.entropy_neg = maybe(j, "entropy_neg");
      m.accuracy = number(j, "accuracy");
      m.mean_length = number(j, "mean_length");
      m.grad_norm_mean = number(j, "grad_norm_mean");
      m.grad_norm_max = number(j, "grad_norm_max");
      m.small_shift_fraction = number(j, "small_shift_fraction");
      if (!j.contains("stage") || !j["stage"].is_string()) throw std::invalid_argument("stage");
      const auto stage = j["stage"].get<std::string>();
      if (stage != "rising" && stage != "plateau") throw std::invalid_argument("stage");
      m.stage = stage == "plateau" ? Stage::kPlateau : Stage::kRising;
      if (!j.contains("active_shapers") || !j["active_shapers"].is_array()) throw std::invalid_argument("active_shapers");
      for (const auto& s : j["active_shapers"]) {
        if (!s.is_string()) throw std::invalid_argument("active_shapers");
        m.active_shapers.push_back(s.get<std::string>());
      }
    } catch (const std::invalid_argument& e) {
      throw RunError(where + ": missing or malformed field '" + e.what() + "'");
    }
    if (!out.empty() && m.step <= out.back().step) throw RunError(where + ": step indices must increase");
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'R', 'L', 'V', 'R', 'C', 'K', 'P', 'T'};

void put_u64(std::string& out, std::uint64_t v, int bytes = 8) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  std::uint64_t u64(int bytes = 8) {
    if (pos_ + static_cast<std::size_t>(bytes) > data_.size()) throw RunError("checkpoint is truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view bytes(std::size_t n) {
    if (pos_ + n > data_.size()) throw RunError("checkpoint is truncated");
    std::string_view v(data_.data() + pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u64(out, kCheckpointVersion, 4);
  put_u64(out, static_cast<std::uint64_t>(ckpt.step));
  put_u64(out, ckpt.feature_seed);
  put_u64(out, ckpt.params.vocab_size());
  put_u64(out, ckpt.params.dim());
  put_u64(out, std::bit_cast<std::uint64_t>(ckpt.params.temperature));
  for (double w : ckpt.params.weights.values()) put_u64(out, std::bit_cast<std::uint64_t>(w));
  write_text(path, out);
}

Checkpoint read_checkpoint(const fs::path& path) {
  ByteReader in(read_text(path));
  if (in.bytes(sizeof kMagic) != std::string_view(kMagic, sizeof kMagic))
    throw RunError(path.string() + " is not a checkpoint");
  const auto version = in.u64(4);
  if (version != kCheckpointVersion)
    throw RunError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.step = static_cast<std::int64_t>(in.u64());
  c.feature_seed = in.u64();
  const auto rows = in.u64();
  const auto cols = in.u64();
  c.params.temperature = in.f64();
  if (rows == 0 || cols == 0 || in.remaining() / 8 / rows / cols != 1 || in.remaining() != rows * cols * 8)
    throw RunError("checkpoint payload does not match its header");
  c.params.weights = Matrix(rows, cols);
  for (double& w : c.params.weights.values()) w = in.f64();
  return c;
}

std::string checkpoint_text(const Checkpoint& c) {
  std::ostringstream out;
  out << "version " << kCheckpointVersion << "\nstep " << c.step << "\nfeature_seed " << c.feature_seed
      << "\nvocab " << c.params.vocab_size() << "\ndim " << c.params.dim() << "\ntemperature "
      << format_number(c.params.temperature) << '\n';
  for (std::size_t r = 0; r < c.params.vocab_size(); ++r) {
    const auto row = c.params.weights.row(r);
    for (std::size_t k = 0; k < row.size(); ++k) out << (k ? " " : "") << format_number(row[k]);
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Commands

Setup make_setup(const ExperimentConfig& config) {
  Task task(config.task);
  const auto& vocab = task.vocabulary();
  FeatureMap features(vocab, task.prompt_length(), config.policy.features, config.seed);
  Rng init_rng = substream(config.seed, {kInitStream});
  Policy policy{std::move(features),
                init_parameters(vocab.size(), static_cast<std::size_t>(config.policy.features.dim),
                                config.policy.temperature, config.policy.init_scale, init_rng)};
  Rng warm_rng = substream(config.seed, {kWarmStartStream});
  const double ll = warm_start(policy, task, config.policy.warm_start, warm_rng);
  return Setup{std::move(task), std::move(policy), ll};
}

Policy restore_policy(const ExperimentConfig& config, const Checkpoint& checkpoint) {
  Task task(config.task);
  if (checkpoint.params.vocab_size() != task.vocabulary().size() ||
      checkpoint.params.dim() != static_cast<std::size_t>(config.policy.features.dim))
    throw RunError("checkpoint shape does not match the run config");
  FeatureMap features(task.vocabulary(), task.prompt_length(), config.policy.features, checkpoint.feature_seed);
  return Policy{std::move(features), checkpoint.params};
}

namespace {

TokenLexicon run_lexicon(const ExperimentConfig& config, const Task& task) {
  if (config.metrics.lexicon.empty()) return builtin_lexicon(task);
  try {
    return load_lexicon(config.metrics.lexicon, task.vocabulary());
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("lexicon: ") + e.what());
  }
}

StepMetrics batch_metrics(std::int64_t step, std::span<const RolloutGroup> batch) {
  StepMetrics m;
  m.step = step;
  double entropy = 0.0, length = 0.0, correct = 0.0;
  std::size_t tokens = 0, responses = 0;
  for (const auto& g : batch)
    for (const auto& r : g.responses) {
      ++responses;
      length += static_cast<double>(r.size());
      if (r.reward > 0.0) correct += 1.0;
      for (const auto& t : r.tokens) {
        entropy += t.entropy;
        ++tokens;
      }
    }
  if (tokens) m.mean_entropy = entropy / static_cast<double>(tokens);
  if (responses) {
    m.accuracy = correct / static_cast<double>(responses);
    m.mean_length = length / static_cast<double>(responses);
  }
  const auto split = entropy_split_pos_neg(batch);
  m.entropy_pos = split.positive;
  m.entropy_neg = split.negative;
  return m;
}

void write_shifts(std::ostream& out, std::span<const ShiftRecord> shifts) {
  for (const auto& s : shifts) {
    ojson j;
    j["step"] = s.step;
    j["group"] = s.group;
    j["response"] = s.response;
    j["position"] = s.position;
    j["token"] = s.token;
    j["delta"] = s.delta;
    j["ppl"] = s.ppl;
    j["rel_position"] = s.rel_position;
    j["entropy"] = s.entropy;
    j["reward"] = s.reward;
    out << j.dump() << '\n';
  }
}

}  // namespace

TrainResult run_train(const ExperimentConfig& config, const fs::path& run_dir, std::ostream* progress) {
  validate(config);
  fs::create_directories(run_dir);
  save_config(run_dir / run_files::kConfig, config);

  const auto started = std::chrono::steady_clock::now();
  Setup setup = make_setup(config);
  const Task& task = setup.task;
  Policy& policy = setup.policy;
  write_text(run_dir / run_files::kLexicon, lexicon_to_json(run_lexicon(config, task)) + "\n");
  write_checkpoint(run_dir / run_files::kCheckpointInit, {0, config.seed, policy.params});

  auto metrics_log = open_log(run_dir / run_files::kMetrics);
  auto timing_log = open_log(run_dir / run_files::kTiming);
  auto rollout_log = open_log(run_dir / run_files::kRollouts);
  auto shift_log = open_log(run_dir / run_files::kShifts);
  auto seconds_since = [](auto t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  timing_log << ojson{{"phase", "warm_start"}, {"seconds", seconds_since(started)}}.dump() << '\n';
  timing_log.flush();
  if (progress)
    *progress << "warm start: mean log-likelihood " << format_number(setup.warm_start_loglik) << '\n';

  TrainResult result;
  result.warm_start_loglik = setup.warm_start_loglik;
  const auto& tc = config.trainer;
  Optimizer optimizer(tc.optimizer, policy.params.vocab_size(), policy.params.dim());
  StageDetector detector(config.metrics.stage);
  std::optional<PolicyParameters> reference;
  if (tc.kl_beta > 0.0) reference = policy.params;
  const auto groups = static_cast<std::uint64_t>(tc.batch_groups);

  for (std::int64_t step = 0; step < config.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Instance> instances;
    instances.reserve(groups);
    for (std::uint64_t i = 0; i < groups; ++i)
      instances.push_back(task.instance(config.seed, static_cast<std::uint64_t>(step) * groups + i));
    const auto batch = collect_batch(policy, task, instances, tc.group_size, config.sampling, config.seed,
                                     static_cast<std::uint64_t>(step), config.threads);

    StepMetrics m = batch_metrics(step, batch);
    m.stage = detector.stage();
    const auto shapers = shaping_schedule(step, m.stage, config.ppl, config.position);
    m.active_shapers = shapers.effective_names();
    const bool dump = step % config.metrics.dump_every == 0 || step + 1 == config.steps;
    if (dump) {
      write_rollout_dump(rollout_log, step, batch);
      rollout_log.flush();
    }

    UpdateStats stats;
    try {
      stats = train_step(batch, policy, optimizer, tc, shapers, reference ? &*reference : nullptr,
                         config.metrics.shift_threshold, step);
    } catch (...) {
      metrics_log.flush();
      timing_log.flush();
      shift_log.flush();
      throw;
    }
    m.grad_norm_mean = stats.grad_norm_mean;
    m.grad_norm_max = stats.grad_norm_max;
    m.small_shift_fraction = stats.small_shift_fraction;
    detector.observe(m.mean_entropy);
    if (dump) {
      write_shifts(shift_log, stats.shifts);
      shift_log.flush();
    }
    m.wall_seconds = seconds_since(t0);
    metrics_log << metrics_line(m) << '\n';
    metrics_log.flush();
    timing_log << ojson{{"step", step}, {"seconds", m.wall_seconds}}.dump() << '\n';
    timing_log.flush();
    if (progress && (step % 25 == 0 || step + 1 == config.steps))
      *progress << "step " << step << "  accuracy " << format_number(m.accuracy) << "  entropy "
                << format_number(m.mean_entropy) << "  stage " << to_string(m.stage) << '\n';
    result.metrics.push_back(std::move(m));
  }

  const Checkpoint final_ckpt{config.steps, config.seed, policy.params};
  write_checkpoint(run_dir / run_files::kCheckpointFinal, final_ckpt);
  write_text(run_dir / run_files::kCheckpointFinalText, checkpoint_text(final_ckpt));
  return result;
}

ExperimentConfig load_run_config(const fs::path& run_dir) {
  const auto path = run_dir / run_files::kConfig;
  if (!fs::exists(path)) throw RunError("no " + std::string(run_files::kConfig) + " in " + run_dir.string());
  return parse_config(read_text(path));
}

AnalysisReport analyze_run(const fs::path& run_dir) {
  const auto config = load_run_config(run_dir);
  Task task(config.task);
  const auto& vocab = task.vocabulary();
  const auto lexicon_path = run_dir / run_files::kLexicon;
  const TokenLexicon lexicon =
      fs::exists(lexicon_path) ? parse_lexicon(read_text(lexicon_path), vocab) : run_lexicon(config, task);
  const auto metrics = read_text(run_dir / run_files::kMetrics);
  const auto rollouts = read_text(run_dir / run_files::kRollouts);
  const auto shifts = read_text(run_dir / run_files::kShifts);
  return summarize_run(metrics, rollouts, shifts, lexicon, vocab, analysis_options(config.metrics));
}

AnalysisReport run_analyze(const fs::path& run_dir, const fs::path& out_dir) {
  auto report = analyze_run(run_dir);
  Task task(load_run_config(run_dir).task);
  const auto& vocab = task.vocabulary();
  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", report_to_json(report, vocab) + "\n");
  write_text(out_dir / "report.csv", report_series_csv(report));
  write_text(out_dir / "report.txt", report_text(report, vocab));
  return report;
}

// ---------------------------------------------------------------------------
// Intervention study

namespace {

struct DumpedResponse {
  std::int64_t step = 0;
  std::size_t group = 0;
  std::size_t response = 0;
  std::uint64_t instance = 0;
  std::vector<TokenId> prompt;
  std::vector<TokenId> tokens;
  double ppl = 1.0;
};

std::vector<DumpedResponse> read_rollouts(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<DumpedResponse> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    DumpedResponse d;
    try {
      if (j.is_discarded()) throw std::invalid_argument("not JSON");
      d.step = j.at("step").get<std::int64_t>();
      d.group = j.at("group").get<std::size_t>();
      d.response = j.at("response").get<std::size_t>();
      d.instance = j.at("instance").get<std::uint64_t>();
      d.prompt = j.at("prompt").get<std::vector<TokenId>>();
      d.tokens = j.at("tokens").get<std::vector<TokenId>>();
      d.ppl = j.at("ppl").get<double>();
    } catch (const std::exception&) {
      throw RunError(path.string() + ":" + std::to_string(lineno) + ": malformed rollout record");
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace

InterventionSummary run_intervene(const fs::path& run_dir, const InterventionSpec& spec, const fs::path& out_dir) {
  if (spec.per_stratum < 1) throw RunError("per-stratum count must be positive");
  if (spec.k < 0) throw RunError("k must be nonnegative");
  if (spec.quintiles < 1) throw RunError("stratum count must be positive");
  const auto config = load_run_config(run_dir);
  fs::path ckpt_path = spec.checkpoint == "final" ? run_dir / run_files::kCheckpointFinal
                       : spec.checkpoint == "init" ? run_dir / run_files::kCheckpointInit
                                                   : fs::path(spec.checkpoint);
  const Policy policy = restore_policy(config, read_checkpoint(ckpt_path));
  Task task(config.task);
  const auto& vocab = task.vocabulary();

  auto all = read_rollouts(run_dir / run_files::kRollouts);
  if (all.empty()) throw RunError("rollout dump is empty");
  InterventionSummary summary;
  if (spec.step) {
    summary.step = *spec.step;
  } else {
    summary.step = all.front().step;
    for (const auto& d : all) summary.step = std::max(summary.step, d.step);
  }
  std::vector<DumpedResponse> responses;
  for (auto& d : all)
    if (d.step == summary.step) responses.push_back(std::move(d));
  if (responses.empty()) throw RunError("no rollouts dumped at step " + std::to_string(summary.step));

  // PPL quintile by rank within the step (ties keep dump order)
  const int q = spec.quintiles;
  std::vector<std::size_t> order(responses.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return responses[a].ppl < responses[b].ppl; });
  std::vector<int> ppl_bin(responses.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank)
    ppl_bin[order[rank]] = static_cast<int>(rank * static_cast<std::size_t>(q) / order.size());

  struct Pair {
    std::size_t response;
    int position;
    double rel;
  };
  std::vector<std::vector<Pair>> strata(static_cast<std::size_t>(q * q));
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const auto n = responses[i].tokens.size();
    for (std::size_t t = 0; t < n; ++t) {
      const double l = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 0.0;
      const int pos_bin = std::min(q - 1, static_cast<int>(l * q));
      strata[static_cast<std::size_t>(ppl_bin[i] * q + pos_bin)].push_back({i, static_cast<int>(t), l});
    }
  }

  const std::uint64_t seed = spec.seed.value_or(config.seed);
  Rng pick = substream(seed, {kInterveneStream, static_cast<std::uint64_t>(summary.step)});
  fs::create_directories(out_dir);
  auto lines = open_log(out_dir / "interventions.jsonl");
  std::map<std::uint64_t, Instance> instances;
  for (int pb = 0; pb < q; ++pb)
    for (int lb = 0; lb < q; ++lb) {
      auto& pool = strata[static_cast<std::size_t>(pb * q + lb)];
      StratumSummary s;
      s.ppl_quintile = pb;
      s.position_quintile = lb;
      s.available = pool.size();
      // partial Fisher-Yates: the first `take` entries become the sample
      const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(spec.per_stratum));
      for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform01(pick) * static_cast<double>(pool.size() - i));
        std::swap(pool[i], pool[std::min(j, pool.size() - 1)]);
      }
      double sum = 0.0, abs_sum = 0.0;
      for (std::size_t i = 0; i < take; ++i) {
        const auto& p = pool[i];
        const auto& d = responses[p.response];
        auto it = instances.find(d.instance);
        if (it == instances.end()) it = instances.emplace(d.instance, task.instance(config.seed, d.instance)).first;
        if (it->second.prompt != d.prompt)
          throw RunError("rollout instance " + std::to_string(d.instance) + " does not match the run's task stream");
        Rng rng = substream(seed, {kInterveneStream, static_cast<std::uint64_t>(summary.step), d.group, d.response,
                                   static_cast<std::uint64_t>(p.position)});
        auto r = intervene(policy, task, it->second, d.tokens, p.position, spec.k, rng, config.sampling.top_p);
        sum += r.impact;
        abs_sum += std::abs(r.impact);
        ojson j;
        j["step"] = summary.step;
        j["ppl_quintile"] = pb;
        j["position_quintile"] = lb;
        j["group"] = d.group;
        j["response"] = d.response;
        j["position"] = p.position;
        j["rel_position"] = p.rel;
        j["ppl"] = d.ppl;
        j["original"] = vocab.text(r.original);
        j["substitute"] = vocab.text(r.substitute);
        j["impact"] = r.impact;
        j["k"] = r.k;
        j["original_accuracy"] = r.original_accuracy;
        j["substitute_accuracy"] = r.substitute_accuracy;
        lines << j.dump() << '\n';
        summary.results.push_back(r);
      }
      s.sampled = take;
      if (take) {
        s.mean_impact = sum / static_cast<double>(take);
        s.mean_abs_impact = abs_sum / static_cast<double>(take);
      } else {
        ++summary.empty_strata;
      }
      summary.strata.push_back(s);
    }
  lines.flush();

  ojson j;
  j["version"] = kVersionTag;
  j["step"] = summary.step;
  j["checkpoint"] = spec.checkpoint;
  j["k"] = spec.k;
  j["per_stratum"] = spec.per_stratum;
  j["quintiles"] = q;
  j["interventions"] = summary.results.size();
  j["empty_strata"] = summary.empty_strata;
  ojson rows = ojson::array();
  for (const auto& s : summary.strata)
    rows.push_back({{"ppl_quintile", s.ppl_quintile},
                    {"position_quintile", s.position_quintile},
                    {"available", s.available},
                    {"sampled", s.sampled},
                    {"mean_impact", s.mean_impact ? ojson(*s.mean_impact) : ojson(nullptr)},
                    {"mean_abs_impact", s.mean_abs_impact ? ojson(*s.mean_abs_impact) : ojson(nullptr)}});
  j["strata"] = rows;
  write_text(out_dir / "intervention_summary.json", j.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Comparison

Comparison compare_metrics(std::span<const StepMetrics> baseline, std::span<const StepMetrics> shaped,
                           std::size_t final_window) {
  if (baseline.size() != shaped.size())
    throw RunError("runs are misaligned: baseline logs " + std::to_string(baseline.size()) + " steps, shaped logs " +
                   std::to_string(shaped.size()));
  Comparison c;
  for (std::size_t i = 0; i < baseline.size(); ++i) {
    if (baseline[i].step != shaped[i].step)
      throw RunError("runs are misaligned at line " + std::to_string(i + 1) + ": step " +
                     std::to_string(baseline[i].step) + " vs " + std::to_string(shaped[i].step));
    c.steps.push_back(baseline[i].step);
    c.baseline_accuracy.push_back(baseline[i].accuracy);
    c.shaped_accuracy.push_back(shaped[i].accuracy);
    c.baseline_entropy.push_back(baseline[i].mean_entropy);
    c.shaped_entropy.push_back(shaped[i].mean_entropy);
    c.accuracy_delta.push_back(shaped[i].accuracy - baseline[i].accuracy);
    c.entropy_delta.push_back(shaped[i].mean_entropy - baseline[i].mean_entropy);
  }
  c.final_window = std::min(final_window, c.steps.size());
  auto tail_mean = [&](const std::vector<double>& v) {
    if (c.final_window == 0) return 0.0;
    double s = 0.0;
    for (std::size_t i = v.size() - c.final_window; i < v.size(); ++i) s += v[i];
    return s / static_cast<double>(c.final_window);
  };
  c.baseline_final_accuracy = tail_mean(c.baseline_accuracy);
  c.shaped_final_accuracy = tail_mean(c.shaped_accuracy);
  c.baseline_final_entropy = tail_mean(c.baseline_entropy);
  c.shaped_final_entropy = tail_mean(c.shaped_entropy);
  return c;
}

Comparison run_compare(const fs::path& baseline_dir, const fs::path& shaped_dir, const fs::path& out_dir) {
  const auto base_path = baseline_dir / run_files::kMetrics;
  const auto shaped_path = shaped_dir / run_files::kMetrics;
  const auto base = read_metrics_log(base_path);
  const auto shaped = read_metrics_log(shaped_path);
  Comparison c = compare_metrics(base, shaped);
  c.metrics_identical = read_text(base_path) == read_text(shaped_path);

  double max_acc = 0.0, max_ent = 0.0;
  for (std::size_t i = 0; i < c.steps.size(); ++i) {
    max_acc = std::max(max_acc, std::abs(c.accuracy_delta[i]));
    max_ent = std::max(max_ent, std::abs(c.entropy_delta[i]));
  }
  ojson j;
  j["version"] = kVersionTag;
  j["baseline"] = baseline_dir.string();
  j["shaped"] = shaped_dir.string();
  j["steps"] = c.steps.size();
  j["metrics_identical"] = c.metrics_identical;
  j["max_abs_accuracy_delta"] = max_acc;
  j["max_abs_entropy_delta"] = max_ent;
  j["final_window"] = c.final_window;
  j["final_window_means"] = {{"baseline_accuracy", c.baseline_final_accuracy},
                             {"shaped_accuracy", c.shaped_final_accuracy},
                             {"accuracy_delta", c.shaped_final_accuracy - c.baseline_final_accuracy},
                             {"baseline_entropy", c.baseline_final_entropy},
                             {"shaped_entropy", c.shaped_final_entropy},
                             {"entropy_delta", c.shaped_final_entropy - c.baseline_final_entropy}};
  j["series"] = {{"step", c.steps},
                 {"accuracy_delta", c.accuracy_delta},
                 {"entropy_delta", c.entropy_delta}};
  fs::create_directories(out_dir);
  write_text(out_dir / "comparison.json", j.dump(2) + "\n");

  std::ostringstream csv;
  csv << "step,baseline_accuracy,shaped_accuracy,accuracy_delta,baseline_entropy,shaped_entropy,entropy_delta\n";
  for (std::size_t i = 0; i < c.steps.size(); ++i)
    csv << c.steps[i] << ',' << format_number(c.baseline_accuracy[i]) << ',' << format_number(c.shaped_accuracy[i])
        << ',' << format_number(c.accuracy_delta[i]) << ',' << format_number(c.baseline_entropy[i]) << ','
        << format_number(c.shaped_entropy[i]) << ',' << format_number(c.entropy_delta[i]) << '\n';
  write_text(out_dir / "comparison.csv", csv.str());
  return c;
}

fs::path resolve_output_dir(const ExperimentConfig& config, const char* root) {
  fs::path out(config.output_dir);
  if (root && *root && out.is_relative()) return fs::path(root) / out;
  return out;
}

}  // namespace rlvr
