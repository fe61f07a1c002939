#include "qfd/trainer.hpp"

#include <openssl/sha.h>
#include <spdlog/spdlog.h>
#include <zlib.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace qfd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// Config

double default_eta_for(const std::string& env_name) {
  const auto env = make_env(env_name);
  return env->spec().action_dim > 6 ? 0.01 : 1.0;
}

double RunConfig::resolved_eta() const { return eta ? *eta : default_eta_for(env); }

double RunConfig::resolved_target_entropy(std::size_t action_dim) const {
  return target_entropy ? *target_entropy : -static_cast<double>(action_dim);
}

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  try {
    make_env(env);
    activation_from_string(actor_activation);
    activation_from_string(critic_activation);
  } catch (const std::exception& e) {
    fail(e.what());
  }
  if (diffusion_steps < 1) fail("diffusion_steps must be >= 1");
  if (!(b_max > b_min) || !(b_min > 0.0)) fail("need 0 < b_min < b_max");
  if (actor_hidden.empty() || critic_hidden.empty()) fail("hidden layer lists must be non-empty");
  for (auto w : actor_hidden) if (w == 0) fail("actor_hidden widths must be >= 1");
  for (auto w : critic_hidden) if (w == 0) fail("critic_hidden widths must be >= 1");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) fail("time_embed_dim must be a positive even number");
  if (eta && *eta < 0.0) fail("eta must be >= 0");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must lie in [0, 1]");
  if (!(rho > 0.0 && rho <= 1.0)) fail("rho must lie in (0, 1]");
  if (!(lr_actor > 0.0) || !(lr_critic > 0.0)) fail("learning rates must be > 0");
  if (policy_delay < 1) fail("policy_delay must be >= 1");
  if (!(noise_scale >= 0.0)) fail("noise_scale must be >= 0");
  if (!(alpha_init > 0.0)) fail("alpha_init must be > 0");
  if (alpha_update_period < 1) fail("alpha_update_period must be >= 1");
  if (gmm_components < 1 || gmm_action_samples < gmm_components) fail("need 1 <= gmm_components <= gmm_action_samples");
  if (entropy_mc_samples < 1) fail("entropy_mc_samples must be >= 1");
  if (buffer_capacity == 0) fail("buffer_capacity must be >= 1");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (total_steps < 0) fail("total_steps must be >= 0");
  if (eval_every < 1 || eval_episodes < 1) fail("eval_every and eval_episodes must be >= 1");
}

std::string config_to_json(const RunConfig& config) {
  RunConfig resolved = config;
  resolved.eta = config.resolved_eta();
  resolved.target_entropy = config.resolved_target_entropy(make_env(config.env)->spec().action_dim);
  nlohmann::ordered_json j;
  visit_config_fields(resolved, [&](const char* key, const auto& value) {
    if constexpr (std::is_same_v<std::decay_t<decltype(value)>, std::optional<double>>) {
      j[key] = value ? nlohmann::ordered_json(*value) : nlohmann::ordered_json(nullptr);
    } else {
      j[key] = value;
    }
  });
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Replay

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::size_t state_dim, std::size_t action_dim)
    : capacity_(capacity), state_dim_(state_dim), action_dim_(action_dim) {
  if (capacity == 0) throw std::invalid_argument("replay capacity must be >= 1");
  const auto cap = static_cast<Eigen::Index>(capacity);
  s_.resize(cap, static_cast<Eigen::Index>(state_dim));
  s2_.resize(cap, static_cast<Eigen::Index>(state_dim));
  a_.resize(cap, static_cast<Eigen::Index>(action_dim));
  r_.resize(cap);
  done_.resize(cap);
}

void ReplayBuffer::push(const Transition& t) {
  if (static_cast<std::size_t>(t.s.size()) != state_dim_ || static_cast<std::size_t>(t.s2.size()) != state_dim_ ||
      static_cast<std::size_t>(t.a.size()) != action_dim_) {
    throw std::invalid_argument("transition shape does not match the buffer");
  }
  if (!std::isfinite(t.r)) throw std::invalid_argument("transition reward is not finite");
  if (t.a.cwiseAbs().maxCoeff() > 1.0) throw std::invalid_argument("transition action outside [-1, 1]");
  const auto i = static_cast<Eigen::Index>(head_);
  s_.row(i) = t.s.transpose();
  a_.row(i) = t.a.transpose();
  s2_.row(i) = t.s2.transpose();
  r_(i) = t.r;
  done_(i) = t.done ? 1.0 : 0.0;
  head_ = (head_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
  ++pushed_;
}

Transition ReplayBuffer::at(std::size_t i) const {
  if (i >= size_) throw std::out_of_range("replay index " + std::to_string(i) + " >= size " + std::to_string(size_));
  const auto k = static_cast<Eigen::Index>(i);
  return {s_.row(k).transpose(), a_.row(k).transpose(), r_(k), s2_.row(k).transpose(), done_(k) != 0.0};
}

Batch ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  if (size_ == 0) throw std::logic_error("sampling from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, size_ - 1);
  Batch b;
  const auto rows = static_cast<Eigen::Index>(n);
  b.s.resize(rows, s_.cols());
  b.a.resize(rows, a_.cols());
  b.s2.resize(rows, s2_.cols());
  b.r.resize(rows, 1);
  b.done.resize(rows, 1);
  b.indices.resize(n);
  for (Eigen::Index j = 0; j < rows; ++j) {
    const std::size_t i = pick(rng);
    const auto k = static_cast<Eigen::Index>(i);
    b.indices[static_cast<std::size_t>(j)] = i;
    b.s.row(j) = s_.row(k);
    b.a.row(j) = a_.row(k);
    b.s2.row(j) = s2_.row(k);
    b.r(j, 0) = r_(k);
    b.done(j, 0) = done_(k);
  }
  return b;
}

long warmup(Env& env, ReplayBuffer& buffer, long n, double reward_scale, Rng& env_rng, Rng& action_rng) {
  if (n <= 0) return 0;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto adim = static_cast<Eigen::Index>(env.spec().action_dim);
  Vec s = env.reset(env_rng);
  for (long i = 0; i < n; ++i) {
    Vec a(adim);
    for (Eigen::Index k = 0; k < adim; ++k) a(k) = u(action_rng);
    StepResult r = env.step(a);
    buffer.push({s, a, reward_scale * r.reward, r.next_state, r.done});
    s = (r.done || r.truncated) ? env.reset(env_rng) : r.next_state;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(const DiffusionPolicy& policy, const ParamStore& params, const Env& env, int n_episodes,
                    std::uint64_t seed) {
  if (n_episodes < 1) throw std::invalid_argument("evaluate needs at least one episode");
  Rng env_rng = make_stream(seed, Stream::Eval, 0);
  Rng act_rng = make_stream(seed, Stream::Eval, 1);
  const auto n = static_cast<std::size_t>(n_episodes);
  std::vector<std::unique_ptr<Env>> envs;
  std::vector<Vec> states;
  EvalResult out;
  out.trajectories.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    envs.push_back(env.clone());
    states.push_back(envs.back()->reset(env_rng));
    out.trajectories[i].states.push_back(states.back());
  }
  std::vector<bool> active(n, true);
  const auto sdim = static_cast<Eigen::Index>(env.spec().state_dim);
  for (;;) {
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < n; ++i) if (active[i]) live.push_back(i);
    if (live.empty()) break;
    Mat s(static_cast<Eigen::Index>(live.size()), sdim);
    for (std::size_t j = 0; j < live.size(); ++j) s.row(static_cast<Eigen::Index>(j)) = states[live[j]].transpose();
    const Mat a = sample_action(policy, params, s, act_rng).a0;
    for (std::size_t j = 0; j < live.size(); ++j) {
      const std::size_t i = live[j];
      const Vec ai = a.row(static_cast<Eigen::Index>(j)).transpose();
      StepResult r = envs[i]->step(ai);
      Trajectory& tr = out.trajectories[i];
      tr.actions.push_back(ai);
      tr.rewards.push_back(r.reward);
      tr.states.push_back(r.next_state);
      tr.episode_return += r.reward;
      states[i] = r.next_state;
      if (r.done) {
        tr.done = true;
        tr.goal = r.info;
      }
      if (r.done || r.truncated) active[i] = false;
    }
  }
  double sum = 0.0;
  for (const auto& t : out.trajectories) sum += t.episode_return;
  out.tar_mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const auto& t : out.trajectories) sq += (t.episode_return - out.tar_mean) * (t.episode_return - out.tar_mean);
  out.tar_std = std::sqrt(sq / static_cast<double>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'D', 'C', 'R', '2'};

template <class T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

void put_array(std::string& buf, const std::string& name, const Array& a) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
  buf.append(name);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(a.rank()));
  for (auto d : a.shape()) put<std::uint64_t>(buf, d);
  for (double x : a.data()) put<double>(buf, x);
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) {
    if (n > end_ - pos_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& buf, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(n)));
}

}  // namespace

void checkpoint_save(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string buf(kMagic, 4);
  put<std::uint16_t>(buf, kCheckpointVersion);
  for (const auto& [name, a] : ckpt.params.all()) put_array(buf, name, a);
  const EntropyState& e = ckpt.entropy;
  put_array(buf, "entropy/alpha", Array::scalar(e.alpha));
  put_array(buf, "entropy/target_entropy", Array::scalar(e.target_entropy));
  put_array(buf, "entropy/last_estimate", Array::scalar(e.last_estimate));
  put_array(buf, "entropy/update_period", Array::scalar(static_cast<double>(e.update_period)));
  put_array(buf, "entropy/alpha_lr", Array::scalar(e.alpha_lr));
  put_array(buf, "entropy/alpha_min", Array::scalar(e.alpha_min));
  put_array(buf, "entropy/alpha_max", Array::scalar(e.alpha_max));
  const DiffusionSchedule& s = ckpt.schedule;
  put_array(buf, "schedule/b_min", Array::scalar(s.b_min()));
  put_array(buf, "schedule/b_max", Array::scalar(s.b_max()));
  put_array(buf, "schedule/alphas", Array({s.alphas().size()}, s.alphas()));
  put_array(buf, "schedule/fit", Array({2}, std::vector<double>{s.fit().c, s.fit().d}));
  put<std::uint32_t>(buf, crc_of(buf, buf.size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 + 2 + 4) throw CheckpointError("checkpoint truncated: only " + std::to_string(buf.size()) + " bytes");
  if (buf.compare(0, 4, std::string(kMagic, 4)) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  std::uint16_t version;
  std::memcpy(&version, buf.data() + 4, 2);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body_end = buf.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body_end, 4);
  if (stored != crc_of(buf, body_end)) throw CheckpointError("checkpoint CRC mismatch (truncated or corrupted)");

  Reader r(buf, body_end);
  r.bytes(6);
  std::map<std::string, Array> records;
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.bytes(name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("record '" + name + "' has implausible rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>();
      count *= d;
    }
    if (count > (body_end - r.pos()) / sizeof(double)) throw CheckpointError("checkpoint truncated in '" + name + "'");
    std::vector<double> data(count);
    for (auto& x : data) x = r.get<double>();
    records.emplace(std::move(name), Array(std::move(shape), std::move(data)));
  }

  auto take = [&](const std::string& name) -> Array {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("checkpoint is missing '" + name + "'");
    Array a = std::move(it->second);
    records.erase(it);
    return a;
  };
  Checkpoint ck;
  ck.entropy.alpha = take("entropy/alpha")[0];
  ck.entropy.target_entropy = take("entropy/target_entropy")[0];
  ck.entropy.last_estimate = take("entropy/last_estimate")[0];
  ck.entropy.update_period = static_cast<long>(take("entropy/update_period")[0]);
  ck.entropy.alpha_lr = take("entropy/alpha_lr")[0];
  ck.entropy.alpha_min = take("entropy/alpha_min")[0];
  ck.entropy.alpha_max = take("entropy/alpha_max")[0];
  const double b_min = take("schedule/b_min")[0];
  const double b_max = take("schedule/b_max")[0];
  const Array alphas = take("schedule/alphas");
  const Array fit = take("schedule/fit");
  if (fit.size() != 2) throw CheckpointError("schedule/fit must hold two values");
  ck.schedule = DiffusionSchedule::from_parts(b_min, b_max, alphas.data(), TimeWeightFit{fit[0], fit[1]});
  for (auto& [name, a] : records) ck.params.set(name, std::move(a));
  return ck;
}

// ---------------------------------------------------------------------------
// Metrics

std::string MetricsRow::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["env"] = env;
  j["tar_mean"] = tar_mean;
  j["tar_std"] = tar_std;
  j["loss_q"] = loss_q;
  j["loss_g"] = loss_g;
  j["loss_critic"] = loss_critic;
  j["alpha"] = alpha;
  j["entropy_est"] = entropy_est;
  if (coverage) j["coverage"] = *coverage;
  if (uniformity) j["uniformity"] = *uniformity;
  j["wall_ms"] = wall_ms ? nlohmann::ordered_json(*wall_ms) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

DiffusionPolicy make_policy(const RunConfig& c, const EnvSpec& spec) {
  return DiffusionPolicy{ScoreNet(spec.state_dim, spec.action_dim, c.actor_hidden,
                                  activation_from_string(c.actor_activation), c.time_embed_dim),
                         DiffusionSchedule(c.diffusion_steps, c.b_min, c.b_max)};
}

const RunConfig& validated(const RunConfig& c) {
  c.validate();
  return c;
}

}  // namespace

Trainer::Trainer(RunConfig config)
    : config_(validated(config)),
      env_(make_env(config_.env)),
      policy_(make_policy(config_, env_->spec())),
      critic_(env_->spec().state_dim, env_->spec().action_dim, config_.critic_hidden,
              activation_from_string(config_.critic_activation), config_.distributional),
      buffer_(config_.buffer_capacity, env_->spec().state_dim, env_->spec().action_dim),
      env_rng_(make_stream(config_.seed, Stream::Env)),
      explore_rng_(make_stream(config_.seed, Stream::Explore)),
      buffer_rng_(make_stream(config_.seed, Stream::Buffer)),
      tsample_rng_(make_stream(config_.seed, Stream::TimeSample)),
      gmm_rng_(make_stream(config_.seed, Stream::Gmm)),
      update_rng_(make_stream(config_.seed, Stream::Update)) {
  Rng init = make_stream(config_.seed, Stream::Init);
  policy_.net.init(params_, init);
  critic_.init(params_, init);
  entropy_.alpha = config_.alpha_init;
  entropy_.target_entropy = config_.resolved_target_entropy(env_->spec().action_dim);
  entropy_.update_period = config_.alpha_update_period;
  entropy_.alpha_lr = config_.alpha_lr;
  field_options_.time_weight = config_.time_weight;
  field_options_.normalize = config_.normalize_q_grad;
}

void Trainer::warm_up() {
  warmup(*env_, buffer_, config_.warmup_steps, config_.reward_scale, env_rng_, explore_rng_);
  state_ = env_->reset(env_rng_);
}

void Trainer::step() {
  if (state_.size() == 0) throw std::logic_error("Trainer::step before warm_up");
  const Mat s = state_.transpose();
  const Mat a0 = sample_action(policy_, params_, s, explore_rng_).a0;
  const Mat a = exploration_noise(a0, entropy_.alpha, config_.noise_scale, explore_rng_);
  const Vec av = a.row(0).transpose();
  StepResult r = env_->step(av);
  buffer_.push({state_, av, config_.reward_scale * r.reward, r.next_state, r.done});
  if (r.done || r.truncated) {
    ++episodes_;
    state_ = env_->reset(env_rng_);
  } else {
    state_ = r.next_state;
  }
  ++env_steps_;
  try {
    update();
  } catch (const MathError& e) {
    throw TrainingDiverged("non-finite value at env step " + std::to_string(env_steps_) + ": " + e.what());
  }
}

void Trainer::update() {
  const Batch b = buffer_.sample(config_.batch_size, buffer_rng_);
  const Mat y = td_target(critic_, params_, policy_, b.r, b.s2, b.done, config_.gamma, update_rng_);
  CriticLoss cl = critic_loss(critic_, params_, b.s, b.a, y);
  last_loss_critic_ = cl.loss1 + cl.loss2;
  if (!std::isfinite(last_loss_critic_)) {
    throw TrainingDiverged("critic loss is not finite at env step " + std::to_string(env_steps_));
  }
  adam_step(params_, cl.grads.params, critic_moments_,
            AdamConfig{config_.lr_critic, config_.adam_beta1, config_.adam_beta2});
  ++critic_updates_;

  if (critic_updates_ % config_.policy_delay == 0) {
    const OnlineCritic online(critic_, params_);
    const double eta = config_.field_loss ? config_.resolved_eta() : 0.0;
    const ActorLossReport rep =
        combined_actor_step(policy_, params_, online, b.s, eta, field_options_, actor_moments_,
                            AdamConfig{config_.lr_actor, config_.adam_beta1, config_.adam_beta2},
                            ActorRngs{update_rng_, tsample_rng_});
    if (!std::isfinite(rep.combined)) {
      throw TrainingDiverged("actor loss is not finite at env step " + std::to_string(env_steps_));
    }
    last_loss_q_ = rep.loss_q;
    last_loss_g_ = rep.loss_g;
    ++actor_updates_;
  }
  soft_update(critic_, params_, config_.rho);

  if (env_steps_ % entropy_.update_period == 0) alpha_update_at(entropy_, estimate_entropy(), env_steps_);
}

double Trainer::estimate_entropy() {
  const auto n = static_cast<std::size_t>(config_.gmm_action_samples);
  const Batch b = buffer_.sample(n, gmm_rng_);
  // Clipped actions: the entropy of what the environment receives.
  const Mat a = sample_action(policy_, params_, b.s, gmm_rng_).a0;
  const GmmFit fit = fit_gmm(a, config_.gmm_components, 100, 1e-6, gmm_rng_);
  entropy_.last_estimate = gmm_entropy(fit.model, config_.entropy_mc_samples, gmm_rng_);
  return entropy_.last_estimate;
}

EvalResult Trainer::evaluate_now(int episodes) {
  ++evals_;
  return evaluate(policy_, params_, *env_, episodes, config_.seed);
}

MetricsRow Trainer::metrics_row(const EvalResult& eval) {
  MetricsRow row;
  row.step = env_steps_;
  row.env = config_.env;
  row.tar_mean = eval.tar_mean;
  row.tar_std = eval.tar_std;
  row.loss_q = last_loss_q_;
  row.loss_g = last_loss_g_;
  row.loss_critic = last_loss_critic_;
  row.alpha = entropy_.alpha;
  row.entropy_est = entropy_.last_estimate;
  if (const auto* mg = dynamic_cast<const MultiGoalEnv*>(env_.get())) {
    const ModeCoverage mc = mode_coverage(eval.trajectories, mg->num_goals());
    row.coverage = mc.coverage;
    row.uniformity = mc.uniformity;
  }
  return row;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.params = params_;
  ck.entropy = entropy_;
  ck.schedule = policy_.schedule;
  return ck;
}

// ---------------------------------------------------------------------------
// Run directory

namespace {

std::string sha256_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest);
  std::ostringstream os;
  for (unsigned char c : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
  return os.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

void write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& files) {
  std::string text;
  for (const auto& name : files) text += sha256_file(dir / name) + "  " + name + "\n";
  write_text(dir / "MANIFEST", text);
}

std::string report_json(const Trainer& t, const EvalResult& eval, const MetricsRow& last) {
  nlohmann::ordered_json j;
  j["env"] = t.config().env;
  j["seed"] = t.config().seed;
  j["env_steps"] = t.env_steps();
  j["critic_updates"] = t.critic_updates();
  j["actor_updates"] = t.actor_updates();
  j["episodes"] = t.episodes();
  j["final_tar_mean"] = eval.tar_mean;
  j["final_tar_std"] = eval.tar_std;
  j["alpha"] = t.entropy().alpha;
  j["entropy_est"] = t.entropy().last_estimate;
  if (last.coverage) j["coverage"] = *last.coverage;
  if (last.uniformity) j["uniformity"] = *last.uniformity;
  return j.dump(2) + "\n";
}

}  // namespace

TrainResult train(const RunConfig& config, const std::filesystem::path& run_dir) {
  Trainer trainer(config);
  std::filesystem::create_directories(run_dir);
  write_text(run_dir / "config.json", config_to_json(config));
  std::ofstream metrics(run_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (run_dir / "metrics.jsonl").string());

  TrainResult out;
  out.run_dir = run_dir;
  const auto t0 = std::chrono::steady_clock::now();
  auto emit = [&](const EvalResult& eval) {
    MetricsRow row = trainer.metrics_row(eval);
    if (config.log_wall_time) {
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    metrics << row.to_json_line() << "\n";
    metrics.flush();
    spdlog::info("{} step {}: tar {:.4f} +- {:.4f}, alpha {:.4f}", config.env, row.step, row.tar_mean, row.tar_std,
                 row.alpha);
    out.metrics.push_back(std::move(row));
  };

  try {
    trainer.warm_up();
    for (long i = 0; i < config.total_steps; ++i) {
      trainer.step();
      if (trainer.env_steps() % config.eval_every == 0 && trainer.env_steps() != config.total_steps) {
        emit(trainer.evaluate_now(config.eval_episodes));
      }
    }
  } catch (const TrainingDiverged& e) {
    spdlog::error("{}", e.what());
    checkpoint_save(run_dir / "diverged.ckpt", trainer.checkpoint());
    nlohmann::ordered_json d;
    d["error"] = e.what();
    d["env_steps"] = trainer.env_steps();
    d["last_loss_q"] = trainer.last_loss_q();
    d["last_loss_g"] = trainer.last_loss_g();
    d["last_loss_critic"] = trainer.last_loss_critic();
    d["alpha"] = trainer.entropy().alpha;
    write_text(run_dir / "diverged.json", d.dump(2) + "\n");
    throw;
  }

  out.final_eval = trainer.evaluate_now(config.eval_episodes);
  emit(out.final_eval);
  metrics.close();
  checkpoint_save(run_dir / "final.ckpt", trainer.checkpoint());
  write_text(run_dir / "report.json", report_json(trainer, out.final_eval, out.metrics.back()));
  write_manifest(run_dir, {"config.json", "metrics.jsonl", "final.ckpt", "report.json"});
  return out;
}

}  // namespace qfd
