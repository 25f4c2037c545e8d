// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/pipeline.hpp"

#include "maskdiff/random.hpp"
#include "maskdiff/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace maskdiff {
namespace {

namespace fs = std::filesystem;

// Stream tags keep the training, shuffling and sampling streams apart.
constexpr std::uint64_t kTrainStream = 0x747261696eULL;
constexpr std::uint64_t kShuffleStream = 0x73687566ULL;

template <typename Scalar>
void copy_into(Tensor<Scalar>& dst, Index n, const Tensor<Scalar>& src) {
  const Index per = src.size();
  dst.vec().segment(n * per, per) = src.vec();
}

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
  return s.str();
}

}  // namespace

template <typename Scalar>
Batch<Scalar> make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no indices");
  std::vector<Tensor<Scalar>> images, masks, edges;
  for (std::size_t i : indices) {
    const Sample& s = data.at(i);
    images.push_back(s.image.cast<Scalar>());
    masks.push_back(s.gt_mask.cast<Scalar>());
    edges.push_back(s.gt_edge.cast<Scalar>());
  }
  return {stack_batch(images), stack_batch(masks), stack_batch(edges)};
}

template <typename Scalar>
Trainer<Scalar>::Trainer(const TrainConfig& config, MaskDiffusionModel<Scalar>& model, long total_steps)
    : config_(config),
      model_(model),
      schedule_(config.T_train, config.snr_shift),
      optimizer_(model.named_parameters(), AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay}),
      total_steps_(total_steps) {
  config_.validate();
  if (total_steps < 1) throw std::invalid_argument("Trainer: total_steps must be positive");
}

template <typename Scalar>
double Trainer<Scalar>::current_lr() const {
  if (config_.lr_schedule == "constant") return config_.lr;
  return cosine_lr(config_.lr, step_, total_steps_);
}

template <typename Scalar>
StepStats Trainer<Scalar>::train_step(const Batch<Scalar>& batch) {
  const Index n = batch.image.dim(0);
  if (batch.gt_mask.shape() != Shape{n, 1, batch.image.dim(2), batch.image.dim(3)} ||
      batch.gt_edge.shape() != batch.gt_mask.shape()) {
    throw ShapeError("train_step: image " + shape_str(batch.image.shape()) + ", mask " +
                     shape_str(batch.gt_mask.shape()) + " and edge " + shape_str(batch.gt_edge.shape()) +
                     " are not aligned");
  }
  std::mt19937_64 rng(derive_seed(config_.seed, {kTrainStream, static_cast<std::uint64_t>(step_)}));
  std::uniform_int_distribution<int> pick_t(1, config_.T_train);
  StepStats stats;
  stats.step = step_;
  stats.t.resize(static_cast<std::size_t>(n));
  for (auto& t : stats.t) t = pick_t(rng);
  const Tensor<Scalar> noise = normal_tensor<Scalar>(batch.gt_mask.shape(), rng);

  Tensor<Scalar> x_t(batch.gt_mask.shape());
  for (Index k = 0; k < n; ++k) {
    const NoisyMask<Scalar> x0 = encode_mask(batch.gt_mask.sample(k));
    copy_into(x_t, k, add_noise(x0, stats.t[static_cast<std::size_t>(k)], noise.sample(k), schedule_).values);
  }

  stats.lr = current_lr();
  optimizer_.zero_grad();
  const LossWeights weights = config_.loss_weights();
  const DenoiseOutput<Scalar> out = model_(Var<Scalar>(batch.image), Var<Scalar>(x_t), stats.t, weights.mu_edge > 0);
  const Var<Scalar> loss = total_loss(out, batch.gt_mask, batch.gt_edge, weights);
  stats.loss = static_cast<double>(loss.value()[0]);
  backward(loss);
  auto params = optimizer_.parameters();
  stats.grad_norm = clip_grad_norm(params, config_.grad_clip);
  if (!std::isfinite(stats.loss) || !std::isfinite(stats.grad_norm)) {
    std::ostringstream msg;
    msg << "training diverged at step " << step_ << ": loss=" << stats.loss << " t=[" << join_ints(stats.t)
        << "] lr=" << stats.lr << " grad_norm=" << stats.grad_norm;
    throw TrainingDiverged(msg.str());
  }
  optimizer_.step(stats.lr);
  ++step_;
  return stats;
}

DatasetSplits load_splits(const DataConfig& data) {
  DatasetSplits out;
  if (data.dir.empty()) {
    out.train = generate_synthetic(data.synthetic_n, data.size, data.seed);
    if (data.eval_n > 0) out.heldout = generate_synthetic(data.eval_n, data.size, data.seed + 1);
    return out;
  }
  Dataset all = load_folder(data.dir);
  const std::size_t held = std::min(all.size(), static_cast<std::size_t>(data.eval_n));
  const auto cut = static_cast<std::ptrdiff_t>(all.size() - held);
  out.heldout.assign(std::make_move_iterator(all.begin() + cut), std::make_move_iterator(all.end()));
  all.resize(static_cast<std::size_t>(cut));
  out.train = std::move(all);
  return out;
}

long planned_steps(const TrainConfig& config, std::size_t n) {
  if (config.max_steps > 0) return config.max_steps;
  const auto b = static_cast<std::size_t>(config.batch_size);
  return static_cast<long>(config.epochs) * static_cast<long>((n + b - 1) / b);
}

template <typename Scalar>
void train(Trainer<Scalar>& trainer, const Dataset& data, const std::function<void(const StepStats&)>& on_step,
           long until) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const long stop = until > 0 ? std::min(until, trainer.total_steps()) : trainer.total_steps();
  const auto b = static_cast<std::size_t>(trainer.config().batch_size);
  const std::size_t per_epoch = (data.size() + b - 1) / b;
  std::vector<std::size_t> order;
  long order_epoch = -1;
  while (trainer.step() < stop) {
    const long epoch = trainer.step() / static_cast<long>(per_epoch);
    if (epoch != order_epoch) {
      order.resize(data.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(derive_seed(trainer.config().seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)}));
      std::shuffle(order.begin(), order.end(), rng);
      order_epoch = epoch;
    }
    const auto slot = static_cast<std::size_t>(trainer.step() % static_cast<long>(per_epoch));
    const std::size_t lo = slot * b, hi = std::min(data.size(), lo + b);
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                       order.begin() + static_cast<std::ptrdiff_t>(hi));
    const StepStats stats = trainer.train_step(make_batch<Scalar>(data, idx));
    if (on_step) on_step(stats);
  }
}

template <typename Scalar>
SampleResult<Scalar> sample(const MaskDiffusionModel<Scalar>& model, const Tensor<Scalar>& image,
                            const DiffusionSchedule& sched, const SampleOptions& options) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("sample: image must be [N, 3, H, W], got " + shape_str(image.shape()));
  }
  const Index n = image.dim(0), h = image.dim(2), w = image.dim(3);
  if (h % 32 != 0 || w % 32 != 0) throw ShapeError("sample: image size must be divisible by 32");
  const std::vector<int> steps = make_sampling_subsequence(sched.T_train(), options.T_sample);

  NoGradGuard no_grad;
  const Shape plane{1, 1, h, w};
  Tensor<Scalar> x(Shape{n, 1, h, w});
  for (Index k = 0; k < n; ++k) {
    std::mt19937_64 rng(derive_seed(options.seed, {static_cast<std::uint64_t>(k), 0}));
    copy_into(x, k, normal_tensor<Scalar>(plane, rng));
  }
  const Var<Scalar> img(image);
  SampleResult<Scalar> result;
  Tensor<Scalar> x0_hat;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const int t = steps[i];
    const int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    const DenoiseOutput<Scalar> out =
        model(img, Var<Scalar>(x), std::vector<int>(static_cast<std::size_t>(n), t), options.record_trace);
    x0_hat = logits_to_x0hat(out.mask_logits.value());
    if (!x0_hat.all_finite()) {
      throw std::runtime_error("sample: non-finite prediction at step " + std::to_string(i) + " (t=" +
                               std::to_string(t) + ")");
    }
    if (options.record_trace) {
      TraceStep<Scalar> rec{t, x, x0_hat, Tensor<Scalar>(out.edge_logits.shape())};
      const Tensor<Scalar>& e = out.edge_logits.value();
      for (Index j = 0; j < e.size(); ++j) rec.edge_prob[j] = Scalar(1) / (Scalar(1) + std::exp(-e[j]));
      result.trace.push_back(std::move(rec));
    }
    Tensor<Scalar> next(x.shape());
    for (Index k = 0; k < n; ++k) {
      const NoisyMask<Scalar> xk{x.sample(k), t};
      const Tensor<Scalar> x0k = x0_hat.sample(k);
      NoisyMask<Scalar> step;
      if (t_prev == 0) {
        step = posterior_step(xk, x0k, 0, Tensor<Scalar>(), sched);
      } else if (options.ddim) {
        step = ddim_step(xk, x0k, t_prev, sched);
      } else {
        std::mt19937_64 rng(derive_seed(options.seed, {static_cast<std::uint64_t>(k), i + 1}));
        step = posterior_step(xk, x0k, t_prev, normal_tensor<Scalar>(plane, rng), sched);
      }
      copy_into(next, k, step.values);
    }
    if (!next.all_finite()) {
      throw std::runtime_error("sample: non-finite state after step " + std::to_string(i) + " (t=" +
                               std::to_string(t) + ")");
    }
    x = std::move(next);
  }
  result.prob_map = Tensor<Scalar>(x0_hat.shape());
  result.prob_map.array() = (x0_hat.array().max(Scalar(-1)).min(Scalar(1)) + Scalar(1)) / Scalar(2);
  return result;
}

template <typename Scalar>
Tensor<Scalar> sample_ensemble(const MaskDiffusionModel<Scalar>& model, const Tensor<Scalar>& image,
                               const DiffusionSchedule& sched, const SampleOptions& options, int K,
                               Tensor<Scalar>* variance) {
  if (K < 1) throw std::invalid_argument("sample_ensemble: K must be at least 1");
  SampleOptions opt = options;
  opt.record_trace = false;
  Tensor<Scalar> sum, sq;
  for (int k = 0; k < K; ++k) {
    opt.seed = options.seed + static_cast<std::uint64_t>(k);
    const Tensor<Scalar> p = sample(model, image, sched, opt).prob_map;
    if (k == 0) {
      sum = p;
      sq = Tensor<Scalar>(p.shape());
      sq.array() = p.array() * p.array();
    } else {
      sum.array() += p.array();
      sq.array() += p.array() * p.array();
    }
  }
  Tensor<Scalar> mean = sum;
  mean.array() /= Scalar(K);
  if (variance != nullptr) {
    *variance = Tensor<Scalar>(mean.shape());
    variance->array() = (sq.array() / Scalar(K) - mean.array() * mean.array()).max(Scalar(0));
    if (K == 1) variance->set_zero();
  }
  if (K == 1) return sum;
  return mean;
}

SampleOptions sample_options(const TrainConfig& config, std::uint64_t seed) {
  SampleOptions o;
  o.T_sample = config.T_sample;
  o.ddim = config.sampler == "ddim";
  o.seed = seed;
  return o;
}

template <typename Scalar>
void save_checkpoint(const fs::path& dir, MaskDiffusionModel<Scalar>& model, const TrainConfig& config, long step,
                     const AdamW<Scalar>* optimizer) {
  fs::create_directories(dir);
  TensorArchive<Scalar> weights;
  for (auto& [name, p] : model.named_parameters()) weights.emplace_back(name, p.value());
  write_tensor_archive(dir / "weights.bin", weights);
  if (optimizer != nullptr) {
    TensorArchive<Scalar> state;
    const auto& params = optimizer->parameters();
    const auto& slots = optimizer->slots();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (slots[i].steps == 0) continue;
      Tensor<Scalar> steps(Shape{1});
      steps[0] = static_cast<Scalar>(slots[i].steps);
      state.emplace_back(params[i].first + "#m", slots[i].m);
      state.emplace_back(params[i].first + "#v", slots[i].v);
      state.emplace_back(params[i].first + "#steps", steps);
    }
    write_tensor_archive(dir / "optimizer.bin", state);
  }
  save_train_config(dir / "config.json", config);
  std::ofstream(dir / "step", std::ios::trunc) << step << '\n';
}

template <typename Scalar>
void load_weights(const fs::path& file, MaskDiffusionModel<Scalar>& model) {
  std::map<std::string, Tensor<Scalar>> stored;
  for (auto& [name, t] : read_tensor_archive<Scalar>(file)) stored.emplace(name, std::move(t));
  std::size_t used = 0;
  for (auto& [name, p] : model.named_parameters()) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw SerializationError("checkpoint is missing parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw SerializationError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                               " in the checkpoint but " + shape_str(p.shape()) + " in the model");
    }
    p.mutable_value() = it->second;
    ++used;
  }
  if (used != stored.size()) throw SerializationError("checkpoint has parameters the model does not know");
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const fs::path& dir) {
  Checkpoint<Scalar> ck;
  ck.config = load_train_config(dir / "config.json");
  std::ifstream step_in(dir / "step");
  if (!(step_in >> ck.step)) throw SerializationError("cannot read step file in " + dir.string());
  ck.model = std::make_unique<MaskDiffusionModel<Scalar>>(ck.config.effective_model(), ck.config.seed);
  load_weights(dir / "weights.bin", *ck.model);
  return ck;
}

template <typename Scalar>
void load_optimizer_state(const fs::path& dir, AdamW<Scalar>& optimizer) {
  std::map<std::string, Tensor<Scalar>> stored;
  for (auto& [name, t] : read_tensor_archive<Scalar>(dir / "optimizer.bin")) stored.emplace(name, std::move(t));
  const auto& params = optimizer.parameters();
  auto& slots = optimizer.slots();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params[i].first;
    const auto m = stored.find(name + "#m");
    if (m == stored.end()) {
      slots[i] = {};
      continue;
    }
    slots[i].m = m->second;
    slots[i].v = stored.at(name + "#v");
    slots[i].steps = static_cast<long>(stored.at(name + "#steps")[0]);
    if (slots[i].m.shape() != params[i].second.shape()) {
      throw SerializationError("optimizer state for '" + name + "' has the wrong shape");
    }
  }
}

#define MASKDIFF_INSTANTIATE(S)                                                                                      \
  template Batch<S> make_batch<S>(const Dataset&, const std::vector<std::size_t>&);                                  \
  template class Trainer<S>;                                                                                         \
  template void train<S>(Trainer<S>&, const Dataset&, const std::function<void(const StepStats&)>&, long);          \
  template SampleResult<S> sample<S>(const MaskDiffusionModel<S>&, const Tensor<S>&, const DiffusionSchedule&,       \
                                     const SampleOptions&);                                                          \
  template Tensor<S> sample_ensemble<S>(const MaskDiffusionModel<S>&, const Tensor<S>&, const DiffusionSchedule&,    \
                                        const SampleOptions&, int, Tensor<S>*);                                      \
  template void save_checkpoint<S>(const fs::path&, MaskDiffusionModel<S>&, const TrainConfig&, long,               \
                                   const AdamW<S>*);                                                                 \
  template void load_weights<S>(const fs::path&, MaskDiffusionModel<S>&);                                           \
  template Checkpoint<S> load_checkpoint<S>(const fs::path&);                                                        \
  template void load_optimizer_state<S>(const fs::path&, AdamW<S>&);

MASKDIFF_INSTANTIATE(float)
MASKDIFF_INSTANTIATE(double)
#undef MASKDIFF_INSTANTIATE

}  // namespace maskdiff
