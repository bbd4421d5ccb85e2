#include "usam/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>

#include <c10/util/Logging.h>

namespace usam {

namespace F = torch::nn::functional;

namespace {

void check_targets(const torch::Tensor& logits, const torch::Tensor& gt) {
  if (logits.dim() != 4 || gt.dim() != 3 || logits.size(0) != gt.size(0) ||
      logits.size(2) != gt.size(1) || logits.size(3) != gt.size(2)) {
    throw ShapeError("logits (B, N, H, W) and labels (B, H, W) do not line up");
  }
  if (logits.isnan().any().item<bool>()) throw InvalidValue("logits contain NaN");
  if (gt.numel() > 0 && (gt.min().item<int64_t>() < 0 || gt.max().item<int64_t>() >= logits.size(1))) {
    throw InvalidValue("label values must lie in [0, N)");
  }
}

}  // namespace

torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& gt, double eps) {
  const int64_t n = probs.size(1);
  const auto onehot = F::one_hot(gt.to(torch::kInt64), n).permute({0, 3, 1, 2}).to(probs.dtype());
  const std::vector<int64_t> dims{0, 2, 3};
  const auto inter = (probs * onehot).sum(dims);
  const auto denom = probs.sum(dims) + onehot.sum(dims);
  const auto per_class = (2.0 * inter + eps) / (denom + eps);
  return 1.0 - per_class.mean();
}

LossTerms segmentation_loss(const torch::Tensor& logits, const torch::Tensor& gt, double w_ce, double w_dice) {
  if (logits.dim() == 3) return segmentation_loss(logits.unsqueeze(0), gt.unsqueeze(0), w_ce, w_dice);
  check_targets(logits, gt);
  const auto target = gt.to(torch::kInt64);
  LossTerms t;
  t.ce = F::cross_entropy(logits, target);
  t.dice = soft_dice_loss(logits.softmax(1), target);
  t.total = w_ce * t.ce + w_dice * t.dice;
  return t;
}

Batch make_batch(const std::vector<const SlicePair*>& pairs, int64_t image_size, int64_t k_points,
                 int64_t num_classes, bool do_augment, std::vector<std::mt19937_64*> rngs) {
  if (rngs.size() != 1 && rngs.size() != pairs.size()) {
    throw InvalidValue("need one generator or one per pair");
  }
  std::vector<torch::Tensor> images, labels;
  Batch batch;
  for (size_t i = 0; i < pairs.size(); ++i) {
    auto& rng = *rngs[rngs.size() == 1 ? 0 : i];
    const SlicePair pair = do_augment ? augment(*pairs[i], rng) : *pairs[i];
    auto image = resize_image(pair.image, image_size, image_size);
    auto label = resize_label(pair.label, image_size, image_size);
    batch.prompts.push_back(sample_points(label, k_points, num_classes, rng));
    batch.ids.push_back(pair.source.key());
    images.push_back(image.unsqueeze(0));
    labels.push_back(label);
  }
  batch.images = torch::stack(images);
  batch.labels = torch::stack(labels);
  return batch;
}

Trainer::Trainer(const TrainConfig& config, USam model) : config_(config), model_(std::move(model)) {
  if (config.batch_size < 1) throw InvalidValue("batch_size must be at least 1");
  if (!same_architecture(config.model, model_->config())) {
    throw IncompatibleCheckpoint("model does not match the training config");
  }
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(model_->parameters_in(ParamGroup::kEncoder),
                      std::make_unique<torch::optim::AdamOptions>(config.lr_encoder));
  groups.emplace_back(model_->parameters_in(ParamGroup::kDecoder),
                      std::make_unique<torch::optim::AdamOptions>(config.lr_decoder));
  optimizer_ = std::make_unique<torch::optim::Adam>(std::move(groups),
                                                    torch::optim::AdamOptions(config.lr_decoder));
}

double Trainer::step(const Batch& batch) {
  model_->train();
  optimizer_->zero_grad();
  auto out = model_->forward(batch.images, batch.prompts);
  if (!torch::isfinite(out.logits).all().item<bool>()) {
    throw NonFiniteLoss("non-finite logits in batch", batch.ids);
  }
  auto loss = segmentation_loss(out.logits, batch.labels, config_.w_ce, config_.w_dice).total;
  const double value = loss.item<double>();
  if (!std::isfinite(value)) throw NonFiniteLoss("non-finite loss in batch", batch.ids);
  loss.backward();
  optimizer_->step();
  ++steps_done_;
  return value;
}

void Trainer::apply_schedule(int64_t step) {
  double factor = 1.0;
  if (config_.cosine_decay && config_.steps > 0) {
    const double t = std::min<double>(step, config_.steps) / static_cast<double>(config_.steps);
    factor = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  auto& groups = optimizer_->param_groups();
  static_cast<torch::optim::AdamOptions&>(groups[0].options()).lr(config_.lr_encoder * factor);
  static_cast<torch::optim::AdamOptions&>(groups[1].options()).lr(config_.lr_decoder * factor);
}

double Trainer::lr_encoder() const {
  return static_cast<const torch::optim::AdamOptions&>(optimizer_->param_groups()[0].options()).lr();
}

double Trainer::lr_decoder() const {
  return static_cast<const torch::optim::AdamOptions&>(optimizer_->param_groups()[1].options()).lr();
}

Checkpoint Trainer::checkpoint(const std::vector<std::string>& class_names) const {
  Checkpoint c;
  c.model = model_;
  c.meta.model = model_->config();
  c.meta.train = config_;
  c.meta.step = steps_done_;
  c.meta.class_names = class_names;
  c.meta.tag = model_->config().tag();
  const auto& state = optimizer_->state();
  for (const auto& item : model_->named_parameters()) {
    auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    c.adam_moments[item.key()] = {s.exp_avg(), s.exp_avg_sq()};
    c.adam_step = s.step();
  }
  return c;
}

void Trainer::restore_optimizer(const Checkpoint& checkpoint) {
  auto& state = optimizer_->state();
  for (const auto& item : model_->named_parameters()) {
    auto it = checkpoint.adam_moments.find(item.key());
    if (it == checkpoint.adam_moments.end()) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(checkpoint.adam_step);
    s->exp_avg(it->second.first.clone());
    s->exp_avg_sq(it->second.second.clone());
    state[item.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

namespace {

std::mt19937_64 stream_rng(uint64_t seed, uint64_t stream, uint64_t index) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(index),
                    static_cast<uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

// Resumption tolerates a longer budget or different bookkeeping cadence only.
json resumable_view(const TrainConfig& c) {
  auto j = to_json(c);
  for (const char* k : {"steps", "checkpoint_every", "log_every"}) j.erase(k);
  return j;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, const TrainOptions& options) {
  config.validate();
  if (data.pairs.empty()) throw EmptyDatasetError("training manifest has no pairs");
  if (data.num_classes() != config.model.num_classes) {
    throw InvalidValue("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                       std::to_string(config.model.num_classes));
  }

  USam model{nullptr};
  std::optional<Checkpoint> resumed;
  if (options.resume) {
    resumed = load_checkpoint(*options.resume);
    if (!resumed->meta.train || resumable_view(*resumed->meta.train) != resumable_view(config)) {
      throw IncompatibleCheckpoint("cannot resume " + options.resume->string() +
                                   ": its training config differs from the requested one");
    }
    model = resumed->model;
  } else {
    model = make_model(config.model, config.seed);
    if (options.pretrained) {
      auto report = load_pretrained(*options.pretrained, *model);
      if (!options.quiet) {
        LOG(INFO) << "pretrained weights: " << report.loaded.size() << " loaded, " << report.adapted.size()
                  << " adapted, " << report.fresh.size() << " fresh";
      }
    }
  }

  Trainer trainer(config, model);
  int64_t start = 0;
  if (resumed) {
    trainer.restore_optimizer(*resumed);
    start = resumed->meta.step;
    trainer.set_steps_done(start);
  }

  torch::manual_seed(config.seed + static_cast<uint64_t>(start));
  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    const auto log_path = *options.out_dir / "train_log.csv";
    const bool fresh_log = !resumed || !std::filesystem::exists(log_path);
    log_file.open(log_path, fresh_log ? std::ios::trunc : std::ios::app);
    if (!log_file) throw IoError("cannot write " + log_path.string());
    log_file << std::setprecision(9);
    if (fresh_log) log_file << "step,loss,lr_encoder,lr_decoder\n";
  }
  auto save = [&](const std::string& why) {
    if (!options.out_dir) return;
    save_checkpoint(*options.out_dir / "checkpoint.safetensors", trainer.checkpoint(data.manifest.class_names));
    if (!options.quiet) LOG(INFO) << "checkpoint written (" << why << ") at step " << trainer.steps_done();
  };

  // Data order and per-step randomness are functions of (seed, epoch) and
  // (seed, step), so a resumed run sees exactly the batches it would have.
  const auto n = static_cast<int64_t>(data.pairs.size());
  int64_t order_epoch = -1;
  std::vector<size_t> order(data.pairs.size());
  TrainResult result;
  for (int64_t step = start; step < config.steps; ++step) {
    std::vector<const SlicePair*> picked;
    for (int64_t j = 0; j < config.batch_size; ++j) {
      const int64_t sample = step * config.batch_size + j;
      if (sample / n != order_epoch) {
        order_epoch = sample / n;
        std::iota(order.begin(), order.end(), size_t{0});
        auto shuffle_rng = stream_rng(config.seed, 0, static_cast<uint64_t>(order_epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
      }
      picked.push_back(&data.pairs[order[static_cast<size_t>(sample % n)]]);
    }
    auto rng = stream_rng(config.seed, 1, static_cast<uint64_t>(step));
    auto batch = make_batch(picked, config.model.image_size, config.k_points, config.model.num_classes,
                            config.augment, {&rng});
    trainer.apply_schedule(step);
    const double loss = trainer.step(batch);
    LogRow row{step + 1, loss, trainer.lr_encoder(), trainer.lr_decoder()};
    result.log.push_back(row);
    if (log_file.is_open()) {
      log_file << row.step << ',' << row.loss << ',' << row.lr_encoder << ',' << row.lr_decoder << '\n';
      log_file.flush();
    }
    if (!options.quiet && config.log_every > 0 && row.step % config.log_every == 0) {
      LOG(INFO) << "step " << row.step << " loss " << row.loss;
    }
    if (config.checkpoint_every > 0 && row.step % config.checkpoint_every == 0 && row.step < config.steps) {
      save("periodic");
    }
  }
  save("final");
  result.checkpoint = trainer.checkpoint(data.manifest.class_names);
  return result;
}

}  // namespace usam
