#include "chada/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "chada/io.hpp"
#include "chada/ops.hpp"
#include "chada/serialize.hpp"

namespace chada {

ViewTransform sample_view(const AugmentationPolicy& policy, std::size_t channels, std::size_t side,
                          Rng& rng) {
  std::uniform_real_distribution<double> scale(policy.min_crop_scale, policy.max_crop_scale);
  ViewTransform t;
  const double s = std::sqrt(scale(rng)) * static_cast<double>(side);
  t.crop_side = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s)), 1, side);
  std::uniform_int_distribution<std::size_t> pos(0, side - t.crop_side);
  t.crop_y = pos(rng);
  t.crop_x = pos(rng);
  std::bernoulli_distribution coin(0.5);
  t.hflip = policy.horizontal_flip && coin(rng);
  t.vflip = policy.vertical_flip && coin(rng);
  const double j = policy.intensity_jitter;
  std::uniform_real_distribution<double> gain(1.0 - j, 1.0 + j), offset(-0.5 * j, 0.5 * j);
  for (std::size_t c = 0; c < channels; ++c) {
    t.gain.push_back(static_cast<float>(gain(rng)));
    t.offset.push_back(static_cast<float>(offset(rng)));
  }
  return t;
}

MultiChannelImage apply_geometry(const MultiChannelImage& image, const ViewTransform& t) {
  const std::size_t n = image.channels(), cs = t.crop_side;
  if (cs == 0 || t.crop_y + cs > image.height || t.crop_x + cs > image.width) {
    throw std::invalid_argument("view crop does not fit the image");
  }
  MultiChannelImage crop(n, cs, cs);
  crop.channel_names = image.channel_names;
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t y = 0; y < cs; ++y) {
      for (std::size_t x = 0; x < cs; ++x) crop.at(c, y, x) = image.at(c, t.crop_y + y, t.crop_x + x);
    }
  }
  auto out = resize_bilinear(crop, image.height);
  const std::size_t side = out.height;
  if (t.hflip || t.vflip) {
    auto src = out;
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          out.at(c, y, x) = src.at(c, t.vflip ? side - 1 - y : y, t.hflip ? side - 1 - x : x);
        }
      }
    }
  }
  return out;
}

MultiChannelImage apply_view(const MultiChannelImage& image, const ViewTransform& t) {
  auto out = apply_geometry(image, t);
  if (t.gain.size() != out.channels()) throw std::invalid_argument("view jitter has the wrong channel count");
  for (std::size_t c = 0; c < out.channels(); ++c) {
    for (auto& v : out.channel(c)) v = std::clamp(v * t.gain[c] + t.offset[c], 0.0f, 1.0f);
  }
  return out;
}

void DinoConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("dino config: " + m); };
  if (!(student_temp > 0.0) || !(teacher_temp > 0.0)) fail("temperatures must be positive");
  for (double m : {center_momentum, teacher_momentum_start, teacher_momentum_end}) {
    if (!(m >= 0.0 && m <= 1.0)) fail("momenta must lie in [0, 1]");
  }
  if (head_hidden == 0 || head_bottleneck == 0 || out_dim == 0) fail("head widths must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(base_lr >= 0.0) || !(final_lr >= 0.0)) fail("learning rates must be non-negative");
  if (!(augmentation.min_crop_scale > 0.0 && augmentation.min_crop_scale <= augmentation.max_crop_scale &&
        augmentation.max_crop_scale <= 1.0)) {
    fail("crop scales must satisfy 0 < min <= max <= 1");
  }
  if (!(augmentation.intensity_jitter >= 0.0 && augmentation.intensity_jitter < 1.0)) {
    fail("intensity_jitter must lie in [0, 1)");
  }
}

double default_base_lr(Arch arch) { return arch == Arch::OneChannel ? 5e-3 : 1e-4; }

template <typename T>
DinoHead<T> DinoHead<T>::init(std::size_t in, std::size_t hidden, std::size_t bottleneck, std::size_t out,
                              Rng& rng) {
  DinoHead h;
  h.w1 = Tensor<T>({in, hidden});
  h.w2 = Tensor<T>({hidden, hidden});
  h.w3 = Tensor<T>({hidden, bottleneck});
  h.prototypes = Tensor<T>({bottleneck, out});
  for (auto* w : {&h.w1, &h.w2, &h.w3, &h.prototypes}) fill_truncated_normal(*w, 0.02, rng);
  h.b1 = Tensor<T>({hidden});
  h.b2 = Tensor<T>({hidden});
  h.b3 = Tensor<T>({bottleneck});
  return h;
}

template <typename T>
void DinoHead<T>::append_parameters(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + "fc1.weight", w1});
  out.push_back({prefix + "fc1.bias", b1});
  out.push_back({prefix + "fc2.weight", w2});
  out.push_back({prefix + "fc2.bias", b2});
  out.push_back({prefix + "fc3.weight", w3});
  out.push_back({prefix + "fc3.bias", b3});
  out.push_back({prefix + "prototypes.weight", prototypes});
}

template <typename T>
Tensor<T> DinoHead<T>::forward(const Tensor<T>& x) const {
  auto h = ops::gelu(ops::linear(x, w1, b1));
  h = ops::gelu(ops::linear(h, w2, b2));
  const auto z = ops::l2_normalize_lastdim(ops::linear(h, w3, b3));
  // unit-norm prototype columns: logits are cosines
  const auto unit = ops::transpose_last2(ops::l2_normalize_lastdim(ops::transpose_last2(prototypes)));
  return ops::matmul(z, unit);
}

template <typename T>
Tensor<T> dino_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                    std::span<const T> center, std::size_t views, double student_temp,
                    double teacher_temp) {
  if (student_logits.rank() != 2 || student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("dino_loss: student " + to_string(student_logits.shape()) + " vs teacher " +
                     to_string(teacher_logits.shape()));
  }
  const std::size_t rows = student_logits.dim(0), k = student_logits.dim(1);
  if (views < 2 || rows % views != 0) throw std::invalid_argument("dino_loss: need >= 2 views of equal size");
  if (center.size() != k) throw ShapeError("dino_loss: centre width does not match the logits");
  for (auto* t : {&student_logits, &teacher_logits}) {
    for (T v : t->values()) {
      if (!std::isfinite(static_cast<double>(v))) throw NumericalError("dino_loss: non-finite logits");
    }
  }
  const std::size_t batch = rows / views;
  // Sharpened, centred teacher distributions (constants).
  std::vector<double> p(rows * k);
  const auto t = teacher_logits.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k; ++j) {
      p[r * k + j] = (static_cast<double>(t[r * k + j]) - static_cast<double>(center[j])) / teacher_temp;
      mx = std::max(mx, p[r * k + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (p[r * k + j] = std::exp(p[r * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) p[r * k + j] /= z;
  }
  // Student view i is paired with every teacher view j != i.
  std::vector<T> q(rows * k, T(0));
  for (std::size_t i = 0; i < views; ++i) {
    for (std::size_t j = 0; j < views; ++j) {
      if (i == j) continue;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < k; ++c) q[(i * batch + b) * k + c] += static_cast<T>(p[(j * batch + b) * k + c]);
      }
    }
  }
  const Tensor<T> targets({rows, k}, std::move(q));
  auto logp = ops::log_softmax_lastdim(ops::scale(student_logits, static_cast<T>(1.0 / student_temp)));
  const double pairs = static_cast<double>(views * (views - 1) * batch);
  return ops::scale(ops::sum(ops::mul(targets, logp)), static_cast<T>(-1.0 / pairs));
}

template <typename T>
void ema_update(ParamList<T>& teacher, const ParamList<T>& student, double momentum) {
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].tensor.shape() != student[i].tensor.shape()) {
      throw ShapeError("ema_update: " + teacher[i].name + " " + to_string(teacher[i].tensor.shape()) +
                       " vs " + to_string(student[i].tensor.shape()));
    }
    auto t = teacher[i].tensor.mutable_values();
    const auto s = student[i].tensor.values();
    for (std::size_t j = 0; j < t.size(); ++j) {
      t[j] = static_cast<T>(momentum * static_cast<double>(t[j]) + (1.0 - momentum) * static_cast<double>(s[j]));
    }
  }
}

double cosine_schedule(std::size_t step, std::size_t total, double base, double final_value) {
  if (total == 0) return final_value;
  const double x = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return final_value + 0.5 * (base - final_value) * (1.0 + std::cos(std::numbers::pi * x));
}

template <typename T>
Model<T> clone_model(const Model<T>& model) {
  Model<T> out = model;
  if (model.arch == Arch::Interchannel) {
    auto& ic = out.interchannel;
    for (std::size_t i = 0; i < ic.learner.weights.size(); ++i) {
      ic.learner.weights[i] = ic.learner.weights[i].clone();
      ic.learner.biases[i] = ic.learner.biases[i].clone();
    }
    ic.chan = ic.chan.clone();
    ic.cls = ic.cls.clone();
    for (auto& b : ic.transformer.blocks) {
      for (auto* t : {&b.norm1_gamma, &b.norm1_beta, &b.q_weight, &b.q_bias, &b.k_weight, &b.k_bias,
                      &b.v_weight, &b.v_bias, &b.out_weight, &b.out_bias, &b.norm2_gamma, &b.norm2_beta,
                      &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias}) {
        *t = t->clone();
      }
    }
    ic.transformer.norm_gamma = ic.transformer.norm_gamma.clone();
    ic.transformer.norm_beta = ic.transformer.norm_beta.clone();
    return out;
  }
  auto& tb = out.vit.tables;
  for (auto* t : {&tb.patch_weight, &tb.patch_bias, &tb.pos, &tb.cls}) *t = t->clone();
  if (tb.chan.defined()) tb.chan = tb.chan.clone();
  for (auto& b : out.vit.transformer.blocks) {
    for (auto* t : {&b.norm1_gamma, &b.norm1_beta, &b.q_weight, &b.q_bias, &b.k_weight, &b.k_bias,
                    &b.v_weight, &b.v_bias, &b.out_weight, &b.out_bias, &b.norm2_gamma, &b.norm2_beta,
                    &b.fc1_weight, &b.fc1_bias, &b.fc2_weight, &b.fc2_bias}) {
      *t = t->clone();
    }
  }
  out.vit.transformer.norm_gamma = out.vit.transformer.norm_gamma.clone();
  out.vit.transformer.norm_beta = out.vit.transformer.norm_beta.clone();
  return out;
}

namespace {

DinoHead<float> clone_head(const DinoHead<float>& h) {
  return {h.w1.clone(), h.b1.clone(), h.w2.clone(), h.b2.clone(), h.w3.clone(), h.b3.clone(), h.prototypes.clone()};
}

void set_trainable(ParamList<float> params, bool on) {
  for (auto& p : params) p.tensor.set_requires_grad(on);
}

}  // namespace

DinoTrainer::DinoTrainer(Arch arch, const EncoderConfig& encoder, const DinoConfig& dino)
    : arch_(arch), encoder_(encoder), dino_(dino), rng_(derive_seed(dino.seed, {0x747261696e})) {
  dino_.validate();
  Rng init_rng(derive_seed(dino.seed, {0x696e6974}));
  student_ = Model<float>::init(arch, encoder, init_rng);
  student_head_ = DinoHead<float>::init(student_.config.dim, dino_.head_hidden, dino_.head_bottleneck, dino_.out_dim,
                                        init_rng);
  teacher_ = clone_model(student_);
  teacher_head_ = clone_head(student_head_);
  set_trainable(student_parameters(), true);
  set_trainable(teacher_parameters(), false);
  optimizer_ = AdamW<float>(AdamWOptions{0.9, 0.999, 1e-8, dino_.weight_decay});
  center_.assign(dino_.out_dim, 0.0f);
}

ParamList<float> DinoTrainer::student_parameters() const {
  auto out = student_.parameters();
  student_head_.append_parameters(out, "head.");
  return out;
}

ParamList<float> DinoTrainer::teacher_parameters() const {
  auto out = teacher_.parameters();
  teacher_head_.append_parameters(out, "head.");
  return out;
}

std::vector<MultiChannelImage> DinoTrainer::training_pool(Arch arch,
                                                          std::span<const MultiChannelImage> images) {
  if (arch != Arch::OneChannel) return {images.begin(), images.end()};
  std::vector<MultiChannelImage> out;
  for (const auto& img : images) {
    for (std::size_t c = 0; c < img.channels(); ++c) {
      const std::size_t which[] = {c};
      out.push_back(img.select_channels(which));
    }
  }
  return out;
}

StepRecord DinoTrainer::train_step(std::span<const MultiChannelImage> images) {
  if (images.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t batch = images.size(), views = 2;
  std::vector<MultiChannelImage> augmented;
  augmented.reserve(views * batch);
  for (std::size_t v = 0; v < views; ++v) {
    for (std::size_t i = 0; i < batch; ++i) {
      Rng view_rng(derive_seed(dino_.seed, {step_, i, v}));
      const auto t = sample_view(dino_.augmentation, images[i].channels(), images[i].height, view_rng);
      augmented.push_back(apply_view(images[i], t));
    }
  }

  StepRecord rec;
  rec.step = step_;
  rec.lr = cosine_schedule(step_, dino_.steps, dino_.base_lr, dino_.final_lr);
  const double momentum =
      cosine_schedule(step_, dino_.steps, dino_.teacher_momentum_start, dino_.teacher_momentum_end);

  auto params = student_parameters();
  Tape<float> tape;
  const auto teacher_logits = teacher_head_.forward(teacher_.embed_batch(augmented));
  const std::size_t rows = teacher_logits.dim(0), k = teacher_logits.dim(1);
  std::vector<double> batch_center(k, 0.0);
  {
    const auto t = teacher_logits.values();
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t r = 0; r < rows; ++r) batch_center[j] += t[r * k + j];
      batch_center[j] /= static_cast<double>(rows);
    }
  }
  // The centre starts at the first batch mean rather than zero.
  if (step_ == 0) {
    for (std::size_t j = 0; j < k; ++j) center_[j] = static_cast<float>(batch_center[j]);
  }
  Tensor<float> loss;
  {
    Tape<float>::Recording recording(tape);
    auto student_logits = student_head_.forward(student_.embed_batch(augmented));
    loss = dino_loss<float>(student_logits, teacher_logits, center_, views, dino_.student_temp,
                            dino_.teacher_temp);
  }
  rec.loss = loss.item();
  if (!std::isfinite(rec.loss)) throw NumericalError("training loss is not finite at step " + std::to_string(step_));
  tape.backward(loss);
  rec.grad_norm = grad_norm(params);
  if (!std::isfinite(rec.grad_norm)) {
    throw NumericalError("gradient norm is not finite at step " + std::to_string(step_));
  }
  if (dino_.clip_grad > 0.0 && rec.grad_norm > dino_.clip_grad) {
    const float factor = static_cast<float>(dino_.clip_grad / (rec.grad_norm + 1e-6));
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.grad()) g *= factor;
    }
  }
  optimizer_.step(params, rec.lr);
  zero_grads(params);

  auto teacher_params = teacher_parameters();
  ema_update(teacher_params, params, momentum);

  for (std::size_t j = 0; j < k; ++j) {
    center_[j] = static_cast<float>(dino_.center_momentum * center_[j] +
                                    (1.0 - dino_.center_momentum) * batch_center[j]);
  }
  ++step_;
  return rec;
}

StepRecord DinoTrainer::train_step_from(const std::vector<MultiChannelImage>& pool) {
  if (pool.empty()) throw std::invalid_argument("train_step: empty training pool");
  const std::size_t b = std::min(dino_.batch_size, pool.size());
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Partial Fisher-Yates with raw draws so the stream is portable.
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng_() % (order.size() - i));
    std::swap(order[i], order[j]);
  }
  std::vector<MultiChannelImage> batch;
  batch.reserve(b);
  for (std::size_t i = 0; i < b; ++i) batch.push_back(pool[order[i]]);
  return train_step(batch);
}

std::vector<StepRecord> DinoTrainer::run(const std::vector<MultiChannelImage>& pool, const std::string& log_path,
                                         std::size_t checkpoint_every, const std::string& checkpoint_prefix) {
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, std::ios::app);
    if (!log) throw DataError("cannot open training log " + log_path);
  }
  std::vector<StepRecord> records;
  while (step_ < dino_.steps) {
    StepRecord rec;
    try {
      rec = train_step_from(pool);
    } catch (const NumericalError&) {
      if (!checkpoint_prefix.empty()) save(checkpoint_prefix + "-nan-dump");
      throw;
    }
    records.push_back(rec);
    if (log) {
      log << nlohmann::ordered_json{{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss},
                                    {"grad_norm", rec.grad_norm}}.dump()
          << "\n";
    }
    if (checkpoint_every > 0 && !checkpoint_prefix.empty() && step_ % checkpoint_every == 0) {
      save(checkpoint_prefix + "-" + std::to_string(step_));
    }
  }
  return records;
}

std::string DinoTrainer::config_json() const {
  return nlohmann::ordered_json{{"arch", to_string(arch_)}, {"encoder", to_json(encoder_)}, {"dino", to_json(dino_)}}
      .dump();
}

namespace {

ParamList<float> state_layout(const ParamList<float>& student, const ParamList<float>& teacher,
                              const std::vector<float>& center, bool with_moments) {
  ParamList<float> out;
  for (const auto& p : student) out.push_back({"student." + p.name, p.tensor});
  for (const auto& p : teacher) out.push_back({"teacher." + p.name, p.tensor});
  out.push_back({"center", Tensor<float>({center.size()}, center)});
  if (with_moments) {
    for (const auto& p : student) out.push_back({"adam.m." + p.name, Tensor<float>(p.tensor.shape())});
    for (const auto& p : student) out.push_back({"adam.v." + p.name, Tensor<float>(p.tensor.shape())});
  }
  return out;
}

}  // namespace

void DinoTrainer::save(const std::string& path) const {
  const auto student = student_parameters();
  const bool moments = !optimizer_.first_moments().empty();
  auto entries = state_layout(student, teacher_parameters(), center_, moments);
  if (moments) {
    const std::size_t base = 2 * student.size() + 1;
    for (std::size_t i = 0; i < student.size(); ++i) {
      std::copy(optimizer_.first_moments()[i].begin(), optimizer_.first_moments()[i].end(),
                entries[base + i].tensor.mutable_values().begin());
      std::copy(optimizer_.second_moments()[i].begin(), optimizer_.second_moments()[i].end(),
                entries[base + student.size() + i].tensor.mutable_values().begin());
    }
  }
  Checkpoint ck;
  ck.config_json = config_json();
  ck.step = step_;
  ck.rng_state = rng_state(rng_);
  ck.entries = std::move(entries);
  save_checkpoint(path, ck);
}

void DinoTrainer::load(const std::string& path) {
  auto ck = load_checkpoint(path);
  const auto student = student_parameters();
  const bool moments = ck.step > 0;
  auto layout = state_layout(student, teacher_parameters(), center_, moments);
  copy_entries(ck.entries, layout);
  const std::size_t n = student.size();
  const auto c = layout[2 * n].tensor.values();
  center_.assign(c.begin(), c.end());
  auto& m = optimizer_.first_moments();
  auto& v = optimizer_.second_moments();
  m.clear();
  v.clear();
  if (moments) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto mi = layout[2 * n + 1 + i].tensor.values();
      const auto vi = layout[3 * n + 1 + i].tensor.values();
      m.emplace_back(mi.begin(), mi.end());
      v.emplace_back(vi.begin(), vi.end());
    }
  }
  optimizer_.set_steps(ck.step);
  step_ = ck.step;
  restore_rng(rng_, ck.rng_state);
}

#define CHADA_INSTANTIATE_SSL(T)                                                                 \
  template struct DinoHead<T>;                                                                   \
  template Tensor<T> dino_loss(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::size_t, \
                               double, double);                                                  \
  template void ema_update(ParamList<T>&, const ParamList<T>&, double);                          \
  template Model<T> clone_model(const Model<T>&);

CHADA_INSTANTIATE_SSL(float)
CHADA_INSTANTIATE_SSL(double)

}  // namespace chada
