#include "gammadesk/gan.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "gammadesk/checkpoint.hpp"
#include "gammadesk/errors.hpp"
#include "gammadesk/metrics.hpp"
#include "json.hpp"

namespace gammadesk::gan {

namespace fs = std::filesystem;

const char* role_name(Role r) {
  switch (r) {
    case Role::G: return "G";
    case Role::F: return "F";
    case Role::DX: return "DX";
    case Role::DY: return "DY";
  }
  return "?";
}

void GanTrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ContractError("lambda must be >= 0");
  if (!(base_lr > 0.0)) throw ContractError("learning rate must be > 0");
  if (batch_size == 0) throw ContractError("batch size must be >= 1");
  if (total_epochs() == 0) throw ContractError("at least one epoch is required");
  if (image_size < 8 || image_size % 4 != 0) throw ContractError("image size must be a multiple of 4 and >= 8");
  if (generator_width == 0 || discriminator_width == 0) throw ContractError("network widths must be positive");
}

double lr_schedule(std::size_t epoch, const GanTrainConfig& config) {
  const std::size_t c = config.constant_epochs, d = config.decay_epochs;
  if (epoch > c + d)
    throw ContractError("epoch " + std::to_string(epoch) + " is past the schedule end " + std::to_string(c + d));
  if (epoch < c) return config.base_lr;
  if (d == 0) return 0.0;
  return config.base_lr * static_cast<double>(c + d - epoch) / static_cast<double>(d);
}

// ---------------------------------------------------------------------------
// Losses

namespace {

constexpr double kScoreFloor = 1e-7;

Var one_minus(const Var& a) { return add_scalar(scale(a, -1.0), 1.0); }

}  // namespace

Var adversarial_loss(const Var& d_real, const Var& d_fake, std::size_t* saturations) {
  return add(mean(log_clamped(d_real, kScoreFloor, 1.0 - kScoreFloor, saturations)),
             mean(log_clamped(one_minus(d_fake), kScoreFloor, 1.0 - kScoreFloor, saturations)));
}

Var cycle_loss(const Var& x, const Var& x_rec, const Var& y, const Var& y_rec) {
  if (x.shape() != x_rec.shape() || y.shape() != y_rec.shape())
    throw ContractError("cycle_loss: x " + shape_str(x.shape()) + " vs " + shape_str(x_rec.shape()) + ", y " +
                        shape_str(y.shape()) + " vs " + shape_str(y_rec.shape()));
  return add(mean(absolute(sub(x_rec, x))), mean(absolute(sub(y_rec, y))));
}

Var full_objective(const Var& adv_g, const Var& adv_f, const Var& cyc, double lambda) {
  if (lambda < 0.0) throw ContractError("lambda must be >= 0");
  return add(add(adv_g, adv_f), scale(cyc, lambda));
}

double full_objective(double adv_g, double adv_f, double cyc, double lambda) {
  if (lambda < 0.0) throw ContractError("lambda must be >= 0");
  return adv_g + adv_f + lambda * cyc;
}

// ---------------------------------------------------------------------------
// Networks

namespace {

constexpr double kInitStd = 0.02;

Var conv_norm_relu(Tape& tape, ParameterSet& p, const nn::Conv2d& conv, const Var& x) {
  return relu(instance_norm(conv(tape, p, x)));
}

void check_batch(const Var& x, std::size_t size, const char* who) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != size || s[3] != size)
    throw ContractError(std::string(who) + " expects [N,3," + std::to_string(size) + "," + std::to_string(size) +
                        "], got " + shape_str(s));
}

}  // namespace

Generator::Generator(Role role, const GanTrainConfig& config, std::uint64_t seed)
    : role_(role), image_size_(config.image_size) {
  config.validate();
  Rng rng(derive_seed(seed, std::string("generator/") + role_name(role)));
  const std::size_t w = config.generator_width;
  // Hidden convs feed instance norm, which would cancel any bias.
  stem_ = nn::make_conv(params_, "stem", 3, w, 7, 1, 3, false, kInitStd, rng);
  down1_ = nn::make_conv(params_, "down1", w, 2 * w, 3, 2, 1, false, kInitStd, rng);
  down2_ = nn::make_conv(params_, "down2", 2 * w, 4 * w, 3, 2, 1, false, kInitStd, rng);
  for (std::size_t b = 0; b < config.residual_blocks; ++b) {
    const std::string name = "res" + std::to_string(b);
    auto c1 = nn::make_conv(params_, name + ".a", 4 * w, 4 * w, 3, 1, 1, false, kInitStd, rng);
    auto c2 = nn::make_conv(params_, name + ".b", 4 * w, 4 * w, 3, 1, 1, false, kInitStd, rng);
    blocks_.emplace_back(c1, c2);
  }
  up1_ = nn::make_conv(params_, "up1", 4 * w, 2 * w, 3, 1, 1, false, kInitStd, rng);
  up2_ = nn::make_conv(params_, "up2", 2 * w, w, 3, 1, 1, false, kInitStd, rng);
  head_ = nn::make_conv(params_, "head", w, 3, 7, 1, 3, true, kInitStd, rng);
  for (nn::Conv2d* c : {&stem_, &down1_, &down2_, &up1_, &up2_, &head_}) c->reflect = true;
  for (auto& [a, b] : blocks_) a.reflect = b.reflect = true;
}

Var Generator::forward(Tape& tape, const Var& x) {
  check_batch(x, image_size_, "generator");
  Var h = conv_norm_relu(tape, params_, stem_, x);
  h = conv_norm_relu(tape, params_, down1_, h);
  h = conv_norm_relu(tape, params_, down2_, h);
  for (const auto& [a, b] : blocks_) {
    Var r = conv_norm_relu(tape, params_, a, h);
    h = add(h, instance_norm(b(tape, params_, r)));
  }
  h = conv_norm_relu(tape, params_, up1_, upsample_nearest2x(h));
  h = conv_norm_relu(tape, params_, up2_, upsample_nearest2x(h));
  return tanh_act(head_(tape, params_, h));
}

Discriminator::Discriminator(Role role, const GanTrainConfig& config, std::uint64_t seed) : role_(role) {
  config.validate();
  Rng rng(derive_seed(seed, std::string("discriminator/") + role_name(role)));
  const std::size_t w = config.discriminator_width;
  layers_.push_back(nn::make_conv(params_, "c0", 3, w, 4, 2, 1, true, kInitStd, rng));
  layers_.push_back(nn::make_conv(params_, "c1", w, 2 * w, 4, 2, 1, false, kInitStd, rng));
  layers_.push_back(nn::make_conv(params_, "c2", 2 * w, 4 * w, 4, 2, 1, false, kInitStd, rng));
  layers_.push_back(nn::make_conv(params_, "c3", 4 * w, 1, 4, 1, 1, true, kInitStd, rng));
}

Var Discriminator::forward(Tape& tape, const Var& x) {
  Var h = leaky_relu(layers_[0](tape, params_, x), 0.2);
  h = leaky_relu(instance_norm(layers_[1](tape, params_, h)), 0.2);
  h = leaky_relu(instance_norm(layers_[2](tape, params_, h)), 0.2);
  return sigmoid(layers_[3](tape, params_, h));
}

Generator build_generator(const GanTrainConfig& config, std::uint64_t seed, Role role) {
  if (role != Role::G && role != Role::F) throw ContractError("generator role must be G or F");
  return Generator(role, config, seed);
}

Discriminator build_discriminator(const GanTrainConfig& config, std::uint64_t seed, Role role) {
  if (role != Role::DX && role != Role::DY) throw ContractError("discriminator role must be DX or DY");
  return Discriminator(role, config, seed);
}

// ---------------------------------------------------------------------------
// Inference helpers

namespace {

Tensor as_batch(const std::vector<const Tensor*>& images) {
  const Shape& s = images.front()->shape();
  Tensor out = Tensor::zeros({images.size(), s[0], s[1], s[2]});
  const std::size_t n = images.front()->numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ShapeError("batch images must share one shape");
    std::copy(images[i]->ptr(), images[i]->ptr() + n, out.ptr() + i * n);
  }
  return out;
}

}  // namespace

Tensor translate(Generator& g, const Tensor& image) {
  const std::size_t s = g.image_size();
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != s || image.dim(2) != s)
    throw ContractError("translate expects [3," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                        shape_str(image.shape()));
  Tape tape;
  tape.freeze_all();
  Var y = g.forward(tape, tape.constant(image.reshaped({1, 3, s, s})));
  return y.value().reshaped({3, s, s});
}

std::vector<Tensor> translate_all(Generator& g, const std::vector<Tensor>& images) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(translate(g, img));
  return out;
}

double cycle_reconstruction_l1(Generator& g, Generator& f, const std::vector<Tensor>& images) {
  if (images.empty()) throw ContractError("cycle_reconstruction_l1 needs images");
  double total = 0.0;
  for (const auto& x : images) {
    Tensor rec = translate(f, translate(g, x));
    double s = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += std::abs(rec[i] - x[i]);
    total += s / static_cast<double>(x.numel());
  }
  return total / static_cast<double>(images.size());
}

// ---------------------------------------------------------------------------
// Persistence

void save_cyclegan(const fs::path& dir, const CycleGan& model) {
  fs::create_directories(dir);
  save_checkpoint(dir / "G.ckpt", model.g.params());
  save_checkpoint(dir / "F.ckpt", model.f.params());
  save_checkpoint(dir / "DX.ckpt", model.dx.params());
  save_checkpoint(dir / "DY.ckpt", model.dy.params());
}

CycleGan load_cyclegan(const fs::path& dir, const GanTrainConfig& config) {
  CycleGan m{build_generator(config, config.seed, Role::G), build_generator(config, config.seed, Role::F),
             build_discriminator(config, config.seed, Role::DX), build_discriminator(config, config.seed, Role::DY)};
  load_checkpoint_into(dir / "G.ckpt", m.g.params());
  load_checkpoint_into(dir / "F.ckpt", m.f.params());
  load_checkpoint_into(dir / "DX.ckpt", m.dx.params());
  load_checkpoint_into(dir / "DY.ckpt", m.dy.params());
  return m;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::string epoch_dir(std::size_t epoch) {
  std::ostringstream ss;
  ss << "epoch_" << std::setw(4) << std::setfill('0') << epoch;
  return ss.str();
}

void append_trace(const fs::path& path, const EpochRecord& r) {
  nlohmann::json j = {{"format", "gammadesk.gan_trace"}, {"version", 1},       {"epoch", r.epoch},
                      {"step", r.step},                  {"loss_G", r.loss_g}, {"loss_F", r.loss_f},
                      {"loss_D_X", r.loss_dx},           {"loss_D_Y", r.loss_dy}, {"loss_cyc", r.loss_cyc},
                      {"lr", r.lr}};
  if (r.fid) j["fid"] = *r.fid;
  std::ofstream out(path, std::ios::app);
  out << j.dump() << '\n';
}

void require_finite(double v, const char* what, std::size_t step) {
  if (!std::isfinite(v))
    throw NumericError(std::string(what) + " became non-finite at step " + std::to_string(step));
}

std::vector<Tensor> head_of(const std::vector<Tensor>& v, std::size_t n) {
  return {v.begin(), v.begin() + static_cast<long>(std::min(n, v.size()))};
}

}  // namespace

GanTrainResult train_cyclegan(data::DomainDataset& x_data, data::DomainDataset& y_data, const GanTrainConfig& config,
                              const StepObserver& observer) {
  config.validate();
  if (x_data.size() == 0 || y_data.size() == 0) throw ContractError("both domains need images");
  const std::size_t s = config.image_size;
  if (x_data[0].shape() != Shape{3, s, s} || y_data[0].shape() != Shape{3, s, s})
    throw ContractError("domain images must be [3," + std::to_string(s) + "," + std::to_string(s) + "]");

  GanTrainResult result{{build_generator(config, config.seed, Role::G), build_generator(config, config.seed, Role::F),
                         build_discriminator(config, config.seed, Role::DX),
                         build_discriminator(config, config.seed, Role::DY)},
                        {},
                        {},
                        0,
                        0};
  CycleGan& m = result.model;

  auto adam_for = [&](const ParameterSet&) {
    AdamState st;
    st.config = {config.base_lr, config.adam_beta1, config.adam_beta2, 1e-8};
    return st;
  };
  AdamState opt_g = adam_for(m.g.params()), opt_f = adam_for(m.f.params());
  AdamState opt_dx = adam_for(m.dx.params()), opt_dy = adam_for(m.dy.params());

  const std::size_t steps_per_epoch = config.steps_per_epoch
                                          ? config.steps_per_epoch
                                          : std::max<std::size_t>(1, std::max(x_data.size(), y_data.size()) /
                                                                         config.batch_size);
  std::optional<fs::path> trace_path;
  if (config.output_dir) {
    fs::create_directories(*config.output_dir);
    trace_path = *config.output_dir / "trace.jsonl";
    std::ofstream(*trace_path, std::ios::trunc);
  }

  const metrics::RandomConvEncoder encoder(derive_seed(config.seed, "fid_encoder"), {s, {16, 32, 64}});
  const auto probe_x = head_of(x_data.images(), config.fid_probe);
  const auto probe_y = head_of(y_data.images(), config.fid_probe);

  std::vector<const Tensor*> bx(config.batch_size), by(config.batch_size);
  for (std::size_t epoch = 0; epoch < config.total_epochs(); ++epoch) {
    const double lr = lr_schedule(epoch, config);
    for (AdamState* st : {&opt_g, &opt_f, &opt_dx, &opt_dy}) st->config.lr = lr;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;

    for (std::size_t it = 0; it < steps_per_epoch; ++it) {
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        bx[b] = &x_data.next();
        by[b] = &y_data.next();
      }
      const Tensor xb = as_batch(bx), yb = as_batch(by);
      const std::size_t step = result.steps + 1;

      // Generators: descend the full objective with the discriminators held fixed.
      Tensor fake_y_value, fake_x_value;
      {
        Tape tape;
        tape.freeze(m.dx.params());
        tape.freeze(m.dy.params());
        Var x = tape.constant(xb), y = tape.constant(yb);
        Var fake_y = m.g.forward(tape, x);
        Var fake_x = m.f.forward(tape, y);
        Var rec_x = m.f.forward(tape, fake_y);
        Var rec_y = m.g.forward(tape, fake_x);
        Var score_fake_y = m.dy.forward(tape, fake_y);
        Var score_fake_x = m.dx.forward(tape, fake_x);
        Var adv_g, adv_f;
        if (config.non_saturating) {
          adv_g = scale(mean(log_clamped(score_fake_y, kScoreFloor, 1.0 - kScoreFloor, &result.saturations)), -1.0);
          adv_f = scale(mean(log_clamped(score_fake_x, kScoreFloor, 1.0 - kScoreFloor, &result.saturations)), -1.0);
        } else {
          adv_g = adversarial_loss(m.dy.forward(tape, y), score_fake_y, &result.saturations);
          adv_f = adversarial_loss(m.dx.forward(tape, x), score_fake_x, &result.saturations);
        }
        Var cyc = cycle_loss(x, rec_x, y, rec_y);
        Var objective = full_objective(adv_g, adv_f, cyc, config.lambda);
        require_finite(objective.value().item(), "generator objective", step);
        Gradients grads = tape.backward(objective);
        adam_step(m.g.params(), grads, opt_g);
        adam_step(m.f.params(), grads, opt_f);
        rec.loss_g += adv_g.value().item();
        rec.loss_f += adv_f.value().item();
        rec.loss_cyc += cyc.value().item();
        fake_y_value = fake_y.value();
        fake_x_value = fake_x.value();
      }

      // Discriminators: ascend the adversarial value by descending its negation, halved.
      DiscriminatorAudit audit;
      {
        Tape tape;
        Var x = tape.constant(xb), y = tape.constant(yb);
        Var adv_dy = adversarial_loss(m.dy.forward(tape, y), m.dy.forward(tape, tape.constant(fake_y_value)),
                                      &result.saturations);
        Var adv_dx = adversarial_loss(m.dx.forward(tape, x), m.dx.forward(tape, tape.constant(fake_x_value)),
                                      &result.saturations);
        Var desc_dy = scale(adv_dy, -0.5);
        Var desc_dx = scale(adv_dx, -0.5);
        Var total = add(desc_dx, desc_dy);
        require_finite(total.value().item(), "discriminator objective", step);
        Gradients grads = tape.backward(total);
        adam_step(m.dx.params(), grads, opt_dx);
        adam_step(m.dy.params(), grads, opt_dy);
        audit = {adv_dx.value().item(), adv_dy.value().item(), desc_dx.value().item(), desc_dy.value().item()};
        rec.loss_dx += audit.descended_dx;
        rec.loss_dy += audit.descended_dy;
      }
      result.steps = step;
      result.last_audit = audit;
      if (observer) observer(step, audit);
    }

    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    rec.loss_g *= inv;
    rec.loss_f *= inv;
    rec.loss_dx *= inv;
    rec.loss_dy *= inv;
    rec.loss_cyc *= inv;
    rec.step = result.steps;
    const bool last = epoch + 1 == config.total_epochs();
    if (config.fid_every && ((epoch + 1) % config.fid_every == 0 || last))
      rec.fid = metrics::fid_between(translate_all(m.g, probe_x), probe_y, encoder);
    result.trace.push_back(rec);

    if (config.output_dir) {
      append_trace(*trace_path, rec);
      if ((config.checkpoint_every && (epoch + 1) % config.checkpoint_every == 0) || last)
        save_cyclegan(*config.output_dir / "checkpoints" / epoch_dir(epoch + 1), m);
    }
  }
  if (config.output_dir) save_cyclegan(*config.output_dir / "final", m);
  return result;
}

}  // namespace gammadesk::gan
