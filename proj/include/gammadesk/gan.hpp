#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gammadesk/autodiff.hpp"
#include "gammadesk/dataset.hpp"
#include "gammadesk/nn.hpp"
#include "gammadesk/optim.hpp"

namespace gammadesk::gan {

enum class Role { G, F, DX, DY };
const char* role_name(Role r);

struct GanTrainConfig {
  double lambda = 10.0;          // cycle-loss weight
  double base_lr = 2e-4;
  std::size_t constant_epochs = 100;
  std::size_t decay_epochs = 100;
  std::size_t batch_size = 1;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;

  // Desk-scale knobs.
  std::size_t steps_per_epoch = 0;  // 0: max(|X|, |Y|) / batch_size
  std::size_t generator_width = 8;  // channels after the stem
  std::size_t discriminator_width = 16;
  std::size_t residual_blocks = 3;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  bool non_saturating = false;  // generator descends -log D(G(x)) instead of log(1 - D(G(x)))
  std::size_t fid_every = 20;   // epochs; 0 disables
  std::size_t fid_probe = 64;
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  std::optional<std::filesystem::path> output_dir;

  /// Throws ContractError for lambda < 0, lr <= 0, batch 0, odd sizes, etc.
  void validate() const;
  std::size_t total_epochs() const noexcept { return constant_epochs + decay_epochs; }
};

/// Base rate on [0, constant_epochs), then base * (C + D - epoch) / D, which
/// reaches exactly 0 at epoch C + D (the end-of-training point). Epochs past
/// that raise ContractError.
double lr_schedule(std::size_t epoch, const GanTrainConfig& config);

/// mean(log d_real) + mean(log(1 - d_fake)) with scores clamped to
/// [1e-7, 1 - 1e-7]; each clamped entry bumps `saturations`.
Var adversarial_loss(const Var& d_real, const Var& d_fake, std::size_t* saturations = nullptr);

/// mean|x_rec - x| + mean|y_rec - y|. Shape mismatch raises ContractError.
Var cycle_loss(const Var& x, const Var& x_rec, const Var& y, const Var& y_rec);

/// adv_g + adv_f + lambda * cyc.
Var full_objective(const Var& adv_g, const Var& adv_f, const Var& cyc, double lambda);
double full_objective(double adv_g, double adv_f, double cyc, double lambda);

/// Encoder (7x7 stem, two stride-2 convs), residual blocks and a nearest
/// upsampling decoder with a tanh head. Instance norm after every hidden conv.
/// Every conv pads by reflection.
class Generator {
 public:
  Generator(Role role, const GanTrainConfig& config, std::uint64_t seed);

  /// x: [N, 3, S, S] -> [N, 3, S, S] in [-1, 1].
  Var forward(Tape& tape, const Var& x);
  Role role() const noexcept { return role_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  std::size_t image_size() const noexcept { return image_size_; }

 private:
  Role role_;
  std::size_t image_size_;
  ParameterSet params_;
  nn::Conv2d stem_, down1_, down2_, up1_, up2_, head_;
  std::vector<std::pair<nn::Conv2d, nn::Conv2d>> blocks_;
};

/// Four 4x4 conv layers ending in a sigmoid patch grid.
class Discriminator {
 public:
  Discriminator(Role role, const GanTrainConfig& config, std::uint64_t seed);

  /// x: [N, 3, S, S] -> [N, 1, P, P] scores in (0, 1).
  Var forward(Tape& tape, const Var& x);
  Role role() const noexcept { return role_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

 private:
  Role role_;
  ParameterSet params_;
  std::vector<nn::Conv2d> layers_;
};

Generator build_generator(const GanTrainConfig& config, std::uint64_t seed, Role role = Role::G);
Discriminator build_discriminator(const GanTrainConfig& config, std::uint64_t seed, Role role = Role::DY);

/// Deterministic inference pass on one [3, S, S] image.
Tensor translate(Generator& g, const Tensor& image);
std::vector<Tensor> translate_all(Generator& g, const std::vector<Tensor>& images);

/// Mean over images of mean|F(G(x)) - x|.
double cycle_reconstruction_l1(Generator& g, Generator& f, const std::vector<Tensor>& images);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step count at the end of the epoch
  double loss_g = 0.0;   // adversarial term for G (as descended)
  double loss_f = 0.0;
  double loss_dx = 0.0;  // halved discriminator objective actually descended
  double loss_dy = 0.0;
  double loss_cyc = 0.0;
  double lr = 0.0;
  std::optional<double> fid;
};

/// Values captured on the last discriminator update, for auditing the halving.
struct DiscriminatorAudit {
  double adversarial_dx = 0.0;  // adversarial value for (D_X, F), as written
  double adversarial_dy = 0.0;
  double descended_dx = 0.0;    // value whose gradient was applied
  double descended_dy = 0.0;
};

struct CycleGan {
  Generator g;
  Generator f;
  Discriminator dx;
  Discriminator dy;
};

struct GanTrainResult {
  CycleGan model;
  std::vector<EpochRecord> trace;
  DiscriminatorAudit last_audit;
  std::size_t steps = 0;
  std::size_t saturations = 0;
};

/// Optional per-step hook (global step, audit) for instrumentation.
using StepObserver = std::function<void(std::size_t, const DiscriminatorAudit&)>;

/// Alternating generator / discriminator Adam updates. Writes checkpoints and
/// `trace.jsonl` under config.output_dir when set. A non-finite loss raises
/// NumericError; checkpoints already on disk are left untouched.
GanTrainResult train_cyclegan(data::DomainDataset& x_data, data::DomainDataset& y_data, const GanTrainConfig& config,
                              const StepObserver& observer = {});

void save_cyclegan(const std::filesystem::path& dir, const CycleGan& model);
/// Loads weights into networks built from `config`.
CycleGan load_cyclegan(const std::filesystem::path& dir, const GanTrainConfig& config);

}  // namespace gammadesk::gan
