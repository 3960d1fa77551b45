#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autoiv/datagen.hpp"
#include "autoiv/mi.hpp"
#include "autoiv/nets.hpp"
#include "autoiv/optim.hpp"

namespace autoiv {

struct AutoIvConfig {
  std::size_t rep_dim = 2;
  double alpha = 1.0;
  double eta = 1.0;
  double sigma = 0.5;
  std::size_t epochs = 3000;
  std::size_t batch_size = 256;
  double lr_lld = 1e-3;
  double lr_mi = 1e-3;
  double lr_x = 1e-3;
  double lr_y = 1e-3;
  std::uint64_t seed = 0;
  mi::Ablation ablation;

  // hidden widths per network group
  std::vector<std::size_t> rep_hidden = {128, 128};
  std::vector<std::size_t> head_hidden = {128, 128};
  std::vector<std::size_t> regression_hidden = {128, 128};
  std::vector<std::size_t> emb_hidden = {32};
  std::size_t emb_dim = 8;
  nn::Activation activation = nn::Activation::Elu;

  /// Validation outcome loss is evaluated every this many epochs (and on the last).
  std::size_t validate_every = 10;

  /// Throws ContractViolation when the config is unusable for `n_train` rows.
  void validate(std::size_t n_train) const;
  friend bool operator==(const AutoIvConfig&, const AutoIvConfig&) = default;
};

void to_json(nlohmann::json& j, const AutoIvConfig& c);
/// Missing keys keep their defaults, so partial override documents work.
void from_json(const nlohmann::json& j, AutoIvConfig& c);

struct EpochLosses {
  double lld = 0.0;
  double mi = 0.0;
  double l_x = 0.0;
  double l_y = 0.0;
  double gap_zx = 0.0;  // unweighted gap of q(x | z) on the batch, before the MI step
  double gap_zy = 0.0;  // pair-weighted gap of q(y | z)
};

struct ValidationPoint {
  std::size_t epoch = 0;
  double outcome_loss = 0.0;
};

struct AutoIvModel {
  AutoIvConfig config;
  std::size_t input_dim = 0;
  ParameterStore params;

  nn::Mlp phi_z, phi_c;
  nn::GaussianHead head_zx, head_zy, head_cx, head_cy, head_zc;
  nn::Mlp f_x, f_emb, f_y;

  std::vector<EpochLosses> history;
  std::vector<ValidationPoint> validation;
  std::size_t best_epoch = 0;

  /// Fresh, seeded parameters for inputs of width `input_dim`.
  static AutoIvModel initialize(const AutoIvConfig& config, std::size_t input_dim);

  std::vector<ParamId> representation_params() const;
  std::vector<ParamId> head_params() const;
  std::vector<ParamId> treatment_params() const;
  std::vector<ParamId> outcome_params() const;  // f_emb and f_y
};

struct Batch {
  Tensor v, x, y;
};

Batch make_batch(const data::SyntheticDataset& d);
Batch make_batch(const data::SyntheticDataset& d, std::span<const std::size_t> rows);

/// (1/B) sum |x_i - f_x(phi_z(v_i), phi_c(v_i))|^2.
NodeId treatment_loss(Graph& g, const AutoIvModel& m, const Batch& b, bool reps_trainable,
                      bool fx_trainable);
/// (1/B) sum (y_i - f_y(phi_c(v_i), f_emb(f_x(phi_z(v_i), phi_c(v_i)))))^2.
/// When fx_trainable is false f_x is frozen but gradients still pass through it.
NodeId outcome_loss(Graph& g, const AutoIvModel& m, const Batch& b, bool reps_trainable,
                    bool fx_trainable, bool outcome_trainable);
double treatment_loss(const AutoIvModel& m, const Batch& b);
double outcome_loss(const AutoIvModel& m, const Batch& b);

/// Drives the four alternating phases over one model. Each phase owns its
/// own Adam state and updates only its declared parameter groups.
class AutoIvTrainer {
 public:
  explicit AutoIvTrainer(AutoIvModel& model);

  /// Phase 4: five variational heads minimize L^LLD; representations frozen.
  double step_lld(const Batch& b);
  /// Phase 5: phi_z, phi_c minimize L^MI; heads frozen. Also fills the gaps.
  double step_mi(const Batch& b, EpochLosses* record = nullptr);
  /// Phase 6: phi_z, phi_c, f_x minimize L_X.
  double step_treatment(const Batch& b);
  /// Phase 7: phi_z, phi_c, f_emb, f_y minimize L_Y; f_x frozen.
  double step_outcome(const Batch& b);

  /// All four phases once, in order. NaN losses throw NumericError naming the
  /// phase and `epoch`.
  EpochLosses run_epoch(const Batch& b, std::size_t epoch);

 private:
  void apply(const Graph& g, NodeId loss, AdamState& state, const char* phase);

  AutoIvModel& model_;
  AdamState lld_state_, mi_state_, x_state_, y_state_;
  std::size_t epoch_ = 0;
};

/// Full alternating optimization. The parameters with the best validation
/// outcome loss are retained (final parameters when the two-stage phases are
/// ablated or no validation split is given). Deterministic in config.seed.
AutoIvModel train_autoiv(const data::SyntheticDataset& train, const data::SyntheticDataset* valid,
                         const AutoIvConfig& config);

/// Forward pass of the trained representation networks: (z_rep, c_rep).
std::pair<Tensor, Tensor> extract_representations(const AutoIvModel& model, const Tensor& v);

/// Writes <prefix>.json (format tag, config, shapes, history) and <prefix>.bin.
void save_model(const AutoIvModel& model, const std::filesystem::path& prefix);
AutoIvModel load_model(const std::filesystem::path& prefix);

}  // namespace autoiv
