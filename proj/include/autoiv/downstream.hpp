#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "autoiv/datagen.hpp"
#include "autoiv/nets.hpp"
#include "autoiv/tensor.hpp"

namespace autoiv::ds {

/// What a two-stage estimator sees besides (x, y): the instrument block and
/// exogenous covariates that enter both stages. `exogenous` may have 0 columns.
struct InstrumentBundle {
  Tensor instrument;
  Tensor exogenous;

  void validate(std::size_t n) const;
};

/// Row-wise mean of the candidate columns.
Tensor uas_summary(const Tensor& candidates);
/// sum_j w_j c_j with w_j = |corr(c_j, x)| / sum_k |corr(c_k, x)|.
Tensor was_summary(const Tensor& candidates, const Tensor& x);
std::vector<double> was_weights(const Tensor& candidates, const Tensor& x);

/// A fitted structural-function estimator g_hat(x, exogenous).
class FittedEstimator {
 public:
  virtual ~FittedEstimator() = default;
  virtual std::string method() const = 0;
  /// Deterministic structural prediction; x is [N x 1], exogenous [N x k].
  virtual Tensor predict(const Tensor& x, const Tensor& exogenous) const = 0;

  /// Fit diagnostics (losses, resolved hyperparameters).
  std::map<std::string, double> diagnostics;
};

/// Per-column affine map to zero mean and unit (population) std. Constant
/// columns are centered but left unscaled.
struct Scaler {
  std::vector<double> mean, scale;
  static Scaler fit(const Tensor& t);
  Tensor apply(const Tensor& t) const;
  Tensor invert(const Tensor& t) const;
};

/// Additive polynomial basis: x_j, x_j^2, ..., x_j^degree for every column j.
Tensor poly_features(const Tensor& t, int degree);

/// Linear 2SLS, optionally on an additive polynomial basis. Stage 1 regresses
/// x on the basis of [instrument, exogenous]; stage 2 regresses y on the basis
/// of [x_hat, exogenous]. Prediction evaluates the stage-2 basis at the real x.
class LinearTwoStage : public FittedEstimator {
 public:
  std::string method() const override { return method_; }
  Tensor predict(const Tensor& x, const Tensor& exogenous) const override;

  /// Stage-2 coefficient on x (the x^1 term for the polynomial variant).
  double treatment_coefficient() const;
  const Tensor& stage1_coefficients() const noexcept { return stage1_; }
  const Tensor& stage2_coefficients() const noexcept { return stage2_; }
  double intercept() const noexcept { return intercept_; }
  /// Stage-1 fitted treatment on the training rows.
  const Tensor& fitted_treatment() const noexcept { return fitted_treatment_; }

 private:
  friend std::unique_ptr<LinearTwoStage> twosls_van_fit(const InstrumentBundle&, const Tensor&,
                                                         const Tensor&);
  friend std::unique_ptr<LinearTwoStage> twosls_poly_fit(const InstrumentBundle&, const Tensor&,
                                                          const Tensor&, int, double);
  friend std::unique_ptr<LinearTwoStage> twosls_stage2(const Tensor&, const Tensor&, const Tensor&,
                                                        int, double);
  Tensor stage2_design(const Tensor& treatment, const Tensor& exogenous) const;

  std::string method_;
  int degree_ = 1;
  bool ridge_path_ = false;
  Tensor stage1_;
  Tensor stage2_;  // ridge path: coefficients on scaled features; OLS path: [features..., 1]
  double intercept_ = 0.0;
  Scaler stage2_scaler_;
  Tensor fitted_treatment_;
};

/// Stage 1: OLS of x on [instrument, exogenous, 1]; stage 2: OLS of y on
/// [x_hat, exogenous, 1]. Rank deficiency throws FitError naming the stage.
std::unique_ptr<LinearTwoStage> twosls_van_fit(const InstrumentBundle& bundle, const Tensor& x,
                                               const Tensor& y);
/// Ridge solves on the standardized basis (intercept unpenalized):
/// (F^T F / N + ridge I) b = F^T (t - mean t) / N.
std::unique_ptr<LinearTwoStage> twosls_poly_fit(const InstrumentBundle& bundle, const Tensor& x,
                                                const Tensor& y, int degree = 3,
                                                double ridge = 1e-3);
/// Stage 2 alone from an already fitted treatment. Only x_hat and the
/// exogenous block are read. ridge < 0 selects the unregularized QR path.
std::unique_ptr<LinearTwoStage> twosls_stage2(const Tensor& fitted_treatment,
                                              const Tensor& exogenous, const Tensor& y, int degree,
                                              double ridge);

struct NnOptions {
  std::vector<std::size_t> hidden = {64, 64};
  nn::Activation activation = nn::Activation::Elu;
  std::size_t epochs = 150;  // passes over the data
  std::size_t batch_size = 128;
  double lr = 3e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

/// MLP regression with inputs and targets standardized internally.
class MlpRegressor {
 public:
  static MlpRegressor fit(const Tensor& inputs, const Tensor& targets, const NnOptions& opts,
                          const std::string& what);
  Tensor predict(const Tensor& inputs) const;
  double final_loss() const noexcept { return final_loss_; }

 private:
  ParameterStore store_;
  nn::Mlp net_;
  Scaler in_, out_;
  double final_loss_ = 0.0;
};

class NeuralTwoStage : public FittedEstimator {
 public:
  NeuralTwoStage(MlpRegressor stage1, MlpRegressor stage2);
  std::string method() const override { return "2sls_nn"; }
  Tensor predict(const Tensor& x, const Tensor& exogenous) const override;
  const MlpRegressor& stage1() const noexcept { return stage1_; }

 private:
  MlpRegressor stage1_, stage2_;
};

/// Stage 1: MLP x ~ [instrument, exogenous]; stage 2: MLP y ~ [x_hat, exogenous].
std::unique_ptr<NeuralTwoStage> twosls_nn_fit(const InstrumentBundle& bundle, const Tensor& x,
                                              const Tensor& y, const NnOptions& stage1,
                                              const NnOptions& stage2);

class DirectNn : public FittedEstimator {
 public:
  explicit DirectNn(MlpRegressor net);
  std::string method() const override { return "direct_nn"; }
  Tensor predict(const Tensor& x, const Tensor& exogenous) const override;
  const MlpRegressor& net() const noexcept { return net_; }

 private:
  MlpRegressor net_;
};

/// Single-stage MLP y ~ [x, exogenous]; no confounding correction.
std::unique_ptr<DirectNn> direct_nn_fit(const Tensor& x, const Tensor& y, const Tensor& exogenous,
                                        const NnOptions& opts);

/// Median pairwise Euclidean distance between rows (rows subsampled
/// deterministically above 1000).
double median_heuristic(const Tensor& features);
/// exp(-|a_i - b_j|^2 / (2 s^2)).
Tensor rbf_kernel(const Tensor& a, const Tensor& b, double scale);

struct KernelIvOptions {
  double instrument_scale = 0.0;  // <= 0: median heuristic
  double treatment_scale = 0.0;   // <= 0: median heuristic
  double ridge1 = -1.0;           // < 0: 1e-3 N
  double ridge2 = -1.0;           // < 0: 1e-3 N
};

class KernelIv : public FittedEstimator {
 public:
  std::string method() const override { return "kerneliv"; }
  Tensor predict(const Tensor& x, const Tensor& exogenous) const override;
  double instrument_scale() const noexcept { return z_scale_; }
  double treatment_scale() const noexcept { return x_scale_; }

 private:
  friend std::unique_ptr<KernelIv> kerneliv_fit(const InstrumentBundle&, const Tensor&,
                                                const Tensor&, const KernelIvOptions&);
  Scaler x_scaler_;
  Tensor x_train_;  // standardized [x, exogenous]
  Tensor alpha_;    // dual weights [N x 1]
  double y_mean_ = 0.0;
  double z_scale_ = 0.0, x_scale_ = 0.0;
};

/// Kernel IV on RBF features. Stage 1 embeds treatment features conditioned
/// on instrument features; stage 2 is kernel ridge of y on the embedding:
///   W = K_xx (K_zz + ridge1 I)^-1 K_zz,  a = (W W^T + ridge2 K_xx)^-1 W (y - mean y).
std::unique_ptr<KernelIv> kerneliv_fit(const InstrumentBundle& bundle, const Tensor& x,
                                       const Tensor& y, const KernelIvOptions& opts = {});
std::unique_ptr<KernelIv> kerneliv_fit(const InstrumentBundle& bundle, const Tensor& x,
                                       const Tensor& y, double kernel_scale, double ridge1,
                                       double ridge2);

struct EvalReport {
  std::string method;
  double mse_test = 0.0;
  std::vector<double> curve_x, curve_g_true, curve_g_hat;
};

/// mse_test = mean (g_hat(x_i, c_i) - y_structural_i)^2. The curve spans
/// [min x, max x] on `grid_size` points with exogenous columns at their means;
/// g_true is filled by `truth` when given, NaN otherwise.
EvalReport evaluate(const FittedEstimator& fitted, const Tensor& x, const Tensor& exogenous,
                    const Tensor& y_structural, std::size_t grid_size,
                    const std::function<double(double)>& truth = {});
/// Uses the split's own exogenous columns.
EvalReport evaluate(const FittedEstimator& fitted, const data::SyntheticDataset& test,
                    std::size_t grid_size, const std::function<double(double)>& truth = {});

}  // namespace autoiv::ds
