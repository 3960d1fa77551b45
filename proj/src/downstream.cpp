#include "autoiv/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "autoiv/errors.hpp"
#include "autoiv/linalg.hpp"
#include "autoiv/optim.hpp"
#include "autoiv/seed.hpp"

namespace autoiv::ds {

namespace {

Tensor ones(std::size_t n) { return Tensor(n, 1, 1.0); }

Tensor hcat(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return hconcat(std::span<const Tensor>(v));
}

void require_column(const Tensor& t, std::size_t n, const char* what) {
  if (t.rows() != n || t.cols() != 1) {
    throw ContractViolation(std::string(what) + ": expected [" + std::to_string(n) + " x 1], got " +
                            t.shape_str());
  }
}

double pearson(const Tensor& a, std::size_t col, const Tensor& x) {
  const std::size_t n = a.rows();
  double ma = 0.0, mx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a(i, col);
    mx += x[i];
  }
  ma /= static_cast<double>(n);
  mx /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a(i, col) - ma;
    const double dx = x[i] - mx;
    sab += da * dx;
    saa += da * da;
    sxx += dx * dx;
  }
  if (saa == 0.0) {
    throw ContractViolation("was_summary: candidate column " + std::to_string(col) +
                            " has zero variance");
  }
  if (sxx == 0.0) throw ContractViolation("was_summary: treatment has zero variance");
  return sab / std::sqrt(saa * sxx);
}

/// (S^T S / N + ridge I)^-1 S^T T / N
Tensor ridge_solve(const Tensor& S, const Tensor& T, double ridge) {
  const double n = static_cast<double>(S.rows());
  Tensor A = gram(S);
  for (double& v : A.data()) v /= n;
  Tensor B = matmul(S.transpose(), T);
  for (double& v : B.data()) v /= n;
  return cholesky_solve(A, B, ridge);
}

Tensor center(const Tensor& t, std::vector<double>& means) {
  means.assign(t.cols(), 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) means[c] += t(i, c);
  for (double& m : means) m /= static_cast<double>(t.rows());
  Tensor out = t;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) out(i, c) -= means[c];
  return out;
}

}  // namespace

void InstrumentBundle::validate(std::size_t n) const {
  if (instrument.rows() != n || exogenous.rows() != n) {
    throw ContractViolation("InstrumentBundle: row counts " + std::to_string(instrument.rows()) +
                            "/" + std::to_string(exogenous.rows()) + " do not match " +
                            std::to_string(n));
  }
  if (instrument.cols() == 0) throw ContractViolation("InstrumentBundle: no instrument columns");
}

Tensor uas_summary(const Tensor& candidates) {
  if (candidates.cols() == 0) throw ContractViolation("uas_summary: no candidate columns");
  Tensor out(candidates.rows(), 1);
  const double k = static_cast<double>(candidates.cols());
  for (std::size_t i = 0; i < candidates.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < candidates.cols(); ++c) s += candidates(i, c);
    out[i] = s / k;
  }
  return out;
}

std::vector<double> was_weights(const Tensor& candidates, const Tensor& x) {
  if (candidates.cols() == 0) throw ContractViolation("was_summary: no candidate columns");
  require_column(x, candidates.rows(), "was_summary");
  if (candidates.rows() < 2) throw ContractViolation("was_summary: need at least 2 rows");
  std::vector<double> w(candidates.cols());
  for (std::size_t c = 0; c < w.size(); ++c) w[c] = std::abs(pearson(candidates, c, x));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  if (total == 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
  } else {
    for (double& v : w) v /= total;
  }
  return w;
}

Tensor was_summary(const Tensor& candidates, const Tensor& x) {
  const auto w = was_weights(candidates, x);
  Tensor out(candidates.rows(), 1);
  for (std::size_t i = 0; i < candidates.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < w.size(); ++c) s += w[c] * candidates(i, c);
    out[i] = s;
  }
  return out;
}

Scaler Scaler::fit(const Tensor& t) {
  Scaler s;
  s.mean.assign(t.cols(), 0.0);
  s.scale.assign(t.cols(), 1.0);
  if (t.rows() == 0) return s;
  const double n = static_cast<double>(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) s.mean[c] += t(i, c);
  for (double& m : s.mean) m /= n;
  std::vector<double> var(t.cols(), 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const double d = t(i, c) - s.mean[c];
      var[c] += d * d;
    }
  for (std::size_t c = 0; c < t.cols(); ++c) {
    const double sd = std::sqrt(var[c] / n);
    // numerically constant columns (a collapsed stage-1 fit) stay unscaled
    s.scale[c] = sd > 1e-9 * std::max(1.0, std::abs(s.mean[c])) ? sd : 1.0;
  }
  return s;
}

Tensor Scaler::apply(const Tensor& t) const {
  if (t.cols() != mean.size()) {
    throw ContractViolation("Scaler: expected " + std::to_string(mean.size()) + " columns, got " +
                            std::to_string(t.cols()));
  }
  Tensor out = t;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) out(i, c) = (t(i, c) - mean[c]) / scale[c];
  return out;
}

Tensor Scaler::invert(const Tensor& t) const {
  if (t.cols() != mean.size()) throw ContractViolation("Scaler: column mismatch on invert");
  Tensor out = t;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) out(i, c) = t(i, c) * scale[c] + mean[c];
  return out;
}

Tensor poly_features(const Tensor& t, int degree) {
  if (degree < 1) throw ContractViolation("poly_features: degree must be >= 1");
  const std::size_t d = static_cast<std::size_t>(degree);
  Tensor out(t.rows(), t.cols() * d);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      double p = 1.0;
      for (std::size_t k = 0; k < d; ++k) {
        p *= t(i, c);
        out(i, c * d + k) = p;
      }
    }
  return out;
}

Tensor LinearTwoStage::stage2_design(const Tensor& treatment,
                                     const Tensor& exogenous) const {
  Tensor f = poly_features(hconcat(treatment, exogenous), degree_);
  if (ridge_path_) return stage2_scaler_.apply(f);
  return hconcat(f, ones(f.rows()));
}

Tensor LinearTwoStage::predict(const Tensor& x, const Tensor& exogenous) const {
  require_column(x, x.rows(), "LinearTwoStage::predict");
  if (exogenous.rows() != x.rows()) throw ContractViolation("LinearTwoStage::predict: row mismatch");
  Tensor out = matmul(stage2_design(x, exogenous), stage2_);
  if (ridge_path_)
    for (double& v : out.data()) v += intercept_;
  return out;
}

double LinearTwoStage::treatment_coefficient() const {
  return ridge_path_ ? stage2_[0] / stage2_scaler_.scale[0] : stage2_[0];
}

std::unique_ptr<LinearTwoStage> twosls_stage2(const Tensor& fitted_treatment,
                                              const Tensor& exogenous, const Tensor& y, int degree,
                                              double ridge) {
  if (degree < 1) throw ContractViolation("twosls: degree must be >= 1");
  const std::size_t n = fitted_treatment.rows();
  require_column(y, n, "twosls stage 2");
  if (exogenous.rows() != n) throw ContractViolation("twosls stage 2: exogenous row mismatch");
  require_column(fitted_treatment, n, "twosls stage 2");
  auto est = std::make_unique<LinearTwoStage>();
  est->degree_ = degree;
  est->ridge_path_ = ridge >= 0.0;
  est->method_ = est->ridge_path_ ? "2sls_poly" : "2sls_van";
  est->fitted_treatment_ = fitted_treatment;
  if (est->ridge_path_) {
    const Tensor f = poly_features(hconcat(fitted_treatment, exogenous), degree);
    est->stage2_scaler_ = Scaler::fit(f);
    std::vector<double> ym;
    const Tensor yc = center(y, ym);
    est->intercept_ = ym[0];
    est->stage2_ = ridge_solve(est->stage2_scaler_.apply(f), yc, ridge);
  } else {
    est->stage2_ = least_squares(est->stage2_design(fitted_treatment, exogenous), y, "2SLS stage 2");
  }
  return est;
}

std::unique_ptr<LinearTwoStage> twosls_van_fit(const InstrumentBundle& bundle, const Tensor& x,
                                               const Tensor& y) {
  const std::size_t n = x.rows();
  bundle.validate(n);
  require_column(x, n, "twosls_van_fit");
  require_column(y, n, "twosls_van_fit");
  const Tensor d1 = hcat({bundle.instrument, bundle.exogenous, ones(n)});
  const Tensor b1 = least_squares(d1, x, "2SLS stage 1");
  const Tensor x_hat = matmul(d1, b1);
  auto est = twosls_stage2(x_hat, bundle.exogenous, y, 1, -1.0);
  est->stage1_ = b1;
  est->diagnostics["stage1_rows"] = static_cast<double>(n);
  return est;
}

std::unique_ptr<LinearTwoStage> twosls_poly_fit(const InstrumentBundle& bundle, const Tensor& x,
                                                const Tensor& y, int degree, double ridge) {
  const std::size_t n = x.rows();
  bundle.validate(n);
  require_column(x, n, "twosls_poly_fit");
  require_column(y, n, "twosls_poly_fit");
  if (degree < 1) throw ContractViolation("twosls_poly_fit: degree must be >= 1");
  if (!(ridge >= 0.0)) throw ContractViolation("twosls_poly_fit: ridge must be >= 0");

  const Tensor f1 = poly_features(hconcat(bundle.instrument, bundle.exogenous), degree);
  const Scaler s1 = Scaler::fit(f1);
  std::vector<double> x_mean;
  const Tensor xc = center(x, x_mean);
  const Tensor scaled1 = s1.apply(f1);
  const Tensor b1 = ridge_solve(scaled1, xc, ridge);
  Tensor x_hat = matmul(scaled1, b1);
  for (double& v : x_hat.data()) v += x_mean[0];

  auto est = twosls_stage2(x_hat, bundle.exogenous, y, degree, ridge);
  est->stage1_ = b1;
  est->diagnostics["ridge"] = ridge;
  est->diagnostics["degree"] = degree;
  return est;
}

void NnOptions::validate() const {
  for (auto w : hidden)
    if (w == 0) throw ContractViolation("NnOptions: hidden width must be >= 1");
  if (epochs == 0) throw ContractViolation("NnOptions: epochs must be >= 1");
  if (batch_size == 0) throw ContractViolation("NnOptions: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ContractViolation("NnOptions: lr must be > 0");
}

MlpRegressor MlpRegressor::fit(const Tensor& inputs, const Tensor& targets, const NnOptions& opts,
                               const std::string& what) {
  opts.validate();
  const std::size_t n = inputs.rows();
  if (n == 0 || targets.rows() != n) throw ContractViolation(what + ": empty or mismatched rows");
  MlpRegressor r;
  r.in_ = Scaler::fit(inputs);
  r.out_ = Scaler::fit(targets);
  const Tensor xs = r.in_.apply(inputs);
  const Tensor ys = r.out_.apply(targets);
  r.net_ = nn::Mlp::create(r.store_, {inputs.cols(), targets.cols(), opts.hidden, opts.activation},
                           "net", derive_seed(opts.seed, "init"));

  AdamState adam(AdamOptions{opts.lr});
  std::mt19937_64 rng(derive_seed(opts.seed, "shuffle"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::min(opts.batch_size, n);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);
      Graph g;
      const NodeId pred = r.net_.forward(g, r.store_, g.constant(xs.select_rows(rows)), true);
      const NodeId loss = g.mean(g.square(g.sub(pred, g.constant(ys.select_rows(rows)))));
      if (!std::isfinite(g.value(loss).item())) {
        throw FitError(what + ": non-finite loss at epoch " + std::to_string(epoch));
      }
      try {
        adam_step(r.store_, gradients_by_param(g, backward(g, loss)), adam);
      } catch (const NumericError& e) {
        throw FitError(what + ": " + e.what());
      }
    }
  }
  const Tensor fitted = r.net_.predict(r.store_, xs);
  double sse = 0.0;
  for (std::size_t i = 0; i < fitted.size(); ++i) sse += (fitted[i] - ys[i]) * (fitted[i] - ys[i]);
  r.final_loss_ = sse / static_cast<double>(fitted.size());
  if (!std::isfinite(r.final_loss_)) throw FitError(what + ": non-finite final loss");
  return r;
}

Tensor MlpRegressor::predict(const Tensor& inputs) const {
  return out_.invert(net_.predict(store_, in_.apply(inputs)));
}

NeuralTwoStage::NeuralTwoStage(MlpRegressor stage1, MlpRegressor stage2)
    : stage1_(std::move(stage1)), stage2_(std::move(stage2)) {}

Tensor NeuralTwoStage::predict(const Tensor& x, const Tensor& exogenous) const {
  return stage2_.predict(hconcat(x, exogenous));
}

std::unique_ptr<NeuralTwoStage> twosls_nn_fit(const InstrumentBundle& bundle, const Tensor& x,
                                              const Tensor& y, const NnOptions& stage1,
                                              const NnOptions& stage2) {
  const std::size_t n = x.rows();
  bundle.validate(n);
  require_column(x, n, "twosls_nn_fit");
  require_column(y, n, "twosls_nn_fit");
  MlpRegressor first =
      MlpRegressor::fit(hconcat(bundle.instrument, bundle.exogenous), x, stage1, "2SLS-NN stage 1");
  const Tensor x_hat = first.predict(hconcat(bundle.instrument, bundle.exogenous));
  MlpRegressor second = MlpRegressor::fit(hconcat(x_hat, bundle.exogenous), y, stage2,
                                          "2SLS-NN stage 2");
  const double second_loss = second.final_loss();
  auto est = std::make_unique<NeuralTwoStage>(std::move(first), std::move(second));
  est->diagnostics["stage1_loss"] = est->stage1().final_loss();
  est->diagnostics["stage2_loss"] = second_loss;
  return est;
}

DirectNn::DirectNn(MlpRegressor net) : net_(std::move(net)) {}

Tensor DirectNn::predict(const Tensor& x, const Tensor& exogenous) const {
  return net_.predict(hconcat(x, exogenous));
}

std::unique_ptr<DirectNn> direct_nn_fit(const Tensor& x, const Tensor& y, const Tensor& exogenous,
                                        const NnOptions& opts) {
  const std::size_t n = x.rows();
  require_column(x, n, "direct_nn_fit");
  require_column(y, n, "direct_nn_fit");
  if (exogenous.rows() != n) throw ContractViolation("direct_nn_fit: exogenous row mismatch");
  auto est = std::make_unique<DirectNn>(
      MlpRegressor::fit(hconcat(x, exogenous), y, opts, "DirectNN"));
  est->diagnostics["train_loss"] = est->net().final_loss();
  return est;
}

double median_heuristic(const Tensor& features) {
  const std::size_t n = features.rows();
  if (n < 2) throw ContractViolation("median_heuristic: need at least 2 rows");
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  if (n > 1000) {
    std::vector<std::size_t> sub;
    const std::size_t stride = (n + 999) / 1000;
    for (std::size_t i = 0; i < n; i += stride) sub.push_back(i);
    rows = std::move(sub);
  }
  std::vector<double> d;
  d.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      double s = 0.0;
      for (std::size_t c = 0; c < features.cols(); ++c) {
        const double diff = features(rows[a], c) - features(rows[b], c);
        s += diff * diff;
      }
      d.push_back(std::sqrt(s));
    }
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  const double m = *mid;
  return m > 0.0 ? m : 1.0;
}

Tensor rbf_kernel(const Tensor& a, const Tensor& b, double scale) {
  if (!(scale > 0.0)) throw ContractViolation("rbf_kernel: scale must be > 0");
  if (a.cols() != b.cols()) throw ContractViolation("rbf_kernel: feature width mismatch");
  const double denom = 2.0 * scale * scale;
  Tensor k(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const double diff = a(i, c) - b(j, c);
        s += diff * diff;
      }
      k(i, j) = std::exp(-s / denom);
    }
  return k;
}

Tensor KernelIv::predict(const Tensor& x, const Tensor& exogenous) const {
  require_column(x, x.rows(), "KernelIv::predict");
  const Tensor k = rbf_kernel(x_scaler_.apply(hconcat(x, exogenous)), x_train_, x_scale_);
  Tensor out = matmul(k, alpha_);
  for (double& v : out.data()) v += y_mean_;
  return out;
}

std::unique_ptr<KernelIv> kerneliv_fit(const InstrumentBundle& bundle, const Tensor& x,
                                       const Tensor& y, const KernelIvOptions& opts) {
  const std::size_t n = x.rows();
  bundle.validate(n);
  require_column(x, n, "kerneliv_fit");
  require_column(y, n, "kerneliv_fit");
  const double nd = static_cast<double>(n);
  const double ridge1 = opts.ridge1 < 0.0 ? 1e-3 * nd : opts.ridge1;
  const double ridge2 = opts.ridge2 < 0.0 ? 1e-3 * nd : opts.ridge2;
  if (!(ridge1 > 0.0) || !(ridge2 > 0.0)) throw ContractViolation("kerneliv_fit: ridges must be > 0");

  auto est = std::make_unique<KernelIv>();
  const Tensor zf_raw = hconcat(bundle.instrument, bundle.exogenous);
  const Tensor zf = Scaler::fit(zf_raw).apply(zf_raw);
  const Tensor xf_raw = hconcat(x, bundle.exogenous);
  est->x_scaler_ = Scaler::fit(xf_raw);
  est->x_train_ = est->x_scaler_.apply(xf_raw);
  est->z_scale_ = opts.instrument_scale > 0.0 ? opts.instrument_scale : median_heuristic(zf);
  est->x_scale_ = opts.treatment_scale > 0.0 ? opts.treatment_scale : median_heuristic(est->x_train_);

  const Tensor kzz = rbf_kernel(zf, zf, est->z_scale_);
  const Tensor kxx = rbf_kernel(est->x_train_, est->x_train_, est->x_scale_);

  const Tensor m = cholesky_solve(kzz, kzz, ridge1);
  const Tensor w = matmul(kxx, m);

  std::vector<double> ym;
  const Tensor yc = center(y, ym);
  est->y_mean_ = ym[0];

  Tensor a = matmul(w, w.transpose());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += ridge2 * kxx[i];
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += a(i, i);
  const double jitter = 1e-10 * trace / nd;
  est->alpha_ = cholesky_solve(a, matmul(w, yc), jitter);
  est->diagnostics["ridge1"] = ridge1;
  est->diagnostics["ridge2"] = ridge2;
  est->diagnostics["instrument_scale"] = est->z_scale_;
  est->diagnostics["treatment_scale"] = est->x_scale_;
  return est;
}

std::unique_ptr<KernelIv> kerneliv_fit(const InstrumentBundle& bundle, const Tensor& x,
                                       const Tensor& y, double kernel_scale, double ridge1,
                                       double ridge2) {
  if (!(kernel_scale > 0.0)) throw ContractViolation("kerneliv_fit: kernel_scale must be > 0");
  if (!(ridge1 > 0.0) || !(ridge2 > 0.0)) throw ContractViolation("kerneliv_fit: ridges must be > 0");
  return kerneliv_fit(bundle, x, y, KernelIvOptions{kernel_scale, kernel_scale, ridge1, ridge2});
}

EvalReport evaluate(const FittedEstimator& fitted, const Tensor& x, const Tensor& exogenous,
                    const Tensor& y_structural, std::size_t grid_size,
                    const std::function<double(double)>& truth) {
  const std::size_t n = x.rows();
  require_column(x, n, "evaluate");
  require_column(y_structural, n, "evaluate");
  if (n == 0) throw ContractViolation("evaluate: empty test split");
  if (exogenous.rows() != n) throw ContractViolation("evaluate: exogenous row mismatch");
  if (grid_size < 2) throw ContractViolation("evaluate: grid_size must be >= 2");

  EvalReport r;
  r.method = fitted.method();
  const Tensor pred = fitted.predict(x, exogenous);
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred[i] - y_structural[i];
    sse += d * d;
  }
  r.mse_test = sse / static_cast<double>(n);

  const auto [lo_it, hi_it] = std::minmax_element(x.vec().begin(), x.vec().end());
  double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) hi = lo + 1.0;
  Tensor gx(grid_size, 1);
  for (std::size_t k = 0; k < grid_size; ++k)
    gx[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(grid_size - 1);
  Tensor gc(grid_size, exogenous.cols());
  for (std::size_t c = 0; c < exogenous.cols(); ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += exogenous(i, c);
    m /= static_cast<double>(n);
    for (std::size_t k = 0; k < grid_size; ++k) gc(k, c) = m;
  }
  const Tensor ghat = fitted.predict(gx, gc);
  for (std::size_t k = 0; k < grid_size; ++k) {
    r.curve_x.push_back(gx[k]);
    r.curve_g_hat.push_back(ghat[k]);
    r.curve_g_true.push_back(truth ? truth(gx[k]) : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

EvalReport evaluate(const FittedEstimator& fitted, const data::SyntheticDataset& test,
                    std::size_t grid_size, const std::function<double(double)>& truth) {
  return evaluate(fitted, test.x, test.exogenous_extra, test.y_structural, grid_size, truth);
}

}  // namespace autoiv::ds
