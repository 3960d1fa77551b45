#include "autoiv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "autoiv/errors.hpp"
#include "autoiv/seed.hpp"
#include "autoiv/serialize.hpp"

namespace autoiv {

namespace {

constexpr const char* kModelFormat = "autoiv-model/1";

nn::MlpSpec spec_of(std::size_t in, std::size_t out, const std::vector<std::size_t>& hidden,
                    nn::Activation act) {
  return nn::MlpSpec{in, out, hidden, act};
}

struct Layout {
  nn::MlpSpec phi, head_x, head_y, head_zc, f_x, f_emb, f_y;
};

Layout layout_of(const AutoIvConfig& c, std::size_t input_dim) {
  Layout l;
  l.phi = spec_of(input_dim, c.rep_dim, c.rep_hidden, c.activation);
  l.head_x = spec_of(c.rep_dim, 1, c.head_hidden, c.activation);
  l.head_y = l.head_x;
  l.head_zc = spec_of(c.rep_dim, c.rep_dim, c.head_hidden, c.activation);
  l.f_x = spec_of(2 * c.rep_dim, 1, c.regression_hidden, c.activation);
  l.f_emb = spec_of(1, c.emb_dim, c.emb_hidden, c.activation);
  l.f_y = spec_of(c.rep_dim + c.emb_dim, 1, c.regression_hidden, c.activation);
  return l;
}

void append(std::vector<ParamId>& out, const std::vector<ParamId>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

void check_finite(double v, const char* phase, std::size_t epoch) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite loss in phase ") + phase + " at epoch " +
                           std::to_string(epoch),
                       0);
  }
}

}  // namespace

void AutoIvConfig::validate(std::size_t n_train) const {
  if (rep_dim < 1) throw ContractViolation("AutoIvConfig: rep_dim must be >= 1");
  if (epochs < 1) throw ContractViolation("AutoIvConfig: epochs must be >= 1");
  if (batch_size < 2) throw ContractViolation("AutoIvConfig: batch_size must be >= 2");
  if (n_train == 0) throw ContractViolation("AutoIvConfig: empty training set");
  if (batch_size > n_train) {
    throw ContractViolation("AutoIvConfig: batch_size " + std::to_string(batch_size) +
                            " exceeds training rows " + std::to_string(n_train));
  }
  if (!(alpha >= 0.0) || !(eta >= 0.0)) throw ContractViolation("AutoIvConfig: alpha, eta >= 0");
  if (!(sigma > 0.0)) throw ContractViolation("AutoIvConfig: sigma must be > 0");
  for (double lr : {lr_lld, lr_mi, lr_x, lr_y})
    if (!(lr > 0.0)) throw ContractViolation("AutoIvConfig: learning rates must be > 0");
  if (emb_dim < 1) throw ContractViolation("AutoIvConfig: emb_dim must be >= 1");
  if (validate_every < 1) throw ContractViolation("AutoIvConfig: validate_every must be >= 1");
}

void to_json(nlohmann::json& j, const AutoIvConfig& c) {
  j = {{"rep_dim", c.rep_dim},
       {"alpha", c.alpha},
       {"eta", c.eta},
       {"sigma", c.sigma},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr_lld", c.lr_lld},
       {"lr_mi", c.lr_mi},
       {"lr_x", c.lr_x},
       {"lr_y", c.lr_y},
       {"seed", c.seed},
       {"ablation",
        {{"disable_z_mi", c.ablation.disable_z_mi},
         {"disable_c_mi", c.ablation.disable_c_mi},
         {"disable_zc_reg", c.ablation.disable_zc_reg},
         {"disable_two_stage", c.ablation.disable_two_stage}}},
       {"rep_hidden", c.rep_hidden},
       {"head_hidden", c.head_hidden},
       {"regression_hidden", c.regression_hidden},
       {"emb_hidden", c.emb_hidden},
       {"emb_dim", c.emb_dim},
       {"activation", nn::to_string(c.activation)},
       {"validate_every", c.validate_every}};
}

void from_json(const nlohmann::json& j, AutoIvConfig& c) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("rep_dim", c.rep_dim);
  opt("alpha", c.alpha);
  opt("eta", c.eta);
  opt("sigma", c.sigma);
  opt("epochs", c.epochs);
  opt("batch_size", c.batch_size);
  if (j.contains("lr")) {
    const double lr = j.at("lr").get<double>();
    c.lr_lld = c.lr_mi = c.lr_x = c.lr_y = lr;
  }
  opt("lr_lld", c.lr_lld);
  opt("lr_mi", c.lr_mi);
  opt("lr_x", c.lr_x);
  opt("lr_y", c.lr_y);
  opt("seed", c.seed);
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    auto flag = [&](const char* key, bool& field) {
      if (a.contains(key)) a.at(key).get_to(field);
    };
    flag("disable_z_mi", c.ablation.disable_z_mi);
    flag("disable_c_mi", c.ablation.disable_c_mi);
    flag("disable_zc_reg", c.ablation.disable_zc_reg);
    flag("disable_two_stage", c.ablation.disable_two_stage);
  }
  opt("rep_hidden", c.rep_hidden);
  opt("head_hidden", c.head_hidden);
  opt("regression_hidden", c.regression_hidden);
  opt("emb_hidden", c.emb_hidden);
  opt("emb_dim", c.emb_dim);
  if (j.contains("activation"))
    c.activation = nn::activation_from_string(j.at("activation").get<std::string>());
  opt("validate_every", c.validate_every);
}

AutoIvModel AutoIvModel::initialize(const AutoIvConfig& config, std::size_t input_dim) {
  if (input_dim == 0) throw ContractViolation("AutoIvModel: input_dim must be >= 1");
  AutoIvModel m;
  m.config = config;
  m.input_dim = input_dim;
  const Layout l = layout_of(config, input_dim);
  const std::uint64_t s = config.seed;
  m.phi_z = nn::Mlp::create(m.params, l.phi, "phi_z", derive_seed(s, "phi_z"));
  m.phi_c = nn::Mlp::create(m.params, l.phi, "phi_c", derive_seed(s, "phi_c"));
  m.head_zx = nn::GaussianHead::create(m.params, l.head_x, "head_zx", derive_seed(s, "head_zx"));
  m.head_zy = nn::GaussianHead::create(m.params, l.head_y, "head_zy", derive_seed(s, "head_zy"));
  m.head_cx = nn::GaussianHead::create(m.params, l.head_x, "head_cx", derive_seed(s, "head_cx"));
  m.head_cy = nn::GaussianHead::create(m.params, l.head_y, "head_cy", derive_seed(s, "head_cy"));
  m.head_zc = nn::GaussianHead::create(m.params, l.head_zc, "head_zc", derive_seed(s, "head_zc"));
  m.f_x = nn::Mlp::create(m.params, l.f_x, "f_x", derive_seed(s, "f_x"));
  m.f_emb = nn::Mlp::create(m.params, l.f_emb, "f_emb", derive_seed(s, "f_emb"));
  m.f_y = nn::Mlp::create(m.params, l.f_y, "f_y", derive_seed(s, "f_y"));
  return m;
}

std::vector<ParamId> AutoIvModel::representation_params() const {
  std::vector<ParamId> out = phi_z.params();
  append(out, phi_c.params());
  return out;
}

std::vector<ParamId> AutoIvModel::head_params() const {
  std::vector<ParamId> out;
  for (const auto* h : {&head_zx, &head_zy, &head_cx, &head_cy, &head_zc}) append(out, h->params());
  return out;
}

std::vector<ParamId> AutoIvModel::treatment_params() const { return f_x.params(); }

std::vector<ParamId> AutoIvModel::outcome_params() const {
  std::vector<ParamId> out = f_emb.params();
  append(out, f_y.params());
  return out;
}

Batch make_batch(const data::SyntheticDataset& d) { return Batch{d.v, d.x, d.y}; }

Batch make_batch(const data::SyntheticDataset& d, std::span<const std::size_t> rows) {
  return Batch{d.v.select_rows(rows), d.x.select_rows(rows), d.y.select_rows(rows)};
}

namespace {

void check_batch(const AutoIvModel& m, const Batch& b) {
  if (b.v.rows() == 0) throw ContractViolation("AutoIV: empty batch");
  if (b.v.cols() != m.input_dim) {
    throw ContractViolation("AutoIV: batch has " + std::to_string(b.v.cols()) +
                            " candidate columns, model expects " + std::to_string(m.input_dim));
  }
  if (b.x.rows() != b.v.rows() || b.y.rows() != b.v.rows() || b.x.cols() != 1 || b.y.cols() != 1) {
    throw ContractViolation("AutoIV: batch x/y must be [N x 1] matching v");
  }
}

NodeId predicted_treatment(Graph& g, const AutoIvModel& m, NodeId z, NodeId c, bool fx_trainable) {
  return m.f_x.forward(g, m.params, g.concat_cols(z, c), fx_trainable);
}

}  // namespace

NodeId treatment_loss(Graph& g, const AutoIvModel& m, const Batch& b, bool reps_trainable,
                      bool fx_trainable) {
  check_batch(m, b);
  const NodeId v = g.constant(b.v);
  const NodeId z = m.phi_z.forward(g, m.params, v, reps_trainable);
  const NodeId c = m.phi_c.forward(g, m.params, v, reps_trainable);
  const NodeId xhat = predicted_treatment(g, m, z, c, fx_trainable);
  return g.mean(g.square(g.sub(g.constant(b.x), xhat)));
}

NodeId outcome_loss(Graph& g, const AutoIvModel& m, const Batch& b, bool reps_trainable,
                    bool fx_trainable, bool outcome_trainable) {
  check_batch(m, b);
  const NodeId v = g.constant(b.v);
  const NodeId z = m.phi_z.forward(g, m.params, v, reps_trainable);
  const NodeId c = m.phi_c.forward(g, m.params, v, reps_trainable);
  const NodeId xhat = predicted_treatment(g, m, z, c, fx_trainable);
  const NodeId emb = m.f_emb.forward(g, m.params, xhat, outcome_trainable);
  const NodeId yhat = m.f_y.forward(g, m.params, g.concat_cols(c, emb), outcome_trainable);
  return g.mean(g.square(g.sub(g.constant(b.y), yhat)));
}

double treatment_loss(const AutoIvModel& m, const Batch& b) {
  Graph g;
  return g.value(treatment_loss(g, m, b, false, false)).item();
}

double outcome_loss(const AutoIvModel& m, const Batch& b) {
  Graph g;
  return g.value(outcome_loss(g, m, b, false, false, false)).item();
}

AutoIvTrainer::AutoIvTrainer(AutoIvModel& model)
    : model_(model),
      lld_state_(AdamOptions{model.config.lr_lld}),
      mi_state_(AdamOptions{model.config.lr_mi}),
      x_state_(AdamOptions{model.config.lr_x}),
      y_state_(AdamOptions{model.config.lr_y}) {}

void AutoIvTrainer::apply(const Graph& g, NodeId loss, AdamState& state, const char* phase) {
  std::map<NodeId, Tensor> grads;
  try {
    grads = backward(g, loss);
  } catch (const NumericError& e) {
    throw NumericError(std::string("NaN gradient in phase ") + phase + " at epoch " +
                           std::to_string(epoch_) + ": " + e.what(),
                       e.node());
  }
  adam_step(model_.params, gradients_by_param(g, grads), state);
}

double AutoIvTrainer::step_lld(const Batch& b) {
  check_batch(model_, b);
  AutoIvModel& m = model_;
  Graph g;
  const NodeId v = g.constant(b.v);
  const NodeId z = m.phi_z.forward(g, m.params, v, false);
  const NodeId c = m.phi_c.forward(g, m.params, v, false);
  const NodeId x = g.constant(b.x);
  const NodeId y = g.constant(b.y);
  mi::ObjectiveTerms t;
  t.lld_zx = mi::lld_loss(g, m.params, m.head_zx, z, x);
  t.lld_zy = mi::lld_loss(g, m.params, m.head_zy, z, y);
  t.lld_cx = mi::lld_loss(g, m.params, m.head_cx, c, x);
  t.lld_cy = mi::lld_loss(g, m.params, m.head_cy, c, y);
  t.lld_zc = mi::lld_loss(g, m.params, m.head_zc, z, c);
  const auto bundle = mi::combine_objectives(g, t, m.config.alpha, m.config.eta, m.config.ablation);
  const double value = g.value(*bundle.lld_total).item();
  check_finite(value, "lld", epoch_);
  apply(g, *bundle.lld_total, lld_state_, "lld");
  for (const auto* h : {&m.head_zx, &m.head_zy, &m.head_cx, &m.head_cy, &m.head_zc})
    h->clamp_log_var(m.params);
  return value;
}

double AutoIvTrainer::step_mi(const Batch& b, EpochLosses* record) {
  check_batch(model_, b);
  AutoIvModel& m = model_;
  const mi::Ablation& ab = m.config.ablation;
  const mi::PairWeights w = mi::rbf_pair_weights(b.x, m.config.sigma);

  Graph g;
  const NodeId v = g.constant(b.v);
  const NodeId z = m.phi_z.forward(g, m.params, v, true);
  const NodeId c = m.phi_c.forward(g, m.params, v, true);
  const NodeId x = g.constant(b.x);
  const NodeId y = g.constant(b.y);

  const NodeId l_zx = nn::cross_loglik_matrix(g, m.params, m.head_zx, z, x, false);
  const NodeId l_zy = nn::cross_loglik_matrix(g, m.params, m.head_zy, z, y, false);
  if (record != nullptr && b.v.rows() >= 2) {
    record->gap_zx = mi::gap_statistic(g.value(l_zx));
    record->gap_zy = mi::weighted_gap(g.value(l_zy), w);
  }

  mi::ObjectiveTerms t;
  if (!ab.disable_z_mi) {
    t.mi_zx = mi::mi_max_loss(g, l_zx);
    t.mi_zy = mi::mi_min_conditional_loss(g, l_zy, w);
  }
  if (!ab.disable_c_mi && m.config.alpha != 0.0) {
    t.mi_cx = mi::mi_max_loss(g, nn::cross_loglik_matrix(g, m.params, m.head_cx, c, x, false));
    t.mi_cy = mi::mi_max_loss(g, nn::cross_loglik_matrix(g, m.params, m.head_cy, c, y, false));
  }
  if (!ab.disable_zc_reg && m.config.eta != 0.0) {
    t.mi_zc = mi::mi_min_loss(g, nn::cross_loglik_matrix(g, m.params, m.head_zc, z, c, false));
  }
  const auto bundle = mi::combine_objectives(g, t, m.config.alpha, m.config.eta, ab);
  if (!bundle.mi_total) return 0.0;
  const double value = g.value(*bundle.mi_total).item();
  check_finite(value, "mi", epoch_);
  apply(g, *bundle.mi_total, mi_state_, "mi");
  return value;
}

double AutoIvTrainer::step_treatment(const Batch& b) {
  Graph g;
  const NodeId loss = treatment_loss(g, model_, b, true, true);
  const double value = g.value(loss).item();
  check_finite(value, "treatment", epoch_);
  apply(g, loss, x_state_, "treatment");
  return value;
}

double AutoIvTrainer::step_outcome(const Batch& b) {
  Graph g;
  const NodeId loss = outcome_loss(g, model_, b, true, false, true);
  const double value = g.value(loss).item();
  check_finite(value, "outcome", epoch_);
  apply(g, loss, y_state_, "outcome");
  return value;
}

EpochLosses AutoIvTrainer::run_epoch(const Batch& b, std::size_t epoch) {
  epoch_ = epoch;
  EpochLosses e;
  e.lld = step_lld(b);
  e.mi = step_mi(b, &e);
  if (!model_.config.ablation.disable_two_stage) {
    e.l_x = step_treatment(b);
    e.l_y = step_outcome(b);
  }
  return e;
}

AutoIvModel train_autoiv(const data::SyntheticDataset& train, const data::SyntheticDataset* valid,
                         const AutoIvConfig& config) {
  if (train.rows() == 0) throw ContractViolation("train_autoiv: empty dataset");
  config.validate(train.rows());
  AutoIvModel model = AutoIvModel::initialize(config, train.v.cols());
  AutoIvTrainer trainer(model);

  std::mt19937_64 rng(derive_seed(config.seed, "batches"));
  std::vector<std::size_t> order(train.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  const bool select = valid != nullptr && valid->rows() > 0 && !config.ablation.disable_two_stage;
  const Batch valid_batch = select ? make_batch(*valid) : Batch{};
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_params;

  model.history.reserve(config.epochs);
  std::vector<std::size_t> rows(config.batch_size);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    // draw without replacement; reshuffle when the pass is exhausted
    for (std::size_t k = 0; k < config.batch_size; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      rows[k] = order[cursor++];
    }
    const Batch batch = make_batch(train, rows);
    model.history.push_back(trainer.run_epoch(batch, epoch));

    if (select && (epoch % config.validate_every == 0 || epoch == config.epochs)) {
      const double loss = outcome_loss(model, valid_batch);
      model.validation.push_back({epoch, loss});
      if (std::isfinite(loss) && loss < best) {
        best = loss;
        best_params = model.params.values();
        model.best_epoch = epoch;
      }
    }
  }
  if (select && !best_params.empty()) {
    model.params.restore(std::move(best_params));
  } else {
    model.best_epoch = config.epochs;
  }
  return model;
}

std::pair<Tensor, Tensor> extract_representations(const AutoIvModel& model, const Tensor& v) {
  if (v.cols() != model.input_dim) {
    throw ContractViolation("extract_representations: expected " + std::to_string(model.input_dim) +
                            " columns, got " + std::to_string(v.cols()));
  }
  return {model.phi_z.predict(model.params, v), model.phi_c.predict(model.params, v)};
}

void save_model(const AutoIvModel& model, const std::filesystem::path& prefix) {
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  const std::filesystem::path blob = prefix.string() + ".bin";
  write_parameter_blob(model.params, blob);

  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : model.history)
    history.push_back({e.lld, e.mi, e.l_x, e.l_y, e.gap_zx, e.gap_zy});
  nlohmann::json validation = nlohmann::json::array();
  for (const auto& p : model.validation) validation.push_back({p.epoch, p.outcome_loss});

  const nlohmann::json doc = {{"format", kModelFormat},
                              {"config", model.config},
                              {"input_dim", model.input_dim},
                              {"best_epoch", model.best_epoch},
                              {"parameters", parameter_manifest(model.params)},
                              {"blob", blob.filename().string()},
                              {"history_columns", {"lld", "mi", "l_x", "l_y", "gap_zx", "gap_zy"}},
                              {"history", history},
                              {"validation", validation}};
  std::ofstream out(prefix.string() + ".json");
  if (!out) throw IoError("save_model: cannot write " + prefix.string() + ".json");
  out << doc.dump(1) << '\n';
}

AutoIvModel load_model(const std::filesystem::path& prefix) {
  const std::filesystem::path manifest = prefix.string() + ".json";
  std::ifstream in(manifest);
  if (!in) throw IoError("load_model: cannot open " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_model: malformed manifest: " + std::string(e.what()));
  }
  if (doc.value("format", std::string{}) != kModelFormat) {
    throw IoError("load_model: unsupported format tag in " + manifest.string());
  }
  AutoIvModel m;
  try {
    m.config = doc.at("config").get<AutoIvConfig>();
    m.input_dim = doc.at("input_dim").get<std::size_t>();
    m.best_epoch = doc.at("best_epoch").get<std::size_t>();
    const std::filesystem::path blob =
        manifest.parent_path() / doc.at("blob").get<std::string>();
    m.params = read_parameters(doc.at("parameters"), blob);
    for (const auto& row : doc.at("history")) {
      m.history.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>(),
                           row[3].get<double>(), row[4].get<double>(), row[5].get<double>()});
    }
    for (const auto& row : doc.at("validation"))
      m.validation.push_back({row[0].get<std::size_t>(), row[1].get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_model: malformed manifest: " + std::string(e.what()));
  }

  const Layout l = layout_of(m.config, m.input_dim);
  try {
    m.phi_z = nn::Mlp::attach(m.params, l.phi, "phi_z");
    m.phi_c = nn::Mlp::attach(m.params, l.phi, "phi_c");
    m.head_zx = nn::GaussianHead::attach(m.params, l.head_x, "head_zx");
    m.head_zy = nn::GaussianHead::attach(m.params, l.head_y, "head_zy");
    m.head_cx = nn::GaussianHead::attach(m.params, l.head_x, "head_cx");
    m.head_cy = nn::GaussianHead::attach(m.params, l.head_y, "head_cy");
    m.head_zc = nn::GaussianHead::attach(m.params, l.head_zc, "head_zc");
    m.f_x = nn::Mlp::attach(m.params, l.f_x, "f_x");
    m.f_emb = nn::Mlp::attach(m.params, l.f_emb, "f_emb");
    m.f_y = nn::Mlp::attach(m.params, l.f_y, "f_y");
  } catch (const ContractViolation& e) {
    throw IoError(std::string("load_model: parameter layout mismatch: ") + e.what());
  }
  return m;
}

}  // namespace autoiv
