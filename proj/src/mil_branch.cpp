#include "milfuse/mil_branch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "milfuse/checkpoint.hpp"
#include "milfuse/errors.hpp"
#include "milfuse/log.hpp"

namespace milfuse {

namespace {

Matrix glorot(std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out,
              Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i)
    m.data()[i] = limit * (2.0 * rng.uniform() - 1.0);
  return m;
}

void check_dims(const BranchDims& d) {
  if (d.d_in == 0 || d.d_hidden == 0 || d.d_attn == 0 || d.num_classes == 0)
    throw ValidationError("branch dims must all be positive");
}

}  // namespace

BranchParams init_params(const BranchDims& dims, Rng& rng) {
  check_dims(dims);
  BranchParams p;
  p.dims = dims;
  p.w_fc = glorot(dims.d_hidden, dims.d_in, dims.d_in, dims.d_hidden, rng);
  p.v = glorot(dims.d_attn, dims.d_hidden, dims.d_hidden, dims.d_attn, rng);
  p.u = glorot(dims.d_attn, dims.d_hidden, dims.d_hidden, dims.d_attn, rng);
  p.w_attn = glorot(dims.num_classes, dims.d_attn, dims.d_attn, 1, rng);
  p.w_cls = glorot(dims.num_classes, dims.d_hidden, dims.d_hidden, 1, rng);
  p.w_inst.reserve(dims.num_classes);
  p.b_inst.reserve(dims.num_classes);
  for (std::size_t n = 0; n < dims.num_classes; ++n) {
    p.w_inst.push_back(glorot(2, dims.d_hidden, dims.d_hidden, 2, rng));
    p.b_inst.push_back(Matrix(2, 1));
  }
  return p;
}

BranchGrads zero_grads(const BranchDims& dims) {
  check_dims(dims);
  BranchGrads g;
  g.dims = dims;
  g.w_fc = Matrix(dims.d_hidden, dims.d_in);
  g.v = Matrix(dims.d_attn, dims.d_hidden);
  g.u = Matrix(dims.d_attn, dims.d_hidden);
  g.w_attn = Matrix(dims.num_classes, dims.d_attn);
  g.w_cls = Matrix(dims.num_classes, dims.d_hidden);
  for (std::size_t n = 0; n < dims.num_classes; ++n) {
    g.w_inst.push_back(Matrix(2, dims.d_hidden));
    g.b_inst.push_back(Matrix(2, 1));
  }
  return g;
}

ForwardTrace forward(const BranchParams& params, const FeatureBag& bag) {
  const BranchDims& d = params.dims;
  if (bag.dim() != d.d_in)
    throw ShapeError("forward: bag dim " + std::to_string(bag.dim()) +
                     " != configured d_in " + std::to_string(d.d_in));
  if (bag.num_instances() < 1) throw ContractError("forward: empty bag");

  ForwardTrace tr;
  tr.h = matmul_nt(bag.features, params.w_fc);  // K x d_hidden

  Matrix pv = matmul_nt(tr.h, params.v);  // K x d_attn
  Matrix pu = matmul_nt(tr.h, params.u);
  tr.gate_t = std::move(pv);
  for (std::size_t i = 0; i < tr.gate_t.size(); ++i)
    tr.gate_t.data()[i] = std::tanh(tr.gate_t.data()[i]);
  tr.gate_s = std::move(pu);
  for (std::size_t i = 0; i < tr.gate_s.size(); ++i)
    tr.gate_s.data()[i] = sigmoid(tr.gate_s.data()[i]);

  const Matrix gated = hadamard(tr.gate_t, tr.gate_s);  // K x d_attn
  tr.attn_logits = matmul_nt(params.w_attn, gated);     // num_classes x K
  tr.attn = tr.attn_logits;
  softmax_rows_inplace(tr.attn);
  tr.z = matmul(tr.attn, tr.h);  // num_classes x d_hidden

  tr.scores.resize(d.num_classes);
  for (std::size_t n = 0; n < d.num_classes; ++n) {
    double s = 0;
    const double* w = params.w_cls.row_ptr(n);
    const double* z = tr.z.row_ptr(n);
    for (std::size_t j = 0; j < d.d_hidden; ++j) s += w[j] * z[j];
    tr.scores[n] = s;
  }
  tr.probs = softmax(tr.scores);
  return tr;
}

double slide_loss(std::span<const double> probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
    throw ContractError("slide_loss: label " + std::to_string(label) + " out of range");
  double p = probs[static_cast<std::size_t>(label)];
  if (p < 1e-12) {
    log::warn("slide_loss: probability %.3e clamped to 1e-12", p);
    p = 1e-12;
  }
  return -std::log(p);
}

InstanceSelection select_instances(const Matrix& attn, int label, std::size_t k_sample) {
  if (label < 0 || static_cast<std::size_t>(label) >= attn.rows())
    throw ContractError("select_instances: label out of range");
  if (k_sample < 1) throw ContractError("select_instances: k_sample must be >= 1");
  const std::size_t k = attn.cols();
  const std::size_t k_eff = std::min(k_sample, (k + 1) / 2);
  if (k == 1)
    log::warn("select_instances: single-instance bag, positive and negative sets coincide");

  const double* row = attn.row_ptr(static_cast<std::size_t>(label));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});

  InstanceSelection sel;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  });
  sel.pos.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_eff));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (row[a] != row[b]) return row[a] < row[b];
    return a < b;
  });
  sel.neg.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_eff));
  return sel;
}

double smooth_svm_loss(double s0, double s1, int pseudo_label, double tau) {
  if (tau <= 0) throw ContractError("smooth_svm_loss: tau must be > 0");
  const double sy = pseudo_label == 0 ? s0 : s1;
  const double a0 = ((pseudo_label == 0 ? 0.0 : 1.0) + s0 - sy) / tau;
  const double a1 = ((pseudo_label == 1 ? 0.0 : 1.0) + s1 - sy) / tau;
  const double hi = std::max(a0, a1);
  return tau * (hi + std::log(std::exp(a0 - hi) + std::exp(a1 - hi)));
}

namespace {

void instance_logits(const BranchParams& params, const ForwardTrace& trace, int label,
                     std::size_t k, double& s0, double& s1) {
  const Matrix& w = params.w_inst[static_cast<std::size_t>(label)];
  const Matrix& b = params.b_inst[static_cast<std::size_t>(label)];
  const double* hrow = trace.h.row_ptr(k);
  double acc0 = 0, acc1 = 0;
  const double* w0 = w.row_ptr(0);
  const double* w1 = w.row_ptr(1);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    acc0 += w0[j] * hrow[j];
    acc1 += w1[j] * hrow[j];
  }
  s0 = acc0 + b(0, 0);
  s1 = acc1 + b(1, 0);
}

}  // namespace

double instance_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                     const InstanceSelection& sel, const LossConfig& cfg) {
  const std::size_t count = sel.pos.size() + sel.neg.size();
  if (count == 0) throw ContractError("instance_loss: empty selection");
  double sum = 0;
  for (std::size_t k : sel.pos) {
    double s0, s1;
    instance_logits(params, trace, label, k, s0, s1);
    sum += smooth_svm_loss(s0, s1, 1, cfg.tau);
  }
  for (std::size_t k : sel.neg) {
    double s0, s1;
    instance_logits(params, trace, label, k, s0, s1);
    sum += smooth_svm_loss(s0, s1, 0, cfg.tau);
  }
  return cfg.patch_sum ? sum : sum / static_cast<double>(count);
}

double instance_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                     std::size_t k_sample, double tau) {
  LossConfig cfg;
  cfg.k_sample = k_sample;
  cfg.tau = tau;
  return instance_loss(trace, params, label, select_instances(trace.attn, label, k_sample),
                       cfg);
}

LossReport total_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                      const InstanceSelection& sel, const LossConfig& cfg) {
  LossReport rep;
  rep.slide = slide_loss(trace.probs, label);
  rep.patch = instance_loss(trace, params, label, sel, cfg);
  rep.total = cfg.c1 * rep.slide + cfg.c2 * rep.patch;
  return rep;
}

LossReport total_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                      const LossConfig& cfg) {
  return total_loss(trace, params, label, select_instances(trace.attn, label, cfg.k_sample),
                    cfg);
}

BranchGrads backward(const BranchParams& params, const ForwardTrace& trace,
                     const FeatureBag& bag, int label, const InstanceSelection& sel,
                     const LossConfig& cfg) {
  const BranchDims& d = params.dims;
  const std::size_t k_count = bag.num_instances();
  const std::size_t n_cls = d.num_classes;
  if (trace.h.rows() != k_count || trace.h.cols() != d.d_hidden ||
      trace.attn.rows() != n_cls || trace.attn.cols() != k_count ||
      trace.probs.size() != n_cls || bag.dim() != d.d_in)
    throw ContractError("backward: trace does not match params/bag shapes");
  if (label < 0 || static_cast<std::size_t>(label) >= n_cls)
    throw ContractError("backward: label out of range");

  BranchGrads g = zero_grads(d);
  const std::size_t y = static_cast<std::size_t>(label);

  // slide head: dL/ds, then score layer
  std::vector<double> ds(n_cls);
  for (std::size_t n = 0; n < n_cls; ++n)
    ds[n] = cfg.c1 * (trace.probs[n] - (n == y ? 1.0 : 0.0));

  Matrix dz(n_cls, d.d_hidden);
  for (std::size_t n = 0; n < n_cls; ++n) {
    double* gw = g.w_cls.row_ptr(n);
    double* dzr = dz.row_ptr(n);
    const double* zr = trace.z.row_ptr(n);
    const double* wr = params.w_cls.row_ptr(n);
    for (std::size_t j = 0; j < d.d_hidden; ++j) {
      gw[j] += ds[n] * zr[j];
      dzr[j] = ds[n] * wr[j];
    }
  }

  // attention pooling: Z = A H
  Matrix da = matmul_nt(dz, trace.h);       // num_classes x K
  Matrix dh = matmul_tn(trace.attn, dz);    // K x d_hidden

  // row-wise softmax backward
  Matrix dlogits(n_cls, k_count);
  for (std::size_t n = 0; n < n_cls; ++n) {
    const double* ar = trace.attn.row_ptr(n);
    const double* dar = da.row_ptr(n);
    double dot = 0;
    for (std::size_t k = 0; k < k_count; ++k) dot += ar[k] * dar[k];
    double* dlr = dlogits.row_ptr(n);
    for (std::size_t k = 0; k < k_count; ++k) dlr[k] = ar[k] * (dar[k] - dot);
  }

  const Matrix gated = hadamard(trace.gate_t, trace.gate_s);  // K x d_attn
  add_inplace(g.w_attn, matmul(dlogits, gated));
  Matrix dgated = matmul_tn(dlogits, params.w_attn);  // K x d_attn

  Matrix dpv(k_count, d.d_attn), dpu(k_count, d.d_attn);
  for (std::size_t i = 0; i < dgated.size(); ++i) {
    const double t = trace.gate_t.data()[i];
    const double s = trace.gate_s.data()[i];
    const double dg = dgated.data()[i];
    dpv.data()[i] = dg * s * (1.0 - t * t);
    dpu.data()[i] = dg * t * s * (1.0 - s);
  }
  add_inplace(g.v, matmul_tn(dpv, trace.h));
  add_inplace(g.u, matmul_tn(dpu, trace.h));
  add_inplace(dh, matmul(dpv, params.v));
  add_inplace(dh, matmul(dpu, params.u));

  // instance head: only the true class's classifier sees gradient
  if (cfg.c2 != 0.0) {
    const std::size_t count = sel.pos.size() + sel.neg.size();
    if (count == 0) throw ContractError("backward: empty instance selection");
    const double scale = cfg.c2 * (cfg.patch_sum ? 1.0 : 1.0 / static_cast<double>(count));
    const Matrix& w = params.w_inst[y];
    auto touch = [&](std::size_t k, int pseudo) {
      double s0, s1;
      instance_logits(params, trace, label, k, s0, s1);
      const double sy = pseudo == 0 ? s0 : s1;
      const double a0 = ((pseudo == 0 ? 0.0 : 1.0) + s0 - sy) / cfg.tau;
      const double a1 = ((pseudo == 1 ? 0.0 : 1.0) + s1 - sy) / cfg.tau;
      const double hi = std::max(a0, a1);
      const double e0 = std::exp(a0 - hi), e1 = std::exp(a1 - hi);
      const double q0 = e0 / (e0 + e1), q1 = e1 / (e0 + e1);
      const double du0 = scale * (q0 - (pseudo == 0 ? 1.0 : 0.0));
      const double du1 = scale * (q1 - (pseudo == 1 ? 1.0 : 0.0));
      const double* hrow = trace.h.row_ptr(k);
      double* gw0 = g.w_inst[y].row_ptr(0);
      double* gw1 = g.w_inst[y].row_ptr(1);
      double* dhr = dh.row_ptr(k);
      const double* w0 = w.row_ptr(0);
      const double* w1 = w.row_ptr(1);
      for (std::size_t j = 0; j < d.d_hidden; ++j) {
        gw0[j] += du0 * hrow[j];
        gw1[j] += du1 * hrow[j];
        dhr[j] += du0 * w0[j] + du1 * w1[j];
      }
      g.b_inst[y](0, 0) += du0;
      g.b_inst[y](1, 0) += du1;
    };
    for (std::size_t k : sel.pos) touch(k, 1);
    for (std::size_t k : sel.neg) touch(k, 0);
  }

  add_inplace(g.w_fc, matmul_tn(dh, bag.features));
  return g;
}

BranchGrads backward(const BranchParams& params, const ForwardTrace& trace,
                     const FeatureBag& bag, int label, const LossConfig& cfg) {
  return backward(params, trace, bag, label,
                  select_instances(trace.attn, label, cfg.k_sample), cfg);
}

AdamState init_adam(const BranchDims& dims) {
  AdamState st;
  BranchGrads proto = zero_grads(dims);
  visit_tensors(proto, [&](const std::string&, const Matrix& m) {
    st.m.push_back(Matrix(m.rows(), m.cols()));
    st.v.push_back(Matrix(m.rows(), m.cols()));
  });
  return st;
}

void adam_step(BranchParams& params, const BranchGrads& grads, AdamState& state,
               const AdamConfig& cfg) {
  std::vector<std::pair<std::string, Matrix*>> p_tensors;
  std::vector<std::pair<std::string, const Matrix*>> g_tensors;
  visit_tensors(params, [&](const std::string& n, Matrix& m) { p_tensors.emplace_back(n, &m); });
  visit_tensors(grads,
                [&](const std::string& n, const Matrix& m) { g_tensors.emplace_back(n, &m); });
  if (p_tensors.size() != g_tensors.size() || p_tensors.size() != state.m.size())
    throw ContractError("adam_step: tensor count mismatch");

  state.t += 1;
  const double inv_bc1 = 1.0 / (1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)));
  const double inv_bc2 = 1.0 / (1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double omb1 = 1.0 - b1, omb2 = 1.0 - b2;
  const double lr = cfg.lr, wd = cfg.weight_decay, eps = cfg.eps;

  for (std::size_t i = 0; i < p_tensors.size(); ++i) {
    Matrix& theta = *p_tensors[i].second;
    const Matrix& grad = *g_tensors[i].second;
    if (theta.rows() != grad.rows() || theta.cols() != grad.cols())
      throw ShapeError("adam_step: shape mismatch for " + p_tensors[i].first);
    if (!grad.all_finite())
      throw NumericError("adam_step: non-finite gradient in " + g_tensors[i].first);
    double* __restrict th = theta.data();
    const double* __restrict g = grad.data();
    double* __restrict m = state.m[i].data();
    double* __restrict v = state.v[i].data();
    const std::size_t sz = theta.size();
    for (std::size_t j = 0; j < sz; ++j) {
      const double gw = g[j] + wd * th[j];
      m[j] = b1 * m[j] + omb1 * gw;
      v[j] = b2 * v[j] + omb2 * gw * gw;
      const double mhat = m[j] * inv_bc1;
      const double vhat = v[j] * inv_bc2;
      th[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

TrainState init_train_state(const BranchDims& dims, const TrainConfig& cfg) {
  TrainState st;
  Rng init_rng = Rng(cfg.seed).derive("init");
  st.params = init_params(dims, init_rng);
  st.best_params = st.params;
  st.adam = init_adam(dims);
  return st;
}

namespace {

std::size_t argmax_index(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best]) best = i;
  return best;
}

}  // namespace

void train_loop(TrainState& st, std::span<const LabeledBag> train,
                std::span<const LabeledBag> val, const TrainConfig& cfg) {
  if (train.empty() || val.empty())
    throw ValidationError("train_loop: train and val sets must be non-empty");
  if (cfg.max_epochs < 1) throw ValidationError("train_loop: max_epochs must be >= 1");
  const std::size_t n_cls = st.params.dims.num_classes;
  for (const auto& s : train)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= n_cls)
      throw ValidationError("train_loop: label out of range for configured classes");
  for (const auto& s : val)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= n_cls)
      throw ValidationError("train_loop: label out of range for configured classes");

  st.history.clear();
  while (st.epoch < cfg.max_epochs) {
    const std::size_t epoch = st.epoch + 1;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng epoch_rng = Rng(cfg.seed).derive("epoch." + std::to_string(epoch));
    epoch_rng.shuffle(order);

    double train_sum = 0;
    bool bad = false;
    for (std::size_t idx : order) {
      const LabeledBag& ex = train[idx];
      try {
        const ForwardTrace tr = forward(st.params, *ex.bag);
        const InstanceSelection sel =
            select_instances(tr.attn, ex.label, cfg.loss.k_sample);
        const LossReport rep = total_loss(tr, st.params, ex.label, sel, cfg.loss);
        if (!std::isfinite(rep.total)) {
          log::error("epoch %zu: non-finite training loss", epoch);
          bad = true;
          break;
        }
        const BranchGrads g = backward(st.params, tr, *ex.bag, ex.label, sel, cfg.loss);
        adam_step(st.params, g, st.adam, cfg.adam);
        train_sum += rep.total;
      } catch (const NumericError& e) {
        log::error("epoch %zu: %s", epoch, e.what());
        bad = true;
        break;
      }
    }

    double val_sum = 0;
    std::size_t correct = 0;
    if (!bad) {
      try {
        for (const LabeledBag& ex : val) {
          const ForwardTrace tr = forward(st.params, *ex.bag);
          const LossReport rep = total_loss(tr, st.params, ex.label, cfg.loss);
          val_sum += rep.total;
          if (argmax_index(tr.probs) == static_cast<std::size_t>(ex.label)) ++correct;
        }
        if (!std::isfinite(val_sum)) {
          log::error("epoch %zu: non-finite validation loss", epoch);
          bad = true;
        }
      } catch (const NumericError& e) {
        log::error("epoch %zu: %s", epoch, e.what());
        bad = true;
      }
    }

    if (bad) {
      st.diverged = true;
      log::error("training diverged at epoch %zu; best checkpoint is from epoch %zu", epoch,
                 st.best_epoch);
      break;
    }

    st.epoch = epoch;
    EpochStats es;
    es.epoch = epoch;
    es.train_loss = train_sum / static_cast<double>(train.size());
    es.val_loss = val_sum / static_cast<double>(val.size());
    es.val_acc = static_cast<double>(correct) / static_cast<double>(val.size());
    st.history.push_back(es);
    log::info("epoch %zu  train %.6f  val %.6f  val_acc %.3f", epoch, es.train_loss,
              es.val_loss, es.val_acc);

    if (es.val_loss < st.best_val_loss - cfg.min_delta) {
      st.best_val_loss = es.val_loss;
      st.best_epoch = epoch;
      st.best_params = st.params;
      st.streak = 0;
    } else {
      ++st.streak;
    }
    if (epoch > cfg.min_epochs && st.streak >= cfg.patience) {
      log::info("early stop at epoch %zu (best epoch %zu, val %.6f)", epoch, st.best_epoch,
                st.best_val_loss);
      break;
    }
  }
}

TrainState train_branch(std::span<const LabeledBag> train, std::span<const LabeledBag> val,
                        const BranchDims& dims, const TrainConfig& cfg) {
  TrainState st = init_train_state(dims, cfg);
  train_loop(st, train, val, cfg);
  return st;
}

BagEmbeddings extract_bag_embeddings(const BranchParams& params, const FeatureBag& bag) {
  BagEmbeddings emb;
  emb.slide_id = bag.slide_id;
  emb.z = forward(params, bag).z;
  return emb;
}

EvalResult evaluate_branch(const BranchParams& params, std::span<const LabeledBag> data,
                           const LossConfig& cfg) {
  if (data.empty()) throw ContractError("evaluate_branch: empty data");
  EvalResult res;
  res.probs = Matrix(data.size(), params.dims.num_classes);
  res.labels.reserve(data.size());
  res.preds.reserve(data.size());
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ForwardTrace tr = forward(params, *data[i].bag);
    loss_sum += total_loss(tr, params, data[i].label, cfg).total;
    for (std::size_t n = 0; n < tr.probs.size(); ++n) res.probs(i, n) = tr.probs[n];
    const int pred = static_cast<int>(argmax_index(tr.probs));
    res.labels.push_back(data[i].label);
    res.preds.push_back(pred);
    if (pred == data[i].label) ++correct;
  }
  res.loss = loss_sum / static_cast<double>(data.size());
  res.acc = static_cast<double>(correct) / static_cast<double>(data.size());
  return res;
}

namespace {

Matrix row_as_matrix(const Matrix& m, std::size_t row) {
  Matrix out(1, m.cols());
  std::copy(m.row_ptr(row), m.row_ptr(row) + m.cols(), out.data());
  return out;
}

TensorFile params_to_checkpoint(const BranchParams& p) {
  TensorFile tf;
  tf.emplace_back("W_fc", p.w_fc);
  tf.emplace_back("V", p.v);
  tf.emplace_back("U", p.u);
  for (std::size_t n = 0; n < p.dims.num_classes; ++n)
    tf.emplace_back("W_atten." + std::to_string(n), row_as_matrix(p.w_attn, n));
  for (std::size_t n = 0; n < p.dims.num_classes; ++n)
    tf.emplace_back("W_c." + std::to_string(n), row_as_matrix(p.w_cls, n));
  for (std::size_t n = 0; n < p.dims.num_classes; ++n) {
    tf.emplace_back("W_inst." + std::to_string(n), p.w_inst[n]);
    tf.emplace_back("W_inst." + std::to_string(n) + ".bias", p.b_inst[n]);
  }
  return tf;
}

BranchParams checkpoint_to_params(const TensorFile& tf, const std::string& where) {
  std::size_t n_cls = 0;
  while (has_tensor(tf, "W_atten." + std::to_string(n_cls))) ++n_cls;
  if (n_cls == 0) throw ValidationError(where + ": no W_atten.<n> tensors");

  BranchParams p;
  p.w_fc = find_tensor(tf, "W_fc");
  p.v = find_tensor(tf, "V");
  p.u = find_tensor(tf, "U");
  p.dims.d_hidden = p.w_fc.rows();
  p.dims.d_in = p.w_fc.cols();
  p.dims.d_attn = p.v.rows();
  p.dims.num_classes = n_cls;
  if (p.v.cols() != p.dims.d_hidden || p.u.rows() != p.dims.d_attn ||
      p.u.cols() != p.dims.d_hidden)
    throw ValidationError(where + ": V/U shapes inconsistent with W_fc");

  p.w_attn = Matrix(n_cls, p.dims.d_attn);
  p.w_cls = Matrix(n_cls, p.dims.d_hidden);
  for (std::size_t n = 0; n < n_cls; ++n) {
    const Matrix& wa = find_tensor(tf, "W_atten." + std::to_string(n));
    const Matrix& wc = find_tensor(tf, "W_c." + std::to_string(n));
    if (wa.rows() != 1 || wa.cols() != p.dims.d_attn)
      throw ValidationError(where + ": bad shape for W_atten." + std::to_string(n));
    if (wc.rows() != 1 || wc.cols() != p.dims.d_hidden)
      throw ValidationError(where + ": bad shape for W_c." + std::to_string(n));
    std::copy(wa.data(), wa.data() + wa.size(), p.w_attn.row_ptr(n));
    std::copy(wc.data(), wc.data() + wc.size(), p.w_cls.row_ptr(n));
    const Matrix& wi = find_tensor(tf, "W_inst." + std::to_string(n));
    const Matrix& bi = find_tensor(tf, "W_inst." + std::to_string(n) + ".bias");
    if (wi.rows() != 2 || wi.cols() != p.dims.d_hidden)
      throw ValidationError(where + ": bad shape for W_inst." + std::to_string(n));
    if (bi.rows() != 2 || bi.cols() != 1)
      throw ValidationError(where + ": bad shape for W_inst." + std::to_string(n) + ".bias");
    p.w_inst.push_back(wi);
    p.b_inst.push_back(bi);
  }
  return p;
}

Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

}  // namespace

void save_params(const BranchParams& params, const std::filesystem::path& path) {
  write_tensor_file(params_to_checkpoint(params), path);
}

BranchParams load_params(const std::filesystem::path& path) {
  return checkpoint_to_params(read_tensor_file(path), path.string());
}

void save_train_state(const TrainState& state, const std::filesystem::path& ckpt_path,
                      const std::filesystem::path& opt_path) {
  save_params(state.best_params, ckpt_path);

  TensorFile tf;
  visit_tensors(state.params,
                [&](const std::string& n, const Matrix& m) { tf.emplace_back("last." + n, m); });
  std::size_t i = 0;
  visit_tensors(state.params, [&](const std::string& n, const Matrix&) {
    tf.emplace_back("m." + n, state.adam.m[i]);
    tf.emplace_back("v." + n, state.adam.v[i]);
    ++i;
  });
  tf.emplace_back("t", scalar_matrix(static_cast<double>(state.adam.t)));
  tf.emplace_back("epoch", scalar_matrix(static_cast<double>(state.epoch)));
  tf.emplace_back("best_epoch", scalar_matrix(static_cast<double>(state.best_epoch)));
  tf.emplace_back("best_val_loss", scalar_matrix(std::isfinite(state.best_val_loss)
                                                     ? state.best_val_loss
                                                     : std::numeric_limits<double>::max()));
  tf.emplace_back("streak", scalar_matrix(static_cast<double>(state.streak)));
  write_tensor_file(tf, opt_path);
}

TrainState load_train_state(const std::filesystem::path& ckpt_path,
                            const std::filesystem::path& opt_path) {
  TrainState st;
  st.best_params = load_params(ckpt_path);
  const TensorFile tf = read_tensor_file(opt_path);
  const std::string where = opt_path.string();

  BranchParams proto = st.best_params;  // shapes + visit names
  st.params = proto;
  visit_tensors(st.params, [&](const std::string& n, Matrix& m) {
    const Matrix& src = find_tensor(tf, "last." + n);
    if (src.rows() != m.rows() || src.cols() != m.cols())
      throw ValidationError(where + ": shape mismatch for last." + n);
    m = src;
  });
  visit_tensors(proto, [&](const std::string& n, const Matrix& m) {
    const Matrix& sm = find_tensor(tf, "m." + n);
    const Matrix& sv = find_tensor(tf, "v." + n);
    if (sm.rows() != m.rows() || sm.cols() != m.cols() || sv.rows() != m.rows() ||
        sv.cols() != m.cols())
      throw ValidationError(where + ": shape mismatch for moments of " + n);
    st.adam.m.push_back(sm);
    st.adam.v.push_back(sv);
  });
  st.adam.t = static_cast<std::uint64_t>(find_tensor(tf, "t")(0, 0));
  st.epoch = static_cast<std::size_t>(find_tensor(tf, "epoch")(0, 0));
  st.best_epoch = static_cast<std::size_t>(find_tensor(tf, "best_epoch")(0, 0));
  st.best_val_loss = find_tensor(tf, "best_val_loss")(0, 0);
  if (st.best_val_loss == std::numeric_limits<double>::max())
    st.best_val_loss = std::numeric_limits<double>::infinity();
  st.streak = static_cast<std::size_t>(find_tensor(tf, "streak")(0, 0));
  return st;
}

void write_history(std::span<const EpochStats> history, const std::filesystem::path& path) {
  std::string out = "epoch\ttrain_loss\tval_loss\tval_acc\n";
  char buf[128];
  for (const EpochStats& e : history) {
    std::snprintf(buf, sizeof buf, "%zu\t%.9f\t%.9f\t%.6f\n", e.epoch, e.train_loss,
                  e.val_loss, e.val_acc);
    out += buf;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace milfuse
