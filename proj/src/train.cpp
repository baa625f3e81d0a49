#include "ibg/train.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <utility>

#include "ibg/util.hpp"
#include "layer_ops.hpp"

namespace ibg {

namespace {

using Span = std::pair<double*, Eigen::Index>;

std::vector<Span> transformer_spans(TransformerDesc& d) {
  std::vector<Span> s;
  auto add_m = [&](Mat& m) { s.emplace_back(m.data(), m.size()); };
  auto add_v = [&](Vec& v) { s.emplace_back(v.data(), v.size()); };
  add_m(d.tok_emb);
  add_m(d.pos_emb);
  for (TransformerBlockParams& b : d.blocks) {
    for (Mat& m : b.wq) add_m(m);
    for (Mat& m : b.wk) add_m(m);
    for (Mat& m : b.wv) add_m(m);
    for (Vec& v : b.bq) add_v(v);
    for (Vec& v : b.bk) add_v(v);
    for (Vec& v : b.bv) add_v(v);
    add_m(b.wo);
    add_v(b.bo);
    add_m(b.w_in);
    add_v(b.b_in);
    add_m(b.w_out);
    add_v(b.b_out);
  }
  add_m(d.w_unembed);
  return s;
}

std::vector<Span> mlp_spans(MlpDesc& d) {
  std::vector<Span> s;
  for (Mat& m : d.w) s.emplace_back(m.data(), m.size());
  for (Vec& v : d.b) s.emplace_back(v.data(), v.size());
  return s;
}

// Decoupled weight decay: p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps).
struct AdamW {
  double b1, b2, eps, wd;
  int64_t t = 0;
  std::vector<Vec> m, v;

  AdamW(const std::vector<Span>& spans, const TrainConfig& cfg)
      : b1(cfg.beta1), b2(cfg.beta2), eps(cfg.adam_eps), wd(cfg.weight_decay) {
    for (const Span& sp : spans) {
      m.push_back(Vec::Zero(sp.second));
      v.push_back(Vec::Zero(sp.second));
    }
  }

  void step(const std::vector<Span>& params, const std::vector<Span>& grads, double lr) {
    ++t;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
      Eigen::Map<Vec> p(params[i].first, params[i].second);
      Eigen::Map<const Vec> g(grads[i].first, grads[i].second);
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g.cwiseProduct(g);
      p -= lr * wd * p;
      p.array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
  }
};

double schedule_lr(const TrainConfig& cfg, Eigen::Index epoch) {
  if (cfg.schedule == "constant" || cfg.warmup_epochs <= 0) return cfg.lr;
  check_cfg(cfg.schedule == "warmup-flat", "unknown schedule " + cfg.schedule);
  if (epoch + 1 >= cfg.warmup_epochs) return cfg.lr;
  return cfg.lr * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
}

Mat random_mat(Eigen::Index r, Eigen::Index c, uint64_t seed, double scale, bool gaussian) {
  std::mt19937_64 rng = make_rng(seed);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      m(i, j) = gaussian ? scale * rng_normal(rng) : rng_uniform_pm(rng, scale);
  return m;
}

TransformerDesc init_modadd_params(int p, const ModAddArch& arch, uint64_t seed) {
  TransformerDesc d;
  d.vocab_in = p + 1;
  d.vocab_out = p;
  d.T = 3;
  d.d_model = arch.d_model;
  d.heads = arch.heads;
  d.d_head = arch.d_head;
  d.d_mlp = arch.d_mlp;
  d.act = ActFn::ReLU;
  d.layer_norm = false;
  uint64_t k = fork_seed(seed, "init");
  d.tok_emb = random_mat(p + 1, arch.d_model, fork_seed(k, "tok"), 1.0, true);
  d.pos_emb = random_mat(3, arch.d_model, fork_seed(k, "pos"), 1.0, true);
  TransformerBlockParams b;
  double s_attn = 1.0 / std::sqrt(static_cast<double>(arch.d_model));
  for (int h = 0; h < arch.heads; ++h) {
    std::string hs = std::to_string(h);
    b.wq.push_back(random_mat(arch.d_head, arch.d_model, fork_seed(k, "wq" + hs), s_attn, false));
    b.wk.push_back(random_mat(arch.d_head, arch.d_model, fork_seed(k, "wk" + hs), s_attn, false));
    b.wv.push_back(random_mat(arch.d_head, arch.d_model, fork_seed(k, "wv" + hs), s_attn, false));
    b.bq.push_back(Vec::Zero(arch.d_head));
    b.bk.push_back(Vec::Zero(arch.d_head));
    b.bv.push_back(Vec::Zero(arch.d_head));
  }
  double s_wo = 1.0 / std::sqrt(static_cast<double>(arch.heads * arch.d_head));
  b.wo = random_mat(arch.d_model, arch.heads * arch.d_head, fork_seed(k, "wo"), s_wo, false);
  b.bo = Vec::Zero(arch.d_model);
  b.w_in = random_mat(arch.d_mlp, arch.d_model, fork_seed(k, "win"), s_attn, false);
  b.b_in = Vec::Zero(arch.d_mlp);
  double s_out = 1.0 / std::sqrt(static_cast<double>(arch.d_mlp));
  b.w_out = random_mat(arch.d_model, arch.d_mlp, fork_seed(k, "wout"), s_out, false);
  b.b_out = Vec::Zero(arch.d_model);
  d.blocks.push_back(b);
  d.w_unembed = random_mat(p, arch.d_model, fork_seed(k, "wu"), s_attn, false);
  return d;
}

// Forward state for the third-position readout. The first two positions only
// feed the readout through attention keys and values, so their streams after
// the attention layer are never materialized. All members persist across
// epochs so the training loop performs no steady-state allocation.
struct ModAddFwd {
  Mat x0, x1;                       // n x d gathered embeddings
  Eigen::RowVectorXd x2;            // shared '=' stream
  std::vector<Mat> k0, k1, v0, v1;  // per head, n x dh
  std::vector<Eigen::RowVectorXd> q2, k2, v2;
  std::vector<Mat> prob;  // per head, n x 3 attention over [x, y, =]
  Vec smax, ssum;
  Mat zc;                 // n x heads*dh
  Mat r2;                 // post-attention stream at position 3
  Mat hpre, act;          // mlp
  Mat r3;                 // pre-unembed stream
  Mat logit;              // n x p
};

void modadd_forward(const TransformerDesc& d, const ModAddDataset& data,
                    const std::vector<Eigen::Index>& idx, ModAddFwd& f) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  const Eigen::Index dm = d.d_model;
  const Eigen::Index dh = d.d_head;
  const int H = d.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const TransformerBlockParams& b = d.blocks[0];

  f.x0.resize(n, dm);
  f.x1.resize(n, dm);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index di = idx[static_cast<size_t>(i)];
    int x = data.ids[static_cast<size_t>(3 * di)];
    int y = data.ids[static_cast<size_t>(3 * di + 1)];
    f.x0.row(i) = d.tok_emb.row(x) + d.pos_emb.row(0);
    f.x1.row(i) = d.tok_emb.row(y) + d.pos_emb.row(1);
  }
  f.x2 = d.tok_emb.row(data.p) + d.pos_emb.row(2);

  if (f.k0.size() != static_cast<size_t>(H)) {
    f.k0.resize(static_cast<size_t>(H));
    f.k1.resize(static_cast<size_t>(H));
    f.v0.resize(static_cast<size_t>(H));
    f.v1.resize(static_cast<size_t>(H));
    f.q2.resize(static_cast<size_t>(H));
    f.k2.resize(static_cast<size_t>(H));
    f.v2.resize(static_cast<size_t>(H));
    f.prob.resize(static_cast<size_t>(H));
  }
  f.smax.resize(n);
  f.ssum.resize(n);
  f.zc.resize(n, H * dh);

  for (int h = 0; h < H; ++h) {
    auto hs = static_cast<size_t>(h);
    const Mat& wq = b.wq[hs];
    const Mat& wk = b.wk[hs];
    const Mat& wv = b.wv[hs];
    f.q2[hs] = f.x2 * wq.transpose() + b.bq[hs].transpose();
    f.k2[hs] = f.x2 * wk.transpose() + b.bk[hs].transpose();
    f.v2[hs] = f.x2 * wv.transpose() + b.bv[hs].transpose();
    f.k0[hs].resize(n, dh);
    f.k1[hs].resize(n, dh);
    f.v0[hs].resize(n, dh);
    f.v1[hs].resize(n, dh);
    f.k0[hs].noalias() = f.x0 * wk.transpose();
    f.k0[hs].rowwise() += b.bk[hs].transpose();
    f.k1[hs].noalias() = f.x1 * wk.transpose();
    f.k1[hs].rowwise() += b.bk[hs].transpose();
    f.v0[hs].noalias() = f.x0 * wv.transpose();
    f.v0[hs].rowwise() += b.bv[hs].transpose();
    f.v1[hs].noalias() = f.x1 * wv.transpose();
    f.v1[hs].rowwise() += b.bv[hs].transpose();

    Mat& P = f.prob[hs];
    P.resize(n, 3);
    P.col(0).noalias() = scale * (f.k0[hs] * f.q2[hs].transpose());
    P.col(1).noalias() = scale * (f.k1[hs] * f.q2[hs].transpose());
    P.col(2).setConstant(scale * f.k2[hs].dot(f.q2[hs]));
    f.smax = P.rowwise().maxCoeff();
    P = (P.colwise() - f.smax).array().exp();
    f.ssum = P.rowwise().sum();
    P.array().colwise() /= f.ssum.array();

    f.zc.middleCols(h * dh, dh) =
        f.v0[hs].array().colwise() * P.col(0).array() +
        f.v1[hs].array().colwise() * P.col(1).array();
    f.zc.middleCols(h * dh, dh).noalias() += P.col(2) * f.v2[hs];
  }

  f.r2.resize(n, dm);
  f.r2.noalias() = f.zc * b.wo.transpose();
  f.r2.rowwise() += b.bo.transpose() + f.x2;
  f.hpre.resize(n, d.d_mlp);
  f.hpre.noalias() = f.r2 * b.w_in.transpose();
  f.hpre.rowwise() += b.b_in.transpose();
  f.act = f.hpre.unaryExpr([&](double x) { return act_eval(d.act, x); });
  f.r3.resize(n, dm);
  f.r3.noalias() = f.act * b.w_out.transpose();
  f.r3.rowwise() += b.b_out.transpose();
  f.r3 += f.r2;
  f.logit.resize(n, d.vocab_out);
  f.logit.noalias() = f.r3 * d.w_unembed.transpose();
}

// Softmax cross-entropy over rows; writes row-normalized probabilities into
// prob_out when given. Row-streaming, no temporaries beyond prob_out itself.
double ce_loss(const Mat& logit, const std::vector<int32_t>& labels, double* acc_out,
               Mat* prob_out) {
  const Eigen::Index n = logit.rows();
  if (prob_out) prob_out->resize(n, logit.cols());
  double loss = 0.0;
  int hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int32_t lab = labels[static_cast<size_t>(i)];
    Eigen::Index arg;
    double mx = logit.row(i).maxCoeff(&arg);
    double se;
    if (prob_out) {
      prob_out->row(i) = (logit.row(i).array() - mx).exp();
      se = prob_out->row(i).sum();
      prob_out->row(i) /= se;
    } else {
      se = (logit.row(i).array() - mx).exp().sum();
    }
    loss += std::log(se) + mx - logit(i, lab);
    if (arg == lab) ++hits;
  }
  if (acc_out) *acc_out = static_cast<double>(hits) / static_cast<double>(n);
  return loss / static_cast<double>(n);
}

// Backward scratch. Persists across epochs alongside the forward state so a
// steady-state training step performs no heap allocation.
struct ModAddWork {
  ModAddFwd f;
  Mat P;  // softmax probabilities, reused in place as the logit gradient
  Mat gr3, gact, ghpre, gr2, gzc, gx0, gx1;
  Mat gv0, gv1, gk0, gk1;
  Vec gp0, gp1, gp2, dotp, gs0, gs1, gs2;
  Eigen::RowVectorXd gx2, gq2, gk2, gv2;
};

double modadd_backward(const TransformerDesc& d, const ModAddDataset& data,
                       const std::vector<Eigen::Index>& idx,
                       const std::vector<int32_t>& labels, TransformerDesc& g,
                       ModAddWork& w) {
  ModAddFwd& f = w.f;
  modadd_forward(d, data, idx, f);
  const auto n = static_cast<Eigen::Index>(idx.size());
  const Eigen::Index dh = d.d_head;
  const int H = d.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const TransformerBlockParams& b = d.blocks[0];
  TransformerBlockParams& gb = g.blocks[0];

  double loss = ce_loss(f.logit, labels, nullptr, &w.P);
  for (Eigen::Index i = 0; i < n; ++i) w.P(i, labels[static_cast<size_t>(i)]) -= 1.0;
  w.P /= static_cast<double>(n);  // now the logit gradient

  g.w_unembed.noalias() = w.P.transpose() * f.r3;
  w.gr3.noalias() = w.P * d.w_unembed;

  w.gact.noalias() = w.gr3 * b.w_out;
  gb.w_out.noalias() = w.gr3.transpose() * f.act;
  gb.b_out = w.gr3.colwise().sum().transpose();
  w.ghpre = w.gact.cwiseProduct(
      f.hpre.unaryExpr([&](double x) { return act_grad(d.act, x); }));
  gb.w_in.noalias() = w.ghpre.transpose() * f.r2;
  gb.b_in = w.ghpre.colwise().sum().transpose();
  w.gr2 = w.gr3;
  w.gr2.noalias() += w.ghpre * b.w_in;

  gb.wo.noalias() = w.gr2.transpose() * f.zc;
  gb.bo = w.gr2.colwise().sum().transpose();
  w.gzc.noalias() = w.gr2 * b.wo;
  w.gx2 = w.gr2.colwise().sum();  // direct residual path

  w.gx0.resize(n, d.d_model);
  w.gx1.resize(n, d.d_model);
  w.gx0.setZero();
  w.gx1.setZero();

  for (int h = 0; h < H; ++h) {
    auto hs = static_cast<size_t>(h);
    auto gz = w.gzc.middleCols(h * dh, dh);
    const Mat& P = f.prob[hs];

    w.gp0 = (gz.cwiseProduct(f.v0[hs])).rowwise().sum();
    w.gp1 = (gz.cwiseProduct(f.v1[hs])).rowwise().sum();
    w.gp2.noalias() = gz * f.v2[hs].transpose();
    w.gv0 = gz.array().colwise() * P.col(0).array();
    w.gv1 = gz.array().colwise() * P.col(1).array();
    w.gv2.noalias() = P.col(2).transpose() * gz;

    w.dotp = P.col(0).cwiseProduct(w.gp0) + P.col(1).cwiseProduct(w.gp1) +
             P.col(2).cwiseProduct(w.gp2);
    w.gs0 = P.col(0).cwiseProduct(w.gp0 - w.dotp);
    w.gs1 = P.col(1).cwiseProduct(w.gp1 - w.dotp);
    w.gs2 = P.col(2).cwiseProduct(w.gp2 - w.dotp);

    w.gq2 = scale * (w.gs0.transpose() * f.k0[hs] + w.gs1.transpose() * f.k1[hs] +
                     w.gs2.sum() * f.k2[hs]);
    w.gk0.noalias() = scale * (w.gs0 * f.q2[hs]);
    w.gk1.noalias() = scale * (w.gs1 * f.q2[hs]);
    w.gk2 = scale * w.gs2.sum() * f.q2[hs];

    gb.wq[hs].noalias() = w.gq2.transpose() * f.x2;
    gb.bq[hs] = w.gq2.transpose();
    gb.wk[hs].noalias() = w.gk0.transpose() * f.x0 + w.gk1.transpose() * f.x1;
    gb.wk[hs].noalias() += w.gk2.transpose() * f.x2;
    gb.bk[hs] = (w.gk0.colwise().sum() + w.gk1.colwise().sum() + w.gk2).transpose();
    gb.wv[hs].noalias() = w.gv0.transpose() * f.x0 + w.gv1.transpose() * f.x1;
    gb.wv[hs].noalias() += w.gv2.transpose() * f.x2;
    gb.bv[hs] = (w.gv0.colwise().sum() + w.gv1.colwise().sum() + w.gv2).transpose();

    w.gx0.noalias() += w.gk0 * b.wk[hs] + w.gv0 * b.wv[hs];
    w.gx1.noalias() += w.gk1 * b.wk[hs] + w.gv1 * b.wv[hs];
    w.gx2 += w.gq2 * b.wq[hs] + w.gk2 * b.wk[hs] + w.gv2 * b.wv[hs];
  }

  g.tok_emb.setZero();
  g.pos_emb.setZero();
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index di = idx[static_cast<size_t>(i)];
    g.tok_emb.row(data.ids[static_cast<size_t>(3 * di)]) += w.gx0.row(i);
    g.tok_emb.row(data.ids[static_cast<size_t>(3 * di + 1)]) += w.gx1.row(i);
  }
  g.tok_emb.row(data.p) += w.gx2;
  g.pos_emb.row(0) += w.gx0.colwise().sum();
  g.pos_emb.row(1) += w.gx1.colwise().sum();
  g.pos_emb.row(2) += w.gx2;
  return loss;
}

void eval_modadd(const TransformerDesc& d, const ModAddDataset& data,
                 const std::vector<Eigen::Index>& idx, const std::vector<int32_t>& labels,
                 ModAddFwd& f, double* loss, double* acc) {
  modadd_forward(d, data, idx, f);
  *loss = ce_loss(f.logit, labels, acc, nullptr);
}

}  // namespace

TrainConfig modadd_train_defaults() { return TrainConfig{}; }

TrainConfig cifar_train_defaults() {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.schedule = "constant";
  cfg.batch_size = 256;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.weight_decay = 0.01;
  cfg.epochs = 100;
  cfg.warmup_epochs = 0;
  cfg.eval_every = 1;
  cfg.early_stop = true;
  cfg.plateau_patience = 15;
  return cfg;
}

double modadd_loss(const TransformerDesc& params, const ModAddDataset& data,
                   const std::vector<Eigen::Index>& idx) {
  ModAddFwd f;
  double loss, acc;
  eval_modadd(params, data, idx, data.labels_at(idx), f, &loss, &acc);
  return loss;
}

TransformerDesc modadd_loss_grad(const TransformerDesc& params, const ModAddDataset& data,
                                 const std::vector<Eigen::Index>& idx) {
  TransformerDesc g = params;  // same shapes; values overwritten
  ModAddWork w;
  modadd_backward(params, data, idx, data.labels_at(idx), g, w);
  return g;
}

TrainResult train_modadd(const ModAddDataset& data, const TrainConfig& cfg,
                         const ModAddArch& arch) {
  check_cfg(cfg.lr >= 0 && cfg.epochs >= 0 && cfg.eval_every > 0, "invalid training config");
  TrainResult res;
  res.transformer = init_modadd_params(data.p, arch, cfg.seed);
  TransformerDesc& d = res.transformer;
  TransformerDesc g = d;

  std::vector<Eigen::Index> train_idx = data.train_idx;
  if (cfg.train_on_full) {
    train_idx.clear();
    for (Eigen::Index i = 0; i < data.n; ++i) train_idx.push_back(i);
  }

  std::vector<Span> pspans = transformer_spans(d);
  std::vector<Span> gspans = transformer_spans(g);
  AdamW opt(pspans, cfg);

  std::vector<int32_t> step_labels = data.labels_at(train_idx);
  std::vector<int32_t> train_labels = data.labels_at(data.train_idx);
  std::vector<int32_t> test_labels = data.labels_at(data.test_idx);
  ModAddWork w;
  ModAddFwd ef_train, ef_test;

  int qualified_streak = 0;
  for (Eigen::Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = schedule_lr(cfg, epoch);
    double step_loss = modadd_backward(d, data, train_idx, step_labels, g, w);
    check(std::isfinite(step_loss), "training diverged at epoch " + std::to_string(epoch));
    opt.step(pspans, gspans, lr);
    res.epochs_run = epoch + 1;

    if (epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      TrainLogRecord rec;
      rec.epoch = epoch;
      eval_modadd(d, data, data.train_idx, train_labels, ef_train, &rec.train_loss,
                  &rec.train_acc);
      eval_modadd(d, data, data.test_idx, test_labels, ef_test, &rec.test_loss,
                  &rec.test_acc);
      check(std::isfinite(rec.train_loss) && std::isfinite(rec.test_loss),
            "training diverged at epoch " + std::to_string(epoch));
      res.log.push_back(rec);
      bool qualified = cfg.early_stop && rec.train_acc == 1.0 && rec.test_acc == 1.0 &&
                       rec.test_loss < cfg.early_stop_test_loss;
      qualified_streak = qualified ? qualified_streak + 1 : 0;
      if (qualified_streak >= 2) break;
    }
  }

  double tl;
  eval_modadd(d, data, data.train_idx, train_labels, ef_train, &tl, &res.final_train_acc);
  eval_modadd(d, data, data.test_idx, test_labels, ef_test, &res.final_test_loss,
              &res.final_test_acc);
  return res;
}

namespace {

Mat cifar_rows(const Cifar10Dataset& data, const std::vector<Eigen::Index>& idx) {
  Mat x(static_cast<Eigen::Index>(idx.size()), 3072);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const uint8_t* px = data.pixels.data() + idx[static_cast<size_t>(i)] * 3072;
    for (Eigen::Index k = 0; k < 3072; ++k) x(i, k) = static_cast<double>(px[k]) / 255.0;
  }
  return x;
}

struct CifarFwd {
  Mat x;
  std::vector<Mat> pre, post;  // per hidden layer
  Mat logit;
};

void cifar_forward(const MlpDesc& d, const Mat& x, CifarFwd& f) {
  f.x = x;
  size_t L = d.w.size();
  f.pre.assign(L - 1, Mat());
  f.post.assign(L - 1, Mat());
  const Mat* cur = &f.x;
  for (size_t l = 0; l + 1 < L; ++l) {
    f.pre[l] = ((*cur) * d.w[l].transpose()).rowwise() + d.b[l].transpose();
    f.post[l] = f.pre[l].unaryExpr([&](double v) { return act_eval(d.act, v); });
    cur = &f.post[l];
  }
  f.logit = ((*cur) * d.w[L - 1].transpose()).rowwise() + d.b[L - 1].transpose();
}

double cifar_backward(const MlpDesc& d, const Mat& x, const std::vector<int32_t>& labels,
                      MlpDesc& g) {
  CifarFwd f;
  cifar_forward(d, x, f);
  Mat prob;
  double loss = ce_loss(f.logit, labels, nullptr, &prob);
  const Eigen::Index n = x.rows();
  for (Eigen::Index i = 0; i < n; ++i) prob(i, labels[static_cast<size_t>(i)]) -= 1.0;
  Mat gout = prob / static_cast<double>(n);

  size_t L = d.w.size();
  for (size_t l = L; l-- > 0;) {
    const Mat& input = l == 0 ? f.x : f.post[l - 1];
    g.w[l].noalias() = gout.transpose() * input;
    g.b[l] = gout.colwise().sum().transpose();
    if (l == 0) break;
    Mat gpost = gout * d.w[l];
    gout = gpost.cwiseProduct(
        f.pre[l - 1].unaryExpr([&](double v) { return act_grad(d.act, v); }));
  }
  return loss;
}

MlpDesc init_cifar_params(const CifarArch& arch, uint64_t seed) {
  MlpDesc d;
  d.act = ActFn::ReLU;
  std::vector<Eigen::Index> dims = {3072};
  for (Eigen::Index h : arch.hidden) dims.push_back(h);
  dims.push_back(arch.classes);
  uint64_t k = fork_seed(seed, "init");
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    double s = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    d.w.push_back(random_mat(dims[l + 1], dims[l], fork_seed(k, "w" + std::to_string(l)), s,
                             false));
    d.b.push_back(Vec::Zero(dims[l + 1]));
  }
  return d;
}

void eval_cifar(const MlpDesc& d, const Cifar10Dataset& data, double* loss, double* acc) {
  // Chunked to bound the materialized double-precision rows.
  const Eigen::Index chunk = 4096;
  double total = 0.0;
  Eigen::Index hits = 0;
  for (Eigen::Index at = 0; at < data.n; at += chunk) {
    Eigen::Index end = std::min(data.n, at + chunk);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = at; i < end; ++i) idx.push_back(i);
    CifarFwd f;
    cifar_forward(d, cifar_rows(data, idx), f);
    double acc_part;
    total += ce_loss(f.logit, data.labels_at(idx), &acc_part, nullptr) *
             static_cast<double>(end - at);
    hits += static_cast<Eigen::Index>(std::lround(acc_part * static_cast<double>(end - at)));
  }
  *loss = total / static_cast<double>(data.n);
  *acc = static_cast<double>(hits) / static_cast<double>(data.n);
}

}  // namespace

double cifar_loss(const MlpDesc& params, const Cifar10Dataset& data,
                  const std::vector<Eigen::Index>& idx) {
  CifarFwd f;
  cifar_forward(params, cifar_rows(data, idx), f);
  return ce_loss(f.logit, data.labels_at(idx), nullptr, nullptr);
}

MlpDesc cifar_loss_grad(const MlpDesc& params, const Cifar10Dataset& data,
                        const std::vector<Eigen::Index>& idx) {
  MlpDesc g = params;
  cifar_backward(params, cifar_rows(data, idx), data.labels_at(idx), g);
  return g;
}

TrainResult train_cifar(const Cifar10Dataset& train, const Cifar10Dataset& test,
                        const TrainConfig& cfg, const CifarArch& arch) {
  check_cfg(cfg.lr >= 0 && cfg.epochs >= 0 && cfg.eval_every > 0 && cfg.batch_size > 0,
            "invalid training config");
  TrainResult res;
  res.mlp = init_cifar_params(arch, cfg.seed);
  res.mlp_input_dim = 3072;
  MlpDesc& d = res.mlp;
  MlpDesc g = d;
  std::vector<Span> pspans = mlp_spans(d);
  std::vector<Span> gspans = mlp_spans(g);
  AdamW opt(pspans, cfg);

  double best_acc = -1.0;
  Eigen::Index stale = 0;
  for (Eigen::Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = schedule_lr(cfg, epoch);
    auto perm = shuffled_indices(train.n, fork_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
    for (size_t at = 0; at < perm.size(); at += static_cast<size_t>(cfg.batch_size)) {
      size_t end = std::min(perm.size(), at + static_cast<size_t>(cfg.batch_size));
      std::vector<Eigen::Index> idx(perm.begin() + static_cast<std::ptrdiff_t>(at),
                                    perm.begin() + static_cast<std::ptrdiff_t>(end));
      double loss = cifar_backward(d, cifar_rows(train, idx), train.labels_at(idx), g);
      check(std::isfinite(loss), "training diverged at epoch " + std::to_string(epoch));
      opt.step(pspans, gspans, lr);
    }
    res.epochs_run = epoch + 1;

    if (epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      TrainLogRecord rec;
      rec.epoch = epoch;
      eval_cifar(d, train, &rec.train_loss, &rec.train_acc);
      eval_cifar(d, test, &rec.test_loss, &rec.test_acc);
      check(std::isfinite(rec.train_loss) && std::isfinite(rec.test_loss),
            "training diverged at epoch " + std::to_string(epoch));
      res.log.push_back(rec);
      if (cfg.early_stop && cfg.plateau_patience > 0) {
        if (rec.test_acc > best_acc + 1e-9) {
          best_acc = rec.test_acc;
          stale = 0;
        } else if (++stale >= cfg.plateau_patience) {
          break;
        }
      }
    }
  }

  double tl;
  eval_cifar(d, train, &tl, &res.final_train_acc);
  eval_cifar(d, test, &res.final_test_loss, &res.final_test_acc);
  return res;
}

void write_train_log(const std::vector<TrainLogRecord>& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  check_cfg(out.good(), "cannot open " + path + " for writing");
  for (const TrainLogRecord& r : log) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"train_loss", r.train_loss},
                     {"train_acc", r.train_acc},
                     {"test_acc", r.test_acc},
                     {"test_loss", r.test_loss}};
    out << j.dump() << "\n";
  }
  check(out.good(), "write failure on " + path);
}

}  // namespace ibg
