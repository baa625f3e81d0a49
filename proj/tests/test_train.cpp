#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ibg/data.hpp"
#include "ibg/model.hpp"
#include "ibg/train.hpp"
#include "ibg/util.hpp"

using namespace ibg;

namespace {

bool bits_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) == 0);
}

double accuracy(const Mat& lg, const std::vector<int32_t>& labels) {
  int hits = 0;
  for (Eigen::Index i = 0; i < lg.rows(); ++i) {
    Eigen::Index arg;
    lg.row(i).maxCoeff(&arg);
    if (arg == labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lg.rows());
}

// Labels a synthetic image by which third of [0,1] its mean pixel falls in,
// so a small MLP can learn the rule quickly.
Cifar10Dataset synthetic_images(Eigen::Index n, uint64_t seed) {
  Cifar10Dataset d;
  d.n = n;
  d.pixels.resize(static_cast<size_t>(n) * 3072);
  d.labels.resize(static_cast<size_t>(n));
  std::mt19937_64 rng = make_rng(seed);
  for (Eigen::Index i = 0; i < n; ++i) {
    uint8_t base = static_cast<uint8_t>(rng() % 250);
    double mean = 0.0;
    for (int k = 0; k < 3072; ++k) {
      uint8_t px = static_cast<uint8_t>((base + rng() % 32) % 256);
      d.pixels[static_cast<size_t>(i * 3072 + k)] = px;
      mean += px;
    }
    mean /= 3072.0 * 255.0;
    d.labels[static_cast<size_t>(i)] = mean < 0.33 ? 0 : (mean < 0.66 ? 1 : 2);
  }
  return d;
}

}  // namespace

TEST_CASE("draw helpers have sane ranges and moments") {
  std::mt19937_64 rng = make_rng(5);
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double u = rng_uniform01(rng);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    double g = rng_normal(rng);
    sum += g;
    sq += g * g;
  }
  CHECK(std::abs(sum / 20000.0) < 0.03);
  CHECK(std::abs(sq / 20000.0 - 1.0) < 0.05);
}

TEST_CASE("zero learning rate leaves parameters at their initialization") {
  ModAddDataset data = gen_modadd(13, 2);
  TrainConfig cfg = modadd_train_defaults();
  cfg.seed = 2;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  cfg.epochs = 0;
  cfg.early_stop = false;
  cfg.eval_every = 1;
  TrainResult init = train_modadd(data, cfg);
  cfg.epochs = 3;
  TrainResult stepped = train_modadd(data, cfg);
  CHECK(bits_equal(init.transformer.tok_emb, stepped.transformer.tok_emb));
  CHECK(bits_equal(init.transformer.blocks[0].w_in, stepped.transformer.blocks[0].w_in));
  CHECK(bits_equal(init.transformer.w_unembed, stepped.transformer.w_unembed));
  // Loss stays constant across those epochs.
  REQUIRE(stepped.log.size() >= 2);
  CHECK(stepped.log.front().train_loss == doctest::Approx(stepped.log.back().train_loss));
}

TEST_CASE("modadd training is bit-deterministic in the seed") {
  ModAddDataset data = gen_modadd(13, 4);
  TrainConfig cfg = modadd_train_defaults();
  cfg.seed = 7;
  cfg.epochs = 40;
  cfg.warmup_epochs = 10;
  cfg.early_stop = false;
  cfg.eval_every = 20;
  TrainResult a = train_modadd(data, cfg);
  TrainResult b = train_modadd(data, cfg);
  CHECK(bits_equal(a.transformer.tok_emb, b.transformer.tok_emb));
  CHECK(bits_equal(a.transformer.blocks[0].wo, b.transformer.blocks[0].wo));
  CHECK(bits_equal(a.transformer.w_unembed, b.transformer.w_unembed));
  cfg.seed = 8;
  TrainResult c = train_modadd(data, cfg);
  CHECK(!bits_equal(a.transformer.tok_emb, c.transformer.tok_emb));
}

TEST_CASE("modadd smoke run learns the task and folds equivalently") {
  ModAddDataset data = gen_modadd(13, 0);
  ModAddArch arch;
  arch.d_model = 24;
  arch.heads = 2;
  arch.d_head = 12;
  arch.d_mlp = 96;
  TrainConfig cfg = modadd_train_defaults();
  cfg.seed = 0;
  cfg.epochs = 4000;
  cfg.warmup_epochs = 20;
  cfg.eval_every = 50;
  cfg.train_on_full = true;
  cfg.early_stop = true;
  cfg.early_stop_test_loss = 2e-2;
  TrainResult r = train_modadd(data, cfg, arch);
  CHECK(r.final_train_acc == 1.0);
  CHECK(r.final_test_acc == 1.0);

  // The folded sequential network must agree with the trainer's own eval.
  SequentialNetwork net = sequentialize(r.transformer);
  Batch full = data.full_batch();
  Mat lg = logits(net, full);
  std::vector<Eigen::Index> all;
  for (Eigen::Index i = 0; i < data.n; ++i) all.push_back(i);
  CHECK(accuracy(lg, data.labels_at(all)) == doctest::Approx(1.0));

  // Sections record three stages of width d_model + 1 with constant column 1.
  ActivationRecord rec = forward_sections(net, full);
  REQUIRE(rec.sections.size() == 3);
  for (const Mat& s : rec.sections) {
    CHECK(s.cols() == arch.d_model + 1);
    CHECK((s.col(0).array() == 1.0).all());
  }
}

TEST_CASE("trainer forward matches the folded network loss exactly") {
  ModAddDataset data = gen_modadd(13, 6);
  ModAddArch arch;
  arch.d_model = 12;
  arch.heads = 2;
  arch.d_head = 6;
  arch.d_mlp = 20;
  TrainConfig cfg = modadd_train_defaults();
  cfg.seed = 11;
  cfg.epochs = 0;
  cfg.early_stop = false;
  TransformerDesc desc = train_modadd(data, cfg, arch).transformer;

  std::vector<Eigen::Index> idx = {0, 3, 7, 20, 55, 101, 168};
  double trainer_loss = modadd_loss(desc, data, idx);

  SequentialNetwork net = sequentialize(desc);
  Mat lg = logits(net, data.batch(idx));
  auto labs = data.labels_at(idx);
  double ref = 0.0;
  for (Eigen::Index i = 0; i < lg.rows(); ++i) {
    double mx = lg.row(i).maxCoeff();
    double lse = mx + std::log((lg.row(i).array() - mx).exp().sum());
    ref += lse - lg(i, labs[static_cast<size_t>(i)]);
  }
  ref /= static_cast<double>(lg.rows());
  CHECK(trainer_loss == doctest::Approx(ref).epsilon(1e-12));
}

namespace {

// Central finite difference of the trainer loss along one parameter entry;
// the pointer must alias a coefficient inside desc.
double fd_slope(TransformerDesc& desc, double* entry, const ModAddDataset& data,
                const std::vector<Eigen::Index>& idx) {
  const double h = 1e-5;
  double save = *entry;
  *entry = save + h;
  double up = modadd_loss(desc, data, idx);
  *entry = save - h;
  double dn = modadd_loss(desc, data, idx);
  *entry = save;
  return (up - dn) / (2.0 * h);
}

}  // namespace

TEST_CASE("modadd parameter gradients match finite differences") {
  ModAddDataset data = gen_modadd(13, 6);
  ModAddArch arch;
  arch.d_model = 12;
  arch.heads = 2;
  arch.d_head = 6;
  arch.d_mlp = 20;
  TrainConfig cfg = modadd_train_defaults();
  cfg.seed = 12;
  cfg.epochs = 0;
  cfg.early_stop = false;
  TransformerDesc desc = train_modadd(data, cfg, arch).transformer;

  std::vector<Eigen::Index> idx = {1, 2, 9, 33, 77, 150};
  TransformerDesc g = modadd_loss_grad(desc, data, idx);
  auto check_entry = [&](double* p, double got) {
    double want = fd_slope(desc, p, data, idx);
    CHECK(got == doctest::Approx(want).epsilon(2e-4));
  };
  TransformerBlockParams& b = desc.blocks[0];
  TransformerBlockParams& gb = g.blocks[0];
  check_entry(&desc.tok_emb(4, 3), g.tok_emb(4, 3));
  check_entry(&desc.tok_emb(13, 0), g.tok_emb(13, 0));  // '=' token row
  check_entry(&desc.pos_emb(0, 5), g.pos_emb(0, 5));
  check_entry(&desc.pos_emb(2, 1), g.pos_emb(2, 1));
  check_entry(&b.wq[1](2, 3), gb.wq[1](2, 3));
  check_entry(&b.wk[0](5, 0), gb.wk[0](5, 0));
  check_entry(&b.wv[1](0, 7), gb.wv[1](0, 7));
  check_entry(&b.bq[0](1), gb.bq[0](1));
  check_entry(&b.bk[1](4), gb.bk[1](4));
  check_entry(&b.bv[0](2), gb.bv[0](2));
  check_entry(&b.wo(3, 9), gb.wo(3, 9));
  check_entry(&b.bo(6), gb.bo(6));
  check_entry(&b.w_in(11, 2), gb.w_in(11, 2));
  check_entry(&b.b_in(17), gb.b_in(17));
  check_entry(&b.w_out(8, 13), gb.w_out(8, 13));
  check_entry(&b.b_out(4), gb.b_out(4));
  check_entry(&desc.w_unembed(12, 10), g.w_unembed(12, 10));
}

TEST_CASE("cifar parameter gradients match finite differences") {
  Cifar10Dataset data = synthetic_images(12, 9);
  CifarArch arch;
  arch.hidden = {7, 5};
  arch.classes = 10;
  TrainConfig cfg = cifar_train_defaults();
  cfg.seed = 4;
  cfg.epochs = 0;
  cfg.early_stop = false;
  MlpDesc mlp = train_cifar(data, data, cfg, arch).mlp;

  std::vector<Eigen::Index> idx = {0, 2, 5, 11};
  MlpDesc g = cifar_loss_grad(mlp, data, idx);
  const double h = 1e-5;
  auto fd = [&](double* p) {
    double save = *p;
    *p = save + h;
    double up = cifar_loss(mlp, data, idx);
    *p = save - h;
    double dn = cifar_loss(mlp, data, idx);
    *p = save;
    return (up - dn) / (2.0 * h);
  };
  CHECK(g.w[0](3, 100) == doctest::Approx(fd(&mlp.w[0](3, 100))).epsilon(2e-4));
  CHECK(g.b[0](2) == doctest::Approx(fd(&mlp.b[0](2))).epsilon(2e-4));
  CHECK(g.w[1](4, 6) == doctest::Approx(fd(&mlp.w[1](4, 6))).epsilon(2e-4));
  CHECK(g.b[1](0) == doctest::Approx(fd(&mlp.b[1](0))).epsilon(2e-4));
  CHECK(g.w[2](9, 3) == doctest::Approx(fd(&mlp.w[2](9, 3))).epsilon(2e-4));
  CHECK(g.b[2](7) == doctest::Approx(fd(&mlp.b[2](7))).epsilon(2e-4));
}

TEST_CASE("diverging modadd training reports the epoch") {
  ModAddDataset data = gen_modadd(13, 3);
  TrainConfig cfg = modadd_train_defaults();
  cfg.seed = 1;
  cfg.lr = 1e6;
  cfg.epochs = 300;
  cfg.warmup_epochs = 0;
  cfg.early_stop = false;
  cfg.eval_every = 100;
  CHECK_THROWS_AS(train_modadd(data, cfg), ContractError);
}

TEST_CASE("cifar-style training learns a synthetic rule deterministically") {
  Cifar10Dataset train = synthetic_images(400, 1);
  Cifar10Dataset test = synthetic_images(100, 2);
  TrainConfig cfg = cifar_train_defaults();
  cfg.seed = 3;
  cfg.lr = 3e-3;
  cfg.batch_size = 64;
  cfg.epochs = 150;
  cfg.eval_every = 30;
  cfg.early_stop = false;
  TrainResult r = train_cifar(train, test, cfg);
  CHECK(r.final_train_acc > 0.9);
  CHECK(r.final_test_acc > 0.9);

  TrainResult r2 = train_cifar(train, test, cfg);
  CHECK(bits_equal(r.mlp.w[0], r2.mlp.w[0]));
  CHECK(bits_equal(r.mlp.w[2], r2.mlp.w[2]));

  // Folded network reproduces the trainer's accuracy.
  SequentialNetwork net = fold_biases(r.mlp, r.mlp_input_dim);
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < test.n; ++i) idx.push_back(i);
  Mat lg = logits(net, test.batch(idx));
  CHECK(accuracy(lg, test.labels_at(idx)) == doctest::Approx(r.final_test_acc));
}

TEST_CASE("training log is line-delimited json with the expected fields") {
  std::vector<TrainLogRecord> log;
  log.push_back({0, 2.5, 0.1, 0.05, 2.6});
  log.push_back({25, 1.25, 0.5, 0.25, 1.5});
  std::string path = "train_log_probe.jsonl";
  write_train_log(log, path);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++lines;
    CHECK(line.find("\"epoch\"") != std::string::npos);
    CHECK(line.find("\"train_loss\"") != std::string::npos);
    CHECK(line.find("\"train_acc\"") != std::string::npos);
    CHECK(line.find("\"test_acc\"") != std::string::npos);
  }
  CHECK(lines == 2);
  std::remove(path.c_str());
}
