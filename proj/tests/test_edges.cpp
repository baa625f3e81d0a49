#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ibg/basis.hpp"
#include "ibg/edges.hpp"
#include "ibg/model.hpp"
#include "ibg/util.hpp"

using namespace ibg;

namespace {

std::mt19937_64 g_rng(555);

Mat random_mat(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng_normal(g_rng);
  return m;
}

Vec random_vec(Eigen::Index n, double scale = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng_normal(g_rng);
  return v;
}

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

// Rows with the constant column prepended.
Mat with_const(const Mat& x) {
  Mat y(x.rows(), x.cols() + 1);
  y.col(0).setOnes();
  y.rightCols(x.cols()) = x;
  return y;
}

// Real-input network holding a single folded linear map; sections at the
// input and the output.
SequentialNetwork linear_net(const Mat& w, const Vec& b) {
  MlpDesc d;
  d.w = {w};
  d.b = {b};
  return fold_biases(d, w.cols());
}

// Two-layer perceptron with an activation between the maps; three sections.
SequentialNetwork mlp2(const Mat& w1, const Vec& b1, const Mat& w2, const Vec& b2,
                       ActFn act) {
  MlpDesc d;
  d.w = {w1, w2};
  d.b = {b1, b2};
  d.act = act;
  return fold_biases(d, w1.cols());
}

ActivationRecord record_all(const SequentialNetwork& net, const Mat& reals) {
  Batch batch;
  batch.n = reals.rows();
  batch.reals = with_const(reals);
  return forward_sections(net, batch);
}

TransformerDesc tiny_tx(double scale = 0.5) {
  TransformerDesc d;
  d.vocab_in = 6;
  d.vocab_out = 6;
  d.T = 3;
  d.d_model = 8;
  d.heads = 2;
  d.d_head = 4;
  d.d_mlp = 12;
  d.act = ActFn::ReLU;
  d.tok_emb = random_mat(6, 8, 0.7);
  d.pos_emb = random_mat(3, 8, 0.7);
  TransformerBlockParams b;
  for (int h = 0; h < 2; ++h) {
    b.wq.push_back(random_mat(4, 8, scale));
    b.wk.push_back(random_mat(4, 8, scale));
    b.wv.push_back(random_mat(4, 8, scale));
    b.bq.push_back(random_vec(4, 0.2));
    b.bk.push_back(random_vec(4, 0.2));
    b.bv.push_back(random_vec(4, 0.2));
  }
  b.wo = random_mat(8, 8, scale);
  b.bo = random_vec(8, 0.2);
  b.w_in = random_mat(12, 8, scale);
  b.b_in = random_vec(12, 0.2);
  b.w_out = random_mat(8, 12, scale);
  b.b_out = random_vec(8, 0.2);
  d.blocks.push_back(b);
  d.w_unembed = random_mat(6, 8, scale);
  return d;
}

Batch token_batch(Eigen::Index n, int vocab) {
  Batch batch;
  batch.n = n;
  for (Eigen::Index i = 0; i < n; ++i) {
    batch.ids.push_back(static_cast<int32_t>(g_rng() % static_cast<uint64_t>(vocab - 1)));
    batch.ids.push_back(static_cast<int32_t>(g_rng() % static_cast<uint64_t>(vocab - 1)));
    batch.ids.push_back(static_cast<int32_t>(vocab - 1));
  }
  return batch;
}

// Transform a raw T x w activation block into basis coordinates (rows stay
// tokens), keeping only the retained nodes.
Mat to_nodes(const InteractionBasis& b, const Mat& raw) {
  return (b.c.topRows(b.kept + 1) * raw.transpose()).transpose();
}

}  // namespace

TEST_CASE("a linear gap reads off weight times activation") {
  Mat w = random_mat(3, 4);
  Vec b = random_vec(3, 0.3);
  SequentialNetwork net = linear_net(w, b);
  Mat wf = net.layers[0].w;  // 4 x 5 folded map

  Mat x = random_mat(5, 4);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> nb = compute_neuron_bases(net, acts);
  REQUIRE(nb.size() == 2);

  // The integrand is constant in alpha, so every grid reproduces the same
  // attribution w_ij * f_j; the average is the rms over datapoints.
  Mat f = with_const(x);
  Mat e2 = Mat::Zero(4, 5);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    Mat a = wf.array().rowwise() * f.row(r).array();
    e2.array() += a.array().square();
  }
  Mat want = (e2 / static_cast<double>(f.rows())).cwiseSqrt();

  IgConfig cfg;
  SUBCASE("one interval") { cfg.alpha_steps = 1; }
  SUBCASE("seven intervals") { cfg.alpha_steps = 7; }
  SUBCASE("endpoint only") { cfg.shortcut = true; }

  EdgeMatrix em = ig_edges(net, acts, nb[0], nb[1], cfg);
  CHECK(em.section == 0);
  CHECK(em.rows() == 4);
  CHECK(em.cols() == 5);
  CHECK(max_abs(em.e - want) < 1e-12);
  CHECK(em.e(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(em.e.row(0).tail(4).cwiseAbs().maxCoeff() < 1e-12);

  IgConfig cs = cfg;
  cs.averaging = EdgeAveraging::SumSquares;
  EdgeMatrix es = ig_edges(net, acts, nb[0], nb[1], cs);
  CHECK(max_abs(es.e - want.cwiseProduct(want)) < 1e-12);
}

TEST_CASE("a single datapoint keeps its attribution magnitudes") {
  Mat w = random_mat(4, 3);
  SequentialNetwork net = linear_net(w, Vec::Zero(4));
  Mat x = random_mat(1, 3);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> nb = compute_neuron_bases(net, acts);

  EdgeMatrix em = ig_edges(net, acts, nb[0], nb[1], IgConfig{});
  Mat a = net.layers[0].w.array().rowwise() * with_const(x).row(0).array();
  CHECK(max_abs(em.e - a.cwiseAbs()) < 1e-12);
}

TEST_CASE("mirrored datapoints cancel in the signed mean but not in the rms") {
  Mat w = random_mat(3, 4);
  SequentialNetwork net = linear_net(w, Vec::Zero(3));
  Mat x(2, 4);
  x.row(0) = random_vec(4).transpose();
  x.row(1) = -x.row(0);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> nb = compute_neuron_bases(net, acts);

  // Signed attributions for the pair are +-(w_ij x_j): their mean vanishes
  // for every non-constant source, which would hide these edges entirely.
  Mat a0 = net.layers[0].w.array().rowwise() * with_const(x).row(0).array();
  Mat a1 = net.layers[0].w.array().rowwise() * with_const(x).row(1).array();
  CHECK(max_abs(0.5 * (a0 + a1).rightCols(4)) < 1e-14);

  EdgeMatrix em = ig_edges(net, acts, nb[0], nb[1], IgConfig{});
  CHECK(max_abs(em.e - a0.cwiseAbs()) < 1e-12);
  CHECK(em.e.bottomRightCorner(3, 4).minCoeff() > 0.0);
}

TEST_CASE("relu collapses the alpha integral onto its endpoint") {
  Mat w1 = random_mat(6, 4);
  Mat w2 = random_mat(3, 6);
  SequentialNetwork net = mlp2(w1, random_vec(6, 0.4), w2, random_vec(3, 0.4), ActFn::ReLU);
  Mat x = random_mat(12, 4);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});

  IgConfig dense;
  dense.alpha_steps = 1000;
  IgConfig coarse;
  coarse.alpha_steps = 3;
  IgConfig shortcut;
  shortcut.shortcut = true;

  for (int l = 0; l < 2; ++l) {
    EdgeMatrix ed = ig_edges(net, acts, lib[l], lib[l + 1], dense);
    EdgeMatrix ec = ig_edges(net, acts, lib[l], lib[l + 1], coarse);
    EdgeMatrix es = ig_edges(net, acts, lib[l], lib[l + 1], shortcut);
    CHECK(max_abs(ed.e - es.e) < 1e-10);
    CHECK(max_abs(ec.e - es.e) < 1e-10);
    CHECK(ed.e.minCoeff() >= 0.0);
  }
}

TEST_CASE("gelu closes the shortcut gap only in its near-linear regime") {
  // Preactivations of a few hundredths keep the curvature second order.
  Mat w1 = random_mat(6, 4, 0.004);
  Mat w2 = random_mat(3, 6, 1.0);
  SequentialNetwork net = mlp2(w1, random_vec(6, 0.004), w2, random_vec(3, 0.4), ActFn::GELU);
  Mat x = random_mat(10, 4);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> nb = compute_neuron_bases(net, acts);

  IgConfig dense;
  dense.alpha_steps = 400;
  IgConfig shortcut;
  shortcut.shortcut = true;

  EdgeMatrix ed = ig_edges(net, acts, nb[0], nb[1], dense);
  EdgeMatrix es = ig_edges(net, acts, nb[0], nb[1], shortcut);
  double rel = (ed.e - es.e).norm() / ed.e.norm();
  CHECK(rel < 1e-2);
  CHECK(rel > 1e-9);  // the integrand does vary, unlike the relu case
}

TEST_CASE("attributions telescope to the projected endpoint") {
  TransformerDesc d = tiny_tx();
  SequentialNetwork net = sequentialize(d);
  Batch batch = token_batch(6, 6);
  ActivationRecord acts = forward_sections(net, batch);

  auto completeness = [&](const InteractionBasis& in, const InteractionBasis& out,
                          const IgConfig& cfg) {
    AttributionSamples keep;
    ig_edges(net, acts, in, out, cfg, &keep);
    int l = in.section;
    Eigen::Index ko1 = out.kept + 1;
    double worst = 0.0;
    for (Eigen::Index xi = 0; xi < acts.n; ++xi) {
      Mat f_raw = acts.sec(l).middleRows(xi * net.T, net.T);
      Mat fhat = (in.c * f_raw.transpose()).transpose();
      Mat f_proj = (in.c_pinv * fhat.transpose()).transpose();
      Mat end = to_nodes(out, gap_forward(net, l, l + 1, f_proj, nullptr));
      for (int s = 0; s < net.T; ++s)
        for (Eigen::Index i = 0; i < ko1; ++i) {
          double got = keep.a[static_cast<size_t>(xi)].row(s * ko1 + i).sum();
          worst = std::max(worst, std::abs(got - end(s, i)));
        }
    }
    return worst;
  };

  SUBCASE("full retention") {
    std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});
    IgConfig dense;
    dense.alpha_steps = 2000;
    CHECK(completeness(lib[0], lib[1], dense) < 1e-6);  // token-mixing gap
    IgConfig any;
    any.alpha_steps = 4;
    CHECK(completeness(lib[1], lib[2], any) < 1e-8);  // relu gap, grid exact
  }

  SUBCASE("aggressive truncation still telescopes") {
    BasisOptions opt;
    opt.lambda_tol = 1e-2;
    std::vector<InteractionBasis> lib = compute_lib(net, acts, opt);
    CHECK(lib[1].kept < lib[1].width() - 1);
    IgConfig any;
    any.alpha_steps = 4;
    EdgeMatrix em = ig_edges(net, acts, lib[1], lib[2], any);
    CHECK(em.rows() == lib[2].kept + 1);
    CHECK(em.cols() == lib[1].kept + 1);
    CHECK(completeness(lib[1], lib[2], any) < 1e-8);
  }
}

TEST_CASE("token-local gaps make the source contraction vacuous") {
  TransformerDesc d = tiny_tx();
  SequentialNetwork net = sequentialize(d);
  Batch batch = token_batch(5, 6);
  ActivationRecord acts = forward_sections(net, batch);
  std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});

  IgConfig cfg;
  cfg.alpha_steps = 8;
  EdgeMatrix exact = ig_edges(net, acts, lib[1], lib[2], cfg);
  for (int r : {1, 5}) {
    SourceConfig src;
    src.exact = false;
    src.r = r;
    src.seed = 42 + static_cast<uint64_t>(r);
    EdgeMatrix st = stochastic_edges(net, acts, lib[1], lib[2], cfg, src);
    CHECK(max_abs(st.e - exact.e) == 0.0);
    CHECK(st.sources.exact == false);
    CHECK(st.sources.r == r);
  }
}

TEST_CASE("single-token data needs no sampling at all") {
  Mat w = random_mat(4, 3);
  SequentialNetwork net = linear_net(w, random_vec(4, 0.2));
  Mat x = random_mat(6, 3);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> nb = compute_neuron_bases(net, acts);

  EdgeMatrix exact = ig_edges(net, acts, nb[0], nb[1], IgConfig{});
  SourceConfig src;
  src.exact = false;
  src.r = 7;
  src.seed = 9;
  EdgeMatrix st = stochastic_edges(net, acts, nb[0], nb[1], IgConfig{}, src);
  CHECK(max_abs(st.e - exact.e) == 0.0);
}

TEST_CASE("token-mixing gaps sample with shrinking error") {
  TransformerDesc d = tiny_tx();
  SequentialNetwork net = sequentialize(d);
  Batch batch = token_batch(6, 6);
  ActivationRecord acts = forward_sections(net, batch);
  std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});

  IgConfig cfg;
  cfg.shortcut = true;
  cfg.approx_linear = true;
  cfg.averaging = EdgeAveraging::SumSquares;
  EdgeMatrix exact = ig_edges(net, acts, lib[0], lib[1], cfg);

  // A single draw really is an estimate across a mixing gap.
  SourceConfig one;
  one.exact = false;
  one.r = 1;
  one.seed = 7;
  EdgeMatrix e1 = stochastic_edges(net, acts, lib[0], lib[1], cfg, one);
  CHECK(max_abs(e1.e - exact.e) > 1e-8);

  // The squared-edge estimator is unbiased, so its mean squared deviation
  // from the exact value is pure variance and scales as 1/r.
  auto msd = [&](int r) {
    double acc = 0.0;
    for (int seed = 0; seed < 20; ++seed) {
      SourceConfig src;
      src.exact = false;
      src.r = r;
      src.seed = 1000 + static_cast<uint64_t>(seed);
      EdgeMatrix st = stochastic_edges(net, acts, lib[0], lib[1], cfg, src);
      acc += (st.e - exact.e).squaredNorm();
    }
    return acc / 20.0;
  };
  double m1 = msd(1), m4 = msd(4), m16 = msd(16);
  CHECK(m1 / m4 > 2.2);
  CHECK(m1 / m4 < 7.5);
  CHECK(m4 / m16 > 2.2);
  CHECK(m4 / m16 < 7.5);
}

TEST_CASE("the variance forecast matches the scatter across seeds") {
  TransformerDesc d = tiny_tx();
  SequentialNetwork net = sequentialize(d);
  Batch batch = token_batch(6, 6);
  ActivationRecord acts = forward_sections(net, batch);
  std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});

  IgConfig cfg;
  cfg.shortcut = true;
  cfg.approx_linear = true;
  cfg.averaging = EdgeAveraging::SumSquares;
  AttributionSamples keep;
  ig_edges(net, acts, lib[0], lib[1], cfg, &keep);

  Mat sig1 = source_error_estimate(keep, 1);
  CHECK(sig1.minCoeff() >= 0.0);

  SUBCASE("doubling the source count halves the forecast exactly") {
    Mat sig2 = source_error_estimate(keep, 2);
    CHECK(max_abs(2.0 * sig2 - sig1) == 0.0);
  }

  SUBCASE("single-token attributions forecast zero variance") {
    Mat w = random_mat(4, 3);
    SequentialNetwork ln = linear_net(w, random_vec(4, 0.2));
    Mat x = random_mat(5, 3);
    ActivationRecord la = record_all(ln, x);
    std::vector<InteractionBasis> nb = compute_neuron_bases(ln, la);
    AttributionSamples lk;
    ig_edges(ln, la, nb[0], nb[1], IgConfig{}, &lk);
    Mat sig = source_error_estimate(lk, 1);
    CHECK(max_abs(sig) == 0.0);
  }

  SUBCASE("empirical scatter lands within a factor of two") {
    const int draws = 50;
    std::vector<Mat> e2;
    e2.reserve(draws);
    for (int seed = 0; seed < draws; ++seed) {
      SourceConfig src;
      src.exact = false;
      src.r = 1;
      src.seed = 5000 + static_cast<uint64_t>(seed);
      e2.push_back(stochastic_edges(net, acts, lib[0], lib[1], cfg, src).e);
    }
    Mat mean = Mat::Zero(e2[0].rows(), e2[0].cols());
    for (const Mat& m : e2) mean += m;
    mean /= static_cast<double>(draws);
    Mat var = Mat::Zero(mean.rows(), mean.cols());
    for (const Mat& m : e2) var.array() += (m - mean).array().square();
    var /= static_cast<double>(draws - 1);

    // Rank entries by forecast size and compare the ten largest.
    std::vector<std::pair<double, std::pair<Eigen::Index, Eigen::Index>>> order;
    for (Eigen::Index i = 0; i < sig1.rows(); ++i)
      for (Eigen::Index j = 0; j < sig1.cols(); ++j)
        order.push_back({sig1(i, j), {i, j}});
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int k = 0; k < 10; ++k) {
      auto [i, j] = order[static_cast<size_t>(k)].second;
      double ratio = var(i, j) / sig1(i, j);
      CHECK(ratio > 0.5);
      CHECK(ratio < 2.0);
    }
  }
}

TEST_CASE("the endpoint shortcut across token mixing needs a declaration") {
  TransformerDesc d = tiny_tx();
  SequentialNetwork net = sequentialize(d);
  Batch batch = token_batch(4, 6);
  ActivationRecord acts = forward_sections(net, batch);
  std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});

  CHECK(gap_elementwise(net, 1, 2));
  CHECK(!gap_elementwise(net, 0, 1));

  IgConfig cfg;
  cfg.shortcut = true;
  CHECK_THROWS_AS(ig_edges(net, acts, lib[0], lib[1], cfg), ConfigError);

  cfg.approx_linear = true;
  EdgeMatrix em = ig_edges(net, acts, lib[0], lib[1], cfg);
  CHECK(em.e.allFinite());
  CHECK(em.e.minCoeff() >= 0.0);
  CHECK(em.e(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(em.e.row(0).tail(em.cols() - 1).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("malformed requests are rejected up front") {
  TransformerDesc d = tiny_tx();
  SequentialNetwork net = sequentialize(d);
  Batch batch = token_batch(4, 6);
  ActivationRecord acts = forward_sections(net, batch);
  std::vector<InteractionBasis> lib = compute_lib(net, acts, BasisOptions{});

  IgConfig bad;
  bad.alpha_steps = 0;
  CHECK_THROWS_AS(ig_edges(net, acts, lib[0], lib[1], bad), ConfigError);

  // Bases must sit on adjacent sections, in order.
  CHECK_THROWS_AS(ig_edges(net, acts, lib[0], lib[2], IgConfig{}), ContractError);
  CHECK_THROWS_AS(ig_edges(net, acts, lib[1], lib[0], IgConfig{}), ContractError);

  // The record must carry the in-section activations.
  ActivationRecord sparse = acts;
  sparse.sections[0] = Mat();
  CHECK_THROWS_AS(ig_edges(net, sparse, lib[0], lib[1], IgConfig{}), ContractError);

  SourceConfig src;
  src.exact = false;
  src.r = 0;
  CHECK_THROWS_AS(stochastic_edges(net, acts, lib[0], lib[1], IgConfig{}, src),
                  ConfigError);
}

TEST_CASE("edge files round trip") {
  Mat w = random_mat(3, 4);
  SequentialNetwork net = linear_net(w, random_vec(3, 0.2));
  Mat x = random_mat(4, 4);
  ActivationRecord acts = record_all(net, x);
  std::vector<InteractionBasis> nb = compute_neuron_bases(net, acts);

  IgConfig cfg;
  cfg.alpha_steps = 11;
  cfg.averaging = EdgeAveraging::SumSquares;
  EdgeMatrix em = ig_edges(net, acts, nb[0], nb[1], cfg);

  const std::string path = "/tmp/test_edges.ibge";
  save_edges(path, em);
  EdgeMatrix back = load_edges(path);
  CHECK(back.section == em.section);
  CHECK(back.kept_in == em.kept_in);
  CHECK(back.kept_out == em.kept_out);
  CHECK(back.config.alpha_steps == 11);
  CHECK(back.config.shortcut == em.config.shortcut);
  CHECK(back.config.approx_linear == em.config.approx_linear);
  CHECK(back.config.averaging == EdgeAveraging::SumSquares);
  CHECK(back.sources.exact == true);
  CHECK(back.data_fingerprint == em.data_fingerprint);
  CHECK(max_abs(back.e - em.e) == 0.0);

  SUBCASE("content digests are stable and discriminating") {
    std::string d1 = file_digest(path);
    CHECK(d1.size() == 64);
    save_edges(path, em);
    CHECK(file_digest(path) == d1);
    EdgeMatrix other = em;
    other.e(1, 1) += 1.0;
    save_edges("/tmp/test_edges_other.ibge", other);
    CHECK(file_digest("/tmp/test_edges_other.ibge") != d1);
  }

  SUBCASE("corrupt and missing files are told apart") {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "NOTEDGES garbage";
    f.close();
    CHECK_THROWS_AS(load_edges(path), ContractError);
    CHECK_THROWS_AS(load_edges("/tmp/does_not_exist.ibge"), ConfigError);
    CHECK_THROWS_AS(file_digest("/tmp/does_not_exist.ibge"), ConfigError);
  }
}
