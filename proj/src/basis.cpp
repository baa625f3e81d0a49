#include "ibg/basis.hpp"

#include <cmath>
#include <cstdio>

#include "ibg/container.hpp"
#include "ibg/linalg.hpp"
#include "ibg/util.hpp"

namespace ibg {

const char* basis_kind_name(BasisKind k) {
  switch (k) {
    case BasisKind::Neuron: return "neuron";
    case BasisKind::Pca: return "pca";
    case BasisKind::Lib: return "lib";
    case BasisKind::Gib: return "gib";
  }
  throw ContractError("unknown basis kind code");
}

BasisKind basis_kind_from_name(const std::string& name) {
  for (BasisKind k : {BasisKind::Neuron, BasisKind::Pca, BasisKind::Lib, BasisKind::Gib})
    if (name == basis_kind_name(k)) return k;
  throw ConfigError("unknown basis kind '" + name + "' (expected neuron, pca, lib, or gib)");
}

Mat PcaTransform::center_matrix() const {
  Eigen::Index w = width();
  Mat h = Mat::Identity(w, w);
  for (Eigen::Index j = 1; j < w; ++j) h(j, 0) = -mean(j);
  return h;
}

Mat PcaTransform::uncenter_matrix() const {
  Eigen::Index w = width();
  Mat h = Mat::Identity(w, w);
  for (Eigen::Index j = 1; j < w; ++j) h(j, 0) = mean(j);
  return h;
}

Mat PcaTransform::whiten() const {
  return pinv_sqrt_diag(d, tol).asDiagonal() * u * center_matrix();
}

namespace {

// sqrt of the eigenvalues with directions at or below tol zeroed, so
// unwhiten() is the exact pseudo-inverse of whiten().
Vec kept_sqrt(const Vec& d, double tol) {
  Vec s = sqrt_clamped(d, tol);
  for (Eigen::Index j = 1; j < d.size(); ++j)
    if (!(d(j) > tol)) s(j) = 0.0;
  return s;
}

}  // namespace

Mat PcaTransform::unwhiten() const {
  return uncenter_matrix() * u.transpose() * kept_sqrt(d, tol).asDiagonal();
}

PcaTransform compute_pca(const Mat& samples, int section, double tol) {
  check(samples.rows() >= 1 && samples.cols() >= 1, "pca needs a nonempty sample block");
  check((samples.col(0).array() - 1.0).abs().maxCoeff() <= 1e-9,
        "pca samples must carry the constant 1 in column 0");
  Eigen::Index n = samples.rows();
  Eigen::Index w = samples.cols();
  if (n < w)
    std::fprintf(stderr,
                 "warning: section %d pca fit on %lld samples for %lld features; "
                 "the activation covariance is rank-deficient\n",
                 section, static_cast<long long>(n), static_cast<long long>(w));
  PcaTransform p;
  p.section = section;
  p.tol = tol;
  p.mean = samples.colwise().mean().transpose();
  p.mean(0) = 1.0;
  p.u = Mat::Identity(w, w);
  p.d = Vec::Ones(w);
  if (w > 1) {
    Mat b = samples.rightCols(w - 1).rowwise() - p.mean.tail(w - 1).transpose();
    Mat gram = b.transpose() * b / static_cast<double>(n);
    SymEigen eg = eig_sym(gram);
    p.u.block(1, 1, w - 1, w - 1) = eg.vectors.transpose();
    p.d.tail(w - 1) = eg.values;
  }
  p.kept = (p.d.tail(w - 1).array() > tol).count();
  return p;
}

PcaTransform compute_pca(const ActivationRecord& acts, int section, double tol) {
  check(section >= 0 && section < static_cast<int>(acts.sections.size()),
        "pca: section index out of range");
  const Mat& s = acts.sections[static_cast<size_t>(section)];
  check(s.size() > 0, "pca: section " + std::to_string(section) + " was not recorded");
  return compute_pca(s, section, tol);
}

JacobianGram compute_M(const SequentialNetwork& net, const ActivationRecord& acts,
                       int section, int target_section, const PcaTransform& pca,
                       const Mat& c_target, const SourceConfig& src) {
  check(section >= 0 && section < target_section && target_section < net.section_count(),
        "jacobian gram needs 0 <= section < target section < section count");
  Eigen::Index wl = net.section_width(section);
  Eigen::Index wt = net.section_width(target_section);
  check(pca.width() == wl && pca.section == section,
        "jacobian gram: pca factors do not belong to the source section");
  check(c_target.rows() == wt && c_target.cols() == wt,
        "jacobian gram: target transform width mismatch");
  check(std::abs(c_target(0, 0) - 1.0) <= 1e-9 &&
            (wt == 1 || c_target.row(0).tail(wt - 1).cwiseAbs().maxCoeff() <= 1e-9),
        "jacobian gram: target transform must keep the constant row isolated");
  check(section < static_cast<int>(acts.sections.size()) &&
            acts.sections[static_cast<size_t>(section)].size() > 0,
        "jacobian gram: source section activations missing");
  const Mat& xs = acts.sections[static_cast<size_t>(section)];
  Eigen::Index n = acts.n;
  int T = acts.T;
  check(xs.rows() == n * T && xs.cols() == wl, "jacobian gram: activation shape mismatch");
  check(src.exact || src.r >= 1, "jacobian gram: need at least one random source");

  // Accumulate the Gram in raw activation coordinates; the whitening factor
  // commutes with the sum, so it is applied once at the end.
  Mat mraw = Mat::Zero(wl, wl);
  auto accumulate = [&](const Mat& g) {
    for (int t = 0; t < T; ++t)
      mraw.selfadjointView<Eigen::Lower>().rankUpdate(
          g.middleCols(static_cast<Eigen::Index>(t) * wl, wl).transpose(), 1.0);
  };
  double denom;
  if (src.exact) {
    Mat cot = Mat::Zero(static_cast<Eigen::Index>(T) * wt, static_cast<Eigen::Index>(T) * wt);
    for (int s = 0; s < T; ++s)
      cot.block(static_cast<Eigen::Index>(s) * wt, static_cast<Eigen::Index>(s) * wt, wt, wt) =
          c_target;
    for (Eigen::Index x = 0; x < n; ++x) {
      Mat xin = xs.middleRows(x * T, T);
      GapCache cache;
      gap_forward(net, section, target_section, xin, &cache);
      accumulate(gap_vjp(net, section, target_section, cache, cot));
    }
    denom = static_cast<double>(n) * T;
  } else {
    Mat cot(wt, static_cast<Eigen::Index>(T) * wt);
    for (Eigen::Index x = 0; x < n; ++x) {
      Mat xin = xs.middleRows(x * T, T);
      GapCache cache;
      gap_forward(net, section, target_section, xin, &cache);
      for (int rep = 0; rep < src.r; ++rep) {
        for (int s = 0; s < T; ++s)
          cot.middleCols(static_cast<Eigen::Index>(s) * wt, wt) =
              rademacher(src.seed, static_cast<uint64_t>(x), static_cast<uint64_t>(rep),
                         static_cast<uint64_t>(s)) *
              c_target;
        accumulate(gap_vjp(net, section, target_section, cache, cot));
      }
    }
    denom = static_cast<double>(n) * T * src.r;
  }

  Mat p = pca.unwhiten();
  Mat sym = mraw.selfadjointView<Eigen::Lower>();
  JacobianGram out;
  out.section = section;
  out.target_section = target_section;
  out.sources = src;
  out.m = p.transpose() * sym * p / denom;
  out.m = 0.5 * (out.m + out.m.transpose()).eval();
  check_finite(out.m, "jacobian gram");
  return out;
}

namespace {

void require_full_record(const SequentialNetwork& net, const ActivationRecord& acts) {
  int L = net.section_count();
  check(static_cast<int>(acts.sections.size()) == L,
        "basis fitting needs every section recorded");
  for (int l = 0; l < L; ++l) {
    const Mat& s = acts.sections[static_cast<size_t>(l)];
    check(s.rows() == acts.n * acts.T && s.cols() == net.section_width(l),
          "basis fitting: section " + std::to_string(l) + " activations missing or misshapen");
  }
}

// Last section: the unrescaled pca rotation, every output direction kept.
InteractionBasis final_section_basis(int section, BasisKind kind, const PcaTransform& pca,
                                     double lambda_tol) {
  InteractionBasis b;
  b.section = section;
  b.kind = kind;
  b.pca = pca;
  Eigen::Index w = pca.width();
  b.v = Mat::Identity(w, w);
  b.lambda = pca.d;
  b.kept = w - 1;
  b.lambda_tol = lambda_tol;
  b.c = pca.u * pca.center_matrix();
  b.c_pinv = pca.uncenter_matrix() * pca.u.transpose();
  return b;
}

// Inner section: rotate the whitened coordinates into the eigenbasis of the
// Jacobian Gram and rescale nodes by the square root of their importance.
InteractionBasis spectral_basis(int section, BasisKind kind, const PcaTransform& pca,
                                const Mat& m, double lambda_tol) {
  Eigen::Index w = pca.width();
  check(m.rows() == w && m.cols() == w, "basis assembly: gram width mismatch");
  InteractionBasis b;
  b.section = section;
  b.kind = kind;
  b.pca = pca;
  b.lambda_tol = lambda_tol;
  b.v = Mat::Identity(w, w);
  b.lambda = Vec::Ones(w);
  if (w > 1) {
    SymEigen eg = eig_sym(m.block(1, 1, w - 1, w - 1));
    b.v.block(1, 1, w - 1, w - 1) = eg.vectors.transpose();
    b.lambda.tail(w - 1) = eg.values.cwiseMax(0.0);
  }
  b.kept = (b.lambda.tail(w - 1).array() > lambda_tol).count();
  Vec sl = Vec::Ones(w);
  Vec sli = Vec::Ones(w);
  for (Eigen::Index j = 1; j < w; ++j) {
    if (b.lambda(j) > lambda_tol) {
      sl(j) = std::sqrt(b.lambda(j));
      sli(j) = 1.0 / sl(j);
    } else {
      sl(j) = 0.0;
      sli(j) = 0.0;
    }
  }
  b.c = sl.asDiagonal() * b.v * pca.whiten();
  b.c_pinv = pca.unwhiten() * b.v.transpose() * sli.asDiagonal();
  return b;
}

std::vector<InteractionBasis> interaction_bases(const SequentialNetwork& net,
                                                const ActivationRecord& acts,
                                                const BasisOptions& opt, bool align_final) {
  require_full_record(net, acts);
  int L = net.section_count();
  BasisKind kind = align_final ? BasisKind::Gib : BasisKind::Lib;
  std::vector<PcaTransform> pcas;
  pcas.reserve(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l)
    pcas.push_back(compute_pca(acts.sections[static_cast<size_t>(l)], l, opt.pca_tol));
  std::vector<InteractionBasis> out(static_cast<size_t>(L));
  out.back() = final_section_basis(L - 1, kind, pcas.back(), opt.lambda_tol);
  for (int l = L - 2; l >= 0; --l) {
    int target = align_final ? L - 1 : l + 1;
    const Mat& c_target = out[static_cast<size_t>(target)].c;
    SourceConfig src = align_final ? SourceConfig{} : opt.sources;
    JacobianGram jg = compute_M(net, acts, l, target, pcas[static_cast<size_t>(l)],
                                c_target, src);
    out[static_cast<size_t>(l)] =
        spectral_basis(l, kind, pcas[static_cast<size_t>(l)], jg.m, opt.lambda_tol);
  }
  return out;
}

}  // namespace

std::vector<InteractionBasis> compute_lib(const SequentialNetwork& net,
                                          const ActivationRecord& acts,
                                          const BasisOptions& opt) {
  return interaction_bases(net, acts, opt, false);
}

std::vector<InteractionBasis> compute_gib(const SequentialNetwork& net,
                                          const ActivationRecord& acts,
                                          const BasisOptions& opt) {
  return interaction_bases(net, acts, opt, true);
}

std::vector<InteractionBasis> compute_pca_bases(const SequentialNetwork& net,
                                                const ActivationRecord& acts,
                                                const BasisOptions& opt) {
  require_full_record(net, acts);
  int L = net.section_count();
  std::vector<InteractionBasis> out;
  out.reserve(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    PcaTransform pca = compute_pca(acts.sections[static_cast<size_t>(l)], l, opt.pca_tol);
    if (l == L - 1) {
      out.push_back(final_section_basis(l, BasisKind::Pca, pca, opt.lambda_tol));
      continue;
    }
    InteractionBasis b;
    b.section = l;
    b.kind = BasisKind::Pca;
    b.pca = pca;
    Eigen::Index w = pca.width();
    b.v = Mat::Identity(w, w);
    b.lambda = pca.d;
    b.kept = pca.kept;
    b.lambda_tol = opt.lambda_tol;
    b.c = pca.whiten();
    b.c_pinv = pca.unwhiten();
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<InteractionBasis> compute_neuron_bases(const SequentialNetwork& net,
                                                   const ActivationRecord& acts) {
  require_full_record(net, acts);
  int L = net.section_count();
  std::vector<InteractionBasis> out;
  out.reserve(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const Mat& s = acts.sections[static_cast<size_t>(l)];
    Eigen::Index w = s.cols();
    InteractionBasis b;
    b.section = l;
    b.kind = BasisKind::Neuron;
    b.pca.section = l;
    b.pca.mean = Vec::Zero(w);
    b.pca.mean(0) = 1.0;
    b.pca.u = Mat::Identity(w, w);
    b.pca.d = Vec::Ones(w);
    b.pca.kept = w - 1;
    b.pca.tol = 0.0;
    b.v = Mat::Identity(w, w);
    b.lambda = s.cwiseProduct(s).colwise().mean().transpose();
    b.lambda(0) = 1.0;
    b.kept = w - 1;
    b.lambda_tol = 0.0;
    b.c = Mat::Identity(w, w);
    b.c_pinv = Mat::Identity(w, w);
    out.push_back(std::move(b));
  }
  return out;
}

std::string activation_fingerprint(const ActivationRecord& acts) {
  std::string buf;
  auto put_i64 = [&](int64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); };
  put_i64(acts.n);
  put_i64(acts.T);
  put_i64(static_cast<int64_t>(acts.sections.size()));
  for (const Mat& s : acts.sections) {
    put_i64(s.rows());
    put_i64(s.cols());
    buf.append(reinterpret_cast<const char*>(s.data()),
               sizeof(double) * static_cast<size_t>(s.size()));
  }
  return sha256_hex(buf.data(), buf.size());
}

void save_basis_bundle(const std::string& path, const BasisBundle& b) {
  BinWriter w(path);
  w.raw("IBGBASIS", 8);
  w.u32(1);
  w.u8(static_cast<uint8_t>(b.kind));
  w.f64(b.opt.pca_tol);
  w.f64(b.opt.lambda_tol);
  w.u8(b.opt.sources.exact ? 1 : 0);
  w.i64(b.opt.sources.r);
  w.i64(static_cast<int64_t>(b.opt.sources.seed));
  w.str(b.data_fingerprint);
  w.u32(static_cast<uint32_t>(b.sections.size()));
  for (const InteractionBasis& s : b.sections) {
    w.i64(s.section);
    w.u8(static_cast<uint8_t>(s.kind));
    w.i64(s.kept);
    w.f64(s.lambda_tol);
    w.mat(s.c);
    w.mat(s.c_pinv);
    w.mat(s.v);
    w.mat(Mat(s.lambda));
    w.i64(s.pca.section);
    w.f64(s.pca.tol);
    w.i64(s.pca.kept);
    w.mat(Mat(s.pca.mean));
    w.mat(s.pca.u);
    w.mat(Mat(s.pca.d));
  }
  w.close();
}

BasisBundle load_basis_bundle(const std::string& path) {
  BinReader r(path);
  r.expect_magic("IBGBASIS", "basis bundle");
  uint32_t version = r.u32();
  check(version == 1,
        "basis bundle " + path + ": unsupported version " + std::to_string(version));
  BasisBundle b;
  uint8_t kind = r.u8();
  check(kind <= 3, "basis bundle " + path + ": bad kind code");
  b.kind = static_cast<BasisKind>(kind);
  b.opt.pca_tol = r.f64();
  b.opt.lambda_tol = r.f64();
  b.opt.sources.exact = r.u8() != 0;
  b.opt.sources.r = static_cast<int>(r.i64());
  b.opt.sources.seed = static_cast<uint64_t>(r.i64());
  b.data_fingerprint = r.str();
  uint32_t ns = r.u32();
  check(ns <= 4096, "basis bundle " + path + ": implausible section count");
  b.sections.resize(ns);
  for (InteractionBasis& s : b.sections) {
    s.section = static_cast<int>(r.i64());
    uint8_t sk = r.u8();
    check(sk <= 3, "basis bundle " + path + ": bad section kind code");
    s.kind = static_cast<BasisKind>(sk);
    s.kept = r.i64();
    s.lambda_tol = r.f64();
    s.c = r.mat();
    s.c_pinv = r.mat();
    s.v = r.mat();
    Mat lambda = r.mat();
    check(lambda.cols() == 1, "basis bundle: malformed importance vector");
    s.lambda = lambda.col(0);
    s.pca.section = static_cast<int>(r.i64());
    s.pca.tol = r.f64();
    s.pca.kept = r.i64();
    Mat mean = r.mat();
    check(mean.cols() == 1, "basis bundle: malformed mean vector");
    s.pca.mean = mean.col(0);
    s.pca.u = r.mat();
    Mat d = r.mat();
    check(d.cols() == 1, "basis bundle: malformed eigenvalue vector");
    s.pca.d = d.col(0);
    Eigen::Index w = s.lambda.size();
    check(s.c.rows() == w && s.c.cols() == w && s.c_pinv.rows() == w &&
              s.c_pinv.cols() == w && s.v.rows() == w && s.v.cols() == w &&
              s.pca.mean.size() == w && s.pca.u.rows() == w && s.pca.u.cols() == w &&
              s.pca.d.size() == w && s.kept >= 0 && s.kept < w,
          "basis bundle " + path + ": inconsistent section shapes");
  }
  return b;
}

}  // namespace ibg
