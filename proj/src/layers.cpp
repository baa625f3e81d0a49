#include <cmath>

#include "ibg/util.hpp"
#include "layer_ops.hpp"

namespace ibg {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void softmax_row_inplace(Mat& m, Eigen::Index t, Eigen::Index valid) {
  double mx = m.row(t).head(valid).maxCoeff();
  double z = 0.0;
  for (Eigen::Index u = 0; u < valid; ++u) {
    m(t, u) = std::exp(m(t, u) - mx);
    z += m(t, u);
  }
  for (Eigen::Index u = 0; u < valid; ++u) m(t, u) /= z;
  for (Eigen::Index u = valid; u < m.cols(); ++u) m(t, u) = 0.0;
}

struct AttnState {
  std::vector<Mat> q, k, v, p;
  Mat zc;
};

AttnState attention_forward_state(const Layer& L, const Mat& x) {
  const Eigen::Index T = x.rows();
  const Eigen::Index dh = L.wq[0].rows();
  AttnState st;
  st.zc.resize(T, L.heads * dh);
  for (int h = 0; h < L.heads; ++h) {
    Mat q = x * L.wq[static_cast<size_t>(h)].transpose();
    Mat k = x * L.wk[static_cast<size_t>(h)].transpose();
    Mat v = x * L.wv[static_cast<size_t>(h)].transpose();
    Mat s = q * k.transpose() / std::sqrt(static_cast<double>(dh));
    Mat p = Mat::Zero(T, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      Eigen::Index valid = L.causal ? t + 1 : T;
      p.row(t) = s.row(t);
      softmax_row_inplace(p, t, valid);
    }
    st.zc.middleCols(h * dh, dh) = p * v;
    st.q.push_back(std::move(q));
    st.k.push_back(std::move(k));
    st.v.push_back(std::move(v));
    st.p.push_back(std::move(p));
  }
  return st;
}

}  // namespace

double act_eval(ActFn fn, double x) {
  switch (fn) {
    case ActFn::ReLU:
      return x > 0.0 ? x : 0.0;
    case ActFn::GELU:
      return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return 0.0;
}

double act_grad(ActFn fn, double x) {
  switch (fn) {
    case ActFn::ReLU:
      return x > 0.0 ? 1.0 : 0.0;
    case ActFn::GELU: {
      double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    }
  }
  return 0.0;
}

Mat embed_forward(const Layer& L, const int32_t* ids, int T) {
  const Eigen::Index d = L.tok_table.cols();
  Mat x(T, d + 1);
  for (int t = 0; t < T; ++t) {
    int32_t id = ids[t];
    check(id >= 0 && id < L.tok_table.rows(),
          "embed: token id " + std::to_string(id) + " outside vocabulary");
    x(t, 0) = 1.0;
    x.block(t, 1, 1, d) = L.tok_table.row(id) + L.pos_table.row(t);
  }
  return x;
}

Mat layer_forward(const Layer& L, const Mat& x, LayerCache* cache) {
  if (cache) cache->x = x;
  const Eigen::Index T = x.rows();
  switch (L.kind) {
    case LayerKind::Linear:
    case LayerKind::Unembed:
      return x * L.w.transpose();

    case LayerKind::Activation: {
      Mat y = x;
      Mat grad;
      if (cache) grad = Mat::Ones(T, x.cols());
      for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index j = L.skip; j < x.cols(); ++j) {
          if (cache) grad(t, j) = act_grad(L.fn, x(t, j));
          y(t, j) = act_eval(L.fn, x(t, j));
        }
      }
      if (cache) cache->act_grad = std::move(grad);
      return y;
    }

    case LayerKind::AttentionBlock: {
      AttnState st = attention_forward_state(L, x);
      Mat aug(T, st.zc.cols() + 1);
      aug.col(0) = x.col(0);
      aug.rightCols(st.zc.cols()) = st.zc;
      Mat y = x + aug * L.wo.transpose();
      if (cache) {
        cache->q = std::move(st.q);
        cache->k = std::move(st.k);
        cache->v = std::move(st.v);
        cache->p = std::move(st.p);
      }
      return y;
    }

    case LayerKind::LayerNormIn: {
      const Eigen::Index m = x.cols() - 1;
      Mat y(T, x.cols() + 1);
      y.leftCols(x.cols()) = x;
      Vec mu(T), var(T);
      for (Eigen::Index t = 0; t < T; ++t) {
        double mean = x.row(t).tail(m).mean();
        double v2 = (x.row(t).tail(m).array() - mean).square().sum() / static_cast<double>(m);
        mu(t) = mean;
        var(t) = v2 + L.ln_eps;
        y(t, x.cols()) = var(t);
      }
      if (cache) {
        cache->mu = std::move(mu);
        cache->var = std::move(var);
      }
      return y;
    }

    case LayerKind::LayerNormOut: {
      const Eigen::Index m = x.cols() - 2;  // nonconstant features ahead of the variance column
      Mat y(T, x.cols() - 1);
      Vec mu(T), var(T);
      for (Eigen::Index t = 0; t < T; ++t) {
        double v = x(t, x.cols() - 1);
        double mean = x.row(t).segment(1, m).mean();
        mu(t) = mean;
        var(t) = v;
        y(t, 0) = x(t, 0);
        if (v > 0.0) {
          double inv = 1.0 / std::sqrt(v);
          for (Eigen::Index j = 0; j < m; ++j) y(t, j + 1) = (x(t, j + 1) - mean) * inv;
        } else {
          y.row(t).tail(m).setZero();
        }
      }
      if (cache) {
        cache->mu = std::move(mu);
        cache->var = std::move(var);
        cache->y = y;
      }
      return y;
    }

    case LayerKind::ResidualConcat: {
      Mat y(T, L.width_out);
      y.leftCols(x.cols()) = x;
      y.rightCols(L.w.rows()) = x * L.w.transpose();
      return y;
    }

    case LayerKind::ResidualAdd: {
      const Eigen::Index dout = L.width_out;
      const Eigen::Index m = x.cols() - dout;
      Mat aug(T, m + 1);
      aug.col(0) = x.col(0);
      aug.rightCols(m) = x.rightCols(m);
      return x.leftCols(dout) + aug * L.w.transpose();
    }

    case LayerKind::Embed:
      throw ContractError("embed layers are applied at the network input, not inside gaps");
  }
  throw ContractError("layer_forward: unknown layer kind");
}

Mat layer_jvp_block(const Layer& L, const LayerCache& cache, const Mat& dx) {
  const Eigen::Index T = cache.x.rows();
  const Eigen::Index win = L.width_in;
  const Eigen::Index wout = L.width_out;
  const Eigen::Index N = dx.rows();
  check(dx.cols() == T * win, "layer_jvp_block: tangent width mismatch");

  switch (L.kind) {
    case LayerKind::Linear:
    case LayerKind::Unembed: {
      Mat dy(N, T * wout);
      for (Eigen::Index t = 0; t < T; ++t)
        dy.middleCols(t * wout, wout).noalias() = dx.middleCols(t * win, win) * L.w.transpose();
      return dy;
    }

    case LayerKind::Activation: {
      Mat dy = dx;
      for (Eigen::Index t = 0; t < T; ++t)
        dy.middleCols(t * win, win).array().rowwise() *= cache.act_grad.row(t).array();
      return dy;
    }

    case LayerKind::AttentionBlock: {
      const Eigen::Index dh = L.wq[0].rows();
      const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
      Mat dy = dx;
      Mat dzc(N, T * L.heads * dh);
      dzc.setZero();
      for (int h = 0; h < L.heads; ++h) {
        const Mat& q = cache.q[static_cast<size_t>(h)];
        const Mat& k = cache.k[static_cast<size_t>(h)];
        const Mat& v = cache.v[static_cast<size_t>(h)];
        const Mat& p = cache.p[static_cast<size_t>(h)];
        std::vector<Mat> dq(static_cast<size_t>(T)), dk(static_cast<size_t>(T)), dv(static_cast<size_t>(T));
        for (Eigen::Index t = 0; t < T; ++t) {
          auto slab = dx.middleCols(t * win, win);
          dq[static_cast<size_t>(t)].noalias() = slab * L.wq[static_cast<size_t>(h)].transpose();
          dk[static_cast<size_t>(t)].noalias() = slab * L.wk[static_cast<size_t>(h)].transpose();
          dv[static_cast<size_t>(t)].noalias() = slab * L.wv[static_cast<size_t>(h)].transpose();
        }
        for (Eigen::Index t = 0; t < T; ++t) {
          Eigen::Index valid = L.causal ? t + 1 : T;
          Mat ds(N, valid);
          for (Eigen::Index u = 0; u < valid; ++u) {
            ds.col(u).noalias() = dq[static_cast<size_t>(t)] * k.row(u).transpose();
            ds.col(u).noalias() += dk[static_cast<size_t>(u)] * q.row(t).transpose();
            ds.col(u) *= scale;
          }
          Vec prow = p.row(t).head(valid).transpose();
          Vec dot = ds * prow;  // N
          Mat dz = Mat::Zero(N, dh);
          for (Eigen::Index u = 0; u < valid; ++u) {
            Vec dp_u = prow(u) * (ds.col(u) - dot);
            dz.noalias() += dp_u * v.row(u);
            dz.noalias() += prow(u) * dv[static_cast<size_t>(u)];
          }
          dzc.middleCols(t * L.heads * dh + h * dh, dh) = dz;
        }
      }
      const Eigen::Index hc = L.heads * dh;
      for (Eigen::Index t = 0; t < T; ++t) {
        dy.middleCols(t * win, win).noalias() +=
            dx.col(t * win) * L.wo.col(0).transpose();
        dy.middleCols(t * win, win).noalias() +=
            dzc.middleCols(t * hc, hc) * L.wo.rightCols(hc).transpose();
      }
      return dy;
    }

    case LayerKind::LayerNormIn: {
      const Eigen::Index m = win - 1;
      Mat dy(N, T * wout);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto slab = dx.middleCols(t * win, win);
        dy.middleCols(t * wout, win) = slab;
        Vec cvec = Vec::Zero(win);
        for (Eigen::Index j = 1; j < win; ++j)
          cvec(j) = 2.0 * (cache.x(t, j) - cache.mu(t)) / static_cast<double>(m);
        dy.col(t * wout + win).noalias() = slab * cvec;
      }
      return dy;
    }

    case LayerKind::LayerNormOut: {
      const Eigen::Index m = win - 2;
      Mat dy = Mat::Zero(N, T * wout);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto slab = dx.middleCols(t * win, win);
        dy.col(t * wout) = slab.col(0);
        double v = cache.var(t);
        if (v <= 0.0) continue;
        double inv = 1.0 / std::sqrt(v);
        Vec dmu = slab.middleCols(1, m).rowwise().mean();
        for (Eigen::Index j = 0; j < m; ++j) {
          double centered = cache.x(t, j + 1) - cache.mu(t);
          dy.col(t * wout + j + 1) =
              (slab.col(j + 1) - dmu) * inv -
              slab.col(win - 1) * (0.5 * centered * inv / v);
        }
      }
      return dy;
    }

    case LayerKind::ResidualConcat: {
      const Eigen::Index m = L.w.rows();
      Mat dy(N, T * wout);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto slab = dx.middleCols(t * win, win);
        dy.middleCols(t * wout, win) = slab;
        dy.middleCols(t * wout + win, m).noalias() = slab * L.w.transpose();
      }
      return dy;
    }

    case LayerKind::ResidualAdd: {
      const Eigen::Index m = win - wout;
      Mat dy(N, T * wout);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto slab = dx.middleCols(t * win, win);
        dy.middleCols(t * wout, wout) = slab.leftCols(wout);
        dy.middleCols(t * wout, wout).noalias() += slab.col(0) * L.w.col(0).transpose();
        dy.middleCols(t * wout, wout).noalias() += slab.rightCols(m) * L.w.rightCols(m).transpose();
      }
      return dy;
    }

    case LayerKind::Embed:
      throw ContractError("embed layers have no tangent map");
  }
  throw ContractError("layer_jvp_block: unknown layer kind");
}

Mat layer_vjp_block(const Layer& L, const LayerCache& cache, const Mat& gy) {
  const Eigen::Index T = cache.x.rows();
  const Eigen::Index win = L.width_in;
  const Eigen::Index wout = L.width_out;
  const Eigen::Index N = gy.rows();
  check(gy.cols() == T * wout, "layer_vjp_block: cotangent width mismatch");

  switch (L.kind) {
    case LayerKind::Linear:
    case LayerKind::Unembed: {
      Mat gx(N, T * win);
      for (Eigen::Index t = 0; t < T; ++t)
        gx.middleCols(t * win, win).noalias() = gy.middleCols(t * wout, wout) * L.w;
      return gx;
    }

    case LayerKind::Activation: {
      Mat gx = gy;
      for (Eigen::Index t = 0; t < T; ++t)
        gx.middleCols(t * win, win).array().rowwise() *= cache.act_grad.row(t).array();
      return gx;
    }

    case LayerKind::AttentionBlock: {
      const Eigen::Index dh = L.wq[0].rows();
      const Eigen::Index hc = L.heads * dh;
      const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
      Mat gx = gy;
      Mat gzc(N, T * hc);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto gslab = gy.middleCols(t * wout, wout);
        gx.col(t * win).noalias() += gslab * L.wo.col(0);
        gzc.middleCols(t * hc, hc).noalias() = gslab * L.wo.rightCols(hc);
      }
      for (int h = 0; h < L.heads; ++h) {
        const Mat& q = cache.q[static_cast<size_t>(h)];
        const Mat& k = cache.k[static_cast<size_t>(h)];
        const Mat& v = cache.v[static_cast<size_t>(h)];
        const Mat& p = cache.p[static_cast<size_t>(h)];
        std::vector<Mat> gq(static_cast<size_t>(T), Mat::Zero(N, dh));
        std::vector<Mat> gk(static_cast<size_t>(T), Mat::Zero(N, dh));
        std::vector<Mat> gv(static_cast<size_t>(T), Mat::Zero(N, dh));
        for (Eigen::Index t = 0; t < T; ++t) {
          Eigen::Index valid = L.causal ? t + 1 : T;
          auto gz = gzc.middleCols(t * hc + h * dh, dh);
          Mat gp(N, valid);
          for (Eigen::Index u = 0; u < valid; ++u) gp.col(u).noalias() = gz * v.row(u).transpose();
          Vec prow = p.row(t).head(valid).transpose();
          Vec dot = gp * prow;
          for (Eigen::Index u = 0; u < valid; ++u) {
            Vec gs_u = prow(u) * (gp.col(u) - dot);
            gq[static_cast<size_t>(t)].noalias() += (gs_u * k.row(u)) * scale;
            gk[static_cast<size_t>(u)].noalias() += (gs_u * q.row(t)) * scale;
            gv[static_cast<size_t>(u)].noalias() += prow(u) * gz;
          }
        }
        for (Eigen::Index t = 0; t < T; ++t) {
          auto gxs = gx.middleCols(t * win, win);
          gxs.noalias() += gq[static_cast<size_t>(t)] * L.wq[static_cast<size_t>(h)];
          gxs.noalias() += gk[static_cast<size_t>(t)] * L.wk[static_cast<size_t>(h)];
          gxs.noalias() += gv[static_cast<size_t>(t)] * L.wv[static_cast<size_t>(h)];
        }
      }
      return gx;
    }

    case LayerKind::LayerNormIn: {
      const Eigen::Index m = win - 1;
      Mat gx(N, T * win);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto gslab = gy.middleCols(t * wout, wout);
        gx.middleCols(t * win, win) = gslab.leftCols(win);
        for (Eigen::Index j = 1; j < win; ++j) {
          double c = 2.0 * (cache.x(t, j) - cache.mu(t)) / static_cast<double>(m);
          gx.col(t * win + j).noalias() += gslab.col(win) * c;
        }
      }
      return gx;
    }

    case LayerKind::LayerNormOut: {
      const Eigen::Index m = win - 2;
      Mat gx = Mat::Zero(N, T * win);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto gslab = gy.middleCols(t * wout, wout);
        gx.col(t * win) = gslab.col(0);
        double v = cache.var(t);
        if (v <= 0.0) continue;
        double inv = 1.0 / std::sqrt(v);
        Vec gmean = gslab.middleCols(1, m).rowwise().mean();
        Vec gvar = Vec::Zero(N);
        for (Eigen::Index j = 0; j < m; ++j) {
          gx.col(t * win + j + 1) = (gslab.col(j + 1) - gmean) * inv;
          gvar.noalias() -= gslab.col(j + 1) * (0.5 * cache.y(t, j + 1) / v);
        }
        gx.col(t * win + win - 1) = gvar;
      }
      return gx;
    }

    case LayerKind::ResidualConcat: {
      const Eigen::Index m = L.w.rows();
      Mat gx(N, T * win);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto gslab = gy.middleCols(t * wout, wout);
        gx.middleCols(t * win, win) = gslab.leftCols(win);
        gx.middleCols(t * win, win).noalias() += gslab.rightCols(m) * L.w;
      }
      return gx;
    }

    case LayerKind::ResidualAdd: {
      const Eigen::Index m = win - wout;
      Mat gx(N, T * win);
      for (Eigen::Index t = 0; t < T; ++t) {
        auto gslab = gy.middleCols(t * wout, wout);
        gx.middleCols(t * win, wout) = gslab;
        gx.col(t * win).noalias() += gslab * L.w.col(0);
        gx.middleCols(t * win + wout, m).noalias() = gslab * L.w.rightCols(m);
      }
      return gx;
    }

    case LayerKind::Embed:
      throw ContractError("embed layers have no pullback");
  }
  throw ContractError("layer_vjp_block: unknown layer kind");
}

}  // namespace ibg
