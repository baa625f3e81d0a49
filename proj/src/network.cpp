#include <algorithm>

#include "ibg/model.hpp"
#include "layer_ops.hpp"

namespace ibg {

namespace {

Eigen::Index width_after_layer(const SequentialNetwork& net, int layer_idx) {
  if (layer_idx < 0) return net.input_width;
  return net.layers[static_cast<size_t>(layer_idx)].width_out;
}

Layer make_folded_linear(const Mat& w, const Vec& b) {
  Layer L;
  L.kind = LayerKind::Linear;
  L.width_in = w.cols() + 1;
  L.width_out = w.rows() + 1;
  L.w = Mat::Zero(L.width_out, L.width_in);
  L.w(0, 0) = 1.0;
  L.w.block(1, 0, w.rows(), 1) = b;
  L.w.block(1, 1, w.rows(), w.cols()) = w;
  return L;
}

void check_layer_finite(const Mat& y, size_t layer_idx) {
  check(y.allFinite(),
        "non-finite activations at layer " + std::to_string(layer_idx));
}

}  // namespace

Eigen::Index SequentialNetwork::section_width(int l) const {
  check(l >= 0 && l < section_count(), "section index out of range");
  return width_after_layer(*this, section_at[static_cast<size_t>(l)]);
}

void SequentialNetwork::validate() const {
  check(!layers.empty(), "network has no layers");
  check(section_at.size() >= 2, "network needs at least two sections");
  check(section_var_col.size() == section_at.size(),
        "section_var_col must parallel section_at");
  Eigen::Index w = input_width;
  if (token_input) {
    check(layers.front().kind == LayerKind::Embed, "token input requires a leading embed layer");
    w = layers.front().tok_table.cols() + 1;
  }
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& L = layers[i];
    if (L.kind == LayerKind::Embed) {
      check(i == 0, "embed must be the first layer");
      check(L.pos_table.rows() == T, "positional table must cover T tokens");
      check(L.pos_table.cols() == L.tok_table.cols(), "embed table width mismatch");
      continue;
    }
    check(L.width_in == w,
          "layer " + std::to_string(i) + ": expected input width " + std::to_string(w) +
              ", declared " + std::to_string(L.width_in));
    switch (L.kind) {
      case LayerKind::Linear:
      case LayerKind::Unembed:
        check(L.w.rows() == L.width_out && L.w.cols() == L.width_in,
              "layer " + std::to_string(i) + ": weight shape mismatch");
        break;
      case LayerKind::Activation:
        check(L.width_out == L.width_in && L.skip >= 1, "activation layer shape mismatch");
        break;
      case LayerKind::AttentionBlock: {
        check(L.heads > 0 && static_cast<int>(L.wq.size()) == L.heads &&
                  L.wk.size() == L.wq.size() && L.wv.size() == L.wq.size(),
              "attention head tables inconsistent");
        Eigen::Index dh = L.wq[0].rows();
        for (int h = 0; h < L.heads; ++h)
          check(L.wq[static_cast<size_t>(h)].cols() == L.width_in &&
                    L.wk[static_cast<size_t>(h)].rows() == dh &&
                    L.wv[static_cast<size_t>(h)].rows() == dh,
                "attention projection shape mismatch");
        check(L.wo.rows() == L.width_in && L.wo.cols() == L.heads * dh + 1,
              "attention output projection shape mismatch");
        check(L.width_out == L.width_in, "attention preserves width");
        break;
      }
      case LayerKind::LayerNormIn:
        check(L.width_out == L.width_in + 1, "variance append must widen by one");
        break;
      case LayerKind::LayerNormOut:
        check(L.width_out == L.width_in - 1, "variance consume must narrow by one");
        break;
      case LayerKind::ResidualConcat:
        check(L.w.cols() == L.width_in && L.width_out == L.width_in + L.w.rows(),
              "concat branch shape mismatch");
        break;
      case LayerKind::ResidualAdd:
        check(L.w.rows() == L.width_out && L.w.cols() == L.width_in - L.width_out + 1,
              "residual add shape mismatch");
        break;
      case LayerKind::Embed:
        break;
    }
    w = L.width_out;
  }
  int prev = -2;
  for (size_t l = 0; l < section_at.size(); ++l) {
    check(section_at[l] > prev, "sections must be strictly increasing");
    check(section_at[l] >= -1 && section_at[l] < static_cast<int>(layers.size()),
          "section position out of range");
    prev = section_at[l];
  }
  check(!token_input || section_at.front() >= 0,
        "token networks cannot place a section before the embedding");
}

SequentialNetwork fold_biases(const MlpDesc& desc, Eigen::Index input_dim) {
  check(!desc.w.empty() && desc.w.size() == desc.b.size(), "mlp description inconsistent");
  check(desc.w[0].cols() == input_dim, "mlp first layer width mismatch");
  SequentialNetwork net;
  net.T = 1;
  net.token_input = false;
  net.input_width = input_dim + 1;
  net.section_at.push_back(-1);
  for (size_t i = 0; i < desc.w.size(); ++i) {
    check(desc.w[i].rows() == desc.b[i].size(), "mlp bias length mismatch");
    if (i > 0)
      check(desc.w[i].cols() == desc.w[i - 1].rows(), "mlp layer widths do not chain");
    net.layers.push_back(make_folded_linear(desc.w[i], desc.b[i]));
    if (i + 1 < desc.w.size()) {
      Layer act;
      act.kind = LayerKind::Activation;
      act.fn = desc.act;
      act.skip = 1;
      act.width_in = desc.w[i].rows() + 1;
      act.width_out = act.width_in;
      net.layers.push_back(act);
      net.section_at.push_back(static_cast<int>(net.layers.size()) - 1);
    }
  }
  net.section_at.push_back(static_cast<int>(net.layers.size()) - 1);
  net.section_var_col.assign(net.section_at.size(), -1);
  net.validate();
  return net;
}

SequentialNetwork sequentialize(const TransformerDesc& desc) {
  check(!desc.blocks.empty(), "transformer description has no blocks");
  check(!desc.layer_norm,
        "unsupported architecture: layer-norm transformer blocks are not sequentialized");
  check(desc.tok_emb.rows() == desc.vocab_in && desc.tok_emb.cols() == desc.d_model,
        "token embedding shape mismatch");
  check(desc.pos_emb.rows() == desc.T && desc.pos_emb.cols() == desc.d_model,
        "positional embedding shape mismatch");

  SequentialNetwork net;
  net.T = desc.T;
  net.token_input = true;
  net.input_width = 0;
  const Eigen::Index dc = desc.d_model + 1;

  Layer emb;
  emb.kind = LayerKind::Embed;
  emb.tok_table = desc.tok_emb;
  emb.pos_table = desc.pos_emb;
  emb.width_in = 0;
  emb.width_out = dc;
  net.layers.push_back(emb);
  net.section_at.push_back(0);

  for (const TransformerBlockParams& b : desc.blocks) {
    Layer attn;
    attn.kind = LayerKind::AttentionBlock;
    attn.width_in = dc;
    attn.width_out = dc;
    attn.heads = desc.heads;
    attn.causal = true;
    for (int h = 0; h < desc.heads; ++h) {
      auto fold_head = [&](const Mat& w, const Vec& bias) {
        Mat f(w.rows(), dc);
        f.col(0) = bias;
        f.rightCols(desc.d_model) = w;
        return f;
      };
      attn.wq.push_back(fold_head(b.wq[static_cast<size_t>(h)], b.bq[static_cast<size_t>(h)]));
      attn.wk.push_back(fold_head(b.wk[static_cast<size_t>(h)], b.bk[static_cast<size_t>(h)]));
      attn.wv.push_back(fold_head(b.wv[static_cast<size_t>(h)], b.bv[static_cast<size_t>(h)]));
    }
    attn.wo = Mat::Zero(dc, desc.heads * desc.d_head + 1);
    attn.wo.block(1, 0, desc.d_model, 1) = b.bo;
    attn.wo.block(1, 1, desc.d_model, desc.heads * desc.d_head) = b.wo;
    net.layers.push_back(attn);
    net.section_at.push_back(static_cast<int>(net.layers.size()) - 1);

    Layer concat;
    concat.kind = LayerKind::ResidualConcat;
    concat.width_in = dc;
    concat.width_out = dc + desc.d_mlp;
    concat.w = Mat(desc.d_mlp, dc);
    concat.w.col(0) = b.b_in;
    concat.w.rightCols(desc.d_model) = b.w_in;
    net.layers.push_back(concat);

    Layer act;
    act.kind = LayerKind::Activation;
    act.fn = desc.act;
    act.skip = dc;
    act.width_in = dc + desc.d_mlp;
    act.width_out = act.width_in;
    net.layers.push_back(act);

    Layer add;
    add.kind = LayerKind::ResidualAdd;
    add.width_in = dc + desc.d_mlp;
    add.width_out = dc;
    add.w = Mat::Zero(dc, desc.d_mlp + 1);
    add.w.block(1, 0, desc.d_model, 1) = b.b_out;
    add.w.block(1, 1, desc.d_model, desc.d_mlp) = b.w_out;
    net.layers.push_back(add);
    net.section_at.push_back(static_cast<int>(net.layers.size()) - 1);
  }

  Layer unemb;
  unemb.kind = LayerKind::Unembed;
  unemb.width_in = dc;
  unemb.width_out = desc.vocab_out;
  unemb.w = Mat::Zero(desc.vocab_out, dc);
  unemb.w.rightCols(desc.d_model) = desc.w_unembed;
  net.layers.push_back(unemb);

  net.section_var_col.assign(net.section_at.size(), -1);
  net.validate();
  return net;
}

namespace {

// Forward one datapoint (token nets) through layers [0, upto]; writes section
// rows into the record.
void forward_token_datapoint(const SequentialNetwork& net, const int32_t* ids, Eigen::Index x_idx,
                             ActivationRecord* rec, const std::vector<char>* want, Mat* final_out,
                             int upto) {
  Mat x;
  auto record = [&](int layer_idx) {
    for (int l = 0; l < net.section_count(); ++l) {
      if (net.section_at[static_cast<size_t>(l)] != layer_idx) continue;
      if (want && !(*want)[static_cast<size_t>(l)]) continue;
      if (rec)
        rec->sections[static_cast<size_t>(l)].middleRows(x_idx * net.T, net.T) = x;
    }
  };
  for (int i = 0; i <= upto; ++i) {
    const Layer& L = net.layers[static_cast<size_t>(i)];
    if (L.kind == LayerKind::Embed) {
      x = embed_forward(L, ids, net.T);
    } else {
      x = layer_forward(L, x, nullptr);
    }
    check_layer_finite(x, static_cast<size_t>(i));
    record(i);
  }
  if (final_out) *final_out = x;
}

}  // namespace

ActivationRecord forward_sections(const SequentialNetwork& net, const Batch& batch,
                                  const std::vector<int>* only_sections) {
  net.validate();
  ActivationRecord rec;
  rec.n = batch.n;
  rec.T = net.T;
  rec.sections.resize(static_cast<size_t>(net.section_count()));
  std::vector<char> want(static_cast<size_t>(net.section_count()), 1);
  if (only_sections) {
    std::fill(want.begin(), want.end(), 0);
    for (int l : *only_sections) want.at(static_cast<size_t>(l)) = 1;
  }
  for (int l = 0; l < net.section_count(); ++l)
    if (want[static_cast<size_t>(l)])
      rec.sections[static_cast<size_t>(l)] =
          Mat::Zero(batch.n * net.T, net.section_width(l));

  int last_section_layer = net.section_at.back();

  if (net.token_input) {
    check(static_cast<Eigen::Index>(batch.ids.size()) == batch.n * net.T,
          "token batch size mismatch");
    for (Eigen::Index x = 0; x < batch.n; ++x)
      forward_token_datapoint(net, &batch.ids[static_cast<size_t>(x * net.T)], x, &rec, &want,
                              nullptr, last_section_layer);
    return rec;
  }

  check(batch.reals.rows() == batch.n && batch.reals.cols() == net.input_width,
        "real batch shape mismatch");
  check(net.T == 1, "real-vector networks are single-token");
  Mat x = batch.reals;
  auto record = [&](int layer_idx, const Mat& cur) {
    for (int l = 0; l < net.section_count(); ++l)
      if (net.section_at[static_cast<size_t>(l)] == layer_idx && want[static_cast<size_t>(l)])
        rec.sections[static_cast<size_t>(l)] = cur;
  };
  record(-1, x);
  for (size_t i = 0; i <= static_cast<size_t>(std::max(last_section_layer, -1)); ++i) {
    check(net.layers[i].kind != LayerKind::AttentionBlock,
          "real-vector networks cannot contain attention");
    x = layer_forward(net.layers[i], x, nullptr);
    check_layer_finite(x, i);
    record(static_cast<int>(i), x);
  }
  return rec;
}

Mat logits(const SequentialNetwork& net, const Batch& batch) {
  net.validate();
  int last = static_cast<int>(net.layers.size()) - 1;
  if (net.token_input) {
    check(static_cast<Eigen::Index>(batch.ids.size()) == batch.n * net.T,
          "token batch size mismatch");
    Mat out;
    Mat all;
    for (Eigen::Index x = 0; x < batch.n; ++x) {
      forward_token_datapoint(net, &batch.ids[static_cast<size_t>(x * net.T)], x, nullptr, nullptr,
                              &out, last);
      if (x == 0) all.resize(batch.n, out.cols());
      all.row(x) = out.row(net.T - 1);
    }
    return all;
  }
  Mat x = batch.reals;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    x = layer_forward(net.layers[i], x, nullptr);
    check_layer_finite(x, i);
  }
  return x.rightCols(x.cols() - 1);
}

Vec tail_logits(const SequentialNetwork& net, const Mat& x) {
  int last_section = net.section_count() - 1;
  check(x.rows() == net.T && x.cols() == net.section_width(last_section),
        "tail_logits: activation shape mismatch");
  Mat cur = x;
  int first = net.section_at.back() + 1;
  for (size_t i = static_cast<size_t>(first); i < net.layers.size(); ++i) {
    cur = layer_forward(net.layers[i], cur, nullptr);
    check_layer_finite(cur, i);
  }
  if (net.token_input) return cur.row(net.T - 1).transpose();
  return cur.row(0).tail(cur.cols() - 1).transpose();
}

namespace {

std::pair<int, int> gap_layer_range(const SequentialNetwork& net, int sec_from, int sec_to) {
  check(sec_from >= 0 && sec_to > sec_from && sec_to < net.section_count(),
        "invalid section range");
  return {net.section_at[static_cast<size_t>(sec_from)] + 1,
          net.section_at[static_cast<size_t>(sec_to)]};
}

}  // namespace

Mat gap_forward(const SequentialNetwork& net, int sec_from, int sec_to, const Mat& x,
                GapCache* cache) {
  auto [first, last] = gap_layer_range(net, sec_from, sec_to);
  check(x.rows() == net.T && x.cols() == net.section_width(sec_from),
        "gap_forward: activation shape mismatch");
  Mat cur = x;
  if (cache) cache->layer.resize(static_cast<size_t>(last - first + 1));
  for (int i = first; i <= last; ++i) {
    LayerCache* lc = cache ? &cache->layer[static_cast<size_t>(i - first)] : nullptr;
    cur = layer_forward(net.layers[static_cast<size_t>(i)], cur, lc);
    check_layer_finite(cur, static_cast<size_t>(i));
  }
  return cur;
}

Mat gap_vjp(const SequentialNetwork& net, int sec_from, int sec_to, const GapCache& cache,
            const Mat& cotangents) {
  auto [first, last] = gap_layer_range(net, sec_from, sec_to);
  check(cache.layer.size() == static_cast<size_t>(last - first + 1),
        "gap_vjp: cache does not match gap");
  Mat g = cotangents;
  for (int i = last; i >= first; --i)
    g = layer_vjp_block(net.layers[static_cast<size_t>(i)],
                        cache.layer[static_cast<size_t>(i - first)], g);
  return g;
}

Mat gap_jvp(const SequentialNetwork& net, int sec_from, int sec_to, const GapCache& cache,
            const Mat& tangents) {
  auto [first, last] = gap_layer_range(net, sec_from, sec_to);
  check(cache.layer.size() == static_cast<size_t>(last - first + 1),
        "gap_jvp: cache does not match gap");
  Mat d = tangents;
  for (int i = first; i <= last; ++i)
    d = layer_jvp_block(net.layers[static_cast<size_t>(i)],
                        cache.layer[static_cast<size_t>(i - first)], d);
  return d;
}

Mat jacobian(const SequentialNetwork& net, int sec_from, int sec_to, const Mat& x) {
  GapCache cache;
  Mat y = gap_forward(net, sec_from, sec_to, x, &cache);
  Eigen::Index out_flat = y.rows() * y.cols();
  Mat cot = Mat::Identity(out_flat, out_flat);
  return gap_vjp(net, sec_from, sec_to, cache, cot);
}

bool gap_token_local(const SequentialNetwork& net, int sec_from, int sec_to) {
  auto [first, last] = gap_layer_range(net, sec_from, sec_to);
  for (int i = first; i <= last; ++i)
    if (net.layers[static_cast<size_t>(i)].kind == LayerKind::AttentionBlock) return false;
  return true;
}

}  // namespace ibg
