#pragma once

#include <optional>
#include <vector>

#include "ibg/common.hpp"

namespace ibg {

// Layers operate on per-datapoint activation matrices of shape T x width.
// In folded networks column 0 carries the constant feature (always 1), which
// realizes biases as ordinary weights and makes every map send zero to zero.
enum class LayerKind {
  Linear,
  Activation,
  Embed,
  Unembed,
  AttentionBlock,
  LayerNormIn,
  LayerNormOut,
  ResidualConcat,
  ResidualAdd,
};

enum class ActFn { ReLU, GELU };

struct Layer {
  LayerKind kind;
  Eigen::Index width_in = 0;
  Eigen::Index width_out = 0;

  // Linear / Unembed: y = x * w^T, w is width_out x width_in.
  // ResidualConcat: y = [x, x * w^T], w is (width_out - width_in) x width_in.
  // ResidualAdd: input [kept (width_out), branch (m)]; y = kept + [x0, branch] * w^T,
  //   w is width_out x (m + 1) with the folded bias in column 0 and row 0 zero.
  Mat w;

  // Activation: elementwise on columns >= skip, identity before (the constant
  // column and any passthrough block stay untouched).
  ActFn fn = ActFn::ReLU;
  Eigen::Index skip = 1;

  // Embed: row t of the output is [1, tok_table[id_t] + pos_table[t]].
  Mat tok_table;  // vocab x d
  Mat pos_table;  // T x d

  // AttentionBlock: y = x + [x0, concat_h(P_h V_h)] * wo^T with per-head
  // Q/K/V projections (folded biases), scaled dot-product scores, optional
  // causal mask. wo has the folded output bias in column 0 and row 0 zero.
  int heads = 0;
  std::vector<Mat> wq, wk, wv;  // per head: d_head x width_in
  Mat wo;                       // width_in x (heads * d_head + 1)
  bool causal = true;

  // LayerNormIn appends the biased variance of the nonconstant features plus
  // ln_eps as a new trailing feature. LayerNormOut consumes that feature:
  // y = (x - mean) / sqrt(v), dropping the variance column.
  double ln_eps = 0.0;
};

struct SequentialNetwork {
  std::vector<Layer> layers;
  // Section l records activations after layer section_at[l]; -1 means the
  // network input itself. Strictly increasing. Layers past the last section
  // form the readout tail (e.g. the unembedding).
  std::vector<int> section_at;
  // Column index of a variance feature present at the section, or -1.
  std::vector<Eigen::Index> section_var_col;
  int T = 1;
  bool token_input = false;
  Eigen::Index input_width = 0;  // includes the constant column for real input

  int section_count() const { return static_cast<int>(section_at.size()); }
  Eigen::Index section_width(int l) const;
  void validate() const;
};

struct Batch {
  Eigen::Index n = 0;
  Mat reals;                 // n x input_width when the net takes real input
  std::vector<int32_t> ids;  // n*T entries when the net takes token input
};

// Activations at each recorded section; row x*T + t of section l holds the
// feature vector of datapoint x at token t.
struct ActivationRecord {
  Eigen::Index n = 0;
  int T = 1;
  std::vector<Mat> sections;  // empty Mat for sections excluded from recording
  Eigen::Ref<const Mat> sec(int l) const { return sections[static_cast<size_t>(l)]; }
};

// Per-layer state kept by a gap forward so JVP/VJP sweeps can reuse it.
struct LayerCache {
  Mat x;                       // layer input, T x width_in
  std::vector<Mat> q, k, v, p; // attention, per head (T x d_head / T x T)
  Mat act_grad;                // activation derivative, T x width (columns < skip zero)
  Vec mu, var;                 // layer norm statistics per token
  Mat y;                       // layer output where the pullback needs it
};

struct GapCache {
  std::vector<LayerCache> layer;  // one per layer in the gap, in forward order
};

Mat layer_forward(const Layer& L, const Mat& x, LayerCache* cache);

// Raw architectures with explicit biases, for training; folding converts them
// into constant-column SequentialNetworks.
struct MlpDesc {
  std::vector<Mat> w;  // layer i: w[i] maps width_i -> width_{i+1} (no const)
  std::vector<Vec> b;
  ActFn act = ActFn::ReLU;
};

struct TransformerBlockParams {
  std::vector<Mat> wq, wk, wv;  // per head: d_head x d_model
  std::vector<Vec> bq, bk, bv;
  Mat wo;  // d_model x (heads * d_head)
  Vec bo;
  Mat w_in;  // d_mlp x d_model
  Vec b_in;
  Mat w_out;  // d_model x d_mlp
  Vec b_out;
};

struct TransformerDesc {
  int vocab_in = 0;
  int vocab_out = 0;
  int T = 0;
  int d_model = 0;
  int heads = 0;
  int d_head = 0;
  int d_mlp = 0;
  ActFn act = ActFn::ReLU;
  bool layer_norm = false;
  double ln_eps = 1e-5;
  Mat tok_emb;  // vocab_in x d_model
  Mat pos_emb;  // T x d_model
  std::vector<TransformerBlockParams> blocks;
  Mat w_unembed;  // vocab_out x d_model
};

// MLP folding: input gains a constant column, each Linear absorbs its bias,
// sections sit at the input, after each activation, and at the output.
SequentialNetwork fold_biases(const MlpDesc& desc, Eigen::Index input_dim);

// Transformer rewrite into a purely sequential network: attention and MLP
// blocks carry the residual stream as passthrough features, biases fold into
// the constant column, layer norm (if present) splits into a variance-append
// and a divide step. Sections: post-embed, post-attention residual, and
// post-block residual per block; the unembedding is the readout tail.
SequentialNetwork sequentialize(const TransformerDesc& desc);

ActivationRecord forward_sections(const SequentialNetwork& net, const Batch& batch,
                                  const std::vector<int>* only_sections = nullptr);

// Readout: token nets report the tail output at the last token position;
// real-vector nets report the final layer output without the constant column.
Mat logits(const SequentialNetwork& net, const Batch& batch);

// Forward from section `sec_from` activations (T x width) to section `sec_to`.
Mat gap_forward(const SequentialNetwork& net, int sec_from, int sec_to, const Mat& x,
                GapCache* cache);

// Readout from last-section activations (T x width) of one datapoint: runs
// the layers past the last section and applies the `logits` convention.
Vec tail_logits(const SequentialNetwork& net, const Mat& x);

// Pull a block of cotangents (rows, flattened t*width_out + j) back through
// the gap; returns rows x (T * width_in).
Mat gap_vjp(const SequentialNetwork& net, int sec_from, int sec_to, const GapCache& cache,
            const Mat& cotangents);

// Push a block of tangents (rows, flattened t*width_in + j) forward.
Mat gap_jvp(const SequentialNetwork& net, int sec_from, int sec_to, const GapCache& cache,
            const Mat& tangents);

// Dense Jacobian of the section map at x, (T*width_out) x (T*width_in).
Mat jacobian(const SequentialNetwork& net, int sec_from, int sec_to, const Mat& x);

// True when no layer in the gap mixes token positions, so the Jacobian is
// block-diagonal over tokens.
bool gap_token_local(const SequentialNetwork& net, int sec_from, int sec_to);

}  // namespace ibg
