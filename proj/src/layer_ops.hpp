#pragma once

#include "ibg/model.hpp"

namespace ibg {

// Direction blocks: N rows, columns flattened token-major (t * width + j).
Mat layer_jvp_block(const Layer& L, const LayerCache& cache, const Mat& dx);
Mat layer_vjp_block(const Layer& L, const LayerCache& cache, const Mat& gy);

Mat embed_forward(const Layer& L, const int32_t* ids, int T);

double act_eval(ActFn fn, double x);
double act_grad(ActFn fn, double x);

}  // namespace ibg
