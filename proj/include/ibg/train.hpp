#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibg/data.hpp"
#include "ibg/model.hpp"

namespace ibg {

struct TrainConfig {
  double lr = 1e-3;
  std::string schedule = "warmup-flat";  // warmup-flat | constant
  Eigen::Index batch_size = 10000;       // >= dataset size means full batch
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 1.0;
  double adam_eps = 1e-8;
  Eigen::Index epochs = 60000;  // hard cap
  Eigen::Index warmup_epochs = 100;
  Eigen::Index eval_every = 25;
  bool early_stop = true;
  // Stop once train and test accuracy are both 1.0 and test loss is below
  // this, at two consecutive evaluations.
  double early_stop_test_loss = 5e-3;
  bool train_on_full = false;  // fold the test split into training (smoke runs)
  // Stop when test accuracy has not improved for this many evaluations
  // (0 disables; used by the image trainer).
  Eigen::Index plateau_patience = 0;
  uint64_t seed = 0;
};

TrainConfig modadd_train_defaults();
TrainConfig cifar_train_defaults();

struct ModAddArch {
  Eigen::Index d_model = 128;
  int heads = 4;
  Eigen::Index d_head = 32;
  Eigen::Index d_mlp = 512;
};

struct CifarArch {
  std::vector<Eigen::Index> hidden = {60, 60};
  Eigen::Index classes = 10;
};

struct TrainLogRecord {
  Eigen::Index epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double test_loss = 0.0;
};

struct TrainResult {
  TransformerDesc transformer;  // modadd runs
  MlpDesc mlp;                  // cifar runs
  Eigen::Index mlp_input_dim = 0;
  std::vector<TrainLogRecord> log;
  Eigen::Index epochs_run = 0;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;
  double final_test_loss = 0.0;
};

TrainResult train_modadd(const ModAddDataset& data, const TrainConfig& cfg,
                         const ModAddArch& arch = ModAddArch{});

TrainResult train_cifar(const Cifar10Dataset& train, const Cifar10Dataset& test,
                        const TrainConfig& cfg, const CifarArch& arch = CifarArch{});

// Trainer-path loss and parameter gradients at explicit parameter values, for
// cross-checking the batched training forward/backward against the folded
// sequential network and finite differences.
double modadd_loss(const TransformerDesc& params, const ModAddDataset& data,
                   const std::vector<Eigen::Index>& idx);
TransformerDesc modadd_loss_grad(const TransformerDesc& params, const ModAddDataset& data,
                                 const std::vector<Eigen::Index>& idx);
double cifar_loss(const MlpDesc& params, const Cifar10Dataset& data,
                  const std::vector<Eigen::Index>& idx);
MlpDesc cifar_loss_grad(const MlpDesc& params, const Cifar10Dataset& data,
                        const std::vector<Eigen::Index>& idx);

// Line-delimited JSON, one record per evaluation epoch.
void write_train_log(const std::vector<TrainLogRecord>& log, const std::string& path);

}  // namespace ibg
