#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "ibg/container.hpp"
#include "ibg/data.hpp"
#include "ibg/model.hpp"
#include "ibg/train.hpp"

namespace {

using nlohmann::json;

int run_train(const std::string& arch, int p, uint64_t seed, const std::string& out_dir,
              long epochs, long warmup, long eval_every, bool train_on_full,
              double early_stop_loss, const ibg::ModAddArch& modadd_arch,
              const std::vector<std::string>& train_files,
              const std::vector<std::string>& test_files) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ibg::TrainResult res;
  json summary;

  if (arch == "modadd") {
    ibg::ModAddDataset data = ibg::gen_modadd(p, seed);
    ibg::TrainConfig cfg = ibg::modadd_train_defaults();
    cfg.seed = seed;
    if (epochs >= 0) cfg.epochs = epochs;
    if (warmup >= 0) cfg.warmup_epochs = warmup;
    if (eval_every > 0) cfg.eval_every = eval_every;
    cfg.train_on_full = train_on_full;
    if (early_stop_loss > 0) cfg.early_stop_test_loss = early_stop_loss;
    res = ibg::train_modadd(data, cfg, modadd_arch);
    ibg::SequentialNetwork net = ibg::sequentialize(res.transformer);
    ibg::save_model(net, out_dir + "/model.ibgm");
    summary["arch"] = "modadd";
    summary["p"] = p;
    summary["d_model"] = modadd_arch.d_model;
    summary["heads"] = modadd_arch.heads;
    summary["d_mlp"] = modadd_arch.d_mlp;
  } else if (arch == "cifar") {
    ibg::check_cfg(!train_files.empty() && !test_files.empty(),
                   "cifar training needs --train-file and --test-file");
    ibg::Cifar10Dataset train = ibg::load_cifar10(train_files);
    ibg::Cifar10Dataset test = ibg::load_cifar10(test_files);
    ibg::TrainConfig cfg = ibg::cifar_train_defaults();
    cfg.seed = seed;
    if (epochs >= 0) cfg.epochs = epochs;
    if (eval_every > 0) cfg.eval_every = eval_every;
    res = ibg::train_cifar(train, test, cfg);
    ibg::SequentialNetwork net = ibg::fold_biases(res.mlp, res.mlp_input_dim);
    ibg::save_model(net, out_dir + "/model.ibgm");
    summary["arch"] = "cifar";
  } else {
    ibg::check_cfg(false, "unknown arch " + arch);
  }

  ibg::write_train_log(res.log, out_dir + "/train_log.jsonl");
  summary["seed"] = seed;
  summary["epochs_run"] = res.epochs_run;
  summary["final_train_acc"] = res.final_train_acc;
  summary["final_test_acc"] = res.final_test_acc;
  summary["final_test_loss"] = res.final_test_loss;
  std::ofstream out(out_dir + "/summary.json");
  out << summary.dump(2) << "\n";
  std::cout << "trained " << arch << " seed " << seed << ": train_acc "
            << res.final_train_acc << " test_acc " << res.final_test_acc << " after "
            << res.epochs_run << " epochs\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"interaction-basis graph toolkit"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a toy model and save the folded network");
  std::string arch = "modadd";
  std::string out_dir = "run";
  int p = 113;
  uint64_t seed = 0;
  long epochs = -1, warmup = -1, eval_every = -1;
  bool train_on_full = false;
  double early_stop_loss = -1.0;
  ibg::ModAddArch modadd_arch;
  std::vector<std::string> train_files, test_files;
  train->add_option("--arch", arch, "modadd | cifar");
  train->add_option("--p", p, "modulus for modadd");
  train->add_option("--seed", seed, "root seed");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--epochs", epochs, "epoch cap override");
  train->add_option("--warmup", warmup, "warmup epochs override");
  train->add_option("--eval-every", eval_every, "evaluation cadence");
  train->add_flag("--train-on-full", train_on_full, "train on the full dataset (smoke runs)");
  train->add_option("--early-stop-loss", early_stop_loss, "test-loss threshold for early stop");
  train->add_option("--d-model", modadd_arch.d_model, "residual width");
  train->add_option("--heads", modadd_arch.heads, "attention heads");
  train->add_option("--d-head", modadd_arch.d_head, "per-head width");
  train->add_option("--d-mlp", modadd_arch.d_mlp, "mlp width");
  train->add_option("--train-file", train_files, "cifar training batch file(s)");
  train->add_option("--test-file", test_files, "cifar test batch file(s)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("train"))
      return run_train(arch, p, seed, out_dir, epochs, warmup, eval_every, train_on_full,
                       early_stop_loss, modadd_arch, train_files, test_files);
  } catch (const ibg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ibg::ContractError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
