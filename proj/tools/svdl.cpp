#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "svdl/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"svdl: sparse variational LSTM training, pruning and inference"};
  app.require_subcommand(1);

  std::string config;
  auto* train = app.add_subcommand("train", "train one variant from a config file");
  train->add_option("--config", config, "key = value config file")->required();

  std::string ckpt, out_dir = "pruned";
  double tau = 0.05;
  auto* prune = app.add_subcommand("prune", "prune a checkpoint at tau and write structure reports");
  prune->add_option("--ckpt", ckpt, "trained checkpoint")->required();
  prune->add_option("--tau", tau, "SNR threshold")->capture_default_str();
  prune->add_option("--out", out_dir, "output directory")->capture_default_str();

  std::string data, split = "valid";
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint deterministically");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--data", data, "evaluate this file instead of a split of the training data");
  eval->add_option("--split", split, "train, valid or test")->capture_default_str();

  std::size_t seq_len = 100, repeats = 10;
  auto* bench = app.add_subcommand("bench", "time dense against structure-exploiting inference");
  bench->add_option("--ckpt", ckpt, "pruned checkpoint")->required();
  bench->add_option("--seq-len", seq_len, "tokens per sequence")->capture_default_str();
  bench->add_option("--repeats", repeats, "timed repeats (at least 10)")->capture_default_str();

  auto* sweep = app.add_subcommand("sweep", "train and prune all four variants");
  sweep->add_option("--config", config, "key = value config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : svdl::cli::kConfig;
  }

  if (*train) return svdl::cli::cmd_train(config, std::cout, std::cerr);
  if (*prune) return svdl::cli::cmd_prune(ckpt, tau, out_dir, std::cout, std::cerr);
  if (*eval) return svdl::cli::cmd_eval(ckpt, data, split, std::cout, std::cerr);
  if (*bench) return svdl::cli::cmd_bench(ckpt, seq_len, repeats, std::cout, std::cerr);
  if (*sweep) return svdl::cli::cmd_sweep(config, std::cout, std::cerr);
  return svdl::cli::kConfig;
}
