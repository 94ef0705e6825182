// replaytune: two-stage replay fine-tuning workbench.
//
//   gen-data   write the two-domain synthetic corpora
//   pretrain   train the base model on domain A + domain B
//   collect    Stage 0: record candidate sets from a checkpoint
//   train      Stage 1 replay fine-tuning, or full SFT without --replay
//   verify     run the theory checks (bias identity, angle cap, step bounds)
//   report     aggregate run summaries into comparison tables
//
// Exit codes: 0 ok, 1 generic/verification failure, 2 config, 3 I/O,
// 4 parse, 5 validation, 6 fingerprint mismatch, 7 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "replaytune/config.hpp"
#include "replaytune/corpus.hpp"
#include "replaytune/harness.hpp"
#include "replaytune/metrics.hpp"
#include "replaytune/model.hpp"
#include "replaytune/replay.hpp"
#include "replaytune/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace replaytune;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir = ".";
  std::string data_dir;
  uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_config(const CommonFlags& f) {
  RunConfig cfg = f.config_path.empty() ? RunConfig{} : RunConfig::from_file(f.config_path);
  if (f.seed_set) cfg.seed = f.seed;
  if (!f.data_dir.empty()) cfg.data_dir = f.data_dir;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write: " + path);
  out << text;
  if (!out) throw IoError("short write: " + path);
}

void echo_config(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir + "/config.echo", cfg.to_json().dump(2) + "\n");
}

Corpus load_required_corpus(const std::string& path) {
  if (!fs::exists(path)) throw IoError("missing corpus file: " + path);
  return load_corpus(path);
}

struct DataSet {
  Corpus a_train, a_val, b_train, b_val;
};

DataSet load_dataset(const RunConfig& cfg) {
  DataSet d;
  d.a_train = load_required_corpus(cfg.data_dir + "/a_train.txt");
  d.a_val = load_required_corpus(cfg.data_dir + "/a_val.txt");
  d.b_train = load_required_corpus(cfg.data_dir + "/b_train.txt");
  d.b_val = load_required_corpus(cfg.data_dir + "/b_val.txt");
  return d;
}

ordered_json eval_json(const EvalResult& r) {
  return {{"mean_nats", r.mean_nats}, {"perplexity", r.perplexity}, {"positions", r.positions}};
}

int cmd_gen_data(const CommonFlags& flags) {
  RunConfig cfg = load_config(flags);
  std::string dir = flags.out_dir == "." ? cfg.data_dir : flags.out_dir;
  fs::create_directories(dir);

  auto a = generate(cfg.grammar_a(), cfg.corpus.n_sequences, cfg.corpus.seq_len);
  auto b = generate(cfg.grammar_b(), cfg.corpus.n_sequences, cfg.corpus.seq_len);
  double val = cfg.corpus.val_fraction;
  auto a_parts = split(a, {1.0 - val, val}, cfg.corpus.split_seed);
  auto b_parts = split(b, {1.0 - val, val}, cfg.corpus.split_seed + 1);

  save_corpus(dir + "/a_train.txt", a_parts[0]);
  save_corpus(dir + "/a_val.txt", a_parts[1]);
  save_corpus(dir + "/b_train.txt", b_parts[0]);
  save_corpus(dir + "/b_val.txt", b_parts[1]);
  echo_config(cfg, dir);
  std::cout << "wrote " << a_parts[0].size() << "+" << a_parts[1].size()
            << " domain-A and " << b_parts[0].size() << "+" << b_parts[1].size()
            << " domain-B sequences to " << dir << "\n";
  return 0;
}

int cmd_pretrain(const CommonFlags& flags) {
  RunConfig cfg = load_config(flags);
  DataSet data = load_dataset(cfg);
  fs::create_directories(flags.out_dir);

  Corpus combined = data.a_train;
  combined.insert(combined.end(), data.b_train.begin(), data.b_train.end());

  auto opt = cfg.optimizer.build();
  auto out = pretrain(cfg.model, cfg.init_seed, combined, *opt, cfg.pretrain_config());
  out.model.save(flags.out_dir + "/checkpoint.bin");
  write_metrics_csv(flags.out_dir + "/metrics.csv", out.metrics.rows);

  ordered_json summary;
  summary["command"] = "pretrain";
  summary["optimizer"] = cfg.optimizer.name;
  summary["seed"] = cfg.seed;
  summary["init_seed"] = cfg.init_seed;
  summary["steps"] = out.metrics.rows.size();
  summary["final_loss"] = out.metrics.final_loss;
  summary["eval_a_val"] = eval_json(evaluate(out.model, data.a_val));
  summary["eval_b_val"] = eval_json(evaluate(out.model, data.b_val));
  summary["fingerprint"] = out.model.fingerprint();
  summary["config"] = cfg.to_json();
  summary["timing"] = {{"wall_seconds", out.metrics.wall_seconds},
                       {"tokens_per_sec", out.metrics.tokens_per_sec}};
  write_text(flags.out_dir + "/summary.json", summary.dump(2) + "\n");
  echo_config(cfg, flags.out_dir);
  std::cout << "base checkpoint written to " << flags.out_dir << "/checkpoint.bin\n"
            << "A-val ppl " << summary["eval_a_val"]["perplexity"] << ", B-val ppl "
            << summary["eval_b_val"]["perplexity"] << "\n";
  return 0;
}

int cmd_collect(const CommonFlags& flags, const std::string& checkpoint,
                const std::string& out_file, const std::string& strategy_override) {
  RunConfig cfg = load_config(flags);
  if (!strategy_override.empty()) cfg.strategy.kind = strategy_from_name(strategy_override);
  if (!fs::exists(checkpoint)) throw IoError("missing checkpoint: " + checkpoint);
  TinyLM base = TinyLM::load(checkpoint);
  Corpus a_train = load_required_corpus(cfg.data_dir + "/a_train.txt");

  fs::create_directories(fs::path(out_file).parent_path().empty()
                             ? "."
                             : fs::path(out_file).parent_path().string());
  auto out = collect_stage0(base, a_train, cfg.selector, cfg.strategy, out_file, cfg.seed);

  ordered_json hist;
  for (const auto& [size, count] : out.stats.set_size_histogram)
    hist[std::to_string(size)] = count;
  ordered_json stats;
  stats["command"] = "collect";
  stats["records"] = out.written;
  stats["strategy"] = strategy_name(cfg.strategy.kind);
  stats["tau"] = cfg.selector.tau;
  stats["k_max"] = cfg.selector.k_max;
  stats["median_set_size"] = out.stats.median_set_size;
  stats["mean_set_size"] = out.stats.mean_set_size;
  stats["set_size_histogram"] = hist;
  if (out.stats.mean_rho) stats["mean_rho"] = *out.stats.mean_rho;
  if (out.stats.gold_appended_rate) stats["gold_appended_rate"] = *out.stats.gold_appended_rate;
  auto f = flop_accounting(out.stats, base.config().vocab_size);
  stats["r_ratio"] = f.r;
  stats["softmax_flop_saving"] = f.saving;
  stats["model_fingerprint"] = base.fingerprint();
  stats["config"] = cfg.to_json();
  write_text(out_file + ".stats.json", stats.dump(2) + "\n");
  std::cout << "wrote " << out.written << " records to " << out_file
            << " (median |S| " << out.stats.median_set_size << ", r " << f.r << ")\n";
  return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& checkpoint,
              const std::string& replay_file, const std::string& optimizer_override,
              bool override_fingerprint) {
  RunConfig cfg = load_config(flags);
  if (!optimizer_override.empty()) cfg.optimizer.name = optimizer_override;
  if (!fs::exists(checkpoint)) throw IoError("missing checkpoint: " + checkpoint);
  TinyLM base = TinyLM::load(checkpoint);
  DataSet data = load_dataset(cfg);
  fs::create_directories(flags.out_dir);

  EvalResult base_a = evaluate(base, data.a_val);
  EvalResult base_b = evaluate(base, data.b_val);

  auto opt = cfg.optimizer.build();
  bool replay_mode = !replay_file.empty();
  TrainOutput out = [&] {
    if (replay_mode) {
      if (!fs::exists(replay_file)) throw IoError("missing replay file: " + replay_file);
      return train_stage1(base, data.a_train, replay_file, *opt, cfg.train_config(),
                          override_fingerprint);
    }
    return train_full_sft(base, data.a_train, *opt, cfg.train_config());
  }();

  EvalResult tuned_a = evaluate(out.model, data.a_val);
  EvalResult tuned_b = evaluate(out.model, data.b_val);
  out.metrics.delta_ppl_base = tuned_b.mean_nats - base_b.mean_nats;

  out.model.save(flags.out_dir + "/checkpoint.bin");
  write_metrics_csv(flags.out_dir + "/metrics.csv", out.metrics.rows);

  ordered_json summary;
  summary["command"] = "train";
  summary["mode"] = replay_mode ? "replay" : "full_sft";
  summary["optimizer"] = cfg.optimizer.name;
  summary["seed"] = cfg.seed;
  summary["steps"] = out.metrics.rows.size();
  summary["epochs"] = cfg.epochs;
  summary["final_loss"] = out.metrics.final_loss;
  summary["loss_variance"] = out.metrics.stability.loss_variance;
  summary["grad_norm_cv"] = out.metrics.stability.grad_norm_cv;
  summary["spike_count"] = out.metrics.stability.spike_count;
  summary["r_ratio"] = out.metrics.r_ratio;
  summary["softmax_units_total"] = out.metrics.softmax_units_total;
  summary["softmax_flop_saving"] = 1.0 - out.metrics.r_ratio;
  summary["rel_l2_distance"] = out.metrics.rel_l2_distance;
  summary["max_abs_update"] = out.metrics.max_abs_update;
  summary["step_bound"] = cfg.optimizer.name == "moclip"
                              ? ordered_json(cfg.optimizer.alpha * std::numbers::pi / 2.0)
                              : ordered_json(nullptr);
  summary["clipped_steps"] = out.metrics.clipped_steps;
  summary["eval_a_val"] = eval_json(tuned_a);
  summary["eval_b_val"] = eval_json(tuned_b);
  summary["base_a_val"] = eval_json(base_a);
  summary["base_b_val"] = eval_json(base_b);
  summary["delta_ppl_b_nats"] = out.metrics.delta_ppl_base;
  summary["spike_rule"] = "loss > trailing-100-mean + 4*sigma, 10-step refractory";
  summary["fingerprint"] = out.model.fingerprint();
  summary["base_fingerprint"] = base.fingerprint();
  summary["config"] = cfg.to_json();
  summary["timing"] = {{"wall_seconds", out.metrics.wall_seconds},
                       {"tokens_per_sec", out.metrics.tokens_per_sec}};
  write_text(flags.out_dir + "/summary.json", summary.dump(2) + "\n");
  echo_config(cfg, flags.out_dir);
  std::cout << (replay_mode ? "replay" : "full-SFT") << " run with " << cfg.optimizer.name
            << ": dPPL(B) " << out.metrics.delta_ppl_base << " nats, rel-L2 "
            << out.metrics.rel_l2_distance << ", spikes "
            << out.metrics.stability.spike_count << "\n";
  return 0;
}

int cmd_verify(uint64_t seed, int trials) {
  TheoryReport report = verify_theory(seed, trials);
  std::cout << report.to_string();
  std::cout << (report.all_pass() ? "all checks passed\n" : "CHECKS FAILED\n");
  return report.all_pass() ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  struct Row {
    std::string name, optimizer, mode;
    double delta_ppl = 0, rel_l2 = 0, a_nats = 0, loss_var = 0, cv = 0, r = 1;
    int spikes = 0;
  };
  std::vector<Row> rows;
  for (const auto& dir : run_dirs) {
    std::string path = dir + "/summary.json";
    if (!fs::exists(path)) throw IoError("missing run summary: " + path);
    std::ifstream in(path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what());
    }
    if (j.value("command", "") != "train") continue;  // only training runs compared
    Row r;
    r.name = fs::path(dir).filename().string();
    r.optimizer = j.value("optimizer", "?");
    r.mode = j.value("mode", "?");
    r.delta_ppl = j.value("delta_ppl_b_nats", 0.0);
    r.rel_l2 = j.value("rel_l2_distance", 0.0);
    r.a_nats = j["eval_a_val"].value("mean_nats", 0.0);
    r.loss_var = j.value("loss_variance", 0.0);
    r.cv = j.value("grad_norm_cv", 0.0);
    r.spikes = j.value("spike_count", 0);
    r.r = j.value("r_ratio", 1.0);
    rows.push_back(r);
  }
  if (rows.empty()) throw ValidationError("no training-run summaries among the given dirs");

  std::ostringstream md, csv;
  md << "| run | optimizer | mode | dPPL(B) nats | rel-L2 | A-val nats | loss var | "
        "grad CV | spikes | r |\n";
  md << "|---|---|---|---|---|---|---|---|---|---|\n";
  csv << "run,optimizer,mode,delta_ppl_b_nats,rel_l2_distance,a_val_nats,loss_variance,"
         "grad_norm_cv,spike_count,r_ratio\n";
  for (const auto& r : rows) {
    md << "| " << r.name << " | " << r.optimizer << " | " << r.mode << " | "
       << format_double(r.delta_ppl) << " | " << format_double(r.rel_l2) << " | "
       << format_double(r.a_nats) << " | " << format_double(r.loss_var) << " | "
       << format_double(r.cv) << " | " << r.spikes << " | " << format_double(r.r)
       << " |\n";
    csv << r.name << ',' << r.optimizer << ',' << r.mode << ','
        << format_double(r.delta_ppl) << ',' << format_double(r.rel_l2) << ','
        << format_double(r.a_nats) << ',' << format_double(r.loss_var) << ','
        << format_double(r.cv) << ',' << r.spikes << ',' << format_double(r.r) << '\n';
  }
  fs::create_directories(out_dir);
  write_text(out_dir + "/comparison.md", md.str());
  write_text(out_dir + "/comparison.csv", csv.str());
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"replaytune: restricted-vocabulary replay fine-tuning workbench"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string checkpoint, replay_file, out_file, optimizer_override, strategy_override;
  bool override_fingerprint = false;
  uint64_t verify_seed = 12345;
  int verify_trials = 10000;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", flags.config_path, "JSON config file");
    cmd->add_option("--seed", flags.seed, "seed override")
        ->each([&](const std::string&) { flags.seed_set = true; });
    cmd->add_option("--data", flags.data_dir, "corpus directory override");
    if (with_out) cmd->add_option("--out", flags.out_dir, "output directory");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the two-domain corpora");
  add_common(gen);

  auto* pre = app.add_subcommand("pretrain", "train the base model on A union B");
  add_common(pre);

  auto* col = app.add_subcommand("collect", "Stage 0: record candidate sets");
  add_common(col, false);
  col->add_option("--checkpoint", checkpoint, "base checkpoint")->required();
  col->add_option("--out-file", out_file, "replay JSONL path")->required();
  col->add_option("--strategy", strategy_override,
                  "position strategy: all|random|last|bucket");

  auto* tr = app.add_subcommand("train", "Stage 1 replay (with --replay) or full SFT");
  add_common(tr);
  tr->add_option("--checkpoint", checkpoint, "starting checkpoint")->required();
  tr->add_option("--replay", replay_file, "replay JSONL from collect");
  tr->add_option("--optimizer", optimizer_override, "moclip|adamw|tam|mofo");
  tr->add_flag("--override-fingerprint", override_fingerprint,
               "proceed despite a replay/model fingerprint mismatch (unsafe)");

  auto* ver = app.add_subcommand("verify", "run the theory-check suite");
  ver->add_option("--seed", verify_seed, "seed for the randomized checks");
  ver->add_option("--trials", verify_trials, "trials per check");

  auto* rep = app.add_subcommand("report", "aggregate run summaries");
  rep->add_option("dirs", run_dirs, "run directories with summary.json")->required();
  rep->add_option("--out", flags.out_dir, "output directory for tables");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(flags);
    if (pre->parsed()) return cmd_pretrain(flags);
    if (col->parsed()) return cmd_collect(flags, checkpoint, out_file, strategy_override);
    if (tr->parsed())
      return cmd_train(flags, checkpoint, replay_file, optimizer_override,
                       override_fingerprint);
    if (ver->parsed()) return cmd_verify(verify_seed, verify_trials);
    if (rep->parsed()) return cmd_report(run_dirs, flags.out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 4;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 5;
  } catch (const FingerprintMismatch& e) {
    std::cerr << "fingerprint mismatch: " << e.what() << "\n";
    return 6;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 7;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
