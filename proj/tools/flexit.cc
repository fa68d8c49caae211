// flexit command-line tool: gen-data, train, eval, sweep, report.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "flexit/experiments.h"

namespace fs = std::filesystem;
using namespace flexit;

namespace {

// Bad argument values that CLI11 cannot see (experiment names, domains).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct HyperFlags {
  std::size_t epochs = 8;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  std::size_t warmup = 200;
  std::string config;

  void Add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app->add_option("--batch-size", batch_size, "Utterances per batch")->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Adam learning rate")->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--warmup", warmup, "Linear warm-up steps")->capture_default_str();
    app->add_option("--config", config, "Override file: [NAME] sections of key = value")
        ->check(CLI::ExistingFile);
  }

  TrainingHyper Hyper() const {
    TrainingHyper h;
    h.epochs = epochs;
    h.batch_size = batch_size;
    h.adam.learning_rate = lr;
    h.warmup_steps = warmup;
    return h;
  }
};

ExperimentConfig Resolve(const std::string& name, const std::string& config_path) {
  ExperimentConfig c;
  try {
    c = Registry(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (!config_path.empty()) {
    const auto sections = ParseConfigText(ReadTextFile(config_path));
    if (auto it = sections.find("*"); it != sections.end()) ApplyOverrides(c, it->second);
    if (auto it = sections.find(name); it != sections.end()) ApplyOverrides(c, it->second);
  }
  c.Validate(ModelConfigFor(c).encoder.frame_ms);
  return c;
}

std::vector<std::string> SplitList(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

DomainId ParseDomain(const std::string& s) {
  if (s == "vcmd") return DomainId::kVCmd;
  if (s == "dictation") return DomainId::kDictation;
  throw UsageError("--domain must be vcmd or dictation, got '" + s + "'");
}

void PrintEpoch(const std::string& prefix, std::size_t epoch, double loss, double wall) {
  std::printf("%sepoch=%zu mean_loss=%.6f wall_s=%.2f\n", prefix.c_str(), epoch + 1, loss, wall);
  std::fflush(stdout);
}

std::string EvalLine(DomainId domain, const DomainEval& e) {
  std::ostringstream o;
  o << "domain=" << DomainName(domain) << " utterances=" << e.utterances
    << " wer=" << FormatNumber(e.wer.wer()) << " sub=" << e.wer.substitutions
    << " ins=" << e.wer.insertions << " del=" << e.wer.deletions
    << " del_pct=" << FormatNumber(e.wer.del()) << " ref_tokens=" << e.wer.ref_length
    << " avg_fd_ms=" << FormatNumber(e.avg_fd_ms) << " fd_tokens=" << e.fd_tokens;
  if (e.l_avg_ms) {
    o << " l_avg_ms=" << FormatNumber(*e.l_avg_ms) << " early=" << e.early_decisions
      << " forced=" << e.forced_decisions;
  }
  return o.str();
}

int GenData(const std::string& out, std::size_t train_n, std::size_t eval_n, std::uint64_t seed) {
  WriteCorpus(out, GenerateCorpus(train_n, eval_n, seed));
  std::printf("wrote %zu train and %zu eval utterances per domain to %s\n", train_n, eval_n,
              out.c_str());
  return 0;
}

int Train(const std::string& exp, const std::string& data, const std::string& out,
          std::uint64_t seed, const HyperFlags& flags) {
  const ExperimentConfig c = Resolve(exp, flags.config);
  std::map<std::string, std::string> meta = ExperimentMetadata(c);
  meta["train.seed"] = std::to_string(seed);
  meta["train.epochs"] = std::to_string(flags.epochs);
  Model model;
  if (flags.epochs == 0) {
    model = InitialModel(c, seed);
  } else {
    const std::vector<Utterance> train = ReadSplit(data, "train");
    TrainHooks hooks;
    hooks.on_epoch = [](std::size_t e, double l, double w) { PrintEpoch("", e, l, w); };
    model = TrainModel(c, train, flags.Hyper(), seed, nullptr, hooks);
  }
  SaveCheckpoint(out, model.ToCheckpoint(meta));
  return 0;
}

int Eval(const std::string& ckpt, const std::string& data, const std::string& split,
         const std::string& domain_name, bool endpointer, const EndpointerConfig& ep,
         const std::string& trace_path) {
  const DomainId domain = ParseDomain(domain_name);
  const Checkpoint cp = LoadCheckpoint(ckpt);
  const Model model = Model::FromCheckpoint(cp);
  const ExperimentConfig c = ExperimentFromMetadata(cp.metadata);
  const std::vector<Utterance> eval = ReadSplit(data, split);
  std::string trace;
  const DomainEval e = EvaluateDomain(model, c, eval, domain,
                                      endpointer ? std::optional<EndpointerConfig>(ep) : std::nullopt,
                                      trace_path.empty() ? nullptr : &trace);
  if (!trace_path.empty()) WriteTextFile(trace_path, trace);
  std::printf("exp=%s %s\n", c.name.c_str(), EvalLine(domain, e).c_str());
  return 0;
}

int Sweep(const std::string& exps, const std::string& data, const std::string& out_dir,
          std::uint64_t seed, const HyperFlags& flags, std::size_t rtf_reps) {
  std::vector<ExperimentConfig> configs;
  std::set<std::string> seen;
  for (const std::string& name : SplitList(exps)) {
    if (seen.insert(name).second) configs.push_back(Resolve(name, flags.config));
  }
  if (configs.empty()) throw UsageError("--exps is empty");
  std::sort(configs.begin(), configs.end(),
            [](const ExperimentConfig& a, const ExperimentConfig& b) { return a.name < b.name; });
  if (flags.epochs == 0) throw UsageError("sweep needs --epochs >= 1");
  const Corpus corpus = ReadCorpus(data);
  fs::create_directories(out_dir);
  EvalOptions opt;
  opt.measure_rtf = rtf_reps > 0;
  opt.rtf_repetitions = std::max<std::size_t>(rtf_reps, 1);
  std::vector<ReportRow> rows;
  for (const ExperimentConfig& c : configs) {
    TrainHooks hooks;
    hooks.on_epoch = [&](std::size_t e, double l, double w) { PrintEpoch("exp=" + c.name + " ", e, l, w); };
    TrainStats stats;
    const Model model = TrainModel(c, corpus.train, flags.Hyper(), seed, &stats, hooks);
    std::map<std::string, std::string> meta = ExperimentMetadata(c);
    meta["train.seed"] = std::to_string(seed);
    meta["train.epochs"] = std::to_string(flags.epochs);
    SaveCheckpoint(fs::path(out_dir) / (c.name + ".ckpt"), model.ToCheckpoint(meta));
    std::string trace;
    SweepResult r = EvaluateExperiment(model, c, corpus.eval, opt, &trace);
    WriteTextFile(fs::path(out_dir) / (c.name + ".trace.tsv"), trace);
    std::printf("exp=%s %s\nexp=%s %s\n", c.name.c_str(),
                EvalLine(DomainId::kDictation, r.dictation).c_str(), c.name.c_str(),
                EvalLine(DomainId::kVCmd, r.vcmd).c_str());
    rows.push_back(r.Row());
  }
  WriteTextFile(fs::path(out_dir) / "report.csv", ReportCsv(rows));
  WriteTextFile(fs::path(out_dir) / "report.svg", ReportSvg(rows));
  std::printf("wrote %zu rows to %s\n", rows.size(), (fs::path(out_dir) / "report.csv").c_str());
  return 0;
}

int Report(const std::string& in, const std::string& out_csv, const std::string& out_svg) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(in)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .csv files in " + in);
  std::vector<ReportRow> rows;
  for (const fs::path& f : files) {
    for (ReportRow& r : ParseReportCsv(ReadTextFile(f))) rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ReportRow& a, const ReportRow& b) { return a.experiment < b.experiment; });
  WriteTextFile(out_csv, ReportCsv(rows));
  WriteTextFile(out_svg, ReportSvg(rows));
  std::printf("merged %zu rows from %zu files\n", rows.size(), files.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming transducer toolkit on a synthetic two-domain corpus"};
  app.require_subcommand(1, 1);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train/eval corpus");
  std::string gen_out;
  std::size_t gen_n = 2000, gen_eval_n = 100;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--utts-per-domain", gen_n, "Training utterances per domain")->capture_default_str();
  gen->add_option("--eval-utts-per-domain", gen_eval_n, "Evaluation utterances per domain")
      ->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train one experiment and write a checkpoint");
  std::string train_exp, train_data, train_out;
  std::uint64_t train_seed = 1;
  HyperFlags train_flags;
  train->add_option("--exp", train_exp, "Experiment name")->required();
  train->add_option("--data", train_data, "Corpus directory");
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--seed", train_seed, "Run seed")->capture_default_str();
  train_flags.Add(train);

  auto* eval = app.add_subcommand("eval", "Decode one domain with a checkpoint");
  std::string eval_ckpt, eval_data, eval_domain, eval_split = "eval", eval_trace;
  bool eval_ep = false;
  EndpointerConfig ep;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Corpus directory")->required();
  eval->add_option("--domain", eval_domain, "vcmd or dictation")->required();
  eval->add_option("--split", eval_split, "Corpus split")->capture_default_str();
  eval->add_flag("--endpointer", eval_ep, "Truncate hypotheses at the endpoint decision");
  eval->add_option("--ep-threshold", ep.threshold, "Endpointer blank threshold")->capture_default_str();
  eval->add_option("--ep-frames", ep.consecutive, "Endpointer consecutive evaluations")
      ->capture_default_str();
  eval->add_option("--trace", eval_trace, "Write the emission trace here");

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate several experiments");
  std::string sweep_exps, sweep_data, sweep_out;
  std::uint64_t sweep_seed = 1;
  std::size_t sweep_rtf = 3;
  HyperFlags sweep_flags;
  sweep->add_option("--exps", sweep_exps, "Comma-separated experiment names")->required();
  sweep->add_option("--data", sweep_data, "Corpus directory")->required();
  sweep->add_option("--out-dir", sweep_out, "Output directory")->required();
  sweep->add_option("--seed", sweep_seed, "Run seed")->capture_default_str();
  sweep->add_option("--rtf-reps", sweep_rtf, "Timed decoding passes (0 skips timing)")
      ->capture_default_str();
  sweep_flags.Add(sweep);

  auto* report = app.add_subcommand("report", "Merge report CSVs and draw the scatter plots");
  std::string report_in, report_csv, report_svg;
  report->add_option("--in", report_in, "Directory of report CSVs")->required()
      ->check(CLI::ExistingDirectory);
  report->add_option("--out-csv", report_csv, "Merged CSV")->required();
  report->add_option("--out-svg", report_svg, "Scatter SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) return GenData(gen_out, gen_n, gen_eval_n, gen_seed);
    if (*train) {
      if (train_flags.epochs > 0 && train_data.empty()) throw UsageError("train needs --data");
      return Train(train_exp, train_data, train_out, train_seed, train_flags);
    }
    if (*eval) return Eval(eval_ckpt, eval_data, eval_split, eval_domain, eval_ep, ep, eval_trace);
    if (*sweep) return Sweep(sweep_exps, sweep_data, sweep_out, sweep_seed, sweep_flags, sweep_rtf);
    if (*report) return Report(report_in, report_csv, report_svg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
