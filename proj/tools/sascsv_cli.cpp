// sascsv: convert SAS7BDAT datasets to CSV, CSV datasets to SAS transport
// (XPORT V5), run relational queries over them, and batch many independent
// conversions across a worker pool.
//
// Exit codes: 0 success, 1 data/format error, 2 usage error, 3 batch run
// with failed or skipped tasks (the report is still written).

#include "sascsv/taskrunner.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

namespace {

using namespace sascsv;

std::atomic<bool> g_interrupt{false};

void on_sigint(int) { g_interrupt.store(true); }

struct Options {
  std::string data_dir = ".";
  std::string out_dir = "TrialDir";
  std::string log_dir;
  unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  std::string na_token;
  std::string quote_mode = "minimal";
  std::string delimiter = ",";
  std::size_t batch_size = 4096;
  std::size_t sort_budget_mb = 64;
  unsigned retries = 0;
  bool dry_run = false;
  bool verbose = false;

  CsvDialect dialect() const {
    CsvDialect d;
    if (delimiter.size() != 1)
      throw CLI::ValidationError("--delimiter", "must be a single byte");
    d.delimiter = delimiter[0];
    d.na_token = na_token;
    if (quote_mode == "all")
      d.quote_mode = CsvDialect::QuoteMode::all;
    else if (quote_mode != "minimal")
      throw CLI::ValidationError("--quote-mode", "must be 'minimal' or 'all'");
    d.validate();
    return d;
  }

  PipelineConfig pipeline_config() const {
    PipelineConfig cfg;
    cfg.dialect = dialect();
    cfg.batch_size = batch_size;
    cfg.sort_budget_bytes = sort_budget_mb << 20;
    return cfg;
  }
};

int map_exception(const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  if (dynamic_cast<const SpecError*>(&e)) {
    std::cerr << "hint: task specs are INPUTS|OUTPUT|PIPELINE, e.g. "
                 "\"a.csv,b.csv|j.csv|inner_join(left_key=k;right_key=k)\"\n";
    return 2;
  }
  if (dynamic_cast<const ManifestError*>(&e) || dynamic_cast<const PlanError*>(&e) ||
      dynamic_cast<const RunError*>(&e))
    return 2;
  return 1;  // format / io / range / schema / coercion
}

std::string describe(const TaskSpec& t) {
  std::string line;
  for (std::size_t i = 0; i < t.inputs.size(); ++i) {
    if (i) line += ",";
    line += t.inputs[i].string();
  }
  line += " -> " + t.output.string() + " via ";
  for (std::size_t i = 0; i < t.pipeline.size(); ++i) {
    if (i) line += ",";
    line += t.pipeline[i].name;
    if (!t.pipeline[i].args.empty()) {
      line += "(";
      bool first = true;
      for (const auto& [k, v] : t.pipeline[i].args) {
        if (!first) line += ";";
        first = false;
        line += k + "=" + v;
      }
      line += ")";
    }
  }
  return line;
}

int cmd_sas2csv(const Options& opt, const std::string& input, const std::string& output) {
  Sas7bdatReader reader(input);
  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open output " + output);
  CsvWriter writer(out, reader.schema_ptr(), opt.dialect());
  while (auto batch = reader.next_batch(opt.batch_size)) writer.write_batch(*batch);
  std::uint64_t rows = writer.finish();
  std::cerr << input << ": " << rows << " rows -> " << output << "\n";
  if (opt.verbose) {
    const auto& info = reader.info();
    std::cerr << "  dataset '" << info.dataset_name << "', encoding "
              << info.encoding_name << (info.compression.empty() ? "" : ", RLE")
              << ", " << info.page_count << " pages\n";
  }
  return 0;
}

int cmd_csv2sas(const Options& opt, const std::string& input, const std::string& output) {
  CsvReader reader(input, opt.dialect());
  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open output " + output);
  std::filesystem::path out_path(output);
  XportWriter writer(out, reader.schema(), out_path.stem().string());
  while (auto batch = reader.next_batch(opt.batch_size)) writer.write_batch(*batch);
  auto summary = writer.finish();
  std::cerr << input << ": " << summary.rows_written << " rows, "
            << summary.bytes_written << " bytes -> " << output << "\n";
  for (const auto& [from, to] : summary.renamed)
    std::cerr << "  renamed " << from << " -> " << to << "\n";
  return 0;
}

int run_batch_report(const Options& opt, std::vector<TaskSpec> tasks) {
  namespace fs = std::filesystem;
  fs::path out_dir(opt.out_dir);
  fs::create_directories(out_dir);
  fs::path log_dir = opt.log_dir.empty() ? out_dir / "logs" : fs::path(opt.log_dir);

  PipelineExecutor executor(opt.pipeline_config());
  std::signal(SIGINT, on_sigint);
  RunReport report = run_bag(tasks, static_cast<int>(opt.workers), log_dir, executor,
                             &g_interrupt);

  for (unsigned attempt = 0; attempt < opt.retries; ++attempt) {
    std::vector<TaskSpec> failed;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (report.tasks[i].outcome == TaskOutcome::failed) failed.push_back(tasks[i]);
    if (failed.empty() || g_interrupt.load()) break;
    std::cerr << "retrying " << failed.size() << " failed task(s), attempt "
              << attempt + 1 << "\n";
    RunReport again = run_bag(failed, static_cast<int>(opt.workers), log_dir, executor,
                              &g_interrupt);
    for (const TaskRecord& rec : again.tasks) {
      for (TaskRecord& orig : report.tasks)
        if (orig.task_id == rec.task_id) {
          orig.outcome = rec.outcome;
          orig.message = rec.message;
        }
    }
    report.t_serial_ms += again.t_serial_ms;
    report.t_parallel_ms += again.t_parallel_ms;
  }

  std::cout << format_report(report);
  write_report_tsv(report, out_dir / "run_report.tsv");
  return report.all_ok() ? 0 : 3;
}

int cmd_batch(const Options& opt, const std::string& manifest, const std::string& dir) {
  if (dir != "csv2sas" && dir != "sas2csv")
    throw CLI::ValidationError("--direction", "must be 'sas2csv' or 'csv2sas'");
  Direction direction = dir == "csv2sas" ? Direction::csv_to_sas : Direction::sas_to_csv;
  auto tasks = parse_manifest(manifest, opt.data_dir, opt.out_dir, direction);
  if (opt.dry_run) {
    for (const TaskSpec& t : tasks) std::cout << describe(t) << "\n";
    std::cout << tasks.size() << " task(s)\n";
    return 0;
  }
  return run_batch_report(opt, std::move(tasks));
}

int cmd_query(const Options& opt, const std::string& spec_line) {
  TaskSpec task = parse_taskspec(spec_line);
  task.submission_id = make_submission_id();
  if (opt.dry_run) {
    std::cout << describe(task) << "\n";
    return 0;
  }
  PipelineExecutor executor(opt.pipeline_config());
  std::ostringstream log;
  try {
    executor.execute(task, log);
  } catch (...) {
    if (opt.verbose) std::cerr << log.str();
    throw;
  }
  std::cerr << log.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAS7BDAT/CSV/transport converter and query tool"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  app.set_config("--config", "", "key=value config file; command line wins");

  Options opt;
  app.add_option("--data-dir", opt.data_dir, "directory holding batch input datasets")
      ->capture_default_str();
  app.add_option("--out-dir", opt.out_dir, "directory for batch outputs")
      ->capture_default_str();
  app.add_option("--log-dir", opt.log_dir, "per-task log directory (default OUT-DIR/logs)");
  app.add_option("-P,--workers", opt.workers, "worker pool size")->capture_default_str();
  app.add_option("--na-token", opt.na_token,
                 "text written for missing cells ('' = blank, 'NA' = legacy)");
  app.add_option("--quote-mode", opt.quote_mode, "CSV quoting: minimal or all")
      ->capture_default_str();
  app.add_option("--delimiter", opt.delimiter, "CSV delimiter byte")->capture_default_str();
  app.add_option("--batch-size", opt.batch_size, "rows per streamed batch")
      ->capture_default_str();
  app.add_option("--sort-budget", opt.sort_budget_mb,
                 "in-memory sort budget in MiB before spilling")
      ->capture_default_str();
  app.add_option("--retries", opt.retries, "re-run failed batch tasks this many times")
      ->capture_default_str();
  app.add_flag("--dry-run", opt.dry_run, "print the expanded task list, run nothing");
  app.add_flag("-v,--verbose", opt.verbose, "extra diagnostics on stderr");

  std::string input, output, manifest, direction = "sas2csv", spec_line;

  auto* sas2csv = app.add_subcommand("sas2csv", "convert one SAS7BDAT file to CSV");
  sas2csv->add_option("input", input, "source .sas7bdat")->required();
  sas2csv->add_option("output", output, "destination .csv")->required();

  auto* csv2sas = app.add_subcommand(
      "csv2sas", "convert one CSV file to SAS-readable transport (XPORT V5)");
  csv2sas->add_option("input", input, "source .csv")->required();
  csv2sas->add_option("output", output, "destination .xpt")->required();

  auto* batch = app.add_subcommand(
      "batch", "run every dataset in a manifest through the worker pool");
  batch->add_option("manifest", manifest, "file of dataset basenames, one per line")
      ->required();
  batch->add_option("--direction", direction, "sas2csv or csv2sas")
      ->capture_default_str();

  auto* query = app.add_subcommand(
      "query", "execute one INPUTS|OUTPUT|PIPELINE task spec serially");
  query->add_option("spec", spec_line, "task spec line")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sas2csv->parsed()) return cmd_sas2csv(opt, input, output);
    if (csv2sas->parsed()) return cmd_csv2sas(opt, input, output);
    if (batch->parsed()) return cmd_batch(opt, manifest, direction);
    return cmd_query(opt, spec_line);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    return map_exception(e);
  }
}
