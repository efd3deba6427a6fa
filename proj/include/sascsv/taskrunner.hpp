#pragma once

// Bag-of-tasks execution: a manifest expands into independent TaskSpecs, a
// fixed pool of workers drains one shared FIFO queue with no barriers, each
// task writes its own log file, and the run report carries the speedup and
// efficiency numbers. Workers never communicate; all inter-task traffic is
// through the filesystem.

#include "sascsv/core.hpp"
#include "sascsv/csv.hpp"
#include "sascsv/relops.hpp"
#include "sascsv/sas7bdat.hpp"
#include "sascsv/xport.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>
#include <vector>

namespace sascsv {

// ---------------------------------------------------------------------------
// Task specs

struct PipelineOp {
  std::string name;
  std::map<std::string, std::string> args;

  std::string arg(const std::string& key) const {
    auto it = args.find(key);
    if (it == args.end())
      throw SpecError("op '" + name + "' needs argument '" + key + "'");
    return it->second;
  }
  std::string arg_or(const std::string& key, std::string fallback) const {
    auto it = args.find(key);
    return it == args.end() ? fallback : it->second;
  }
};

struct TaskSpec {
  std::size_t task_id = 0;
  std::string basename;
  std::vector<std::filesystem::path> inputs;
  std::filesystem::path output;
  std::vector<PipelineOp> pipeline;
  std::string submission_id;
};

inline const std::vector<std::string>& known_ops() {
  static const std::vector<std::string> ops = {
      "to_csv", "to_sas", "filter", "except", "unique", "select", "inner_join"};
  return ops;
}

namespace taskrunner_detail {

inline std::string trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return std::string(s);
}

// Splits on a separator, honoring "\|" escapes and (optionally) parens.
inline std::vector<std::string> split_escaped(std::string_view s, char sep,
                                              bool paren_aware) {
  std::vector<std::string> parts;
  std::string current;
  int depth = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == '\\' && i + 1 < s.size() && s[i + 1] == '|') {
      current.push_back('|');
      ++i;
      continue;
    }
    if (paren_aware) {
      if (c == '(') ++depth;
      if (c == ')') depth = std::max(0, depth - 1);
    }
    if (c == sep && depth == 0) {
      parts.push_back(current);
      current.clear();
      continue;
    }
    current.push_back(c);
  }
  parts.push_back(current);
  return parts;
}

inline PipelineOp parse_op(std::string_view text) {
  std::string t = trim(text);
  if (t.empty()) throw SpecError("empty pipeline op");
  PipelineOp op;
  std::size_t paren = t.find('(');
  if (paren == std::string::npos) {
    op.name = t;
  } else {
    if (t.back() != ')')
      throw SpecError("op '" + t + "' is missing its closing ')'");
    op.name = trim(std::string_view(t).substr(0, paren));
    std::string args = t.substr(paren + 1, t.size() - paren - 2);
    if (!trim(args).empty()) {
      for (const std::string& pair : split_escaped(args, ';', false)) {
        std::size_t eq = pair.find('=');
        if (eq == std::string::npos)
          throw SpecError("op argument '" + trim(pair) + "' is not key=value");
        op.args[trim(std::string_view(pair).substr(0, eq))] =
            trim(std::string_view(pair).substr(eq + 1));
      }
    }
  }
  const auto& ops = known_ops();
  if (std::find(ops.begin(), ops.end(), op.name) == ops.end())
    throw SpecError("unknown op '" + op.name + "'");
  return op;
}

}  // namespace taskrunner_detail

// Grammar: INPUTS|OUTPUT|PIPELINE. INPUTS is a comma-separated path list,
// PIPELINE a comma-separated chain of `opname` or `opname(key=value;...)`.
// Whitespace around '|' is ignored; a literal pipe is escaped as "\|".
inline TaskSpec parse_taskspec(std::string_view line) {
  using namespace taskrunner_detail;
  auto fields = split_escaped(line, '|', false);
  if (fields.size() != 3)
    throw SpecError("expected 3 pipe-delimited fields (inputs|output|pipeline), got " +
                    std::to_string(fields.size()));
  TaskSpec spec;
  for (const std::string& raw : split_escaped(fields[0], ',', false)) {
    std::string p = trim(raw);
    if (!p.empty()) spec.inputs.emplace_back(p);
  }
  if (spec.inputs.empty()) throw SpecError("task needs at least one input path");
  spec.output = trim(fields[1]);
  if (spec.output.empty()) throw SpecError("task needs an output path");
  for (const std::string& op : split_escaped(fields[2], ',', true))
    spec.pipeline.push_back(parse_op(op));
  if (spec.pipeline.empty()) throw SpecError("task needs a nonempty pipeline");
  spec.basename = spec.output.stem().string();
  return spec;
}

// Run-unique id stamped into log file names: zero-padded ordinal plus a
// random hex suffix.
inline std::string make_submission_id() {
  static std::atomic<unsigned> ordinal{0};
  static const std::uint64_t seed = std::random_device{}();
  std::mt19937_64 rng(seed + ordinal.load());
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04u-%06x", ordinal.fetch_add(1) + 1,
                static_cast<unsigned>(rng() & 0xFFFFFF));
  return buf;
}

enum class Direction { sas_to_csv, csv_to_sas };

// One TaskSpec per non-empty, non-comment manifest line. Line text is the
// dataset basename without extension; inputs come from data_dir, outputs go
// to out_dir. Missing input files are not an error here: the run records
// them as failed tasks and proceeds.
inline std::vector<TaskSpec> parse_manifest(const std::filesystem::path& manifest,
                                            const std::filesystem::path& data_dir,
                                            const std::filesystem::path& out_dir,
                                            Direction direction) {
  using namespace taskrunner_detail;
  std::ifstream in(manifest);
  if (!in) throw ManifestError("cannot read manifest " + manifest.string());
  std::string submission_id = make_submission_id();
  std::vector<TaskSpec> tasks;
  std::vector<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    std::string base = trim(line);
    if (base.empty() || base[0] == '#') continue;
    if (std::find(seen.begin(), seen.end(), base) != seen.end())
      throw ManifestError("duplicate basename '" + base + "' would collide on output");
    seen.push_back(base);
    TaskSpec spec;
    spec.task_id = tasks.size();
    spec.basename = base;
    spec.submission_id = submission_id;
    if (direction == Direction::sas_to_csv) {
      spec.inputs = {data_dir / (base + ".sas7bdat")};
      spec.output = out_dir / (base + ".csv");
      spec.pipeline = {{"to_csv", {}}};
    } else {
      spec.inputs = {data_dir / (base + ".csv")};
      spec.output = out_dir / (base + ".xpt");
      spec.pipeline = {{"to_sas", {}}};
    }
    tasks.push_back(std::move(spec));
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Pipeline execution

struct PipelineConfig {
  CsvDialect dialect;
  std::size_t batch_size = 4096;
  std::size_t sort_budget_bytes = 64ull << 20;
  std::filesystem::path spill_parent;
};

// Executes one task; the extension point for cluster back-ends. The local
// implementation below runs the pipeline in-process.
class TaskExecutor {
public:
  virtual ~TaskExecutor() = default;
  // Throws on failure; writes its trace to `log`.
  virtual void execute(const TaskSpec& task, std::ostream& log) = 0;
};

class PipelineExecutor : public TaskExecutor {
public:
  explicit PipelineExecutor(PipelineConfig cfg = {}) : cfg_(cfg) {}

  void execute(const TaskSpec& task, std::ostream& log) override {
    RelopsConfig rel{cfg_.batch_size, cfg_.sort_budget_bytes, cfg_.spill_parent};

    std::unique_ptr<BatchSource> stream = open_input(task.inputs.at(0));
    log << "input " << task.inputs[0].string() << " (" << stream->schema()->size()
        << " columns)\n";
    std::string sink_kind;

    for (const PipelineOp& op : task.pipeline) {
      log << "op " << op.name << "\n";
      if (op.name == "to_csv" || op.name == "to_sas") {
        sink_kind = op.name;
        continue;
      }
      if (op.name == "filter") {
        Predicate pred = op.args.count("where")
                             ? parse_predicate(op.arg("where"))
                             : triple_predicate(op);
        stream = filter(std::move(stream), std::move(pred));
      } else if (op.name == "select") {
        stream = select(std::move(stream), split_names(op.arg("columns")));
      } else if (op.name == "unique") {
        stream = unique(std::move(stream), split_names(op.arg("columns")), rel);
      } else if (op.name == "except") {
        auto right = open_input(require_second_input(task));
        if (op.arg_or("whole_row", "false") == "true")
          stream = except_rows(std::move(stream), std::move(right), rel);
        else
          stream = except_keyed(std::move(stream), std::move(right), op.arg("key"), rel);
      } else if (op.name == "inner_join") {
        auto right = open_input(require_second_input(task));
        JoinSpec spec{op.arg("left_key"), op.arg("right_key")};
        stream = inner_join(std::move(stream), std::move(right), spec, rel);
      } else {
        throw SpecError("unknown op '" + op.name + "'");
      }
    }

    if (sink_kind.empty()) {
      std::string ext = task.output.extension().string();
      sink_kind = ext == ".xpt" ? "to_sas" : "to_csv";
    }
    std::uint64_t rows = write_output(*stream, task.output, sink_kind, log);
    log << "rows_out " << rows << "\n";
  }

private:
  std::unique_ptr<BatchSource> open_input(const std::filesystem::path& path) const {
    std::string ext = path.extension().string();
    if (ext == ".sas7bdat")
      return std::make_unique<Sas7bdatBatchSource>(path, cfg_.batch_size);
    if (ext == ".xpt") return std::make_unique<XportSource>(path, cfg_.batch_size);
    return std::make_unique<CsvSource>(path, cfg_.dialect, std::nullopt, cfg_.batch_size);
  }

  static Predicate triple_predicate(const PipelineOp& op) {
    auto word = op.arg("op");
    auto maybe_op = predicate_detail::word_to_op(word);
    if (!maybe_op) throw SpecError("unknown comparison '" + word + "'");
    std::string value = op.arg("value");
    Value lit;
    if (auto num = try_coerce_numeric(value))
      lit = *num;
    else
      lit = Value::character(value);
    return Predicate::compare(op.arg("column"), *maybe_op, std::move(lit));
  }

  static std::vector<std::string> split_names(const std::string& csv_list) {
    std::vector<std::string> names;
    for (const std::string& n : taskrunner_detail::split_escaped(csv_list, ',', false)) {
      std::string t = taskrunner_detail::trim(n);
      if (!t.empty()) names.push_back(std::move(t));
    }
    return names;
  }

  static std::filesystem::path require_second_input(const TaskSpec& task) {
    if (task.inputs.size() < 2)
      throw SpecError("op needs two inputs (left,right) in the task spec");
    return task.inputs[1];
  }

  std::uint64_t write_output(BatchSource& stream, const std::filesystem::path& out_path,
                             const std::string& kind, std::ostream& log) const {
    if (out_path.has_parent_path())
      std::filesystem::create_directories(out_path.parent_path());
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open output " + out_path.string());
    if (kind == "to_sas") {
      auto summary = write_xport(*stream.schema(), stream, out,
                                 out_path.stem().string());
      for (const auto& [from, to] : summary.renamed)
        log << "renamed " << from << " -> " << to << "\n";
      return summary.rows_written;
    }
    return write_csv(*stream.schema(), stream, cfg_.dialect, out);
  }

  // Adapter: Sas7bdatReader as a BatchSource.
  class Sas7bdatBatchSource : public BatchSource {
  public:
    Sas7bdatBatchSource(const std::filesystem::path& path, std::size_t batch_size)
        : reader_(path), batch_size_(batch_size == 0 ? 1 : batch_size) {}
    SchemaPtr schema() const override { return reader_.schema_ptr(); }
    std::optional<RecordBatch> next() override { return reader_.next_batch(batch_size_); }

  private:
    Sas7bdatReader reader_;
    std::size_t batch_size_;
  };

  PipelineConfig cfg_;
};

// ---------------------------------------------------------------------------
// The bag

enum class TaskOutcome { ok, failed, skipped };

inline const char* to_string(TaskOutcome o) {
  switch (o) {
    case TaskOutcome::ok: return "ok";
    case TaskOutcome::failed: return "failed";
    default: return "skipped";
  }
}

struct TaskRecord {
  std::size_t task_id = 0;
  std::string basename;
  double start_ms = 0;  // relative to run start
  double end_ms = 0;
  TaskOutcome outcome = TaskOutcome::skipped;
  std::string message;
  int worker = -1;

  double duration_ms() const { return end_ms - start_ms; }
};

struct RunReport {
  int workers = 0;
  std::vector<TaskRecord> tasks;
  double t_serial_ms = 0;    // sum of executed task durations
  double t_parallel_ms = 0;  // makespan: first start to last end

  bool all_ok() const {
    for (const TaskRecord& t : tasks)
      if (t.outcome != TaskOutcome::ok) return false;
    return true;
  }
  std::size_t count(TaskOutcome o) const {
    std::size_t n = 0;
    for (const TaskRecord& t : tasks) n += t.outcome == o;
    return n;
  }
};

struct Metrics {
  double speedup = 0;
  double efficiency = 0;
  bool defined = false;  // false when nothing ran or the makespan is zero
};

// S = T_serial / T_parallel, E = S / P.
inline Metrics compute_metrics(const RunReport& report) {
  Metrics m;
  if (report.tasks.empty() || report.t_parallel_ms <= 0 || report.workers < 1)
    return m;
  m.speedup = report.t_serial_ms / report.t_parallel_ms;
  m.efficiency = m.speedup / report.workers;
  m.defined = true;
  return m;
}

inline std::string format_sig3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// Human-readable run summary; speedup and efficiency to 3 significant
// figures.
inline std::string format_report(const RunReport& report) {
  std::ostringstream out;
  out << "tasks: " << report.tasks.size() << " (ok " << report.count(TaskOutcome::ok)
      << ", failed " << report.count(TaskOutcome::failed) << ", skipped "
      << report.count(TaskOutcome::skipped) << ")\n";
  out << "workers (P): " << report.workers << "\n";
  out << "T_serial: " << format_sig3(report.t_serial_ms / 1000.0) << " s\n";
  out << "T_parallel: " << format_sig3(report.t_parallel_ms / 1000.0) << " s\n";
  Metrics m = compute_metrics(report);
  if (m.defined) {
    out << "speedup (S): " << format_sig3(m.speedup) << "\n";
    out << "efficiency (E): " << format_sig3(m.efficiency) << "\n";
  } else {
    out << "speedup (S): n/a\nefficiency (E): n/a\n";
  }
  return out.str();
}

// Machine-readable per-task summary.
inline void write_report_tsv(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "task_id\tbasename\tstart_ms\tend_ms\toutcome\n";
  for (const TaskRecord& t : report.tasks) {
    out << t.task_id << "\t" << t.basename << "\t"
        << static_cast<long long>(t.start_ms) << "\t"
        << static_cast<long long>(t.end_ms) << "\t" << to_string(t.outcome) << "\n";
  }
}

// Drains the FIFO bag with P workers. No barrier ever parks an idle worker
// while tasks remain; a task failure is recorded and never aborts the run.
// Every task gets a log file log_dir/<basename>.<submission_id>.log. When
// `interrupt` flips, running tasks finish and queued ones are marked
// skipped.
inline RunReport run_bag(const std::vector<TaskSpec>& tasks, int workers,
                         const std::filesystem::path& log_dir, TaskExecutor& executor,
                         const std::atomic<bool>* interrupt = nullptr) {
  namespace fs = std::filesystem;
  if (workers < 1) throw RunError("worker count must be >= 1");
  std::error_code ec;
  fs::create_directories(log_dir, ec);
  {
    // shared prerequisite: fail fast before any task starts
    fs::path probe = log_dir / ".write_probe";
    std::ofstream test(probe, std::ios::trunc);
    if (!test) throw RunError("log directory " + log_dir.string() + " is not writable");
    test.close();
    fs::remove(probe, ec);
  }

  RunReport report;
  report.workers = workers;
  report.tasks.resize(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    report.tasks[i].task_id = tasks[i].task_id;
    report.tasks[i].basename = tasks[i].basename;
    report.tasks[i].outcome = TaskOutcome::skipped;
  }

  const auto run_start = std::chrono::steady_clock::now();
  auto now_ms = [&run_start] {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - run_start)
        .count();
  };

  std::atomic<std::size_t> next{0};
  auto worker_fn = [&](int worker_id) {
    while (true) {
      if (interrupt && interrupt->load(std::memory_order_relaxed)) return;
      std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= tasks.size()) return;
      const TaskSpec& task = tasks[i];
      TaskRecord& rec = report.tasks[i];
      rec.worker = worker_id;
      rec.start_ms = now_ms();

      std::ofstream log(log_dir / (task.basename + "." + task.submission_id + ".log"),
                        std::ios::trunc);
      log << "task " << task.task_id << " (" << task.basename << ")\n";
      for (const auto& in : task.inputs) log << "in  " << in.string() << "\n";
      log << "out " << task.output.string() << "\n";
      try {
        executor.execute(task, log);
        rec.outcome = TaskOutcome::ok;
      } catch (const std::exception& e) {
        rec.outcome = TaskOutcome::failed;
        rec.message = e.what();
        log << "error " << e.what() << "\n";
      }
      rec.end_ms = now_ms();
      log << "duration_ms " << rec.duration_ms() << "\n";
      log << "outcome " << to_string(rec.outcome) << "\n";
    }
  };

  {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker_fn, w);
  }

  double first_start = 0, last_end = 0;
  bool any = false;
  for (const TaskRecord& t : report.tasks) {
    if (t.outcome == TaskOutcome::skipped) continue;
    if (!any) {
      first_start = t.start_ms;
      last_end = t.end_ms;
      any = true;
    } else {
      first_start = std::min(first_start, t.start_ms);
      last_end = std::max(last_end, t.end_ms);
    }
    report.t_serial_ms += t.duration_ms();
  }
  report.t_parallel_ms = any ? last_end - first_start : 0;
  return report;
}

}  // namespace sascsv
