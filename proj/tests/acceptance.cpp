// Acceptance suite: one pass/fail line per criterion, exit 0 only when all
// pass. Each criterion pins its thresholds in code; timing-sensitive checks
// carry their own runtime budgets.

#include "sascsv/csv.hpp"
#include "sascsv/sas7bdat.hpp"
#include "sascsv/taskrunner.hpp"
#include "sascsv/xport.hpp"

#include "support/oracle.hpp"
#include "support/sas7bdat_writer.hpp"
#include "support/table_dump.hpp"
#include "support/table_gen.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

using namespace sascsv;
using namespace sascsv::testsupport;
namespace fs = std::filesystem;

extern char** environ;

namespace {

const fs::path kFixtures = SASCSV_FIXTURE_DIR;
const std::string kCli = SASCSV_CLI_PATH;

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

fs::path work_dir() {
  auto dir = fs::temp_directory_path() / "sascsv_acceptance";
  fs::create_directories(dir);
  return dir;
}

std::string fmt(double v) { return format_sig3(v); }

// Runs the CLI in a child process; returns exit code and peak RSS in bytes.
struct ChildResult {
  int exit_code = -1;
  std::size_t max_rss_bytes = 0;
};

ChildResult run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> full = {kCli};
  full.insert(full.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : full) argv.push_back(const_cast<char*>(s.c_str()));
  argv.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, 1, "/dev/null", O_WRONLY, 0);
  posix_spawn_file_actions_addopen(&actions, 2, "/dev/null", O_WRONLY, 0);
  pid_t pid = 0;
  int rc = posix_spawn(&pid, kCli.c_str(), &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  require(rc == 0, "failed to spawn " + kCli);

  int status = 0;
  struct rusage usage {};
  require(wait4(pid, &status, 0, &usage) == pid, "wait4 failed");
  ChildResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.max_rss_bytes = static_cast<std::size_t>(usage.ru_maxrss) * 1024;
  return result;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), "cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<Row> decode_file(const fs::path& p, std::size_t batch = 512) {
  Sas7bdatReader reader(p);
  std::vector<Row> rows;
  while (auto b = reader.next_batch(batch))
    for (auto& r : b->rows) rows.push_back(std::move(r));
  return rows;
}

// --------------------------------------------------------------------------
// 1. Scheduling scale-down: 160 sleep-calibrated 100 ms tasks.

class SleepTask : public TaskExecutor {
public:
  void execute(const TaskSpec&, std::ostream& log) override {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    log << "slept 100ms\n";
  }
};

std::string criterion_scheduling() {
  auto start = std::chrono::steady_clock::now();
  std::vector<TaskSpec> tasks;
  for (int i = 0; i < 160; ++i) {
    TaskSpec t;
    t.task_id = static_cast<std::size_t>(i);
    t.basename = "synthetic" + std::to_string(i);
    t.inputs = {"none"};
    t.output = "none";
    t.pipeline = {{"to_csv", {}}};
    t.submission_id = "acc-sched";
    tasks.push_back(std::move(t));
  }
  SleepTask exec;

  auto ten = run_bag(tasks, 10, work_dir() / "sched_logs10", exec);
  Metrics m10 = compute_metrics(ten);
  require(m10.defined, "metrics undefined for P=10");
  require(m10.speedup >= 8.0 && m10.speedup <= 10.0,
          "P=10 speedup " + fmt(m10.speedup) + " outside [8.0, 10.0]");
  require(m10.efficiency >= 0.8 && m10.efficiency <= 1.0,
          "P=10 efficiency " + fmt(m10.efficiency) + " outside [0.8, 1.0]");

  auto one = run_bag(tasks, 1, work_dir() / "sched_logs1", exec);
  Metrics m1 = compute_metrics(one);
  require(m1.speedup >= 0.95 && m1.speedup <= 1.05,
          "P=1 speedup " + fmt(m1.speedup) + " outside [0.95, 1.05]");

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  require(secs < 30.0, "runtime " + fmt(secs) + "s exceeds 30s");
  return "S=" + fmt(m10.speedup) + " E=" + fmt(m10.efficiency) + " at P=10, S=" +
         fmt(m1.speedup) + " at P=1, " + fmt(secs) + "s";
}

// --------------------------------------------------------------------------
// 2. Streaming memory bound: 1 GB conversion under 64 MB peak RSS.

fs::path make_big_fixture(const fs::path& path, std::size_t target_bytes) {
  Schema schema({{"id", ColumnType::numeric, 8, "", ""},
                 {"v", ColumnType::numeric, 8, "", ""},
                 {"w", ColumnType::numeric, 6, "", ""},
                 {"name", ColumnType::character, 120, "", ""},
                 {"code", ColumnType::character, 42, "", ""}});
  Sas7bdatLayout layout;
  layout.u64 = true;
  layout.page_size = 8192;
  layout.dataset_name = "BIG";
  Sas7bdatFileWriter writer(path, schema, layout);
  Row row(5, Value::number(0));
  constexpr std::uint64_t kRowLength = 8 + 8 + 6 + 120 + 42;
  std::uint64_t rows = target_bytes / kRowLength;
  for (std::uint64_t r = 0; r < rows; ++r) {
    row[0] = Value::number(static_cast<double>(r));
    row[1] = r % 97 == 0 ? Value::missing('B') : Value::number(r * 0.25);
    row[2] = Value::number(static_cast<double>(r % 1024));
    row[3] = Value::character("name_" + std::to_string(r % 100000) + "_block");
    row[4] = Value::character(r % 3 ? "AB,CD" : "");
    writer.write_row(row);
  }
  writer.finish();
  return path;
}

std::string criterion_streaming_memory() {
  auto start = std::chrono::steady_clock::now();
  auto dir = work_dir();
  constexpr std::size_t kMaxRss = 64ull << 20;

  fs::path big = dir / "big.sas7bdat";
  fs::path small = dir / "small.sas7bdat";
  if (!fs::exists(big) || fs::file_size(big) < (1ull << 30))
    make_big_fixture(big, 1ull << 30);
  if (!fs::exists(small)) make_big_fixture(small, 100ull << 20);
  require(fs::file_size(big) >= (1ull << 30), "big fixture undersized");

  auto convert = [&](const fs::path& in, const fs::path& out) {
    ChildResult r = run_cli({"sas2csv", in.string(), out.string()});
    require(r.exit_code == 0, "conversion of " + in.string() + " exited " +
                                  std::to_string(r.exit_code));
    return r.max_rss_bytes;
  };
  std::size_t small_rss = convert(small, dir / "small.csv");
  std::size_t big_rss = convert(big, dir / "big.csv");
  fs::remove(dir / "small.csv");
  fs::remove(dir / "big.csv");

  require(big_rss < kMaxRss, "1 GB conversion peaked at " +
                                 std::to_string(big_rss >> 20) + " MiB (limit 64)");
  require(big_rss < 2 * small_rss,
          "peak RSS grew by " + fmt(double(big_rss) / double(small_rss)) +
              "x from 100 MB to 1 GB input");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  require(secs < 300.0, "runtime " + fmt(secs) + "s exceeds 5 min");
  return "peak " + std::to_string(big_rss >> 20) + " MiB for 1 GiB input, " +
         std::to_string(small_rss >> 20) + " MiB for 100 MB input, " + fmt(secs) + "s";
}

// --------------------------------------------------------------------------
// 3. Format conformance against the reference-reader oracle dumps.

std::string criterion_conformance() {
  auto start = std::chrono::steady_clock::now();
  std::size_t files = 0, cells = 0;
  for (const auto& entry : fs::directory_iterator(kFixtures)) {
    if (entry.path().extension() != ".sas7bdat") continue;
    fs::path oracle = entry.path();
    oracle.replace_extension(".oracle.tsv");
    require(fs::exists(oracle), "missing oracle dump for " + entry.path().string());
    TableDump expected = read_table_dump(oracle);

    Sas7bdatReader reader(entry.path());
    const Schema& s = reader.schema();
    require(s.size() == expected.schema.size(),
            entry.path().filename().string() + ": column count mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(s[i].name == expected.schema[i].name &&
                  s[i].type == expected.schema[i].type &&
                  s[i].width == expected.schema[i].width &&
                  s[i].format == expected.schema[i].format &&
                  s[i].label == expected.schema[i].label,
              entry.path().filename().string() + ": column " + std::to_string(i) +
                  " metadata mismatch");
    }
    auto rows = decode_file(entry.path(), 7);
    require(rows.size() == expected.rows.size(),
            entry.path().filename().string() + ": row count mismatch");
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < rows[r].size(); ++c) {
        require(rows[r][c] == expected.rows[r][c],
                entry.path().filename().string() + ": cell [" + std::to_string(r) +
                    "," + std::to_string(c) + "] differs from the oracle");
        ++cells;
      }
    ++files;
  }
  require(files >= 8, "conformance corpus has only " + std::to_string(files) +
                          " fixtures, need >= 8");
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  require(secs < 10.0, "runtime " + fmt(secs) + "s exceeds 10s");
  return std::to_string(files) + " fixtures, " + std::to_string(cells) +
         " cells exact, " + fmt(secs) + "s";
}

// --------------------------------------------------------------------------
// 4. Round trips: csv, xport, and corpus -> CSV -> XPORT -> read-back.

void sanitize_for_xport(const Schema& schema, std::vector<Row>& rows) {
  bool any_numeric = false;
  for (const ColumnMeta& c : schema.columns())
    any_numeric |= c.type == ColumnType::numeric;
  for (Row& row : rows)
    for (auto& v : row)
      if (v.is_character()) {
        std::string s = v.as_character();
        while (!s.empty() && s.back() == ' ') s.pop_back();
        v = Value::character(s);
      }
  if (!any_numeric && !rows.empty()) {
    bool blank = true;
    for (const Value& v : rows.back())
      blank &= v.is_character() && v.as_character().empty();
    if (blank) rows.back()[0] = Value::character("x");
  }
}

std::string criterion_round_trips() {
  auto start = std::chrono::steady_clock::now();
  auto dir = work_dir();

  // (a) csv identity over 200 randomized tables, both quote modes
  TableGen gen_a(20260810);
  for (int trial = 0; trial < 200; ++trial) {
    auto [schema, rows] = gen_a.random_table();
    for (int mode = 0; mode < 2; ++mode) {
      CsvDialect d;
      d.quote_mode = mode ? CsvDialect::QuoteMode::all : CsvDialect::QuoteMode::minimal;
      std::ostringstream out;
      MemorySource src(std::make_shared<const Schema>(schema), rows, 13);
      write_csv(schema, src, d, out);
      fs::path p = dir / "rt.csv";
      std::ofstream(p, std::ios::binary | std::ios::trunc) << out.str();
      CsvReader reader(p, d, schema);
      std::vector<Row> got;
      while (auto b = reader.next_batch(17))
        for (auto& r : b->rows) got.push_back(std::move(r));
      require(rows_equal(got, rows),
              "csv round trip diverged at table " + std::to_string(trial));
    }
  }

  // (b) xport identity over 200 randomized tables
  TableGen gen_b(926);
  for (int trial = 0; trial < 200; ++trial) {
    auto [schema, rows] = gen_b.random_table();
    sanitize_for_xport(schema, rows);
    fs::path p = dir / "rt.xpt";
    {
      std::ofstream out(p, std::ios::binary | std::ios::trunc);
      MemorySource src(std::make_shared<const Schema>(schema), rows, 9);
      write_xport(schema, src, out);
    }
    XportReader back(p);
    std::vector<Row> got;
    while (auto b = back.next_batch(23))
      for (auto& r : b->rows) got.push_back(std::move(r));
    require(rows_equal(got, rows),
            "xport round trip diverged at table " + std::to_string(trial));
  }

  // (c) corpus -> CSV -> XPORT -> read-back preserves every value
  std::size_t corpus_files = 0;
  for (const auto& entry : fs::directory_iterator(kFixtures)) {
    if (entry.path().extension() != ".sas7bdat") continue;
    Sas7bdatReader reader(entry.path());
    Schema schema = reader.schema();
    std::vector<Row> rows;
    while (auto b = reader.next_batch(256))
      for (auto& r : b->rows) rows.push_back(std::move(r));

    fs::path csv_path = dir / "chain.csv";
    {
      std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
      MemorySource src(std::make_shared<const Schema>(schema), rows, 64);
      write_csv(schema, src, {}, out);
    }
    CsvReader csv_back(csv_path, {}, schema);
    std::vector<Row> csv_rows;
    while (auto b = csv_back.next_batch(128))
      for (auto& r : b->rows) csv_rows.push_back(std::move(r));
    require(rows_equal(csv_rows, rows),
            entry.path().filename().string() + ": CSV leg changed values");

    fs::path xpt_path = dir / "chain.xpt";
    {
      std::ofstream out(xpt_path, std::ios::binary | std::ios::trunc);
      MemorySource src(std::make_shared<const Schema>(schema), csv_rows, 64);
      write_xport(schema, src, out);
    }
    XportReader xpt_back(xpt_path);
    std::vector<Row> final_rows;
    while (auto b = xpt_back.next_batch(128))
      for (auto& r : b->rows) final_rows.push_back(std::move(r));
    require(rows_equal(final_rows, rows),
            entry.path().filename().string() + ": XPORT leg changed values");
    ++corpus_files;
  }

  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  require(secs < 60.0, "runtime " + fmt(secs) + "s exceeds 60s");
  return "200 csv tables x2 modes, 200 xport tables, " + std::to_string(corpus_files) +
         " corpus chains, " + fmt(secs) + "s";
}

// --------------------------------------------------------------------------
// 5. Relational operators match the naive oracles on 500 instances.

std::string criterion_relops() {
  auto start = std::chrono::steady_clock::now();
  std::mt19937_64 seeds(5050);
  std::size_t total_rows = 0;
  for (int trial = 0; trial < 500; ++trial) {
    GenOptions opt;
    opt.max_rows = trial % 50 == 0 ? 10000 : 200;
    TableGen gen(seeds(), opt);
    auto& rng = gen.rng();
    Schema schema_v = gen.random_schema();
    auto schema = std::make_shared<const Schema>(schema_v);
    std::size_t n_left = rng() % (opt.max_rows + 1);
    std::size_t n_right = trial % 50 == 0 ? rng() % 300 : rng() % (opt.max_rows + 1);
    auto left = gen.random_rows(*schema, n_left);
    auto right = gen.random_rows(*schema, n_right);
    total_rows += n_left + n_right;

    RelopsConfig cfg;
    cfg.batch_size = 1 + rng() % 128;
    if (trial % 3 == 0) cfg.sort_budget_bytes = 1 << 16;  // force spills

    auto src = [&](const std::vector<Row>& rows) {
      return std::make_unique<MemorySource>(schema, rows, cfg.batch_size);
    };

    const ColumnMeta& col = (*schema)[rng() % schema->size()];
    Predicate pred =
        col.type == ColumnType::numeric
            ? Predicate::compare(col.name,
                                 rng() % 2 ? Predicate::Op::le : Predicate::Op::ne,
                                 Value::number(gen.random_double()))
            : Predicate::compare(col.name,
                                 rng() % 2 ? Predicate::Op::substr : Predicate::Op::eq,
                                 Value::character(gen.random_text()));
    require(rows_equal(drain(*filter(src(left), pred)),
                       oracle_filter(left, *schema, pred)),
            "filter diverged from oracle at instance " + std::to_string(trial));

    std::vector<std::string> cols;
    for (std::size_t c = 0; c < schema->size(); ++c)
      if (rng() % 2 || cols.empty()) cols.push_back((*schema)[c].name);
    require(rows_equal(drain(*select(src(left), cols)),
                       oracle_select(left, *schema, cols)),
            "select diverged from oracle at instance " + std::to_string(trial));
    require(rows_equal(drain(*unique(src(left), cols, cfg)),
                       oracle_unique(left, *schema, cols)),
            "unique diverged from oracle at instance " + std::to_string(trial));

    const std::string& key = (*schema)[rng() % schema->size()].name;
    require(rows_equal(drain(*except_keyed(src(left), src(right), key, cfg)),
                       oracle_except(left, *schema, right, *schema, key)),
            "except diverged from oracle at instance " + std::to_string(trial));
    require(rows_equal(drain(*inner_join(src(left), src(right), {key, key}, cfg)),
                       oracle_join(left, *schema, right, *schema, key, key)),
            "inner_join diverged from oracle at instance " + std::to_string(trial));
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  require(secs < 120.0, "runtime " + fmt(secs) + "s exceeds 2 min");
  return "500 instances, " + std::to_string(total_rows) + " input rows, " + fmt(secs) +
         "s";
}

// --------------------------------------------------------------------------
// 6. Determinism across worker counts; corruption isolation.

std::string criterion_determinism() {
  auto dir = work_dir() / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir / "data");

  // 20 varied input files
  TableGen gen(31415);
  std::string manifest_text;
  for (int i = 0; i < 20; ++i) {
    auto [schema, rows] = gen.random_table();
    Sas7bdatLayout layout;
    layout.u64 = i % 2;
    layout.big_endian = i % 3 == 0;
    layout.rle = i % 4 == 0;
    layout.page_size = 4096;
    std::string name = "ds" + std::to_string(i);
    layout.dataset_name = name;
    // storage-faithful values: truncate char cells to declared width,
    // strip trailing blanks like the format does
    for (auto& row : rows)
      for (std::size_t c = 0; c < row.size(); ++c)
        if (row[c].is_character()) {
          std::string s = row[c].as_character();
          if (s.size() > static_cast<std::size_t>(schema[c].width))
            s.resize(static_cast<std::size_t>(schema[c].width));
          while (!s.empty() && s.back() == ' ') s.pop_back();
          row[c] = Value::character(s);
        }
    write_sas7bdat(dir / "data" / (name + ".sas7bdat"), schema, rows, layout);
    manifest_text += name + "\n";
  }
  std::ofstream(dir / "manifest.txt") << manifest_text;

  auto run_batch = [&](int workers, const std::string& out_name) {
    fs::path out_dir = dir / out_name;
    ChildResult r = run_cli({"batch", (dir / "manifest.txt").string(), "--data-dir",
                             (dir / "data").string(), "--out-dir", out_dir.string(),
                             "-P", std::to_string(workers)});
    return std::pair{r.exit_code, out_dir};
  };

  auto [code1, out1] = run_batch(1, "P1");
  auto [code2, out2] = run_batch(2, "P2");
  auto [code8, out8] = run_batch(8, "P8");
  require(code1 == 0 && code2 == 0 && code8 == 0, "clean batch runs did not exit 0");

  std::vector<std::string> outputs;
  for (int i = 0; i < 20; ++i) outputs.push_back("ds" + std::to_string(i) + ".csv");
  for (const std::string& f : outputs) {
    std::string bytes1 = slurp(out1 / f);
    require(bytes1 == slurp(out2 / f) && bytes1 == slurp(out8 / f),
            f + " differs across worker counts");
  }

  // corrupt one input: only that task flips to failed
  fs::path victim = dir / "data" / "ds7.sas7bdat";
  auto bytes = slurp(victim);
  std::ofstream(victim, std::ios::binary | std::ios::trunc)
      << bytes.substr(0, bytes.size() / 2 + 13);
  auto [code_bad, out_bad] = run_batch(4, "Pbad");
  require(code_bad == 3, "corrupted input should exit 3, got " + std::to_string(code_bad));
  for (const std::string& f : outputs) {
    if (f == "ds7.csv") continue;
    require(slurp(out_bad / f) == slurp(out1 / f),
            f + " changed after corrupting an unrelated input");
  }
  std::string tsv = slurp(out_bad / "run_report.tsv");
  require(tsv.find("ds7") != std::string::npos && tsv.find("failed") != std::string::npos,
          "run report does not record the failed task");
  std::size_t failures = 0;
  std::istringstream lines(tsv);
  for (std::string line; std::getline(lines, line);)
    failures += line.find("\tfailed") != std::string::npos;
  require(failures == 1, "expected exactly one failed task, saw " +
                             std::to_string(failures));
  return "20 files byte-identical at P=1/2/8; corruption isolated to 1 task";
}

// --------------------------------------------------------------------------
// 7. Legacy dialect reproduction.

std::string criterion_legacy_dialect() {
  auto dir = work_dir() / "legacy";
  fs::create_directories(dir);
  fs::path in = kFixtures / "basic_le32.sas7bdat";
  fs::path legacy_out = dir / "legacy.csv";
  fs::path default_out = dir / "default.csv";

  require(run_cli({"sas2csv", "--quote-mode", "all", "--na-token", "NA", in.string(),
                   legacy_out.string()})
                  .exit_code == 0,
          "legacy conversion failed");
  require(run_cli({"sas2csv", in.string(), default_out.string()}).exit_code == 0,
          "default conversion failed");

  std::string legacy = slurp(legacy_out);
  require(legacy == slurp(kFixtures / "golden_basic_legacy.csv"),
          "legacy output differs from the committed golden");

  // every field quoted, every missing cell NA
  std::istringstream lines(legacy);
  std::size_t na_cells = 0;
  for (std::string line; std::getline(lines, line);) {
    require(!line.empty() && line.front() == '"' && line.back() == '"',
            "line not fully quoted: " + line);
    std::size_t pos = 0;
    while ((pos = line.find("\"NA\"", pos)) != std::string::npos) {
      ++na_cells;
      pos += 4;
    }
  }
  require(na_cells == 2, "expected the 2 missing cells to read NA, saw " +
                             std::to_string(na_cells));

  std::string dflt = slurp(default_out);
  require(dflt == slurp(kFixtures / "golden_basic_default.csv"),
          "default output differs from the committed golden");
  require(dflt.size() < legacy.size(), "default output is not strictly smaller");
  return "golden match; default " + std::to_string(dflt.size()) + " B < legacy " +
         std::to_string(legacy.size()) + " B";
}

// --------------------------------------------------------------------------
// 8. Metrics arithmetic.

std::string criterion_metrics() {
  RunReport report;
  report.workers = 10;
  report.tasks.resize(160);
  for (auto& t : report.tasks) t.outcome = TaskOutcome::ok;
  report.t_serial_ms = 480.0 * 3600.0 * 1000.0;
  report.t_parallel_ms = 48.0 * 3600.0 * 1000.0;
  Metrics m = compute_metrics(report);
  require(m.defined, "metrics undefined");
  require(m.speedup == 10.0, "S != 10 exactly");
  require(m.efficiency == 1.0, "E != 1.0 exactly");
  require(m.efficiency * report.workers == m.speedup, "S != E*P");
  return "S=10, E=1.0 exact from T_serial=480h, T_parallel=48h, P=10";
}

}  // namespace

int main() {
  struct Criterion {
    int number;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "scheduling scale-down (160 x 100ms, P=10)", criterion_scheduling},
      {2, "streaming memory bound (1 GB under 64 MiB)", criterion_streaming_memory},
      {3, "format conformance vs reference-reader oracle", criterion_conformance},
      {4, "round trips (csv, xport, sas7bdat->csv->xport)", criterion_round_trips},
      {5, "relational operators vs naive oracles (500)", criterion_relops},
      {6, "determinism across P and corruption isolation", criterion_determinism},
      {7, "legacy dialect reproduction", criterion_legacy_dialect},
      {8, "metrics arithmetic", criterion_metrics},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    try {
      std::string detail = c.run();
      std::printf("[PASS] %d. %s: %s\n", c.number, c.name, detail.c_str());
    } catch (const std::exception& e) {
      ++failed;
      std::printf("[FAIL] %d. %s: %s\n", c.number, c.name, e.what());
    }
    std::fflush(stdout);
  }
  if (failed) std::printf("%d criterion(s) failed\n", failed);
  std::error_code ec;
  fs::remove_all(work_dir(), ec);
  return failed ? 1 : 0;
}
