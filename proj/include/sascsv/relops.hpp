#pragma once

// Streaming relational operators: filter, select (projection), unique,
// except (anti-join) and inner join. Every operator is bounded by the batch
// size plus a configurable sort budget; sorts and key sets spill to a
// private temporary directory when they outgrow the budget, and the spill
// files are removed on success and on failure.

#include "sascsv/core.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <atomic>
#include <queue>
#include <random>

namespace sascsv {

struct RelopsConfig {
  std::size_t batch_size = 1024;
  std::size_t sort_budget_bytes = 64ull << 20;
  // Parent for spill directories; empty means the system temp directory.
  std::filesystem::path spill_parent;
};

// ---------------------------------------------------------------------------
// Predicates

struct Predicate {
  enum class Op { eq, ne, lt, le, gt, ge, substr };
  enum class Kind { compare, conj, disj, negate };

  Kind kind = Kind::compare;
  std::string column;
  Op op = Op::eq;
  Value literal;
  std::vector<Predicate> children;

  static Predicate compare(std::string col, Op op, Value literal) {
    Predicate p;
    p.kind = Kind::compare;
    p.column = std::move(col);
    p.op = op;
    p.literal = std::move(literal);
    return p;
  }
  static Predicate conj(Predicate a, Predicate b) {
    Predicate p;
    p.kind = Kind::conj;
    p.children = {std::move(a), std::move(b)};
    return p;
  }
  static Predicate disj(Predicate a, Predicate b) {
    Predicate p;
    p.kind = Kind::disj;
    p.children = {std::move(a), std::move(b)};
    return p;
  }
  static Predicate negate(Predicate a) {
    Predicate p;
    p.kind = Kind::negate;
    p.children = {std::move(a)};
    return p;
  }
};

inline const char* to_string(Predicate::Op op) {
  switch (op) {
    case Predicate::Op::eq: return "eq";
    case Predicate::Op::ne: return "ne";
    case Predicate::Op::lt: return "lt";
    case Predicate::Op::le: return "le";
    case Predicate::Op::gt: return "gt";
    case Predicate::Op::ge: return "ge";
    default: return "substr";
  }
}

// Predicate with column references resolved against a schema.
class BoundPredicate {
public:
  BoundPredicate(const Predicate& p, const Schema& schema) { root_ = bind(p, schema); }

  bool matches(const Row& row) const { return eval(*root_, row); }

private:
  struct Node {
    Predicate::Kind kind;
    std::size_t column = 0;
    Predicate::Op op = Predicate::Op::eq;
    Value literal;
    std::vector<Node> children;
  };

  static Node bind(const Predicate& p, const Schema& schema) {
    Node n;
    n.kind = p.kind;
    if (p.kind == Predicate::Kind::compare) {
      n.column = schema.require(p.column);
      n.op = p.op;
      n.literal = p.literal;
      ColumnType col_type = schema[n.column].type;
      if (p.op == Predicate::Op::substr) {
        if (col_type != ColumnType::character)
          throw PlanError("substr is invalid on numeric column '" + p.column + "'");
        if (!p.literal.is_character())
          throw PlanError("substr needs a character literal");
      } else if (!p.literal.is_any_missing() && p.literal.column_type() != col_type) {
        throw PlanError("literal type does not match column '" + p.column + "'");
      }
    } else {
      for (const Predicate& c : p.children) n.children.push_back(bind(c, schema));
    }
    return n;
  }

  // Comparisons involving a missing operand are never satisfied, except ne:
  // a missing cell differs from any non-missing literal and vice versa.
  static bool eval(const Node& n, const Row& row) {
    switch (n.kind) {
      case Predicate::Kind::conj:
        return eval(n.children[0], row) && eval(n.children[1], row);
      case Predicate::Kind::disj:
        return eval(n.children[0], row) || eval(n.children[1], row);
      case Predicate::Kind::negate:
        return !eval(n.children[0], row);
      case Predicate::Kind::compare:
        break;
    }
    const Value& cell = row[n.column];
    const Value& lit = n.literal;
    bool cell_missing = cell.is_any_missing();
    bool lit_missing = lit.is_any_missing();
    if (n.op == Predicate::Op::ne) {
      if (cell_missing || lit_missing) return cell_missing != lit_missing;
      return !(cell == lit);
    }
    if (cell_missing || lit_missing) return false;
    switch (n.op) {
      case Predicate::Op::eq:
        return cell == lit;
      case Predicate::Op::substr:
        return cell.as_character().find(lit.as_character()) != std::string::npos;
      case Predicate::Op::lt:
      case Predicate::Op::le:
      case Predicate::Op::gt:
      case Predicate::Op::ge: {
        int cmp;
        if (cell.is_character())
          cmp = cell.as_character().compare(lit.as_character());
        else
          cmp = cell.as_number() < lit.as_number()
                    ? -1
                    : (cell.as_number() > lit.as_number() ? 1 : 0);
        switch (n.op) {
          case Predicate::Op::lt: return cmp < 0;
          case Predicate::Op::le: return cmp <= 0;
          case Predicate::Op::gt: return cmp > 0;
          default: return cmp >= 0;
        }
      }
      default:
        return false;
    }
  }

  std::optional<Node> root_;
};

struct JoinSpec {
  std::string left_key;
  std::string right_key;
};

// ---------------------------------------------------------------------------
// Predicate expressions
//
// Grammar: expr := and ('or' and)* ; and := unary ('and' unary)* ;
// unary := 'not' unary | '(' expr ')' | column OP literal. Operators are the
// word forms (eq ne lt le gt ge substr). Literals: bare numbers and missing
// tokens ('.', '.B') become numeric, quoted ('it''s') or bare words become
// character strings.

namespace predicate_detail {

struct Token {
  enum class Kind { word, number, string, lparen, rparen, end };
  Kind kind;
  std::string text;
  double num = 0;
};

class Lexer {
public:
  explicit Lexer(std::string_view s) : s_(s) { advance(); }
  const Token& peek() const { return tok_; }
  Token take() {
    Token t = tok_;
    advance();
    return t;
  }

private:
  void advance() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    if (pos_ >= s_.size()) {
      tok_ = {Token::Kind::end, "", 0};
      return;
    }
    char c = s_[pos_];
    if (c == '(') {
      ++pos_;
      tok_ = {Token::Kind::lparen, "(", 0};
      return;
    }
    if (c == ')') {
      ++pos_;
      tok_ = {Token::Kind::rparen, ")", 0};
      return;
    }
    if (c == '\'') {
      ++pos_;
      std::string text;
      while (true) {
        if (pos_ >= s_.size()) throw PlanError("unterminated string literal");
        if (s_[pos_] == '\'') {
          if (pos_ + 1 < s_.size() && s_[pos_ + 1] == '\'') {
            text.push_back('\'');
            pos_ += 2;
            continue;
          }
          ++pos_;
          break;
        }
        text.push_back(s_[pos_++]);
      }
      tok_ = {Token::Kind::string, std::move(text), 0};
      return;
    }
    std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ' ' && s_[pos_] != '\t' && s_[pos_] != '(' &&
           s_[pos_] != ')' && s_[pos_] != '\'')
      ++pos_;
    std::string word(s_.substr(start, pos_ - start));
    if (auto v = try_coerce_numeric(word)) {
      tok_ = {Token::Kind::number, std::move(word), 0};
      return;
    }
    tok_ = {Token::Kind::word, std::move(word), 0};
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  Token tok_;
};

}  // namespace predicate_detail

inline Predicate parse_predicate(std::string_view text);

namespace predicate_detail {

inline std::optional<Predicate::Op> word_to_op(const std::string& w) {
  if (w == "eq") return Predicate::Op::eq;
  if (w == "ne") return Predicate::Op::ne;
  if (w == "lt") return Predicate::Op::lt;
  if (w == "le") return Predicate::Op::le;
  if (w == "gt") return Predicate::Op::gt;
  if (w == "ge") return Predicate::Op::ge;
  if (w == "substr") return Predicate::Op::substr;
  return std::nullopt;
}

inline Predicate parse_expr(Lexer& lex);

inline Predicate parse_unary(Lexer& lex) {
  const Token& t = lex.peek();
  if (t.kind == Token::Kind::word && t.text == "not") {
    lex.take();
    return Predicate::negate(parse_unary(lex));
  }
  if (t.kind == Token::Kind::lparen) {
    lex.take();
    Predicate inner = parse_expr(lex);
    if (lex.peek().kind != Token::Kind::rparen) throw PlanError("expected ')'");
    lex.take();
    return inner;
  }
  if (t.kind != Token::Kind::word)
    throw PlanError("expected a column name in predicate");
  std::string column = lex.take().text;
  Token op_tok = lex.take();
  if (op_tok.kind != Token::Kind::word)
    throw PlanError("expected an operator after '" + column + "'");
  auto op = word_to_op(op_tok.text);
  if (!op)
    throw PlanError("unknown operator '" + op_tok.text +
                    "' (expected eq ne lt le gt ge substr)");
  Token lit = lex.take();
  Value value;
  switch (lit.kind) {
    case Token::Kind::number:
      value = *try_coerce_numeric(lit.text);
      break;
    case Token::Kind::string:
      value = Value::character(lit.text);
      break;
    case Token::Kind::word:
      value = Value::character(lit.text);
      break;
    default:
      throw PlanError("expected a literal after '" + op_tok.text + "'");
  }
  return Predicate::compare(std::move(column), *op, std::move(value));
}

inline Predicate parse_and(Lexer& lex) {
  Predicate left = parse_unary(lex);
  while (lex.peek().kind == Token::Kind::word && lex.peek().text == "and") {
    lex.take();
    left = Predicate::conj(std::move(left), parse_unary(lex));
  }
  return left;
}

inline Predicate parse_expr(Lexer& lex) {
  Predicate left = parse_and(lex);
  while (lex.peek().kind == Token::Kind::word && lex.peek().text == "or") {
    lex.take();
    left = Predicate::disj(std::move(left), parse_and(lex));
  }
  return left;
}

}  // namespace predicate_detail

inline Predicate parse_predicate(std::string_view text) {
  predicate_detail::Lexer lex(text);
  Predicate p = predicate_detail::parse_expr(lex);
  if (lex.peek().kind != predicate_detail::Token::Kind::end)
    throw PlanError("trailing text in predicate: '" + lex.peek().text + "'");
  return p;
}

// ---------------------------------------------------------------------------
// Spill-backed row sorter

namespace relops_detail {

inline std::size_t row_footprint(const Row& row) {
  std::size_t n = sizeof(Row) + row.capacity() * sizeof(Value);
  for (const Value& v : row)
    if (v.is_character()) n += v.as_character().capacity();
  return n;
}

inline void serialize_value(std::string& out, const Value& v) {
  if (v.is_number()) {
    out.push_back('n');
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v.as_number());
    for (int i = 0; i < 8; ++i)
      out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  } else if (v.is_missing()) {
    out.push_back('m');
    out.push_back(v.missing_code());
  } else {
    out.push_back('c');
    const std::string& s = v.as_character();
    std::uint32_t len = static_cast<std::uint32_t>(s.size());
    for (int i = 0; i < 4; ++i)
      out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
    out.append(s);
  }
}

class RowDeserializer {
public:
  explicit RowDeserializer(std::istream& in) : in_(in) {}

  bool read_row(Row& row, std::size_t arity) {
    row.clear();
    for (std::size_t i = 0; i < arity; ++i) {
      int tag = in_.get();
      if (tag == std::char_traits<char>::eof()) {
        if (i == 0) return false;
        throw IoError("spill file truncated mid-row");
      }
      switch (tag) {
        case 'n': {
          std::uint64_t bits = 0;
          for (int k = 0; k < 8; ++k)
            bits |= static_cast<std::uint64_t>(get_byte()) << (8 * k);
          row.push_back(Value::number(std::bit_cast<double>(bits)));
          break;
        }
        case 'm':
          row.push_back(Value::missing(static_cast<char>(get_byte())));
          break;
        case 'c': {
          std::uint32_t len = 0;
          for (int k = 0; k < 4; ++k)
            len |= static_cast<std::uint32_t>(get_byte()) << (8 * k);
          std::string s(len, '\0');
          in_.read(s.data(), len);
          if (static_cast<std::uint32_t>(in_.gcount()) != len)
            throw IoError("spill file truncated mid-string");
          row.push_back(Value::character(std::move(s)));
          break;
        }
        default:
          throw IoError("corrupt spill file");
      }
    }
    return true;
  }

private:
  std::uint8_t get_byte() {
    int c = in_.get();
    if (c == std::char_traits<char>::eof()) throw IoError("spill file truncated");
    return static_cast<std::uint8_t>(c);
  }
  std::istream& in_;
};

// Private temp directory, removed on destruction.
class SpillDir {
public:
  explicit SpillDir(const std::filesystem::path& parent) {
    namespace fs = std::filesystem;
    fs::path base = parent.empty() ? fs::temp_directory_path() : parent;
    static std::atomic<std::uint64_t> counter{0};
    std::random_device rd;
    for (int attempt = 0; attempt < 16; ++attempt) {
      fs::path candidate =
          base / ("sascsv-spill-" + std::to_string(rd()) + "-" +
                  std::to_string(counter.fetch_add(1)));
      std::error_code ec;
      if (fs::create_directories(candidate, ec) && !ec) {
        path_ = candidate;
        return;
      }
    }
    throw IoError("cannot create spill directory under " + base.string());
  }
  ~SpillDir() {
    if (!path_.empty()) {
      std::error_code ec;
      std::filesystem::remove_all(path_, ec);
    }
  }
  SpillDir(const SpillDir&) = delete;
  SpillDir& operator=(const SpillDir&) = delete;

  std::filesystem::path file(std::size_t i) const {
    return path_ / ("run" + std::to_string(i) + ".bin");
  }

private:
  std::filesystem::path path_;
};

// Sorts rows by the leading key_len values (value_less, lexicographic).
// Callers append a numeric ordinal right after the key columns, which makes
// the order total and the sort stable across spills. Runs stay in memory
// while they fit the budget; otherwise they are sorted, serialized and
// k-way merged.
class ExternalRowSorter {
public:
  ExternalRowSorter(std::size_t arity, std::size_t key_len, std::size_t budget_bytes,
                    const std::filesystem::path& spill_parent)
      : arity_(arity), key_len_(key_len),
        budget_(std::max<std::size_t>(budget_bytes, 1 << 16)),
        spill_parent_(spill_parent) {}

  void add(Row row) {
    bytes_ += row_footprint(row);
    current_.push_back(std::move(row));
    if (bytes_ >= budget_) spill_run();
  }

  // No more input; rows come back in key order via next().
  void finish() {
    sort_run(current_);
    if (spilled_runs_ == 0) {
      mem_iter_ = 0;
      finished_ = true;
      return;
    }
    if (!current_.empty()) spill_run();
    open_merge();
    finished_ = true;
  }

  std::optional<Row> next() {
    if (spilled_runs_ == 0) {
      if (mem_iter_ >= current_.size()) return std::nullopt;
      return std::move(current_[mem_iter_++]);
    }
    if (heap_.empty()) return std::nullopt;
    HeapItem top = heap_.top();
    heap_.pop();
    Row out = std::move(top.row);
    if (readers_[top.run]->read_row(top.row, arity_)) heap_.push(std::move(top));
    return out;
  }

  bool spilled() const { return spilled_runs_ > 0; }

private:
  bool key_less(const Row& a, const Row& b) const {
    for (std::size_t i = 0; i <= key_len_ && i < a.size(); ++i) {
      // position key_len_ holds the ordinal tiebreaker
      if (value_less(a[i], b[i])) return true;
      if (value_less(b[i], a[i])) return false;
    }
    return false;
  }

  void sort_run(std::vector<Row>& run) {
    std::sort(run.begin(), run.end(),
              [this](const Row& a, const Row& b) { return key_less(a, b); });
  }

  void spill_run() {
    if (current_.empty()) return;
    if (!dir_) dir_ = std::make_unique<SpillDir>(spill_parent_);
    sort_run(current_);
    std::ofstream out(dir_->file(spilled_runs_), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write spill run");
    std::string buf;
    for (const Row& row : current_) {
      buf.clear();
      for (const Value& v : row) serialize_value(buf, v);
      out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    out.flush();
    if (!out) throw IoError("spill write failure");
    ++spilled_runs_;
    current_.clear();
    bytes_ = 0;
  }

  struct HeapItem {
    Row row;
    std::size_t run;
    const ExternalRowSorter* owner;
    bool operator<(const HeapItem& other) const {
      // std::priority_queue is a max-heap; invert for ascending order. Ties
      // resolve by run index so the merge stays deterministic.
      if (owner->key_less(row, other.row)) return false;
      if (owner->key_less(other.row, row)) return true;
      return run > other.run;
    }
  };

  void open_merge() {
    for (std::size_t r = 0; r < spilled_runs_; ++r) {
      auto stream = std::make_unique<std::ifstream>(dir_->file(r), std::ios::binary);
      if (!*stream) throw IoError("cannot reopen spill run");
      streams_.push_back(std::move(stream));
      readers_.push_back(std::make_unique<RowDeserializer>(*streams_.back()));
      HeapItem item{{}, r, this};
      if (readers_[r]->read_row(item.row, arity_)) heap_.push(std::move(item));
    }
  }

  std::size_t arity_, key_len_, budget_;
  std::filesystem::path spill_parent_;
  std::vector<Row> current_;
  std::size_t bytes_ = 0;
  std::size_t mem_iter_ = 0;
  std::unique_ptr<SpillDir> dir_;
  std::size_t spilled_runs_ = 0;
  std::vector<std::unique_ptr<std::ifstream>> streams_;
  std::vector<std::unique_ptr<RowDeserializer>> readers_;
  std::priority_queue<HeapItem> heap_;
  bool finished_ = false;
};

// Key ordering/equality helpers over the leading key_len values.
inline bool keys_equal(const Row& a, const Row& b, std::size_t key_len) {
  for (std::size_t i = 0; i < key_len; ++i)
    if (value_less(a[i], b[i]) || value_less(b[i], a[i])) return false;
  return true;
}

}  // namespace relops_detail

// ---------------------------------------------------------------------------
// filter / select

class FilterSource : public BatchSource {
public:
  FilterSource(std::unique_ptr<BatchSource> input, Predicate pred)
      : input_(std::move(input)), bound_(pred, *input_->schema()) {}

  SchemaPtr schema() const override { return input_->schema(); }

  std::optional<RecordBatch> next() override {
    while (auto batch = input_->next()) {
      RecordBatch out{batch->schema, {}, batch->capacity};
      for (Row& row : batch->rows)
        if (bound_.matches(row)) out.rows.push_back(std::move(row));
      if (!out.rows.empty()) return out;
    }
    return std::nullopt;
  }

private:
  std::unique_ptr<BatchSource> input_;
  BoundPredicate bound_;
};

class SelectSource : public BatchSource {
public:
  SelectSource(std::unique_ptr<BatchSource> input, const std::vector<std::string>& columns)
      : input_(std::move(input)) {
    const Schema& in = *input_->schema();
    if (columns.empty()) throw PlanError("select needs at least one column");
    std::vector<ColumnMeta> cols;
    for (const std::string& name : columns) {
      indices_.push_back(in.require(name));
      cols.push_back(in[indices_.back()]);
    }
    try {
      schema_ = make_schema(std::move(cols));
    } catch (const SchemaError& e) {
      throw PlanError(e.what());
    }
  }

  SchemaPtr schema() const override { return schema_; }

  std::optional<RecordBatch> next() override {
    auto batch = input_->next();
    if (!batch) return std::nullopt;
    RecordBatch out{schema_, {}, batch->capacity};
    out.rows.reserve(batch->rows.size());
    for (Row& row : batch->rows) {
      Row projected;
      projected.reserve(indices_.size());
      for (std::size_t idx : indices_) projected.push_back(std::move(row[idx]));
      out.rows.push_back(std::move(projected));
    }
    return out;
  }

private:
  std::unique_ptr<BatchSource> input_;
  SchemaPtr schema_;
  std::vector<std::size_t> indices_;
};

inline std::unique_ptr<BatchSource> filter(std::unique_ptr<BatchSource> input,
                                           Predicate pred) {
  return std::make_unique<FilterSource>(std::move(input), std::move(pred));
}

inline std::unique_ptr<BatchSource> select(std::unique_ptr<BatchSource> input,
                                           const std::vector<std::string>& columns) {
  return std::make_unique<SelectSource>(std::move(input), columns);
}

// ---------------------------------------------------------------------------
// unique

// First occurrence of each distinct tuple over the named columns, in input
// order, projected to those columns. Distinctness is exact Value equality.
// Implemented as sort-by-(key, ordinal), take group heads, sort back by
// ordinal; both sorts share the spill machinery, so the distinct set may
// exceed memory.
class UniqueSource : public BatchSource {
public:
  UniqueSource(std::unique_ptr<BatchSource> input, const std::vector<std::string>& columns,
               RelopsConfig cfg = {})
      : cfg_(cfg) {
    if (columns.empty()) throw PlanError("unique needs at least one column");
    projected_ = std::make_unique<SelectSource>(std::move(input), columns);
    schema_ = projected_->schema();
    key_len_ = schema_->size();
  }

  SchemaPtr schema() const override { return schema_; }

  std::optional<RecordBatch> next() override {
    if (!ran_) run();
    RecordBatch out{schema_, {}, cfg_.batch_size};
    while (out.rows.size() < cfg_.batch_size) {
      auto row = by_ordinal_->next();
      if (!row) break;
      row->erase(row->begin());  // drop the ordinal column
      out.rows.push_back(std::move(*row));
    }
    if (out.rows.empty()) return std::nullopt;
    return out;
  }

private:
  void run() {
    ran_ = true;
    using relops_detail::ExternalRowSorter;
    // row layout in sorter 1: key columns, then ordinal
    ExternalRowSorter by_key(key_len_ + 1, key_len_, cfg_.sort_budget_bytes,
                             cfg_.spill_parent);
    std::uint64_t ordinal = 0;
    while (auto batch = projected_->next()) {
      for (Row& row : batch->rows) {
        row.push_back(Value::number(static_cast<double>(ordinal++)));
        by_key.add(std::move(row));
      }
    }
    by_key.finish();

    // row layout in sorter 2: ordinal, then key columns
    by_ordinal_ = std::make_unique<ExternalRowSorter>(key_len_ + 1, 1,
                                                      cfg_.sort_budget_bytes,
                                                      cfg_.spill_parent);
    std::optional<Row> group_head;
    while (auto row = by_key.next()) {
      if (group_head && relops_detail::keys_equal(*group_head, *row, key_len_)) continue;
      group_head = *row;
      Row reordered;
      reordered.reserve(row->size());
      reordered.push_back(row->back());
      for (std::size_t i = 0; i < key_len_; ++i) reordered.push_back(std::move((*row)[i]));
      by_ordinal_->add(std::move(reordered));
    }
    by_ordinal_->finish();
    projected_.reset();
  }

  RelopsConfig cfg_;
  std::unique_ptr<SelectSource> projected_;
  SchemaPtr schema_;
  std::size_t key_len_ = 0;
  bool ran_ = false;
  std::unique_ptr<relops_detail::ExternalRowSorter> by_ordinal_;
};

inline std::unique_ptr<BatchSource> unique(std::unique_ptr<BatchSource> input,
                                           const std::vector<std::string>& columns,
                                           RelopsConfig cfg = {}) {
  return std::make_unique<UniqueSource>(std::move(input), columns, cfg);
}

// ---------------------------------------------------------------------------
// except (anti-join on a key)

// Left rows whose key appears nowhere in right, in left order. Missing key
// values form one equivalence class here: a left row with a missing key
// survives only if right has no missing key of any code. whole_row mode
// uses every column of the left schema as the key.
class ExceptSource : public BatchSource {
public:
  ExceptSource(std::unique_ptr<BatchSource> left, std::unique_ptr<BatchSource> right,
               const std::string& key, RelopsConfig cfg = {})
      : cfg_(cfg), left_(std::move(left)), right_(std::move(right)) {
    schema_ = left_->schema();
    key_cols_ = {schema_->require(key)};
    const Schema& rs = *right_->schema();
    std::size_t r = rs.require(key);
    if (rs[r].type != (*schema_)[key_cols_[0]].type)
      throw PlanError("except key '" + key + "' has mismatched types");
    right_key_cols_ = {r};
  }

  // whole-row mode: every left column is key; right must have the same shape
  ExceptSource(std::unique_ptr<BatchSource> left, std::unique_ptr<BatchSource> right,
               RelopsConfig cfg = {})
      : cfg_(cfg), left_(std::move(left)), right_(std::move(right)) {
    schema_ = left_->schema();
    const Schema& rs = *right_->schema();
    if (!schema_->same_shape(rs))
      throw PlanError("whole-row except needs identical schemas");
    for (std::size_t i = 0; i < schema_->size(); ++i) {
      key_cols_.push_back(i);
      right_key_cols_.push_back(i);
    }
  }

  SchemaPtr schema() const override { return schema_; }

  std::optional<RecordBatch> next() override {
    if (!ran_) run();
    RecordBatch out{schema_, {}, cfg_.batch_size};
    while (out.rows.size() < cfg_.batch_size) {
      auto row = result_->next();
      if (!row) break;
      row->erase(row->begin(), row->begin() + static_cast<std::ptrdiff_t>(key_cols_.size() + 1));
      out.rows.push_back(std::move(*row));
    }
    if (out.rows.empty()) return std::nullopt;
    return out;
  }

private:
  // Missing codes collapse for key comparisons.
  static Value canonical_key(const Value& v) {
    if (v.is_missing()) return Value::missing('.');
    return v;
  }

  void run() {
    ran_ = true;
    using relops_detail::ExternalRowSorter;
    std::size_t k = key_cols_.size();

    ExternalRowSorter right_keys(k + 1, k, cfg_.sort_budget_bytes, cfg_.spill_parent);
    std::uint64_t r_ord = 0;
    while (auto batch = right_->next()) {
      for (Row& row : batch->rows) {
        Row key;
        key.reserve(k + 1);
        for (std::size_t idx : right_key_cols_) key.push_back(canonical_key(row[idx]));
        key.push_back(Value::number(static_cast<double>(r_ord++)));
        right_keys.add(std::move(key));
      }
    }
    right_keys.finish();

    // left rows: (key..., ordinal, full row...)
    ExternalRowSorter left_rows(k + 1 + schema_->size(), k, cfg_.sort_budget_bytes,
                                cfg_.spill_parent);
    std::uint64_t l_ord = 0;
    while (auto batch = left_->next()) {
      for (Row& row : batch->rows) {
        Row item;
        item.reserve(k + 1 + row.size());
        for (std::size_t idx : key_cols_) item.push_back(canonical_key(row[idx]));
        item.push_back(Value::number(static_cast<double>(l_ord++)));
        for (Value& v : row) item.push_back(std::move(v));
        left_rows.add(std::move(item));
      }
    }
    left_rows.finish();

    // merge: keep left rows whose key is absent from right
    result_ = std::make_unique<ExternalRowSorter>(k + 1 + schema_->size(), 1,
                                                  cfg_.sort_budget_bytes,
                                                  cfg_.spill_parent);
    auto right_row = right_keys.next();
    while (auto left_row = left_rows.next()) {
      while (right_row && key_lt(*right_row, *left_row, k)) right_row = right_keys.next();
      bool match = right_row && relops_detail::keys_equal(*right_row, *left_row, k);
      if (!match) {
        // reorder to (ordinal, key..., row...) for the order-restoring sort
        Row reordered;
        reordered.reserve(left_row->size());
        reordered.push_back((*left_row)[k]);
        for (std::size_t i = 0; i < k; ++i) reordered.push_back(std::move((*left_row)[i]));
        for (std::size_t i = k + 1; i < left_row->size(); ++i)
          reordered.push_back(std::move((*left_row)[i]));
        result_->add(std::move(reordered));
      }
    }
    result_->finish();
    left_.reset();
    right_.reset();
  }

  static bool key_lt(const Row& a, const Row& b, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) {
      if (value_less(a[i], b[i])) return true;
      if (value_less(b[i], a[i])) return false;
    }
    return false;
  }

  RelopsConfig cfg_;
  std::unique_ptr<BatchSource> left_, right_;
  SchemaPtr schema_;
  std::vector<std::size_t> key_cols_, right_key_cols_;
  bool ran_ = false;
  std::unique_ptr<relops_detail::ExternalRowSorter> result_;
};

inline std::unique_ptr<BatchSource> except_keyed(std::unique_ptr<BatchSource> left,
                                                 std::unique_ptr<BatchSource> right,
                                                 const std::string& key,
                                                 RelopsConfig cfg = {}) {
  return std::make_unique<ExceptSource>(std::move(left), std::move(right), key, cfg);
}

inline std::unique_ptr<BatchSource> except_rows(std::unique_ptr<BatchSource> left,
                                                std::unique_ptr<BatchSource> right,
                                                RelopsConfig cfg = {}) {
  return std::make_unique<ExceptSource>(std::move(left), std::move(right), cfg);
}

// ---------------------------------------------------------------------------
// inner join

// External sort-merge join. Both sides are sorted by (key, input ordinal);
// the output carries one row per matching pair ordered by (key asc, left
// ordinal, right ordinal), which makes it deterministic for any worker
// count. Rows with missing keys never match. Right-side columns keep their
// names unless they collide with a left column, in which case they get an
// "_r" suffix; the right key column is dropped (it duplicates the left).
class InnerJoinSource : public BatchSource {
public:
  InnerJoinSource(std::unique_ptr<BatchSource> left, std::unique_ptr<BatchSource> right,
                  const JoinSpec& spec, RelopsConfig cfg = {})
      : cfg_(cfg), left_(std::move(left)), right_(std::move(right)) {
    const Schema& ls = *left_->schema();
    const Schema& rs = *right_->schema();
    left_key_ = ls.require(spec.left_key);
    right_key_ = rs.require(spec.right_key);
    if (ls[left_key_].type != rs[right_key_].type)
      throw PlanError("join keys '" + spec.left_key + "' and '" + spec.right_key +
                      "' have mismatched types");

    std::vector<ColumnMeta> cols = ls.columns();
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (i == right_key_) continue;
      ColumnMeta c = rs[i];
      while (std::any_of(cols.begin(), cols.end(),
                         [&](const ColumnMeta& existing) { return existing.name == c.name; }))
        c.name += "_r";
      cols.push_back(std::move(c));
    }
    schema_ = make_schema(std::move(cols));
  }

  SchemaPtr schema() const override { return schema_; }

  std::optional<RecordBatch> next() override {
    if (!ran_) run();
    RecordBatch out{schema_, {}, cfg_.batch_size};
    while (out.rows.size() < cfg_.batch_size) {
      if (!emit_one(out)) break;
    }
    if (out.rows.empty()) return std::nullopt;
    return out;
  }

private:
  using Sorter = relops_detail::ExternalRowSorter;

  // sorter rows: (key, ordinal, payload...)
  std::unique_ptr<Sorter> sort_side(BatchSource& src, std::size_t key_idx) {
    auto sorter = std::make_unique<Sorter>(2 + src.schema()->size(),
                                           1, cfg_.sort_budget_bytes, cfg_.spill_parent);
    std::uint64_t ordinal = 0;
    while (auto batch = src.next()) {
      for (Row& row : batch->rows) {
        if (row[key_idx].is_any_missing()) {
          ++ordinal;
          continue;  // missing keys never match
        }
        Row item;
        item.reserve(2 + row.size());
        item.push_back(row[key_idx]);
        item.push_back(Value::number(static_cast<double>(ordinal++)));
        for (Value& v : row) item.push_back(std::move(v));
        sorter->add(std::move(item));
      }
    }
    sorter->finish();
    return sorter;
  }

  void run() {
    ran_ = true;
    left_sorted_ = sort_side(*left_, left_key_);
    right_sorted_ = sort_side(*right_, right_key_);
    left_.reset();
    right_.reset();
    left_row_ = left_sorted_->next();
    right_row_ = right_sorted_->next();
  }

  bool emit_one(RecordBatch& out) {
    while (true) {
      if (group_index_ < right_group_.size()) {
        out.rows.push_back(join_rows(*left_row_, right_group_[group_index_++]));
        return true;
      }
      if (group_index_ > 0 && group_index_ == right_group_.size()) {
        // finished pairing current left row with the group
        left_row_ = left_sorted_->next();
        group_index_ = 0;
        if (left_row_ && relops_detail::keys_equal(*left_row_, right_group_.front(), 1))
          continue;  // same key: reuse the buffered right group
        right_group_.clear();
      }
      if (!left_row_) return false;
      // advance right to the left key
      while (right_row_ && value_less((*right_row_)[0], (*left_row_)[0]))
        right_row_ = right_sorted_->next();
      if (!right_row_) return false;
      if (value_less((*left_row_)[0], (*right_row_)[0])) {
        left_row_ = left_sorted_->next();
        if (!left_row_) return false;
        continue;
      }
      // equal keys: buffer the right group
      right_group_.clear();
      group_index_ = 0;
      Value key = (*right_row_)[0];
      while (right_row_ && !value_less(key, (*right_row_)[0]) &&
             !value_less((*right_row_)[0], key)) {
        right_group_.push_back(std::move(*right_row_));
        right_row_ = right_sorted_->next();
      }
    }
  }

  Row join_rows(const Row& left_item, const Row& right_item) const {
    Row row;
    row.reserve(schema_->size());
    for (std::size_t i = 2; i < left_item.size(); ++i) row.push_back(left_item[i]);
    for (std::size_t i = 2; i < right_item.size(); ++i) {
      if (i - 2 == right_key_) continue;
      row.push_back(right_item[i]);
    }
    return row;
  }

  RelopsConfig cfg_;
  std::unique_ptr<BatchSource> left_, right_;
  SchemaPtr schema_;
  std::size_t left_key_ = 0, right_key_ = 0;
  bool ran_ = false;
  std::unique_ptr<Sorter> left_sorted_, right_sorted_;
  std::optional<Row> left_row_, right_row_;
  std::vector<Row> right_group_;
  std::size_t group_index_ = 0;
};

inline std::unique_ptr<BatchSource> inner_join(std::unique_ptr<BatchSource> left,
                                               std::unique_ptr<BatchSource> right,
                                               const JoinSpec& spec,
                                               RelopsConfig cfg = {}) {
  return std::make_unique<InnerJoinSource>(std::move(left), std::move(right), spec, cfg);
}

}  // namespace sascsv
