#pragma once

// Core tabular types shared by every codec and operator: column metadata,
// cell values with SAS missing-value semantics, and row batches.

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace sascsv {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated input data (binary framing, CSV structure, ...).
class FormatError : public Error {
public:
  using Error::Error;
};

// Structurally valid input using a feature we deliberately do not support.
class UnsupportedFeatureError : public Error {
public:
  using Error::Error;
};

// Schema-level contract violations (duplicate names, bad widths, ...).
class SchemaError : public Error {
public:
  using Error::Error;
};

// Value outside the representable range of the target encoding.
class RangeError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

// Cell text that cannot be coerced to the column's type.
class CellTypeError : public Error {
public:
  CellTypeError(const std::string& msg, std::string offending)
      : Error(msg), offending_text(std::move(offending)) {}
  std::string offending_text;
};

// Invalid query plan: unknown columns, type mismatches, bad operators.
class PlanError : public Error {
public:
  using Error::Error;
};

// Malformed task-spec line.
class SpecError : public Error {
public:
  using Error::Error;
};

// Malformed manifest (duplicate basenames and the like).
class ManifestError : public Error {
public:
  using Error::Error;
};

// Run-level failure of a shared prerequisite (unwritable log dir, ...).
class RunError : public Error {
public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Schema

enum class ColumnType : std::uint8_t { numeric, character };

inline const char* to_string(ColumnType t) {
  return t == ColumnType::numeric ? "numeric" : "character";
}

struct ColumnMeta {
  std::string name;
  ColumnType type = ColumnType::numeric;
  // Storage width in the source format: numeric 3..8 bytes, character >= 1.
  int width = 8;
  std::string label;
  // SAS display format, carried verbatim and never interpreted.
  std::string format;
};

class Schema {
public:
  Schema() = default;

  explicit Schema(std::vector<ColumnMeta> columns,
                  std::optional<std::uint64_t> row_count_hint = std::nullopt)
      : columns_(std::move(columns)), row_count_hint_(row_count_hint) {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      const ColumnMeta& c = columns_[i];
      if (c.name.empty())
        throw SchemaError("column " + std::to_string(i) + " has an empty name");
      if (c.type == ColumnType::numeric && (c.width < 3 || c.width > 8))
        throw SchemaError("numeric column '" + c.name + "' has width " +
                          std::to_string(c.width) + ", expected 3..8");
      if (c.type == ColumnType::character && c.width < 1)
        throw SchemaError("character column '" + c.name + "' has width " +
                          std::to_string(c.width) + ", expected >= 1");
      if (!index_.emplace(c.name, i).second)
        throw SchemaError("duplicate column name '" + c.name + "'");
    }
  }

  std::size_t size() const { return columns_.size(); }
  bool empty() const { return columns_.empty(); }
  const ColumnMeta& at(std::size_t i) const { return columns_.at(i); }
  const ColumnMeta& operator[](std::size_t i) const { return columns_[i]; }
  const std::vector<ColumnMeta>& columns() const { return columns_; }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Lookup that throws PlanError, for operator validation.
  std::size_t require(std::string_view name) const {
    auto idx = find(name);
    if (!idx) throw PlanError("unknown column '" + std::string(name) + "'");
    return *idx;
  }

  std::optional<std::uint64_t> row_count_hint() const { return row_count_hint_; }

  auto begin() const { return columns_.begin(); }
  auto end() const { return columns_.end(); }

  bool same_shape(const Schema& other) const {
    if (columns_.size() != other.columns_.size()) return false;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (columns_[i].name != other.columns_[i].name ||
          columns_[i].type != other.columns_[i].type)
        return false;
    }
    return true;
  }

private:
  std::vector<ColumnMeta> columns_;
  std::optional<std::uint64_t> row_count_hint_;
  std::unordered_map<std::string, std::size_t> index_;
};

using SchemaPtr = std::shared_ptr<const Schema>;

inline SchemaPtr make_schema(std::vector<ColumnMeta> columns,
                             std::optional<std::uint64_t> hint = std::nullopt) {
  return std::make_shared<const Schema>(std::move(columns), hint);
}

// ---------------------------------------------------------------------------
// Value

inline bool is_missing_code(char c) {
  return c == '.' || c == '_' || (c >= 'A' && c <= 'Z');
}

// One cell: a finite double, a numeric missing code ('.', 'A'..'Z', '_'),
// or a character string (empty string is the character-missing value).
class Value {
public:
  Value() : v_(std::in_place_index<1>, '.') {}

  static Value number(double d) {
    if (std::isnan(d)) return missing('.');
    Value v;
    v.v_.emplace<0>(d);
    return v;
  }

  static Value missing(char code = '.') {
    if (!is_missing_code(code))
      throw Error(std::string("invalid missing code '") + code + "'");
    Value v;
    v.v_.emplace<1>(code);
    return v;
  }

  static Value character(std::string s) {
    Value v;
    v.v_.emplace<2>(std::move(s));
    return v;
  }

  bool is_number() const { return v_.index() == 0; }
  bool is_missing() const { return v_.index() == 1; }
  bool is_character() const { return v_.index() == 2; }
  bool is_numeric_kind() const { return v_.index() <= 1; }

  // True for both the numeric missing codes and the empty character string.
  bool is_any_missing() const {
    return is_missing() || (is_character() && std::get<2>(v_).empty());
  }

  double as_number() const { return std::get<0>(v_); }
  char missing_code() const { return std::get<1>(v_); }
  const std::string& as_character() const { return std::get<2>(v_); }

  ColumnType column_type() const {
    return is_character() ? ColumnType::character : ColumnType::numeric;
  }

  // Numbers compare by exact bit pattern; missing codes are distinct values.
  friend bool operator==(const Value& a, const Value& b) {
    if (a.v_.index() != b.v_.index()) return false;
    switch (a.v_.index()) {
      case 0:
        return std::bit_cast<std::uint64_t>(std::get<0>(a.v_)) ==
               std::bit_cast<std::uint64_t>(std::get<0>(b.v_));
      case 1:
        return std::get<1>(a.v_) == std::get<1>(b.v_);
      default:
        return std::get<2>(a.v_) == std::get<2>(b.v_);
    }
  }
  friend bool operator!=(const Value& a, const Value& b) { return !(a == b); }

private:
  std::variant<double, char, std::string> v_;
};

// Sort rank of a missing code: '.' < 'A' .. 'Z' < '_'.
inline int missing_code_rank(char code) {
  if (code == '.') return 0;
  if (code == '_') return 27;
  return 1 + (code - 'A');
}

// Total order used by sorts and merge joins. Numeric: every missing code
// sorts below every number (missing-sorts-low), numbers by value with bit
// pattern as the final tiebreak so -0.0 and 0.0 stay distinct and ordered.
// Character: lexicographic byte order.
inline bool value_less(const Value& a, const Value& b) {
  if (a.is_character() && b.is_character()) return a.as_character() < b.as_character();
  const bool am = a.is_missing(), bm = b.is_missing();
  if (am && bm) return missing_code_rank(a.missing_code()) < missing_code_rank(b.missing_code());
  if (am != bm) return am;  // missing sorts low
  // Monotone key: order agrees with < and puts -0.0 just below 0.0.
  auto key = [](double d) {
    auto bits = std::bit_cast<std::uint64_t>(d);
    return (bits & 0x8000000000000000ull) ? ~bits : (bits | 0x8000000000000000ull);
  };
  return key(a.as_number()) < key(b.as_number());
}

// ---------------------------------------------------------------------------
// RecordBatch

using Row = std::vector<Value>;

struct RecordBatch {
  SchemaPtr schema;
  std::vector<Row> rows;
  // Maximum rows this batch was sized for; 0 means unspecified.
  std::size_t capacity = 0;

  std::size_t row_count() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
};

struct BatchViolation {
  std::size_t row = 0;
  std::size_t column = 0;
  std::string reason;
};

// Returns the first invariant violation, or nullopt when the batch is valid.
inline std::optional<BatchViolation> validate_batch(const RecordBatch& batch) {
  if (!batch.schema) return BatchViolation{0, 0, "missing schema"};
  const Schema& schema = *batch.schema;
  if (batch.capacity > 0 && batch.rows.size() > batch.capacity)
    return BatchViolation{0, 0, "capacity"};
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    const Row& row = batch.rows[r];
    if (row.size() != schema.size()) return BatchViolation{r, 0, "arity"};
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (row[c].column_type() != schema[c].type) return BatchViolation{r, c, "type"};
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Cell coercion and formatting

// ---------------------------------------------------------------------------
// Batch streams

// Pull-based stream of record batches; the unit every pipeline stage
// consumes and produces. Sources are single-consumer; distinct sources are
// freely concurrent.
class BatchSource {
public:
  virtual ~BatchSource() = default;
  virtual SchemaPtr schema() const = 0;
  // nullopt signals end-of-data; returned batches are never empty.
  virtual std::optional<RecordBatch> next() = 0;
};

class MemorySource : public BatchSource {
public:
  MemorySource(SchemaPtr schema, std::vector<Row> rows, std::size_t batch_size = 1024)
      : schema_(std::move(schema)), rows_(std::move(rows)),
        batch_size_(batch_size == 0 ? 1 : batch_size) {}

  SchemaPtr schema() const override { return schema_; }

  std::optional<RecordBatch> next() override {
    if (pos_ >= rows_.size()) return std::nullopt;
    RecordBatch batch{schema_, {}, batch_size_};
    while (pos_ < rows_.size() && batch.rows.size() < batch_size_)
      batch.rows.push_back(std::move(rows_[pos_++]));
    return batch;
  }

private:
  SchemaPtr schema_;
  std::vector<Row> rows_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
};

// Drains a source into memory; test and small-input helper.
inline std::vector<Row> drain(BatchSource& src) {
  std::vector<Row> rows;
  while (auto batch = src.next())
    for (Row& r : batch->rows) rows.push_back(std::move(r));
  return rows;
}

namespace detail {

inline std::string_view trim_ascii(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Missing-token recognition for numeric cells: "", ".", ".A"..".Z" and "._"
// (letter case-insensitive).
inline std::optional<char> parse_missing_token(std::string_view raw) {
  std::string_view s = detail::trim_ascii(raw);
  if (s.empty()) return '.';
  if (s.size() == 1 && s[0] == '.') return '.';
  if (s.size() == 2 && s[0] == '.') {
    char c = s[1];
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    if (c == '_' || (c >= 'A' && c <= 'Z')) return c;
  }
  return std::nullopt;
}

// Numeric interpretation of a cell, nullopt when the text is not a finite
// decimal number or missing token.
inline std::optional<Value> try_coerce_numeric(std::string_view raw) {
  if (auto code = parse_missing_token(raw)) return Value::missing(*code);
  std::string_view s = detail::trim_ascii(raw);
  double d = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && s.front() == '+') ++first;  // from_chars rejects leading '+'
  auto [ptr, ec] = std::from_chars(first, last, d);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  if (!std::isfinite(d)) return std::nullopt;
  return Value::number(d);
}

// Types a raw cell under the given column type. Total for character columns;
// throws CellTypeError for numeric text that is neither a number nor a
// missing token.
inline Value coerce_cell(std::string_view raw, ColumnType type) {
  if (type == ColumnType::character) return Value::character(std::string(raw));
  if (auto v = try_coerce_numeric(raw)) return *v;
  throw CellTypeError("cannot coerce '" + std::string(raw) + "' to a number",
                      std::string(raw));
}

// Shortest decimal representation that parses back to the same double.
inline std::string format_number(double d) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), d);
  (void)ec;
  return std::string(buf, ptr);
}

// Raw (unquoted) cell text. Plain missing ('.') and the empty character
// string emit na_token; tagged missing codes emit ".X" so they survive a
// round trip through coerce_cell.
inline std::string format_cell(const Value& v, std::string_view na_token) {
  if (v.is_number()) return format_number(v.as_number());
  if (v.is_missing()) {
    char code = v.missing_code();
    if (code == '.') return std::string(na_token);
    return std::string{'.', code};
  }
  if (v.as_character().empty()) return std::string(na_token);  // character missing
  return v.as_character();
}

}  // namespace sascsv
