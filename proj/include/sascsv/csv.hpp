#pragma once

// Streaming CSV reader and writer with explicit quoting and missing-value
// policy. RFC 4180 structure, UTF-8 only, LF line endings on output (CRLF
// accepted on input), newlines inside quoted fields supported. Reader and
// writer both run in O(batch) memory.

#include "sascsv/core.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

namespace sascsv {

struct CsvDialect {
  char delimiter = ',';
  enum class QuoteMode { minimal, all };
  QuoteMode quote_mode = QuoteMode::minimal;
  // Text written for missing cells and recognized as missing when reading.
  // The empty default writes true blanks; "NA" reproduces the legacy style.
  std::string na_token;
  bool header_row = true;

  void validate() const {
    if (delimiter == '"' || delimiter == '\n' || delimiter == '\r')
      throw Error("csv delimiter collides with quote or newline");
  }
};

// ---------------------------------------------------------------------------
// Writer

class CsvWriter {
public:
  CsvWriter(std::ostream& out, SchemaPtr schema, CsvDialect dialect = {})
      : out_(out), schema_(std::move(schema)), dialect_(dialect) {
    dialect_.validate();
    if (dialect_.header_row) {
      for (std::size_t i = 0; i < schema_->size(); ++i) {
        if (i) buf_.push_back(dialect_.delimiter);
        append_quoted((*schema_)[i].name);
      }
      buf_.push_back('\n');
      flush_buf();
    }
  }

  void write_row(const Row& row) {
    if (row.size() != schema_->size()) throw Error("row arity mismatch");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) buf_.push_back(dialect_.delimiter);
      append_quoted(format_cell(row[i], dialect_.na_token));
    }
    buf_.push_back('\n');
    if (buf_.size() > 1 << 16) flush_buf();
    ++rows_written_;
  }

  void write_batch(const RecordBatch& batch) {
    for (const Row& r : batch.rows) write_row(r);
  }

  std::uint64_t finish() {
    flush_buf();
    out_.flush();
    if (!out_) throw IoError("csv sink write failure");
    return rows_written_;
  }

private:
  void append_quoted(std::string_view cell) {
    bool need_quote = dialect_.quote_mode == CsvDialect::QuoteMode::all;
    if (!need_quote) {
      for (char c : cell)
        if (c == dialect_.delimiter || c == '"' || c == '\n' || c == '\r') {
          need_quote = true;
          break;
        }
    }
    if (!need_quote) {
      buf_.append(cell);
      return;
    }
    buf_.push_back('"');
    for (char c : cell) {
      if (c == '"') buf_.push_back('"');
      buf_.push_back(c);
    }
    buf_.push_back('"');
  }

  void flush_buf() {
    out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out_) throw IoError("csv sink write failure");
    buf_.clear();
  }

  std::ostream& out_;
  SchemaPtr schema_;
  CsvDialect dialect_;
  std::string buf_;
  std::uint64_t rows_written_ = 0;
};

inline std::uint64_t write_csv(const Schema& schema, BatchSource& batches,
                               const CsvDialect& dialect, std::ostream& out) {
  CsvWriter writer(out, std::make_shared<const Schema>(schema), dialect);
  while (auto batch = batches.next()) writer.write_batch(*batch);
  return writer.finish();
}

// ---------------------------------------------------------------------------
// Tokenizer: pulls one record at a time from a buffered stream.

namespace csv_detail {

class RecordScanner {
public:
  RecordScanner(std::istream& in, char delimiter) : in_(in), delim_(delimiter) {}

  // Splits the next record into fields. Returns false at end of input.
  // Physical line accounting: line() is the first line of the record.
  bool next_record(std::vector<std::string>& fields) {
    fields.clear();
    record_line_ = line_;
    if (!pending_started_ && peek() == kEof) return false;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    while (true) {
      int c = get();
      if (in_quotes) {
        if (c == kEof) throw FormatError("line " + std::to_string(record_line_) +
                                         ": unterminated quoted field");
        if (c == '"') {
          if (peek() == '"') {
            get();
            field.push_back('"');
          } else {
            in_quotes = false;
          }
        } else {
          if (c == '\n') ++line_;
          field.push_back(static_cast<char>(c));
        }
        continue;
      }
      if (c == '"' && field.empty() && !field_was_quoted) {
        in_quotes = true;
        field_was_quoted = true;
        continue;
      }
      if (c == static_cast<unsigned char>(delim_)) {
        fields.push_back(std::move(field));
        field.clear();
        field_was_quoted = false;
        continue;
      }
      if (c == '\r') {
        if (peek() == '\n') get();
        c = '\n';
      }
      if (c == '\n' || c == kEof) {
        if (c == '\n') ++line_;
        fields.push_back(std::move(field));
        pending_started_ = false;
        return true;
      }
      if (field_was_quoted)
        throw FormatError("line " + std::to_string(line_) +
                          ": data after closing quote");
      field.push_back(static_cast<char>(c));
    }
  }

  std::size_t line() const { return record_line_; }

private:
  static constexpr int kEof = -1;

  int peek() {
    if (pos_ >= len_) refill();
    if (len_ == 0) return kEof;
    return static_cast<unsigned char>(buf_[pos_]);
  }

  int get() {
    int c = peek();
    if (c != kEof) {
      ++pos_;
      pending_started_ = true;
    }
    return c;
  }

  void refill() {
    in_.read(buf_, sizeof(buf_));
    len_ = static_cast<std::size_t>(in_.gcount());
    pos_ = 0;
    if (first_chunk_) {
      first_chunk_ = false;
      // UTF-8 byte-order mark
      if (len_ >= 3 && static_cast<unsigned char>(buf_[0]) == 0xEF &&
          static_cast<unsigned char>(buf_[1]) == 0xBB &&
          static_cast<unsigned char>(buf_[2]) == 0xBF)
        pos_ = 3;
    }
  }

  std::istream& in_;
  char delim_;
  char buf_[1 << 16];
  std::size_t pos_ = 0, len_ = 0;
  bool first_chunk_ = true;
  std::size_t line_ = 1;
  std::size_t record_line_ = 1;
  bool pending_started_ = false;
};

}  // namespace csv_detail

// ---------------------------------------------------------------------------
// Reader

class CsvReader {
public:
  // Without an explicit schema the file is scanned twice: the first pass
  // infers Numeric for columns whose every non-missing cell parses as a
  // number (and records character widths), the second streams batches.
  CsvReader(const std::filesystem::path& path, CsvDialect dialect = {},
            std::optional<Schema> schema = std::nullopt)
      : path_(path.string()), dialect_(dialect) {
    dialect_.validate();
    if (schema) {
      schema_ = std::make_shared<const Schema>(std::move(*schema));
    } else {
      infer_schema();
    }
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open " + path_);
    scanner_ = std::make_unique<csv_detail::RecordScanner>(in_, dialect_.delimiter);
    if (dialect_.header_row) {
      std::vector<std::string> header;
      if (scanner_->next_record(header)) {
        if (header.size() != schema_->size())
          throw FormatError(path_ + ": line 1: header has " +
                            std::to_string(header.size()) + " fields, schema has " +
                            std::to_string(schema_->size()));
      } else {
        at_end_ = true;
      }
    }
  }

  SchemaPtr schema_ptr() const { return schema_; }
  const Schema& schema() const { return *schema_; }

  std::optional<RecordBatch> next_batch(std::size_t max_rows) {
    if (max_rows == 0) return RecordBatch{schema_, {}, 0};
    if (at_end_) return std::nullopt;
    RecordBatch batch{schema_, {}, max_rows};
    std::vector<std::string> fields;
    while (batch.rows.size() < max_rows) {
      if (!scanner_->next_record(fields)) {
        at_end_ = true;
        break;
      }
      batch.rows.push_back(coerce_record(fields, scanner_->line()));
    }
    if (batch.rows.empty()) return std::nullopt;
    return batch;
  }

private:
  Row coerce_record(const std::vector<std::string>& fields, std::size_t line) const {
    if (fields.size() != schema_->size())
      throw FormatError(path_ + ": line " + std::to_string(line) + ": expected " +
                        std::to_string(schema_->size()) + " fields, got " +
                        std::to_string(fields.size()));
    Row row;
    row.reserve(fields.size());
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const std::string& text = fields[c];
      ColumnType type = (*schema_)[c].type;
      if (text == dialect_.na_token) {
        row.push_back(type == ColumnType::numeric ? Value::missing('.')
                                                  : Value::character(""));
        continue;
      }
      try {
        row.push_back(coerce_cell(text, type));
      } catch (const CellTypeError& e) {
        throw CellTypeError(path_ + ": line " + std::to_string(line) + ", column '" +
                                (*schema_)[c].name + "': " + e.what(),
                            e.offending_text);
      }
    }
    return row;
  }

  void infer_schema() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot open " + path_);
    csv_detail::RecordScanner scanner(in, dialect_.delimiter);
    std::vector<std::string> fields;
    std::vector<std::string> names;
    std::vector<bool> numeric_ok;
    std::vector<std::size_t> max_width;
    std::uint64_t data_rows = 0;
    bool first = true;
    while (scanner.next_record(fields)) {
      if (first) {
        first = false;
        if (dialect_.header_row) {
          names = fields;
          numeric_ok.assign(names.size(), true);
          max_width.assign(names.size(), 0);
          continue;
        }
        for (std::size_t i = 0; i < fields.size(); ++i)
          names.push_back("v" + std::to_string(i + 1));
        numeric_ok.assign(names.size(), true);
        max_width.assign(names.size(), 0);
      }
      if (fields.size() != names.size())
        throw FormatError(path_ + ": line " + std::to_string(scanner.line()) +
                          ": expected " + std::to_string(names.size()) +
                          " fields, got " + std::to_string(fields.size()));
      ++data_rows;
      for (std::size_t c = 0; c < fields.size(); ++c) {
        const std::string& text = fields[c];
        max_width[c] = std::max(max_width[c], text.size());
        if (numeric_ok[c] && text != dialect_.na_token &&
            !try_coerce_numeric(text).has_value())
          numeric_ok[c] = false;
      }
    }
    if (names.empty())
      throw FormatError(path_ + ": empty file, cannot infer a schema");
    std::vector<ColumnMeta> cols;
    for (std::size_t c = 0; c < names.size(); ++c) {
      ColumnMeta col;
      col.name = names[c];
      col.type = numeric_ok[c] ? ColumnType::numeric : ColumnType::character;
      col.width = numeric_ok[c]
                      ? 8
                      : static_cast<int>(std::max<std::size_t>(1, max_width[c]));
      cols.push_back(std::move(col));
    }
    schema_ = make_schema(std::move(cols), data_rows);
  }

  std::string path_;
  CsvDialect dialect_;
  SchemaPtr schema_;
  std::ifstream in_;
  std::unique_ptr<csv_detail::RecordScanner> scanner_;
  bool at_end_ = false;
};

inline std::pair<SchemaPtr, std::unique_ptr<CsvReader>> read_csv(
    const std::filesystem::path& path, CsvDialect dialect = {},
    std::optional<Schema> schema = std::nullopt) {
  auto reader = std::make_unique<CsvReader>(path, dialect, std::move(schema));
  return {reader->schema_ptr(), std::move(reader)};
}

class CsvSource : public BatchSource {
public:
  CsvSource(const std::filesystem::path& path, CsvDialect dialect = {},
            std::optional<Schema> schema = std::nullopt, std::size_t batch_size = 1024)
      : reader_(path, dialect, std::move(schema)),
        batch_size_(batch_size == 0 ? 1 : batch_size) {}

  SchemaPtr schema() const override { return reader_.schema_ptr(); }
  std::optional<RecordBatch> next() override { return reader_.next_batch(batch_size_); }

private:
  CsvReader reader_;
  std::size_t batch_size_;
};

}  // namespace sascsv
