#pragma once

// SAS Transport (XPORT) Version 5 writer and reader. 80-byte records,
// "HEADER RECORD*******" sentinels, big-endian NAMESTR fields, observation
// values in IBM/360 hexadecimal floating point. The writer implements the
// CSV-to-SAS direction; the reader exists as its round-trip verifier and
// query input.

#include "sascsv/core.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

namespace sascsv {

// ---------------------------------------------------------------------------
// IBM/360 hexadecimal floating point
//
// 1 sign bit, 7-bit excess-64 base-16 exponent, 56-bit fraction. Conversion
// from IEEE is exact (the fraction has three spare bits); conversion back
// rounds to nearest even and is exact on anything ieee_to_ibm produced.

inline std::array<std::uint8_t, 8> ieee_to_ibm(double f) {
  std::array<std::uint8_t, 8> out{};
  std::uint64_t bits = std::bit_cast<std::uint64_t>(f);
  std::uint64_t sign = bits >> 63;
  int exp = static_cast<int>((bits >> 52) & 0x7FF);
  std::uint64_t mant = bits & 0x000FFFFFFFFFFFFFull;
  if (exp == 0x7FF)
    throw RangeError("infinite or NaN value has no transport representation");
  if (exp == 0 || f == 0.0) {
    // Zero and subnormals (all far below the smallest IBM magnitude).
    out[0] = static_cast<std::uint8_t>(sign << 7);
    return out;
  }
  int unbiased = exp - 1023;
  int shift = unbiased & 3;
  int ibm_exp = ((unbiased - shift) >> 2) + 65;
  if (ibm_exp > 127)
    throw RangeError("magnitude " + format_number(f) +
                     " exceeds the transport float range (~7.23e75)");
  if (ibm_exp < 0) {
    out[0] = static_cast<std::uint8_t>(sign << 7);
    return out;
  }
  std::uint64_t frac = (mant | (1ull << 52)) << shift;  // 56-bit fraction
  out[0] = static_cast<std::uint8_t>((sign << 7) | static_cast<unsigned>(ibm_exp));
  for (int i = 0; i < 7; ++i)
    out[1 + i] = static_cast<std::uint8_t>((frac >> (8 * (6 - i))) & 0xFF);
  return out;
}

inline double ibm_to_ieee(const std::uint8_t* b) {
  std::uint64_t frac = 0;
  for (int i = 1; i < 8; ++i) frac = (frac << 8) | b[i];
  bool neg = (b[0] & 0x80) != 0;
  if (frac == 0) return neg ? -0.0 : 0.0;
  int ibm_exp = b[0] & 0x7F;
  // value = frac * 16^(exp-64) / 2^56; the uint64->double conversion
  // supplies round-to-nearest-even for the three excess fraction bits.
  double mag = std::ldexp(static_cast<double>(frac), 4 * ibm_exp - 312);
  return neg ? -mag : mag;
}

inline double ibm_to_ieee(const std::array<std::uint8_t, 8>& b) {
  return ibm_to_ieee(b.data());
}

// Observation encoding of a numeric missing value: the code byte followed
// by zeros.
inline bool is_xport_missing(const std::uint8_t* field, std::size_t width) {
  std::uint8_t b0 = field[0];
  if (!(b0 == 0x2E || b0 == 0x5F || (b0 >= 0x41 && b0 <= 0x5A))) return false;
  for (std::size_t i = 1; i < width; ++i)
    if (field[i] != 0) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Record plumbing

namespace xport_detail {

constexpr std::size_t kRecordLen = 80;
constexpr std::size_t kNamestrLen = 140;

constexpr const char* kLibraryHeader =
    "HEADER RECORD*******LIBRARY HEADER RECORD!!!!!!!"
    "000000000000000000000000000000  ";
constexpr const char* kMemberHeaderPrefix =
    "HEADER RECORD*******MEMBER  HEADER RECORD!!!!!!!000000000000000001600000000";
constexpr const char* kDscrptrHeader =
    "HEADER RECORD*******DSCRPTR HEADER RECORD!!!!!!!"
    "000000000000000000000000000000  ";
constexpr const char* kObsHeader =
    "HEADER RECORD*******OBS     HEADER RECORD!!!!!!!"
    "000000000000000000000000000000  ";

// Fixed timestamp: transport output must be byte-identical across runs.
constexpr const char* kTimestamp = "01JAN60:00:00:00";

inline std::string pad80(std::string s) {
  s.resize(kRecordLen, ' ');
  return s;
}

inline void put_be16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 8);
  p[1] = static_cast<std::uint8_t>(v & 0xFF);
}

inline void put_be32(std::uint8_t* p, std::uint32_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 24);
  p[1] = static_cast<std::uint8_t>(v >> 16);
  p[2] = static_cast<std::uint8_t>(v >> 8);
  p[3] = static_cast<std::uint8_t>(v);
}

inline std::uint16_t get_be16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

inline void put_field(std::uint8_t* p, std::string_view s, std::size_t width) {
  std::size_t n = std::min(s.size(), width);
  std::memcpy(p, s.data(), n);
  std::memset(p + n, ' ', width - n);
}

// V5 variable names: at most 8 bytes, uppercased, deduplicated with a
// numeric suffix when truncation collides.
inline std::vector<std::string> transport_names(const Schema& schema,
                                                std::vector<std::pair<std::string, std::string>>* renames) {
  std::vector<std::string> out;
  std::vector<std::string> taken;
  for (const ColumnMeta& col : schema.columns()) {
    std::string base;
    for (char c : col.name) {
      unsigned char u = static_cast<unsigned char>(c);
      base.push_back(u >= 'a' && u <= 'z' ? static_cast<char>(u - 'a' + 'A')
                                          : static_cast<char>(u));
    }
    if (base.size() > 8) base.resize(8);
    std::string candidate = base;
    int suffix = 0;
    while (std::find(taken.begin(), taken.end(), candidate) != taken.end()) {
      ++suffix;
      if (suffix > 99)
        throw SchemaError("cannot disambiguate transport name for column '" +
                          col.name + "'");
      std::string digits = std::to_string(suffix);
      std::string stem = base;
      if (stem.size() + digits.size() > 8) stem.resize(8 - digits.size());
      candidate = stem + digits;
    }
    taken.push_back(candidate);
    if (renames && candidate != col.name)
      renames->push_back({col.name, candidate});
    out.push_back(candidate);
  }
  return out;
}

}  // namespace xport_detail

// ---------------------------------------------------------------------------
// Writer

struct XportMemberSummary {
  std::uint64_t rows_written = 0;
  std::uint64_t bytes_written = 0;
  // original -> transport name, for every column whose name changed
  std::vector<std::pair<std::string, std::string>> renamed;
};

class XportWriter {
public:
  XportWriter(std::ostream& out, const Schema& schema, std::string member_name = "DATA")
      : out_(out), schema_(schema) {
    using namespace xport_detail;
    validate_schema();
    names_ = transport_names(schema_, &summary_.renamed);
    for (char& c : member_name)
      if (c >= 'a' && c <= 'z') c += 'A' - 'a';
    if (member_name.size() > 8) member_name.resize(8);

    row_length_ = 0;
    for (const ColumnMeta& c : schema_.columns())
      row_length_ += c.type == ColumnType::numeric ? 8 : static_cast<std::size_t>(c.width);

    write_record(kLibraryHeader);
    write_record(pad80(std::string("SAS     SAS     SASLIB  ") + "6.06    " +
                       "bsd4.2  " + std::string(24, ' ') + kTimestamp));
    write_record(pad80(kTimestamp));
    write_record(pad80(std::string(kMemberHeaderPrefix) + "140"));
    write_record(kDscrptrHeader);
    {
      std::string rec = "SAS     ";
      rec += member_name;
      rec.resize(16, ' ');
      rec += "SASDATA 6.06    bsd4.2  ";
      rec.resize(64, ' ');
      rec += kTimestamp;
      write_record(pad80(std::move(rec)));
    }
    write_record(pad80(std::string(kTimestamp)));
    {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%05zu", schema_.size());
      std::string rec = "HEADER RECORD*******NAMESTR HEADER RECORD!!!!!!!00000";
      rec += buf;
      write_record(pad80(std::move(rec)));
    }
    write_namestrs();
    write_record(kObsHeader);
  }

  void write_row(const Row& row) {
    using namespace xport_detail;
    if (row.size() != schema_.size()) throw Error("row arity mismatch");
    row_buf_.assign(row_length_, 0);
    std::size_t pos = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const ColumnMeta& col = schema_[c];
      if (col.type == ColumnType::numeric) {
        const Value& v = row[c];
        if (v.is_missing()) {
          row_buf_[pos] = static_cast<std::uint8_t>(v.missing_code());
        } else {
          std::array<std::uint8_t, 8> ibm;
          try {
            ibm = ieee_to_ibm(v.as_number());
          } catch (const RangeError& e) {
            throw RangeError("row " + std::to_string(summary_.rows_written) +
                             ", column '" + col.name + "': " + e.what());
          }
          std::memcpy(row_buf_.data() + pos, ibm.data(), 8);
        }
        pos += 8;
      } else {
        put_field(row_buf_.data() + pos, row[c].as_character(),
                  static_cast<std::size_t>(col.width));
        pos += static_cast<std::size_t>(col.width);
      }
    }
    write_bytes(row_buf_.data(), row_buf_.size());
    ++summary_.rows_written;
  }

  void write_batch(const RecordBatch& batch) {
    for (const Row& r : batch.rows) write_row(r);
  }

  // Pads the final record with blanks; the summary reports rows and bytes.
  XportMemberSummary finish() {
    using namespace xport_detail;
    if (!finished_) {
      finished_ = true;
      if (bytes_written_ % kRecordLen) {
        std::string pad(kRecordLen - bytes_written_ % kRecordLen, ' ');
        write_bytes(reinterpret_cast<const std::uint8_t*>(pad.data()), pad.size());
      }
      out_.flush();
      if (!out_) throw IoError("transport sink write failure");
      summary_.bytes_written = bytes_written_;
    }
    return summary_;
  }

private:
  void validate_schema() {
    for (const ColumnMeta& c : schema_.columns()) {
      if (c.type == ColumnType::character && c.width > 200)
        throw SchemaError("character column '" + c.name + "' is wider than the "
                          "transport limit of 200 bytes");
    }
    if (schema_.empty()) throw SchemaError("transport member needs at least one column");
  }

  void write_namestrs() {
    using namespace xport_detail;
    std::uint32_t pos = 0;
    for (std::size_t i = 0; i < schema_.size(); ++i) {
      const ColumnMeta& col = schema_[i];
      std::array<std::uint8_t, kNamestrLen> ns{};
      std::uint16_t width =
          col.type == ColumnType::numeric ? 8 : static_cast<std::uint16_t>(col.width);
      put_be16(ns.data() + 0, col.type == ColumnType::numeric ? 1 : 2);  // ntype
      put_be16(ns.data() + 2, 0);                                        // nhfun
      put_be16(ns.data() + 4, width);                                    // nlng
      put_be16(ns.data() + 6, static_cast<std::uint16_t>(i + 1));        // nvar0
      put_field(ns.data() + 8, names_[i], 8);                            // nname
      put_field(ns.data() + 16, col.label, 40);                          // nlabel
      put_field(ns.data() + 56, col.format, 8);                          // nform
      put_field(ns.data() + 72, col.format, 8);                          // niform
      put_be32(ns.data() + 84, pos);                                     // npos
      write_bytes(ns.data(), ns.size());
      pos += width;
    }
    using xport_detail::kRecordLen;
    if (bytes_written_ % kRecordLen) {
      std::string pad(kRecordLen - bytes_written_ % kRecordLen, ' ');
      write_bytes(reinterpret_cast<const std::uint8_t*>(pad.data()), pad.size());
    }
  }

  void write_record(std::string_view rec) {
    write_bytes(reinterpret_cast<const std::uint8_t*>(rec.data()), rec.size());
  }

  void write_bytes(const std::uint8_t* p, std::size_t n) {
    out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("transport sink write failure");
    bytes_written_ += n;
  }

  std::ostream& out_;
  Schema schema_;
  std::vector<std::string> names_;
  std::size_t row_length_ = 0;
  std::vector<std::uint8_t> row_buf_;
  std::uint64_t bytes_written_ = 0;
  XportMemberSummary summary_;
  bool finished_ = false;
};

inline XportMemberSummary write_xport(const Schema& schema, BatchSource& batches,
                                      std::ostream& out,
                                      std::string member_name = "DATA") {
  XportWriter writer(out, schema, std::move(member_name));
  while (auto batch = batches.next()) writer.write_batch(*batch);
  return writer.finish();
}

// ---------------------------------------------------------------------------
// Reader

class XportReader {
public:
  explicit XportReader(const std::filesystem::path& path)
      : path_(path.string()), in_(path, std::ios::binary) {
    using namespace xport_detail;
    if (!in_) throw IoError("cannot open " + path_);
    in_.seekg(0, std::ios::end);
    file_size_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0);
    if (file_size_ % kRecordLen != 0)
      throw FormatError(path_ + ": length " + std::to_string(file_size_) +
                        " is not a multiple of 80 (record " +
                        std::to_string(file_size_ / kRecordLen) + " is short)");
    read_header();
  }

  const Schema& schema() const { return *schema_; }
  SchemaPtr schema_ptr() const { return schema_; }
  const std::string& member_name() const { return member_name_; }

  std::optional<RecordBatch> next_batch(std::size_t max_rows) {
    if (max_rows == 0) return RecordBatch{schema_, {}, 0};
    RecordBatch batch{schema_, {}, max_rows};
    while (batch.rows.size() < max_rows) {
      if (!fill_row()) break;
      batch.rows.push_back(decode_row());
    }
    if (batch.rows.empty()) return std::nullopt;
    return batch;
  }

private:
  struct Field {
    std::string name;
    bool numeric = false;
    std::size_t width = 0;  // bytes in the observation record
  };

  void expect_record(const char* want, const char* what) {
    std::string rec = read_record(what);
    if (rec != want)
      throw FormatError(path_ + ": malformed " + std::string(what) + " record (record " +
                        std::to_string(records_read_ - 1) + ")");
  }

  std::string read_record(const char* what) {
    using namespace xport_detail;
    std::string rec(kRecordLen, '\0');
    in_.read(rec.data(), kRecordLen);
    if (static_cast<std::size_t>(in_.gcount()) != kRecordLen)
      throw FormatError(path_ + ": truncated " + std::string(what) + " record " +
                        std::to_string(records_read_));
    ++records_read_;
    return rec;
  }

  void read_header() {
    using namespace xport_detail;
    std::string rec = read_record("library header");
    if (rec != kLibraryHeader)
      throw FormatError(path_ + ": not a transport (XPORT V5) file");
    read_record("library descriptor");  // SAS SAS SASLIB ...
    read_record("modification timestamp");

    rec = read_record("member header");
    if (rec.rfind(kMemberHeaderPrefix, 0) != 0)
      throw FormatError(path_ + ": malformed member header (record " +
                        std::to_string(records_read_ - 1) + ")");
    std::size_t namestr_len = std::stoul(rec.substr(75, 3));
    if (namestr_len != 140 && namestr_len != 136)
      throw FormatError(path_ + ": unsupported NAMESTR size " +
                        std::to_string(namestr_len));
    expect_record(kDscrptrHeader, "descriptor header");

    rec = read_record("member descriptor");
    member_name_ = rec.substr(8, 8);
    while (!member_name_.empty() && member_name_.back() == ' ') member_name_.pop_back();
    read_record("member label");

    rec = read_record("namestr header");
    if (rec.rfind("HEADER RECORD*******NAMESTR HEADER RECORD!!!!!!!", 0) != 0)
      throw FormatError(path_ + ": missing NAMESTR header (record " +
                        std::to_string(records_read_ - 1) + ")");
    std::size_t nvars = std::stoul(rec.substr(48, 10));
    if (nvars > 100000)
      throw FormatError(path_ + ": implausible variable count " + std::to_string(nvars));

    std::size_t namestr_bytes = nvars * namestr_len;
    std::size_t padded = (namestr_bytes + kRecordLen - 1) / kRecordLen * kRecordLen;
    std::vector<std::uint8_t> buf(padded);
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(padded));
    if (static_cast<std::size_t>(in_.gcount()) != padded)
      throw FormatError(path_ + ": truncated NAMESTR block (record " +
                        std::to_string(records_read_) + ")");
    records_read_ += padded / kRecordLen;

    std::vector<ColumnMeta> cols;
    row_length_ = 0;
    for (std::size_t i = 0; i < nvars; ++i) {
      const std::uint8_t* ns = buf.data() + i * namestr_len;
      Field f;
      std::uint16_t ntype = get_be16(ns + 0);
      f.width = get_be16(ns + 4);
      f.numeric = ntype == 1;
      if (ntype != 1 && ntype != 2)
        throw FormatError(path_ + ": variable " + std::to_string(i + 1) +
                          " has unknown type " + std::to_string(ntype));
      if (f.numeric && (f.width < 2 || f.width > 8))
        throw FormatError(path_ + ": numeric width " + std::to_string(f.width));
      if (!f.numeric && f.width < 1)
        throw FormatError(path_ + ": zero-width character variable");
      auto text = [&](std::size_t off, std::size_t len) {
        std::string s(reinterpret_cast<const char*>(ns + off), len);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.pop_back();
        return s;
      };
      f.name = text(8, 8);
      ColumnMeta col;
      col.name = f.name;
      col.type = f.numeric ? ColumnType::numeric : ColumnType::character;
      col.width = f.numeric ? 8 : static_cast<int>(f.width);
      col.label = text(16, 40);
      col.format = text(56, 8);
      cols.push_back(std::move(col));
      fields_.push_back(std::move(f));
      row_length_ += fields_.back().width;
    }

    expect_record(kObsHeader, "observation header");
    try {
      schema_ = make_schema(std::move(cols));
    } catch (const SchemaError& e) {
      throw FormatError(path_ + ": " + e.what());
    }
    if (row_length_ == 0) no_more_ = true;
    row_buf_.resize(row_length_);
  }

  // Reads the next observation into row_buf_. All-blank rows are deferred:
  // interior ones are real observations and get replayed once a non-blank
  // row follows; a blank run at end-of-file is record padding and is
  // dropped, as every transport reader does (the format cannot distinguish
  // the two).
  bool fill_row() {
    if (queued_blanks_ > 0) {
      --queued_blanks_;
      std::memset(row_buf_.data(), ' ', row_length_);
      return true;
    }
    if (have_stashed_) {
      have_stashed_ = false;
      row_buf_ = stashed_;
      return true;
    }
    if (no_more_) return false;
    std::size_t blank_run = 0;
    while (true) {
      in_.read(reinterpret_cast<char*>(row_buf_.data()),
               static_cast<std::streamsize>(row_length_));
      std::size_t got = static_cast<std::size_t>(in_.gcount());
      if (got < row_length_) {
        no_more_ = true;
        for (std::size_t i = 0; i < got; ++i)
          if (row_buf_[i] != ' ')
            throw FormatError(path_ + ": trailing partial observation");
        return false;  // blank_run was padding
      }
      bool blank = true;
      for (std::size_t i = 0; i < row_length_; ++i)
        if (row_buf_[i] != ' ') {
          blank = false;
          break;
        }
      if (blank) {
        ++blank_run;
        continue;
      }
      if (blank_run > 0) {
        queued_blanks_ = blank_run - 1;
        stashed_ = row_buf_;
        have_stashed_ = true;
        std::memset(row_buf_.data(), ' ', row_length_);
      }
      return true;
    }
  }

  Row decode_row() {
    Row row;
    row.reserve(fields_.size());
    const std::uint8_t* p = row_buf_.data();
    std::size_t pos = 0;
    for (const Field& f : fields_) {
      if (f.numeric) {
        if (is_xport_missing(p + pos, f.width)) {
          row.push_back(Value::missing(static_cast<char>(p[pos])));
        } else {
          std::array<std::uint8_t, 8> full{};
          std::memcpy(full.data(), p + pos, f.width);
          row.push_back(Value::number(ibm_to_ieee(full.data())));
        }
      } else {
        std::size_t len = f.width;
        while (len > 0 && (p[pos + len - 1] == ' ' || p[pos + len - 1] == '\0')) --len;
        row.push_back(Value::character(std::string(
            reinterpret_cast<const char*>(p + pos), len)));
      }
      pos += f.width;
    }
    return row;
  }

  std::string path_;
  std::ifstream in_;
  std::uint64_t file_size_ = 0;
  std::size_t records_read_ = 0;
  SchemaPtr schema_;
  std::string member_name_;
  std::vector<Field> fields_;
  std::size_t row_length_ = 0;
  std::vector<std::uint8_t> row_buf_;
  std::vector<std::uint8_t> stashed_;
  bool have_stashed_ = false;
  std::size_t queued_blanks_ = 0;
  bool no_more_ = false;
};

inline std::pair<SchemaPtr, std::unique_ptr<XportReader>> read_xport(
    const std::filesystem::path& path) {
  auto reader = std::make_unique<XportReader>(path);
  return {reader->schema_ptr(), std::move(reader)};
}

class XportSource : public BatchSource {
public:
  explicit XportSource(const std::filesystem::path& path, std::size_t batch_size = 1024)
      : reader_(path), batch_size_(batch_size == 0 ? 1 : batch_size) {}

  SchemaPtr schema() const override { return reader_.schema_ptr(); }
  std::optional<RecordBatch> next() override { return reader_.next_batch(batch_size_); }

private:
  XportReader reader_;
  std::size_t batch_size_;
};

}  // namespace sascsv
