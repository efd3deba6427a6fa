#include "sascsv/core.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace sascsv;

TEST_CASE("schema validates column metadata") {
  CHECK_NOTHROW(Schema({{"x", ColumnType::numeric, 8, "", ""},
                        {"s", ColumnType::character, 1, "", ""}}));
  CHECK_THROWS_AS(Schema({{"x", ColumnType::numeric, 2, "", ""}}), SchemaError);
  CHECK_THROWS_AS(Schema({{"x", ColumnType::numeric, 9, "", ""}}), SchemaError);
  CHECK_THROWS_AS(Schema({{"s", ColumnType::character, 0, "", ""}}), SchemaError);
  CHECK_THROWS_AS(Schema({{"", ColumnType::numeric, 8, "", ""}}), SchemaError);
  // Case-sensitive uniqueness: "x" and "X" may coexist, "x" twice may not.
  CHECK_NOTHROW(Schema({{"x", ColumnType::numeric, 8, "", ""},
                        {"X", ColumnType::numeric, 8, "", ""}}));
  CHECK_THROWS_AS(Schema({{"x", ColumnType::numeric, 8, "", ""},
                          {"x", ColumnType::numeric, 8, "", ""}}),
                  SchemaError);
}

TEST_CASE("schema preserves column order") {
  Schema s({{"b", ColumnType::numeric, 8, "", ""},
            {"a", ColumnType::character, 4, "", ""},
            {"c", ColumnType::numeric, 8, "", ""}});
  REQUIRE(s.size() == 3);
  CHECK(s[0].name == "b");
  CHECK(s[1].name == "a");
  CHECK(s[2].name == "c");
  CHECK(s.find("a") == 1u);
  CHECK_FALSE(s.find("missing").has_value());
  CHECK_THROWS_AS(s.require("missing"), PlanError);
}

TEST_CASE("value construction and equality") {
  CHECK(Value::number(1.5).as_number() == 1.5);
  CHECK(Value::number(std::nan("")).is_missing());
  CHECK(Value::number(std::nan("")).missing_code() == '.');
  CHECK(Value::missing('B').missing_code() == 'B');
  CHECK_THROWS_AS(Value::missing('b'), Error);
  CHECK_THROWS_AS(Value::missing('0'), Error);

  CHECK(Value::number(2.0) == Value::number(2.0));
  CHECK(Value::number(0.0) != Value::number(-0.0));  // bit equality
  CHECK(Value::missing('.') != Value::missing('A'));
  CHECK(Value::missing('.') != Value::number(0.0));
  CHECK(Value::character("") != Value::missing('.'));
  CHECK(Value::character("x") == Value::character("x"));
  CHECK(Value::character("").is_any_missing());
  CHECK(Value::missing('Z').is_any_missing());
  CHECK_FALSE(Value::number(0.0).is_any_missing());
}

TEST_CASE("value ordering: missing sorts low, codes ordered . A..Z _") {
  CHECK(value_less(Value::missing('.'), Value::missing('A')));
  CHECK(value_less(Value::missing('A'), Value::missing('Z')));
  CHECK(value_less(Value::missing('Z'), Value::missing('_')));
  CHECK(value_less(Value::missing('_'), Value::number(-1e300)));
  CHECK(value_less(Value::number(-1.0), Value::number(1.0)));
  CHECK(value_less(Value::number(-0.0), Value::number(0.0)));
  CHECK_FALSE(value_less(Value::number(0.0), Value::number(-0.0)));
  CHECK(value_less(Value::character("a"), Value::character("b")));
  CHECK(value_less(Value::character(""), Value::character("a")));
}

TEST_CASE("validate_batch reports first violation") {
  auto schema = make_schema({{"x", ColumnType::numeric, 8, "", ""},
                             {"s", ColumnType::character, 4, "", ""}});

  SECTION("empty batch is valid") {
    RecordBatch b{schema, {}, 0};
    CHECK_FALSE(validate_batch(b).has_value());
  }

  SECTION("short row is an arity violation") {
    RecordBatch b{schema,
                  {{Value::number(1), Value::character("a")},
                   {Value::number(2), Value::character("b")},
                   {Value::number(3)}},
                  0};
    auto v = validate_batch(b);
    REQUIRE(v.has_value());
    CHECK(v->row == 2);
    CHECK(v->reason == "arity");
  }

  SECTION("character under numeric column is a type violation") {
    RecordBatch b{schema, {{Value::character("x"), Value::character("a")}}, 0};
    auto v = validate_batch(b);
    REQUIRE(v.has_value());
    CHECK(v->reason == "type");
    CHECK(v->column == 0);
  }

  SECTION("missing-numeric belongs under numeric only") {
    RecordBatch good{schema, {{Value::missing('A'), Value::character("")}}, 0};
    CHECK_FALSE(validate_batch(good).has_value());
    RecordBatch bad{schema, {{Value::number(1), Value::missing('.')}}, 0};
    auto v = validate_batch(bad);
    REQUIRE(v.has_value());
    CHECK(v->column == 1);
  }
}

TEST_CASE("coerce_cell stated rules") {
  CHECK(coerce_cell("", ColumnType::numeric) == Value::missing('.'));
  CHECK(coerce_cell(".", ColumnType::numeric) == Value::missing('.'));
  CHECK(coerce_cell(".B", ColumnType::numeric) == Value::missing('B'));
  CHECK(coerce_cell(".b", ColumnType::numeric) == Value::missing('B'));
  CHECK(coerce_cell("._", ColumnType::numeric) == Value::missing('_'));
  CHECK(coerce_cell("3.5", ColumnType::numeric) == Value::number(3.5));
  CHECK(coerce_cell("-1e3", ColumnType::numeric) == Value::number(-1000.0));
  CHECK(coerce_cell("+2", ColumnType::numeric) == Value::number(2.0));
  CHECK(coerce_cell(" 7 ", ColumnType::numeric) == Value::number(7.0));
  CHECK_THROWS_AS(coerce_cell("oops", ColumnType::numeric), CellTypeError);
  CHECK_THROWS_AS(coerce_cell("1.2.3", ColumnType::numeric), CellTypeError);
  CHECK_THROWS_AS(coerce_cell("nan", ColumnType::numeric), CellTypeError);
  CHECK_THROWS_AS(coerce_cell("inf", ColumnType::numeric), CellTypeError);
  // Character coercion is total.
  CHECK(coerce_cell("oops", ColumnType::character) == Value::character("oops"));
  CHECK(coerce_cell("", ColumnType::character) == Value::character(""));
  CHECK(coerce_cell(".B", ColumnType::character) == Value::character(".B"));
}

TEST_CASE("format_cell emits na token for plain missing, .X for tagged") {
  CHECK(format_cell(Value::number(1.0), "") == "1");
  CHECK(format_cell(Value::number(3.5), "") == "3.5");
  CHECK(format_cell(Value::missing('.'), "") == "");
  CHECK(format_cell(Value::missing('.'), "NA") == "NA");
  CHECK(format_cell(Value::missing('B'), "NA") == ".B");
  CHECK(format_cell(Value::character("x,y"), "NA") == "x,y");
  CHECK(format_cell(Value::character(""), "NA") == "NA");  // character missing
  CHECK(format_cell(Value::character(""), "") == "");
}

TEST_CASE("coerce/format round trip is the identity") {
  std::mt19937_64 rng(20240811);
  std::uniform_real_distribution<double> uni(-1e6, 1e6);
  for (int i = 0; i < 2000; ++i) {
    Value v;
    switch (i % 4) {
      case 0: v = Value::number(uni(rng)); break;
      case 1: v = Value::number(static_cast<double>(static_cast<std::int64_t>(rng()))); break;
      case 2: {
        const char* codes = ".ABKZ_";
        v = Value::missing(codes[rng() % 6]);
        break;
      }
      default: {
        std::string s;
        for (int j = rng() % 8; j > 0; --j) s.push_back(static_cast<char>('a' + rng() % 26));
        v = Value::character(s);
        break;
      }
    }
    ColumnType t = v.is_character() ? ColumnType::character : ColumnType::numeric;
    CAPTURE(i);
    CHECK(coerce_cell(format_cell(v, ""), t) == v);
  }
}
