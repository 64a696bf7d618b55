#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "homolab/config.hpp"

using namespace homolab;

TEST_CASE("sections, keys, comments and whitespace") {
  const Config c = Config::parse("# header\n[experiment]\nseed = 7\n  ; note\n[field]\nmodel=laminate  \nd = 2\n");
  CHECK(c.section_names() == std::vector<std::string>{"experiment", "field"});
  REQUIRE(c.get("experiment", "seed"));
  CHECK(*c.get("experiment", "seed") == "7");
  CHECK(*c.get("field", "model") == "laminate");
  CHECK_FALSE(c.has("field", "seed"));
  CHECK(c.section("field").size() == 2);
}

TEST_CASE("values keep internal spaces and equals signs") {
  const Config c = Config::parse("[expand]\nprobes = 0.25 0.5 0.5; 1 0.75 0.25\nexpr = a=b\n");
  CHECK(*c.get("expand", "probes") == "0.25 0.5 0.5; 1 0.75 0.25");
  CHECK(*c.get("expand", "expr") == "a=b");
}

TEST_CASE("parse errors carry line and column") {
  auto expect = [](const std::string& text, int line, int column) {
    try {
      Config::parse(text);
      FAIL("no error for: " << text);
    } catch (const ParseError& e) {
      CHECK(e.line == line);
      CHECK(e.column == column);
    }
  };
  expect("[a]\nx = 1\nx = 2\n", 3, 1);
  expect("x = 1\n", 1, 1);
  expect("[a]\n  novalue\n", 2, 3);
  expect("[a\n", 1, 3);
  expect("[a]\n = 3\n", 2, 2);
  expect("[a]\n[a]\n", 2, 1);
  expect("[a b]\n", 1, 3);
}

TEST_CASE("hash ignores order and formatting but not values") {
  const Config a = Config::parse("[b]\ny = 2\n[a]\nx = 1\n");
  const Config b = Config::parse("[a]\n  x=1\n\n[b]\ny =   2\n");
  const Config c = Config::parse("[a]\nx = 1\n[b]\ny = 3\n");
  CHECK(a.canonical() == b.canonical());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  CHECK(hex64(a.hash()).size() == 16);
}

TEST_CASE("FNV-1a reference values") {
  Config empty;
  CHECK(empty.hash() == 0xcbf29ce484222325ULL);
  Config one;
  one.set("a", "b", "c");
  CHECK(one.canonical() == "a.b=c\n");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : std::string("a.b=c\n")) h = (h ^ ch) * 0x100000001b3ULL;
  CHECK(one.hash() == h);
}

TEST_CASE("load reports unreadable files") { CHECK_THROWS_AS(Config::load("/nonexistent/x.ini"), InvalidParameter); }
