#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "support.hpp"
#include "usbb/blockdev.hpp"
#include "usbb/error.hpp"

using namespace usbb;
using blockdev::BlockImage;
using testsupport::TempDir;

namespace {

Bytes file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::kInvalidArgument;
}

blockdev::Sector filled(std::uint8_t v) {
  blockdev::Sector s;
  s.fill(v);
  return s;
}

}  // namespace

TEST_CASE("create makes a zero-filled image of exact length") {
  TempDir dir;
  auto path = dir.file("a.img");
  auto img = BlockImage::create(path, 2048);
  CHECK(img->sector_count() == 2048);
  CHECK_FALSE(img->read_only());
  CHECK(std::filesystem::file_size(path) == 1048576);
  Bytes all = file_bytes(path);
  CHECK(std::all_of(all.begin(), all.end(), [](std::uint8_t b) { return b == 0; }));
}

TEST_CASE("create rejects bad sizes and existing paths") {
  TempDir dir;
  CHECK(code_of([&] { BlockImage::create(dir.file("s.img"), 127); }) == ErrorCode::kSizeOutOfRange);
  CHECK(code_of([&] { BlockImage::create(dir.file("s.img"), 1ull << 32); }) ==
        ErrorCode::kSizeOutOfRange);
  CHECK_FALSE(std::filesystem::exists(dir.file("s.img")));
  BlockImage::create(dir.file("e.img"), 128);
  CHECK(code_of([&] { BlockImage::create(dir.file("e.img"), 2048); }) == ErrorCode::kPathExists);
  CHECK(std::filesystem::file_size(dir.file("e.img")) == 128 * 512);
  CHECK(code_of([&] { BlockImage::create(dir.file("missing/x.img"), 2048); }) ==
        ErrorCode::kIoFailure);
}

TEST_CASE("open validates the file length") {
  TempDir dir;
  testsupport::write_host_file(dir.file("odd.img"), Bytes(128 * 512 + 3));
  CHECK(code_of([&] { BlockImage::open(dir.file("odd.img")); }) == ErrorCode::kSizeOutOfRange);
  testsupport::write_host_file(dir.file("tiny.img"), Bytes(127 * 512));
  CHECK(code_of([&] { BlockImage::open(dir.file("tiny.img")); }) == ErrorCode::kSizeOutOfRange);
  CHECK(code_of([&] { BlockImage::open(dir.file("nope.img")); }) == ErrorCode::kNotFound);
}

TEST_CASE("sector read-after-write and bounds") {
  TempDir dir;
  auto img = BlockImage::create(dir.file("a.img"), 256);
  auto b = filled(0x5A);
  img->write_sector(5, b);
  CHECK(img->read_sector(5) == b);
  CHECK(img->read_sector(4) == filled(0));
  CHECK(code_of([&] { img->read_sector(256); }) == ErrorCode::kLbaOutOfRange);
  CHECK(code_of([&] { img->write_sector(256, b); }) == ErrorCode::kLbaOutOfRange);
  Bytes two(1024);
  CHECK(code_of([&] { img->read(255, 2, two); }) == ErrorCode::kLbaOutOfRange);
  CHECK_NOTHROW(img->read(254, 2, two));
}

TEST_CASE("read-only images refuse writes") {
  TempDir dir;
  auto path = dir.file("ro.img");
  BlockImage::create(path, 256)->write_sector(3, filled(7));
  auto img = BlockImage::open(path, true);
  CHECK(img->read_only());
  CHECK(img->read_sector(3) == filled(7));
  CHECK(code_of([&] { img->write_sector(3, filled(1)); }) == ErrorCode::kReadOnlyViolation);
  CHECK(img->read_sector(3) == filled(7));
}

TEST_CASE("writes reach the file only on flush") {
  TempDir dir;
  auto path = dir.file("f.img");
  auto img = BlockImage::create(path, 256);
  img->write_sector(10, filled(0xAB));
  CHECK(img->dirty_sectors() == 1);
  CHECK(file_bytes(path)[10 * 512] == 0);
  CHECK(img->read_sector(10) == filled(0xAB));
  img->flush();
  CHECK(img->dirty_sectors() == 0);
  CHECK(file_bytes(path)[10 * 512] == 0xAB);
  CHECK(file_bytes(path)[11 * 512 - 1] == 0xAB);
  CHECK(file_bytes(path)[11 * 512] == 0);
}

TEST_CASE("discarding unflushed writes restores the durable contents") {
  TempDir dir;
  auto img = BlockImage::create(dir.file("d.img"), 256);
  img->write_sector(1, filled(1));
  img->flush();
  img->write_sector(1, filled(2));
  img->write_sector(2, filled(2));
  img->discard_unflushed();
  CHECK(img->read_sector(1) == filled(1));
  CHECK(img->read_sector(2) == filled(0));
}

TEST_CASE("byte offset of sector L is L*512") {
  TempDir dir;
  auto path = dir.file("o.img");
  {
    auto img = BlockImage::create(path, 200);
    for (std::uint64_t lba : {0, 1, 77, 199}) {
      auto s = filled(0);
      store_le32(s, 0, static_cast<std::uint32_t>(lba) | 0xC0000000u);
      img->write_sector(lba, s);
    }
  }
  Bytes raw = file_bytes(path);
  for (std::uint32_t lba : {0u, 1u, 77u, 199u}) {
    CHECK(load_le32(raw, lba * 512) == (lba | 0xC0000000u));
  }
}

TEST_CASE("property: random writes match a model and reads never touch the file") {
  TempDir dir;
  auto path = dir.file("p.img");
  auto img = BlockImage::create(path, 300);
  std::mt19937_64 rng(0xB10C);
  std::map<std::uint64_t, Bytes> model;
  for (int step = 0; step < 400; ++step) {
    std::uint32_t count = 1 + rng() % 8;
    std::uint64_t lba = rng() % (300 - count + 1);
    switch (rng() % 4) {
      case 0:
      case 1: {
        Bytes data = testsupport::random_bytes(rng, count * 512);
        img->write(lba, count, data);
        for (std::uint32_t i = 0; i < count; ++i) {
          model[lba + i] = Bytes(data.begin() + i * 512, data.begin() + (i + 1) * 512);
        }
        break;
      }
      case 2: {
        Bytes out(count * 512);
        auto before = testsupport::fnv1a(file_bytes(path));
        img->read(lba, count, out);
        CHECK(testsupport::fnv1a(file_bytes(path)) == before);
        for (std::uint32_t i = 0; i < count; ++i) {
          auto it = model.find(lba + i);
          Bytes want = it == model.end() ? Bytes(512, 0) : it->second;
          REQUIRE(Bytes(out.begin() + i * 512, out.begin() + (i + 1) * 512) == want);
        }
        break;
      }
      default:
        img->flush();
        break;
    }
  }
  img->flush();
  Bytes raw = file_bytes(path);
  for (const auto& [lba, data] : model) {
    REQUIRE(Bytes(raw.begin() + lba * 512, raw.begin() + (lba + 1) * 512) == data);
  }
}

TEST_CASE("reopening sees flushed data") {
  TempDir dir;
  auto path = dir.file("r.img");
  {
    auto img = BlockImage::create(path, 128);
    img->write_sector(127, filled(9));
  }
  auto img = BlockImage::open(path);
  CHECK(img->sector_count() == 128);
  CHECK(img->read_sector(127) == filled(9));
}
