#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <limits>
#include <string>

#include "fcil/errors.hpp"
#include "fcil/feature_io.hpp"

using namespace fcil;

namespace {

FeatureDataset three_samples() {
  FeatureDataset ds(2, 4);
  ds.add(std::vector<double>{0.5, -1.25}, 3);
  ds.add(std::vector<double>{2.0, 0.1}, 0);
  ds.add(std::vector<double>{-7.0, 1e-3}, 1);
  return ds;
}

std::uint64_t error_offset(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_features(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  FAIL("expected a FormatError");
  return 0;
}

}  // namespace

TEST_CASE("encoding matches the documented layout byte for byte") {
  FeatureDataset ds(1, 3);
  ds.add(std::vector<double>{1.0}, 2);
  const auto bytes = encode_features(ds);
  // 1.0f is 0x3f800000.
  const std::vector<std::uint8_t> expected{'F', 'C', 'F', '1', 1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0,
                                           1, 0, 0, 0, 0, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 2, 0};
  CHECK(bytes == expected);
  CHECK(kFeatureHeaderBytes == 24);
}

TEST_CASE("round trip of a 3-sample dataset rewrites identical bytes") {
  const auto path = std::filesystem::temp_directory_path() / "fcil_roundtrip.fcf";
  const FeatureDataset ds = three_samples();
  write_features(ds, path);
  const FeatureDataset back = read_features(path);
  CHECK(back.size() == 3);
  CHECK(back.labels == ds.labels);
  CHECK(back.features(0, 1) == -1.25);
  CHECK(back.features(1, 1) == static_cast<double>(0.1f));
  const auto first = encode_features(back);
  CHECK(encode_features(read_features(path)) == first);
  write_features(back, path);
  CHECK(encode_features(read_features(path)) == first);
  std::filesystem::remove(path);
}

TEST_CASE("empty dataset with a wide header is valid") {
  const FeatureDataset empty(768, 100);
  const FeatureDataset back = decode_features(encode_features(empty));
  CHECK(back.empty());
  CHECK(back.dim == 768);
  CHECK(back.num_classes == 100);
}

TEST_CASE("corrupted magic names the expected tag") {
  auto bytes = encode_features(three_samples());
  bytes[0] = 'X';
  try {
    decode_features(bytes);
    FAIL("expected a FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("FCF1") != std::string::npos);
    CHECK(e.offset() == 0);
  }
}

TEST_CASE("format errors carry the failing byte offset") {
  const auto good = encode_features(three_samples());

  auto version = good;
  version[4] = 2;
  CHECK(error_offset(version) == 4);

  auto flags = good;
  flags[6] = 1;
  CHECK(error_offset(flags) == 6);

  auto truncated = good;
  truncated.pop_back();
  CHECK(error_offset(truncated) == 16);

  auto header_only = good;
  header_only.resize(10);
  CHECK(error_offset(header_only) == 8);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(error_offset(trailing) == good.size());

  // Record layout: 2 x f32 + u16 = 10 bytes; first label sits at 24 + 8.
  auto label = good;
  label[24 + 8] = 4;
  CHECK(error_offset(label) == 32);

  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(&nan[24 + 10], &q, 4);
  CHECK(error_offset(nan) == 34);
}

TEST_CASE("missing files are input errors") {
  CHECK_THROWS_AS(read_features("/nonexistent/dir/file.fcf"), InputError);
}
