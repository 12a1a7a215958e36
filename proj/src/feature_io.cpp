#include "fcil/feature_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "fcil/errors.hpp"

namespace fcil {

namespace {

static_assert(sizeof(float) == 4);

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T take(const char* field) {
    if (bytes_.size() - offset_ < sizeof(T)) {
      throw FormatError(std::string("truncated feature file while reading ") + field, offset_);
    }
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(bytes_[offset_ + i]) << (8 * i));
    }
    offset_ += sizeof(T);
    return value;
  }

  std::size_t offset() const noexcept { return offset_; }
  std::size_t remaining() const noexcept { return bytes_.size() - offset_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_features(const FeatureDataset& ds) {
  ds.validate();
  if (ds.num_classes > 65536) throw InputError("write_features: more than 65536 classes");
  std::vector<std::uint8_t> out;
  out.reserve(kFeatureHeaderBytes + ds.size() * (ds.dim * 4 + 2));
  out.insert(out.end(), std::begin(kFeatureMagic), std::end(kFeatureMagic));
  put_le<std::uint16_t>(out, kFeatureVersion);
  put_le<std::uint16_t>(out, 0);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.dim));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.num_classes));
  put_le<std::uint64_t>(out, ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.features.row(i)) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(ds.labels[i]));
  }
  return out;
}

FeatureDataset decode_features(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
    throw FormatError("bad magic: expected \"FCF1\"", 0);
  }
  Reader in(bytes);
  in.take<std::uint32_t>("magic");
  const auto version_offset = in.offset();
  const auto version = in.take<std::uint16_t>("version");
  if (version != kFeatureVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(version),
                      version_offset);
  }
  const auto flags_offset = in.offset();
  if (in.take<std::uint16_t>("flags") != 0) throw FormatError("nonzero flags", flags_offset);
  const auto dim = in.take<std::uint32_t>("d");
  const auto num_classes = in.take<std::uint32_t>("C");
  const auto count_offset = in.offset();
  const auto count = in.take<std::uint64_t>("n");

  const std::uint64_t record_bytes = static_cast<std::uint64_t>(dim) * 4 + 2;
  if (count > in.remaining() / record_bytes) {
    throw FormatError("truncated feature file: header declares " + std::to_string(count) +
                          " records but only " + std::to_string(in.remaining()) +
                          " payload bytes follow",
                      count_offset);
  }

  FeatureDataset ds(dim, num_classes);
  Vector row(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto record_offset = in.offset();
    for (std::uint32_t j = 0; j < dim; ++j) {
      row[j] = static_cast<double>(std::bit_cast<float>(in.take<std::uint32_t>("feature")));
      if (!std::isfinite(row[j])) {
        throw FormatError("non-finite feature in record " + std::to_string(i), record_offset);
      }
    }
    const auto label_offset = in.offset();
    const auto label = in.take<std::uint16_t>("label");
    if (label >= num_classes) {
      throw FormatError("label " + std::to_string(label) + " >= C=" + std::to_string(num_classes),
                        label_offset);
    }
    ds.features.append_row(row);
    ds.labels.push_back(label);
  }
  if (in.remaining() != 0) {
    throw FormatError("trailing bytes after " + std::to_string(count) + " records", in.offset());
  }
  return ds;
}

FeatureDataset read_features(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw InputError("cannot open feature file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                  std::istreambuf_iterator<char>());
  return decode_features(bytes);
}

void write_features(const FeatureDataset& ds, const std::filesystem::path& path) {
  const auto bytes = encode_features(ds);
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw InputError("cannot create feature file " + path.string());
  file.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
  if (!file) throw InputError("failed writing feature file " + path.string());
}

}  // namespace fcil
