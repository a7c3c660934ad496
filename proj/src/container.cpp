// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "error.hpp"
#include "model_io.hpp"

namespace qntz {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::io: return "io";
    case ErrorCode::malformed_header: return "malformed_header";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::duplicate_name: return "duplicate_name";
    case ErrorCode::invariant_violation: return "invariant_violation";
    case ErrorCode::manifest_syntax: return "manifest_syntax";
    case ErrorCode::dangling_reference: return "dangling_reference";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::invalid_code: return "invalid_code";
    case ErrorCode::accumulator_overflow: return "accumulator_overflow";
    case ErrorCode::missing_format: return "missing_format";
    case ErrorCode::unsupported: return "unsupported";
    case ErrorCode::empty_input: return "empty_input";
    case ErrorCode::diverged: return "diverged";
  }
  return "unknown";
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace qntz

namespace qntz::io {

namespace {

constexpr std::array<std::uint8_t, 6> kMagic = {'Q', 'N', 'T', 'Z', '1', '\0'};

static_assert(std::endian::native == std::endian::little,
              "container encoding assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T value) {
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), &value, sizeof(T));
    out_.insert(out_.end(), raw.begin(), raw.end());
  }
  void bytes(std::span<const std::uint8_t> data) {
    out_.insert(out_.end(), data.begin(), data.end());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
  bool get(T& value) {
    if (remaining() < sizeof(T)) return false;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return true;
  }
  bool take(std::size_t n, std::span<const std::uint8_t>& out) {
    if (remaining() < n) return false;
    out = data_.subspan(pos_, n);
    pos_ += n;
    return true;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::string record_label(std::size_t index, const std::string& name) {
  if (name.empty()) return "record #" + std::to_string(index);
  return "record '" + name + "'";
}

}  // namespace

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::f32: return "f32";
    case DType::i8: return "i8";
    case DType::u8: return "u8";
    case DType::ternary2: return "ternary2";
  }
  return "?";
}

std::size_t expected_byte_length(DType dtype, std::size_t count) {
  switch (dtype) {
    case DType::f32: return count * 4;
    case DType::i8:
    case DType::u8: return count;
    case DType::ternary2: return (count + 3) / 4;
  }
  return 0;
}

void check_record(const TensorRecord& record) {
  if (record.name.empty() || record.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    fail(ErrorCode::invariant_violation, "tensor record name must be 1..65535 bytes");
  }
  if (record.shape.size() > 255) {
    fail(ErrorCode::invariant_violation,
         "record '" + record.name + "' has rank " + std::to_string(record.shape.size()));
  }
  for (auto dim : record.shape) {
    if (dim == 0 || dim > std::numeric_limits<std::uint32_t>::max()) {
      fail(ErrorCode::invariant_violation,
           "record '" + record.name + "' has invalid dimension in " +
               shape_to_string(record.shape));
    }
  }
  auto expected = expected_byte_length(record.dtype, record.element_count());
  if (record.data.size() != expected) {
    fail(ErrorCode::invariant_violation,
         "record '" + record.name + "' holds " + std::to_string(record.data.size()) +
             " bytes, shape " + shape_to_string(record.shape) + " as " +
             dtype_name(record.dtype) + " needs " + std::to_string(expected));
  }
}

std::vector<std::uint8_t> pack_ternary(std::span<const std::int8_t> codes) {
  std::vector<std::uint8_t> out((codes.size() + 3) / 4, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    std::uint8_t bits = 0;
    switch (codes[i]) {
      case 0: bits = 0b00; break;
      case 1: bits = 0b01; break;
      case -1: bits = 0b10; break;
      default:
        fail(ErrorCode::invalid_code,
             "ternary code at index " + std::to_string(i) + " is " +
                 std::to_string(codes[i]));
    }
    out[i / 4] |= static_cast<std::uint8_t>(bits << (2 * (i % 4)));
  }
  return out;
}

std::vector<std::int8_t> unpack_ternary(std::span<const std::uint8_t> bytes,
                                        std::size_t count) {
  if (bytes.size() != (count + 3) / 4) {
    fail(ErrorCode::invariant_violation,
         "ternary payload of " + std::to_string(bytes.size()) + " bytes cannot hold " +
             std::to_string(count) + " codes");
  }
  std::vector<std::int8_t> codes(count);
  for (std::size_t i = 0; i < bytes.size() * 4; ++i) {
    auto bits = (bytes[i / 4] >> (2 * (i % 4))) & 0b11;
    if (i >= count) {
      if (bits != 0) fail(ErrorCode::invalid_code, "nonzero ternary padding");
      continue;
    }
    if (bits == 0b11) {
      fail(ErrorCode::invalid_code, "reserved ternary code 11 at index " + std::to_string(i));
    }
    codes[i] = bits == 0b01 ? 1 : (bits == 0b10 ? -1 : 0);
  }
  return codes;
}

std::vector<std::uint8_t> encode_container(std::span<const TensorRecord> records) {
  std::set<std::string_view> seen;
  for (const auto& r : records) {
    check_record(r);
    if (!seen.insert(r.name).second) {
      fail(ErrorCode::duplicate_name, "duplicate record name '" + r.name + "'");
    }
  }
  if (records.size() > std::numeric_limits<std::uint32_t>::max()) {
    fail(ErrorCode::invariant_violation, "too many records");
  }

  Writer w;
  w.bytes(kMagic);
  w.put(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.put(static_cast<std::uint16_t>(r.name.size()));
    w.bytes({reinterpret_cast<const std::uint8_t*>(r.name.data()), r.name.size()});
    w.put(static_cast<std::uint8_t>(r.dtype));
    w.put(static_cast<std::uint8_t>(r.shape.size()));
    for (auto d : r.shape) w.put(static_cast<std::uint32_t>(d));
    w.put(static_cast<std::uint64_t>(r.data.size()));
    w.bytes(r.data);
  }
  return w.take();
}

std::vector<TensorRecord> decode_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  std::span<const std::uint8_t> magic;
  if (!r.take(kMagic.size(), magic) || !std::equal(magic.begin(), magic.end(), kMagic.begin())) {
    fail(ErrorCode::malformed_header, "missing QNTZ1 magic");
  }
  std::uint32_t count = 0;
  if (!r.get(count)) fail(ErrorCode::malformed_header, "missing record count");

  std::vector<TensorRecord> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    std::uint16_t name_len = 0;
    std::span<const std::uint8_t> name;
    if (!r.get(name_len) || !r.take(name_len, name)) {
      fail(ErrorCode::truncated, record_label(i, "") + ": truncated name");
    }
    rec.name.assign(name.begin(), name.end());
    std::uint8_t dtype = 0, rank = 0;
    if (!r.get(dtype) || !r.get(rank)) {
      fail(ErrorCode::truncated, record_label(i, rec.name) + ": truncated header");
    }
    if (dtype > 3) {
      fail(ErrorCode::malformed_header,
           record_label(i, rec.name) + ": unknown dtype code " + std::to_string(dtype));
    }
    rec.dtype = static_cast<DType>(dtype);
    for (std::uint8_t d = 0; d < rank; ++d) {
      std::uint32_t dim = 0;
      if (!r.get(dim)) fail(ErrorCode::truncated, record_label(i, rec.name) + ": truncated shape");
      rec.shape.push_back(dim);
    }
    std::uint64_t len = 0;
    if (!r.get(len)) fail(ErrorCode::truncated, record_label(i, rec.name) + ": truncated length");
    std::span<const std::uint8_t> payload;
    if (len > r.remaining() || !r.take(static_cast<std::size_t>(len), payload)) {
      fail(ErrorCode::truncated,
           record_label(i, rec.name) + ": payload of " + std::to_string(len) +
               " bytes exceeds remaining " + std::to_string(r.remaining()));
    }
    rec.data.assign(payload.begin(), payload.end());
    if (rec.name.empty()) fail(ErrorCode::malformed_header, record_label(i, "") + ": empty name");
    if (!seen.insert(rec.name).second) {
      fail(ErrorCode::duplicate_name, "duplicate record name '" + rec.name + "'");
    }
    check_record(rec);
    out.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    fail(ErrorCode::malformed_header,
         std::to_string(r.remaining()) + " trailing bytes after last record");
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::io, "read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed: " + path.string());
}

void save_container(std::span<const TensorRecord> records, const std::filesystem::path& path) {
  // Encoding validates everything before the file is touched.
  auto bytes = encode_container(records);
  write_file(path, bytes);
}

std::vector<TensorRecord> load_container(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  try {
    return decode_container(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

TensorRecord make_f32(std::string name, Shape shape, std::span<const float> values) {
  TensorRecord r{std::move(name), DType::f32, std::move(shape), {}};
  r.data.resize(values.size() * 4);
  std::memcpy(r.data.data(), values.data(), r.data.size());
  check_record(r);
  return r;
}

TensorRecord make_i8(std::string name, Shape shape, std::span<const std::int8_t> values) {
  TensorRecord r{std::move(name), DType::i8, std::move(shape), {}};
  r.data.resize(values.size());
  std::memcpy(r.data.data(), values.data(), values.size());
  check_record(r);
  return r;
}

TensorRecord make_u8(std::string name, Shape shape, std::span<const std::uint8_t> values) {
  TensorRecord r{std::move(name), DType::u8, std::move(shape),
                 std::vector<std::uint8_t>(values.begin(), values.end())};
  check_record(r);
  return r;
}

TensorRecord make_ternary(std::string name, Shape shape, std::span<const std::int8_t> codes) {
  TensorRecord r{std::move(name), DType::ternary2, std::move(shape), pack_ternary(codes)};
  if (r.element_count() != codes.size()) {
    fail(ErrorCode::invariant_violation, "record '" + r.name + "' code count mismatch");
  }
  check_record(r);
  return r;
}

namespace {
void expect_dtype(const TensorRecord& r, DType dtype) {
  if (r.dtype != dtype) {
    fail(ErrorCode::shape_mismatch, "record '" + r.name + "' is " + dtype_name(r.dtype) +
                                        ", expected " + dtype_name(dtype));
  }
}
}  // namespace

Tensor to_tensor(const TensorRecord& r) {
  expect_dtype(r, DType::f32);
  Tensor t(r.shape);
  std::memcpy(t.data.data(), r.data.data(), r.data.size());
  return t;
}

std::vector<std::int8_t> to_i8(const TensorRecord& r) {
  expect_dtype(r, DType::i8);
  std::vector<std::int8_t> out(r.data.size());
  std::memcpy(out.data(), r.data.data(), r.data.size());
  return out;
}

std::vector<std::uint8_t> to_u8(const TensorRecord& r) {
  expect_dtype(r, DType::u8);
  return r.data;
}

std::vector<std::int8_t> to_ternary_codes(const TensorRecord& r) {
  expect_dtype(r, DType::ternary2);
  return unpack_ternary(r.data, r.element_count());
}

}  // namespace qntz::io
