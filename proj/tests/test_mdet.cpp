#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "mde/mdet.hpp"

using namespace mde;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mde_test_mdet";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<unsigned char> as_bytes(const std::string& s) { return {s.begin(), s.end()}; }

MdetTensor tensor(std::string name, TensorRole role, std::int64_t layer, std::vector<std::uint64_t> shape,
                  std::vector<double> values, DType dt = DType::F32) {
  return {std::move(name), role, layer, dt, std::move(shape), std::move(values)};
}

// Values are exact in f32 so the round trip is structurally exact.
MdetRecord sample_model() {
  MdetRecord r;
  r.kind = "model";
  r.metadata.model_id = "m1";
  r.metadata.seed = 42;
  r.metadata.extra["class_count"] = 3;
  r.tensors.push_back(tensor("layer0.weight", TensorRole::Weight, 0, {2, 1, 1, 1}, {0.5, -0.25}));
  r.tensors.push_back(tensor("bn0.gamma", TensorRole::BnGamma, 0, {2}, {1.0, 0.75}));
  r.tensors.push_back(tensor("bn0.beta", TensorRole::BnBeta, 0, {2}, {0.0, -1.5}));
  r.tensors.push_back(tensor("bn0.running_mean", TensorRole::BnRunningMean, 0, {2}, {0.125, 2.0}));
  r.tensors.push_back(tensor("bn0.running_var", TensorRole::BnRunningVar, 0, {2}, {1.0, 0.0625}));
  r.tensors.push_back(tensor("layer4.weight", TensorRole::Weight, 4, {3, 2}, {1, 2, 3, 4, 5, 6}));
  r.tensors.push_back(tensor("layer4.bias", TensorRole::Bias, 4, {3}, {0.5, 0.5, -0.5}));
  return r;
}

MdetRecord golden_record() {
  MdetRecord r;
  r.kind = "trace";
  r.metadata.model_id = "golden";
  r.metadata.dataset_id = "golden";
  r.tensors.push_back(tensor("batch0.bn0", TensorRole::Activation, 0, {1, 1, 1, 1}, {1.5}));
  return r;
}

MdetErrorKind error_kind(std::span<const unsigned char> bytes) {
  try {
    decode_mdet(bytes);
  } catch (const MdetError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an MdetError";
  return MdetErrorKind::Invalid;
}

void set_u64(std::vector<unsigned char>& b, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<unsigned char>(v >> (8 * i));
}

}  // namespace

TEST(Mdet, RoundTripModel) {
  const MdetRecord r = sample_model();
  const std::string path = temp_path("model.mdet");
  write_mdet(r, path);
  EXPECT_EQ(read_mdet(path), r);
}

TEST(Mdet, RoundTripTraceAndDataset) {
  MdetRecord t;
  t.kind = "trace";
  t.metadata.model_id = "m";
  t.metadata.dataset_id = "d";
  t.tensors.push_back(tensor("batch0.bn0", TensorRole::Activation, 0, {2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  t.tensors.push_back(tensor("batch0.bn1", TensorRole::Activation, 1, {2, 2, 1, 1}, {-1, -2, 0.5, 1e-3f}));
  EXPECT_EQ(decode_mdet(as_bytes(encode_mdet(t))), t);

  MdetRecord d;
  d.kind = "dataset";
  d.tensors.push_back(tensor("images", TensorRole::Image, 0, {2, 1, 1, 2}, {0.0, 0.25, 0.5, 1.0}));
  d.tensors.push_back(tensor("labels", TensorRole::Label, 0, {2}, {-7, 2147483647}, DType::I32));
  EXPECT_EQ(decode_mdet(as_bytes(encode_mdet(d))), d);
}

TEST(Mdet, FloatsNarrowToF32) {
  MdetRecord t = golden_record();
  t.tensors[0].values = {0.1};
  const MdetRecord back = decode_mdet(as_bytes(encode_mdet(t)));
  EXPECT_EQ(back.tensors[0].values[0], static_cast<double>(0.1f));
}

TEST(Mdet, DeterministicBytes) {
  const std::string a = temp_path("a.mdet"), b = temp_path("b.mdet");
  write_mdet(sample_model(), a);
  write_mdet(sample_model(), b);
  EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
}

TEST(Mdet, PreambleLayout) {
  const std::string bytes = encode_mdet(golden_record());
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "MDET");
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));
  const std::uint64_t header_len = detail::get_u64(reinterpret_cast<const unsigned char*>(bytes.data()) + 8);
  EXPECT_EQ(bytes.size(), 16u + header_len + 4u);
  const std::string header = bytes.substr(16, header_len);
  EXPECT_EQ(header.front(), '{');
  EXPECT_EQ(header.back(), '}');
  EXPECT_EQ(header.find(' '), std::string::npos);
  // keys come out sorted
  EXPECT_LT(header.find("\"entries\""), header.find("\"kind\""));
  EXPECT_LT(header.find("\"kind\""), header.find("\"metadata\""));
  const float v = std::bit_cast<float>(detail::get_u32(reinterpret_cast<const unsigned char*>(bytes.data()) + 16 + header_len));
  EXPECT_EQ(v, 1.5f);
}

TEST(Mdet, GoldenFileMatchesWriter) {
  const std::string golden = std::string(MDE_TEST_DATA_DIR) + "/golden_minimal.mdet";
  const std::string bytes = encode_mdet(golden_record());
  if (std::getenv("MDE_UPDATE_GOLDEN")) {
    std::ofstream(golden, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  const auto on_disk = read_file_bytes(golden);
  EXPECT_EQ(on_disk, as_bytes(bytes));
  EXPECT_EQ(read_mdet(golden), golden_record());
}

TEST(Mdet, MinimalFileParses) {
  const MdetRecord r = decode_mdet(as_bytes(encode_mdet(golden_record())));
  ASSERT_EQ(r.tensors.size(), 1u);
  EXPECT_EQ(r.tensors[0].values, std::vector<double>{1.5});
}

TEST(Mdet, UnknownMetadataKeysSurvive) {
  MdetRecord r = golden_record();
  r.metadata.extra["note"] = "kept";
  r.metadata.extra["nested"] = {{"a", 1}};
  EXPECT_EQ(decode_mdet(as_bytes(encode_mdet(r))).metadata.extra, r.metadata.extra);
}

TEST(Mdet, WrongMagic) {
  auto b = as_bytes(encode_mdet(golden_record()));
  b[0] = 'X';
  EXPECT_EQ(error_kind(b), MdetErrorKind::BadMagic);
  EXPECT_EQ(error_kind(std::vector<unsigned char>{}), MdetErrorKind::BadMagic);
}

TEST(Mdet, UnsupportedVersion) {
  auto b = as_bytes(encode_mdet(golden_record()));
  b[4] = 2;
  try {
    decode_mdet(b);
    FAIL();
  } catch (const MdetError& e) {
    EXPECT_EQ(e.kind(), MdetErrorKind::UnsupportedVersion);
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Mdet, HeaderLengthMismatch) {
  const auto good = as_bytes(encode_mdet(sample_model()));
  const std::uint64_t len = detail::get_u64(good.data() + 8);
  for (std::uint64_t bad : {len - 1, len + 1, len + 3, std::uint64_t{0}, std::uint64_t{1} << 62}) {
    auto b = good;
    set_u64(b, 8, bad);
    EXPECT_EQ(error_kind(b), MdetErrorKind::CorruptHeader) << bad;
  }
}

TEST(Mdet, TruncatedPayload) {
  const auto good = as_bytes(encode_mdet(sample_model()));
  const std::uint64_t payload_start = 16 + detail::get_u64(good.data() + 8);
  for (std::size_t cut = 1; cut <= 8; ++cut) {
    const std::vector<unsigned char> b(good.begin(), good.end() - static_cast<std::ptrdiff_t>(cut));
    EXPECT_EQ(error_kind(b), MdetErrorKind::RangeViolation) << cut;
  }
  const std::vector<unsigned char> no_payload(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(payload_start));
  EXPECT_EQ(error_kind(no_payload), MdetErrorKind::RangeViolation);
  // truncating inside the header is caught by the length check
  const std::vector<unsigned char> short_header(good.begin(), good.begin() + 30);
  EXPECT_EQ(error_kind(short_header), MdetErrorKind::CorruptHeader);
}

TEST(Mdet, TruncatedFileOnDisk) {
  const auto good = as_bytes(encode_mdet(sample_model()));
  const std::string path = temp_path("truncated.mdet");
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(good.data()),
                                              static_cast<std::streamsize>(good.size() - 2));
  try {
    MdetReader reader(path);
    FAIL();
  } catch (const MdetError& e) {
    EXPECT_EQ(e.kind(), MdetErrorKind::RangeViolation);
  }
  EXPECT_THROW(read_mdet(path), MdetError);
  EXPECT_THROW(read_mdet(temp_path("does_not_exist.mdet").string()), MdetError);
}

namespace {
std::vector<unsigned char> with_header(const std::string& header, std::size_t payload_bytes) {
  std::string out("MDET\x01\x00\x00\x00", 8);
  detail::put_u64(out, header.size());
  out += header;
  out.append(payload_bytes, '\0');
  return as_bytes(out);
}
const char* kMeta = R"("metadata":{"creator":"t","dataset_id":"","eps":1e-05,"model_id":"","retain_alpha":0.9,"seed":0})";
std::string entry(const std::string& fields) {
  return R"({"entries":[{"dtype":"f32","layer_index":0,"name":"x","role":"activation",)" + fields + "}],\"kind\":\"trace\"," +
         kMeta + "}";
}
}  // namespace

TEST(Mdet, StructuralViolations) {
  EXPECT_NO_THROW(decode_mdet(with_header(entry(R"("byte_len":8,"byte_offset":0,"shape":[2])"), 8)));
  // byte_len disagrees with shape
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":4,"byte_offset":0,"shape":[2])"), 8)),
            MdetErrorKind::RangeViolation);
  // range past the payload
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":8,"byte_offset":4,"shape":[2])"), 8)),
            MdetErrorKind::RangeViolation);
  // overflowing shape
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":8,"byte_offset":0,"shape":[4294967296,4294967296])"), 8)),
            MdetErrorKind::RangeViolation);
  // wrong JSON kinds
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":8.0,"byte_offset":0,"shape":[2])"), 8)),
            MdetErrorKind::CorruptHeader);
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":8,"byte_offset":-1,"shape":[2])"), 8)),
            MdetErrorKind::CorruptHeader);
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":8,"byte_offset":0,"shape":2)"), 8)),
            MdetErrorKind::CorruptHeader);
  EXPECT_EQ(error_kind(with_header(entry(R"("byte_len":8,"byte_offset":0)"), 8)), MdetErrorKind::CorruptHeader);
  EXPECT_EQ(error_kind(with_header("[1,2]", 0)), MdetErrorKind::CorruptHeader);
  EXPECT_EQ(error_kind(with_header("{\"kind\":", 0)), MdetErrorKind::CorruptHeader);
}

TEST(Mdet, OverlappingEntriesRejected) {
  const std::string h =
      R"({"entries":[{"byte_len":8,"byte_offset":0,"dtype":"f32","layer_index":0,"name":"a","role":"activation","shape":[2]},)"
      R"({"byte_len":8,"byte_offset":4,"dtype":"f32","layer_index":0,"name":"b","role":"activation","shape":[2]}],"kind":"trace",)" +
      std::string(kMeta) + "}";
  EXPECT_EQ(error_kind(with_header(h, 16)), MdetErrorKind::RangeViolation);
}

TEST(Mdet, ModelBnRolesChecked) {
  MdetRecord r = sample_model();
  r.tensors.erase(r.tensors.begin() + 2);  // drop bn0.beta
  EXPECT_THROW(encode_mdet(r), MdetError);
  r = sample_model();
  r.tensors[2].shape = {3};
  r.tensors[2].values = {0, 0, 0};
  EXPECT_THROW(encode_mdet(r), MdetError);

  // same surgery on bytes: rename the beta role so layer 0 lacks it
  std::string bytes = encode_mdet(sample_model());
  const auto at = bytes.find("\"bn_beta\"");
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, 9, "\"weight\" ");
  EXPECT_EQ(error_kind(as_bytes(bytes)), MdetErrorKind::CorruptHeader);
}

TEST(Mdet, NegativeRunningVarianceRejected) {
  MdetRecord r = sample_model();
  r.tensors[4].values[1] = -0.5;
  EXPECT_EQ(error_kind(as_bytes(encode_mdet(r))), MdetErrorKind::RangeViolation);
}

TEST(Mdet, WriterRejectsBadRecords) {
  MdetRecord r = golden_record();
  r.kind = "weights";
  EXPECT_THROW(encode_mdet(r), MdetError);
  r = golden_record();
  r.tensors[0].values.push_back(2.0);
  EXPECT_THROW(encode_mdet(r), MdetError);
  EXPECT_THROW(write_mdet(golden_record(), "/nonexistent-dir/x.mdet"), MdetError);
}

TEST(Mdet, StreamingReaderMatchesWholeFile) {
  const std::string path = temp_path("stream.mdet");
  write_mdet(sample_model(), path);
  MdetReader reader(path);
  const MdetRecord whole = read_mdet(path);
  ASSERT_EQ(reader.header().entries.size(), whole.tensors.size());
  for (std::size_t i = whole.tensors.size(); i-- > 0;) EXPECT_EQ(reader.read(i), whole.tensors[i]);
  EXPECT_THROW(reader.read(99), std::out_of_range);
}

// Seeded corruption of preamble, header and length fields. Every case either
// raises MdetError or parses to the original tensor data.
TEST(Mdet, CorruptionFuzz) {
  const std::string clean = encode_mdet(sample_model());
  const auto good = as_bytes(clean);
  const MdetRecord original = sample_model();
  const std::size_t header_end = 16 + detail::get_u64(good.data() + 8);
  std::mt19937_64 rng(2024);
  std::size_t errors = 0, parsed = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto b = good;
    switch (trial % 4) {
      case 0: {  // a few random bytes in the preamble or header
        const int n = 1 + static_cast<int>(rng() % 4);
        for (int k = 0; k < n; ++k) b[rng() % header_end] = static_cast<unsigned char>(rng());
        break;
      }
      case 1:  // truncation
        b.resize(rng() % good.size());
        break;
      case 2:  // header length field
        set_u64(b, 8, rng() % 2 ? rng() : header_end - 16 + (rng() % 21) - 10);
        break;
      default: {  // delete or duplicate a header byte
        const std::size_t at = 16 + rng() % (header_end - 16);
        if (rng() % 2) b.erase(b.begin() + static_cast<std::ptrdiff_t>(at));
        else b.insert(b.begin() + static_cast<std::ptrdiff_t>(at), b[at]);
        break;
      }
    }
    try {
      const MdetRecord r = decode_mdet(b);
      ++parsed;
      ASSERT_EQ(r.tensors.size(), original.tensors.size()) << "trial " << trial;
      for (std::size_t i = 0; i < r.tensors.size(); ++i) {
        EXPECT_EQ(r.tensors[i].values, original.tensors[i].values) << "trial " << trial;
      }
    } catch (const MdetError&) {
      ++errors;
    }
  }
  EXPECT_EQ(errors + parsed, 1000u);
  EXPECT_GT(errors, 500u);
}

TEST(Mdet, CorruptFilesThroughStreamingReader) {
  const auto good = as_bytes(encode_mdet(sample_model()));
  std::mt19937_64 rng(7);
  const std::string path = temp_path("fuzz.mdet");
  for (int trial = 0; trial < 100; ++trial) {
    auto b = good;
    if (trial % 2) b.resize(rng() % good.size());
    else b[rng() % b.size()] = static_cast<unsigned char>(rng());
    std::ofstream(path, std::ios::binary | std::ios::trunc)
        .write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    try {
      MdetReader reader(path);
      for (std::size_t i = 0; i < reader.header().entries.size(); ++i) reader.read(i);
    } catch (const MdetError&) {
    }
  }
  SUCCEED();
}
