#include <cstring>
#include <filesystem>
#include <fstream>

#include "chada/dataset.hpp"
#include "chada/io.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace chada;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("chada_test_io_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("MCIF byte layout of a 1x2x2 image") {
  MultiChannelImage img(1, 2, 2);
  img.pixels = {0.0f, 0.25f, 0.5f, 1.0f};
  img.channel_names[0] = "dna";
  const auto bytes = encode_mcif(img);
  CHECK(mcif_header_size(img) == 4 + 16 + 1 + 2 + 3);
  CHECK(bytes.size() == mcif_header_size(img) + 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MCIF");
  CHECK(bytes[4] == 1);  // version, little-endian
  CHECK(bytes[8] == 2);  // H
  CHECK(bytes[20] == 0);  // dtype
  CHECK(bytes[21] == 3);  // name length
  // 1.0f = 0x3F800000 little-endian at the end
  CHECK(bytes[bytes.size() - 1] == 0x3F);
  CHECK(bytes[bytes.size() - 2] == 0x80);

  const auto back = decode_mcif(bytes);
  CHECK(back.pixels == img.pixels);
  CHECK(back.channel_names == img.channel_names);
  CHECK(encode_mcif(back) == bytes);
}

TEST_CASE("MCIF file round trip and size arithmetic") {
  auto dir = scratch_dir("mcif");
  Rng rng(1);
  auto img = testing::random_image(10, 224, rng);
  const auto path = (dir / "ten.mcif").string();
  write_mcif(path, img);
  CHECK(fs::file_size(path) == mcif_header_size(img) + 4 * 10 * 224 * 224);
  auto back = read_mcif(path);
  CHECK(back.height == 224);
  CHECK(back.channels() == 10);
  CHECK(std::memcmp(back.pixels.data(), img.pixels.data(), img.pixels.size() * 4) == 0);
}

TEST_CASE("MCIF rejects malformed input with typed errors") {
  MultiChannelImage img(2, 3, 3, 0.5f);
  const auto good = encode_mcif(img);

  auto bad = good;
  bad[3] = 'X';
  CHECK_THROWS_AS(decode_mcif(bad), BadMagicError);

  bad = good;
  bad[4] = 2;
  CHECK_THROWS_AS(decode_mcif(bad), VersionError);

  bad = good;
  bad[20] = 1;
  CHECK_THROWS_AS(decode_mcif(bad), UnsupportedDtypeError);

  bad = good;
  bad.pop_back();
  CHECK_THROWS_AS(decode_mcif(bad), TruncatedError);
  CHECK_THROWS_AS(decode_mcif(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), TruncatedError);

  bad = good;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_mcif(bad), DataError);
  CHECK_THROWS_AS(read_mcif("/nonexistent/x.mcif"), DataError);
}

TEST_CASE("resize_bilinear") {
  Rng rng(2);
  auto img = testing::random_image(2, 9, rng);
  auto same = resize_bilinear(img, 9);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(std::abs(same.pixels[i] - img.pixels[i]) < 1e-6);

  MultiChannelImage flat(1, 5, 7, 0.37f);
  for (float v : resize_bilinear(flat, 13).pixels) CHECK(v == 0.37f);

  MultiChannelImage checker(1, 2, 2);
  checker.pixels = {0.0f, 1.0f, 1.0f, 0.0f};
  auto up = resize_bilinear(checker, 4);
  // source coordinates along each axis: 0, 0.25, 0.75, 1 (clamped at the ends)
  const double t[] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      const double v = (1 - t[y]) * t[x] + t[y] * (1 - t[x]);
      CHECK(std::abs(up.at(0, y, x) - v) < 1e-6);
    }
  }
}

TEST_CASE("normalize_minmax") {
  MultiChannelImage img(2, 1, 3);
  img.pixels = {2.0f, 4.0f, 6.0f, 5.0f, 5.0f, 5.0f};
  normalize_minmax(img);
  CHECK(img.pixels == std::vector<float>{0.0f, 0.5f, 1.0f, 0.0f, 0.0f, 0.0f});
}

TEST_CASE("synthetic generators are pure and follow their construction") {
  SyntheticOptions o;
  o.count = 40;
  o.channels = 3;
  o.side = 16;
  o.seed = 5;
  const auto a = generate_synthetic(o);
  const auto b = generate_synthetic(o);
  REQUIRE(a.samples.size() == 40);
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(encode_mcif(a.samples[i].image) == encode_mcif(b.samples[i].image));
    const auto bits = xor_presence(o.seed, i, 3);
    CHECK(a.samples[i].label == double(bits[0] ^ bits[1] ^ bits[2]));
    for (float v : a.samples[i].image.pixels) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CHECK(a.indices(Split::Test).size() == 10);

  // sample i is independent of count
  auto more = o;
  more.count = 80;
  CHECK(encode_mcif(generate_synthetic(more).samples[7].image) == encode_mcif(a.samples[7].image));

  o.kind = SyntheticKind::Reconstruction;
  auto rec = generate_synthetic(o);
  CHECK(rec.kind == TaskKind::Reconstruction);
  CHECK(rec.target_channel == 2u);

  o.kind = SyntheticKind::IntrachannelShape;
  o.channels = 1;
  CHECK(generate_synthetic(o).samples.size() == 40);
  o.kind = SyntheticKind::InterchannelXor;
  CHECK_THROWS_AS(generate_synthetic(o), DataError);
  CHECK_THROWS_AS(parse_synthetic_kind("xor"), DataError);
}

TEST_CASE("dataset directory round trip and strict manifests") {
  auto dir = scratch_dir("dataset");
  SyntheticOptions o;
  o.count = 6;
  o.side = 8;
  auto ds = generate_synthetic(o);
  write_dataset(dir.string(), ds);
  const auto manifest = (dir / "manifest.json").string();
  auto back = load_dataset(manifest);
  REQUIRE(back.samples.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(back.samples[i].image.pixels == ds.samples[i].image.pixels);
    CHECK(back.samples[i].label == ds.samples[i].label);
    CHECK(back.samples[i].split == ds.samples[i].split);
  }

  // rewriting the same dataset produces identical bytes
  auto dir2 = scratch_dir("dataset2");
  write_dataset(dir2.string(), generate_synthetic(o));
  CHECK(read_file((dir2 / "sample_00003.mcif").string()) == read_file((dir / "sample_00003.mcif").string()));
  CHECK(read_file((dir2 / "manifest.json").string()) == read_file(manifest));

  auto write_text = [](const fs::path& p, const std::string& text) { std::ofstream(p) << text; };
  write_text(dir / "typo.json", R"({"task":"classification","entrys":[]})");
  CHECK_THROWS_AS(load_manifest((dir / "typo.json").string()), DataError);
  write_text(dir / "missing.json", R"({"task":"classification","entries":[{"path":"nope.mcif","label":1}]})");
  CHECK_THROWS_AS(load_manifest((dir / "missing.json").string()), DataError);
  write_text(dir / "frac.json", R"({"task":"classification","entries":[{"path":"sample_00000.mcif","label":0.5}]})");
  CHECK_THROWS_AS(load_manifest((dir / "frac.json").string()), DataError);
  write_text(dir / "reg.json", R"({"task":"regression","entries":[{"path":"sample_00000.mcif","label":0.5}]})");
  CHECK(load_manifest((dir / "reg.json").string()).entries[0].label == 0.5);
}

TEST_CASE("checkpoint round trip") {
  auto dir = scratch_dir("ckpt");
  Rng rng(3);
  Tensor<float> w({3, 4}), b({4});
  fill_normal(w, 1.0, rng);
  fill_normal(b, 1.0, rng);
  Checkpoint ck;
  ck.config_json = R"({"dim":4})";
  ck.step = 17;
  ck.rng_state = rng_state(rng);
  ck.entries = {{"w", w}, {"b", b}};
  const auto path = (dir / "model").string();
  save_checkpoint(path, ck);

  auto loaded = load_checkpoint(path);
  CHECK(loaded.step == 17);
  CHECK(loaded.config_json == R"({"dim":4})");
  Rng restored;
  restore_rng(restored, loaded.rng_state);
  CHECK(restored() == rng());

  const auto path2 = (dir / "again").string();
  save_checkpoint(path2, loaded);
  CHECK(read_file(path + ".json") == read_file(path2 + ".json"));
  CHECK(read_file(path + ".bin") == read_file(path2 + ".bin"));

  ParamList<float> into{{"w", Tensor<float>({3, 4})}, {"b", Tensor<float>({4})}};
  copy_entries(loaded.entries, into);
  CHECK(checksum(into) == checksum(ck.entries));

  ParamList<float> wrong{{"w", Tensor<float>({3, 5})}, {"b", Tensor<float>({4})}};
  try {
    copy_entries(loaded.entries, wrong);
    FAIL("expected mismatch");
  } catch (const CheckpointMismatchError& e) {
    CHECK(std::string(e.what()).find("w") != std::string::npos);
  }

  auto text = read_file(path + ".json");
  std::string s(text.begin(), text.end());
  s.replace(s.find("\"format_version\": 1"), 19, "\"format_version\": 2");
  write_file(path + ".json", std::vector<std::uint8_t>(s.begin(), s.end()));
  CHECK_THROWS_AS(load_checkpoint(path), VersionError);
}
