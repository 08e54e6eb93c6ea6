#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "deformpic/dataset.hpp"
#include "deformpic/errors.hpp"
#include "deformpic/geometry.hpp"

using namespace deformpic;
using namespace deformpic::dataset;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("deformpic_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<char> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ShapeSpec spec_of(ShapeKind kind, std::vector<double> params, int n, std::uint64_t seed) {
  ShapeSpec s;
  s.kind = kind;
  s.params = std::move(params);
  s.n_points = n;
  s.seed = seed;
  return s;
}

double norm(const Vec3& p) { return std::sqrt(double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]); }

void check_unit_sphere(const PointCloud& c) {
  double s[3] = {0, 0, 0}, m = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) s[k] += c[i][k];
    m = std::max(m, norm(c[i]));
  }
  CHECK(std::sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2]) / double(c.size()) < 1e-6);
  CHECK(std::abs(m - 1.0) < 1e-6);
}

DatasetConfig small_config(int spc = 2, int n = 64) {
  DatasetConfig cfg;
  cfg.samples_per_cell = spc;
  cfg.n_points = n;
  cfg.seed = 7;
  cfg.patches = 2;
  cfg.patch_size = 2;
  return cfg;
}

}  // namespace

TEST_CASE("generate_shape: sphere points all lie at unit norm") {
  for (int n : {32, 33, 101, 1024}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const PointCloud c = generate_shape(spec_of(ShapeKind::sphere, {0.7}, n, seed));
      REQUIRE(c.size() == static_cast<std::size_t>(n));
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(norm(c[i]) - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("generate_shape: cube points lie on a face") {
  const PointCloud c = generate_shape(spec_of(ShapeKind::cube, {0.5, 0.8, 0.4}, 500, 9));
  Vec3 extent{0, 0, 0};
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int k = 0; k < 3; ++k) extent[k] = std::max(extent[k], std::abs(c[i][k]));
  for (std::size_t i = 0; i < c.size(); ++i) {
    bool on_face = false;
    for (int k = 0; k < 3; ++k) on_face |= std::abs(std::abs(c[i][k]) - extent[k]) < 1e-6;
    CHECK(on_face);
  }
}

TEST_CASE("generate_shape: determinism, normalization and validation") {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const ShapeSpec spec = random_shape_spec(rng.next_u64(), 32 + static_cast<int>(rng.below(300)));
    const PointCloud a = generate_shape(spec);
    CHECK(a == generate_shape(spec));
    CHECK(a.size() == static_cast<std::size_t>(spec.n_points));
    check_unit_sphere(a);
  }
  CHECK_THROWS_AS(generate_shape(spec_of(ShapeKind::sphere, {0.7}, 31, 1)), ConfigError);
  CHECK_THROWS_AS(generate_shape(spec_of(ShapeKind::torus, {0.7}, 64, 1)), ConfigError);
  CHECK_THROWS_AS(generate_shape(spec_of(ShapeKind::cone, {0.5, 9.0}, 64, 1)), ConfigError);
  CHECK_THROWS_AS(generate_shape(spec_of(static_cast<ShapeKind>(9), {0.5}, 64, 1)), ConfigError);
  CHECK_THROWS_AS(parse_shape_kind("pyramid"), ConfigError);
}

TEST_CASE("generate_shape: torus points satisfy the implicit equation") {
  const double big = 0.8, small = 0.25;
  const PointCloud c = generate_shape(spec_of(ShapeKind::torus, {big, small}, 400, 5));
  // Normalization divides by the largest sampled norm, which is close to but
  // below big + small; recover it by least squares on the implicit equation.
  auto residual = [&](std::size_t i, double s) {
    const double x = c[i][0] * s, y = c[i][1] * s, z = c[i][2] * s;
    const double ring = std::sqrt(x * x + y * y) - big;
    return ring * ring + z * z - small * small;
  };
  auto cost = [&](double s) {
    double total = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) total += residual(i, s) * residual(i, s);
    return total;
  };
  double lo = big, hi = big + small;
  for (int it = 0; it < 200; ++it) {
    const double m1 = lo + (hi - lo) / 3, m2 = hi - (hi - lo) / 3;
    (cost(m1) < cost(m2) ? hi : lo) = cost(m1) < cost(m2) ? m2 : m1;
  }
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(residual(i, lo)) < 1e-5);
}

TEST_CASE("reconstruction pairs") {
  CHECK(reconstruction_input_size(1024, 1) == 512);
  CHECK(reconstruction_input_size(1024, 5) == 32);
  CHECK(reconstruction_input_size(128, 5) == 4);
  CHECK(reconstruction_input_size(100, 3) == 13);
  CHECK_THROWS_AS(reconstruction_input_size(1024, 6), ConfigError);

  const PointCloud c = generate_shape(random_shape_spec(3, 1024));
  for (int level = 1; level <= 5; ++level) {
    Rng rng(level);
    const auto pair = make_reconstruction_pair(c, level, rng);
    CHECK(pair.input.size() == (1024u >> level));
    CHECK(pair.target == c);
    std::set<std::array<float, 3>> target_points;
    for (std::size_t i = 0; i < c.size(); ++i) target_points.insert(c[i]);
    for (std::size_t i = 0; i < pair.input.size(); ++i) CHECK(target_points.count(pair.input[i]) == 1);
  }
}

TEST_CASE("denoising pairs") {
  CHECK(denoising_replaced_count(1024, 3) == 300);
  CHECK(denoising_replaced_count(128, 1) == 13);
  const PointCloud c = generate_shape(random_shape_spec(4, 1024));
  Rng rng(3);
  const auto pair = make_denoising_pair(c, 3, rng);
  CHECK(pair.target == c);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < c.size(); ++i) changed += pair.input[i] != c[i];
  CHECK(changed == 300);
  CHECK(pair.provenance.changed == 300);
}

TEST_CASE("registration pairs") {
  const PointCloud c = generate_shape(random_shape_spec(5, 256));
  Rng rng(4);
  const auto pair = make_registration_pair(c, 1, rng);
  for (double a : pair.provenance.rotation_deg) CHECK(std::abs(a) <= 20.0);
  CHECK(pair.target == c);
  CHECK(geometry::chamfer_l2(pair.input, pair.target) > 0.0);
  for (std::size_t i = 0; i < c.size(); i += 7)
    for (std::size_t j = i + 1; j < c.size(); j += 11) {
      auto d = [](const Vec3& a, const Vec3& b) {
        return std::sqrt(std::pow(a[0] - b[0], 2) + std::pow(a[1] - b[1], 2) + std::pow(a[2] - b[2], 2));
      };
      CHECK(std::abs(d(pair.input[i], pair.input[j]) - d(c[i], c[j])) < 1e-5);
    }
}

TEST_CASE("level monotonicity of input/target chamfer distance") {
  for (Task task : {Task::denoising, Task::registration}) {
    std::vector<double> mean(5, 0.0);
    for (int s = 0; s < 100; ++s) {
      const PointCloud c = generate_shape(random_shape_spec(1000 + s, 128));
      for (int level = 1; level <= 5; ++level) {
        Rng rng = Rng::keyed(s, {static_cast<std::uint64_t>(level)});
        const auto pair = make_pair(task, c, level, rng);
        mean[level - 1] += geometry::chamfer_l2(pair.input, pair.target) / 100.0;
      }
    }
    for (int l = 1; l < 5; ++l) CHECK(mean[l] > mean[l - 1]);
  }
}

TEST_CASE("records: provenance regenerates inputs; prompt and query differ") {
  const DatasetConfig cfg = small_config(2, 96);
  for (std::size_t i = 0; i < cfg.record_count(); ++i) {
    const auto s = generate_record(cfg, i);
    const auto& p = s.provenance;
    CHECK(p.prompt_shape.seed != p.query_shape.seed);
    CHECK(regenerate_input(s.task, s.prompt_target, s.level, p.prompt_pair) == s.prompt_input);
    CHECK(regenerate_input(s.task, s.query_target, s.level, p.query_pair) == s.query_input);
    CHECK(generate_shape(p.prompt_shape) == s.prompt_target);
    CHECK(s.prompt_target.size() == 96);
    CHECK(s.query_target.size() == 96);
    check_unit_sphere(s.prompt_target);
    check_unit_sphere(s.query_target);
  }
  CHECK_THROWS_AS(generate_record(cfg, cfg.record_count()), ConfigError);
}

TEST_CASE("dataset config rejects clouds too small to patch") {
  DatasetConfig cfg;
  cfg.n_points = 480;  // level-5 reconstruction input: 15 points < m = 16
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.n_points = 512;
  CHECK_NOTHROW(cfg.validate());
  cfg.n_points = 480;
  cfg.levels = {1, 2, 3, 4};
  CHECK_NOTHROW(cfg.validate());
  cfg.levels = {1, 2, 3, 4, 5};
  cfg.tasks = {Task::denoising, Task::registration};
  CHECK_NOTHROW(cfg.validate());
  cfg.n_points = 8;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("build_dataset: counts, determinism and round trip") {
  TempDir a("build_a"), b("build_b"), c("build_c");
  const DatasetConfig cfg = small_config();
  const auto manifest = build_dataset(cfg, a.path, 2);
  CHECK(manifest.records.size() == 30);
  for (const auto& [task, per_level] : manifest.counts) CHECK(per_level == std::vector<int>(5, 2));
  for (std::size_t i = 1; i < manifest.records.size(); ++i) CHECK(manifest.records[i].offset > manifest.records[i - 1].offset);

  build_dataset(cfg, b.path, 1);
  CHECK(bytes_of(a.path / "manifest.json") == bytes_of(b.path / "manifest.json"));
  CHECK(bytes_of(a.path / "records.bin") == bytes_of(b.path / "records.bin"));

  const Dataset loaded = load_dataset(a.path);
  CHECK(loaded.records.size() == 30);
  CHECK(loaded.records == generate_dataset(cfg).records);
  save_dataset(loaded, c.path);
  CHECK(bytes_of(a.path / "manifest.json") == bytes_of(c.path / "manifest.json"));
  CHECK(bytes_of(a.path / "records.bin") == bytes_of(c.path / "records.bin"));
  CHECK(fingerprint(loaded.manifest) == fingerprint(manifest));
}

TEST_CASE("load_dataset: corruption, truncation and version errors") {
  TempDir d("corrupt");
  const DatasetConfig cfg = small_config(1);
  const auto manifest = build_dataset(cfg, d.path);
  const auto records = d.path / "records.bin";
  const auto original = bytes_of(records);

  SUBCASE("one flipped byte names its record") {
    auto bytes = original;
    const auto& victim = manifest.records[6];
    bytes[victim.offset + 17] ^= 0x40;
    std::ofstream(records, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    try {
      (void)load_dataset(d.path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("record 6") != std::string::npos);
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
  }
  SUBCASE("truncated data file") {
    std::ofstream(records, std::ios::binary).write(original.data(), static_cast<std::streamsize>(original.size() - 5));
    CHECK_THROWS_AS(load_dataset(d.path), FormatError);
  }
  SUBCASE("unsupported version") {
    auto text = bytes_of(d.path / "manifest.json");
    std::string s(text.begin(), text.end());
    s.replace(s.find("\"version\": 1"), 12, "\"version\": 2");
    std::ofstream(d.path / "manifest.json") << s;
    try {
      (void)load_dataset(d.path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_dataset(d.path / "absent"), IoError); }
}

TEST_CASE("load_dataset: an empty dataset loads as zero records") {
  TempDir d("empty");
  DatasetConfig cfg = small_config(0);
  const auto manifest = build_dataset(cfg, d.path);
  CHECK(manifest.records.empty());
  CHECK(fs::file_size(d.path / "records.bin") == 0);
  const Dataset loaded = load_dataset(d.path);
  CHECK(loaded.records.empty());
}

TEST_CASE("record encoding is little-endian u32 counts and f32 coordinates") {
  InContextSample s;
  s.prompt_input = PointCloud(std::vector<Vec3>{{1.0f, -2.0f, 0.5f}});
  s.prompt_target = PointCloud(std::vector<Vec3>{{0, 0, 0}});
  s.query_input = PointCloud(std::vector<Vec3>{{0, 0, 0}});
  s.query_target = PointCloud(std::vector<Vec3>{{0, 0, 0}});
  const auto bytes = encode_record(s);
  REQUIRE(bytes.size() == 4 * (4 + 12));
  CHECK(bytes[0] == 1);
  CHECK(bytes[1] == 0);
  // 1.0f = 0x3F800000
  CHECK(bytes[4] == 0x00);
  CHECK(bytes[7] == 0x3F);
  InContextSample back;
  decode_record(bytes.data(), bytes.size(), back);
  CHECK(back.prompt_input == s.prompt_input);
  CHECK_THROWS_AS(decode_record(bytes.data(), bytes.size() - 1, back), FormatError);
}

TEST_CASE("held-out split is deterministic and near ten percent") {
  std::size_t held = 0;
  for (std::size_t i = 0; i < 10000; ++i) held += is_heldout(i);
  CHECK(held > 900);
  CHECK(held < 1100);
  CHECK(is_heldout(123) == is_heldout(123));
}
