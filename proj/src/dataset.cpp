#include "deformpic/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "deformpic/errors.hpp"
#include "deformpic/geometry.hpp"
#include "deformpic/io.hpp"
#include "deformpic/parallel.hpp"

namespace deformpic::dataset {

namespace {

using io::get_u32;
using io::put_u32;
using io::read_file;
using io::write_file_atomic;

using json = nlohmann::ordered_json;
using D3 = std::array<double, 3>;

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct ParamRange {
  double lo;
  double hi;
};

// Per-kind parameter ranges, in the order documented on ShapeSpec.
std::vector<ParamRange> param_ranges(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return {{0.5, 1.0}};
    case ShapeKind::cube: return {{0.4, 1.0}, {0.4, 1.0}, {0.4, 1.0}};
    case ShapeKind::torus: return {{0.6, 0.9}, {0.15, 0.35}};
    case ShapeKind::cylinder: return {{0.3, 0.8}, {0.3, 1.0}};
    case ShapeKind::cone: return {{0.3, 0.8}, {0.6, 1.5}};
  }
  throw ConfigError("unknown shape kind");
}

bool centrally_symmetric(ShapeKind kind) { return kind != ShapeKind::cone; }

D3 unit_vector(Rng& rng) {
  for (;;) {
    D3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-12) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

D3 disk_point(double radius, Rng& rng) {
  const double r = radius * std::sqrt(rng.uniform());
  const double t = kTwoPi * rng.uniform();
  return {r * std::cos(t), r * std::sin(t), 0.0};
}

// One area-uniform sample of the (unnormalized) parametric surface.
D3 surface_point(const ShapeSpec& spec, Rng& rng) {
  const auto& p = spec.params;
  switch (spec.kind) {
    case ShapeKind::sphere: {
      const D3 u = unit_vector(rng);
      return {p[0] * u[0], p[0] * u[1], p[0] * u[2]};
    }
    case ShapeKind::cube: {
      const double ax = p[1] * p[2], ay = p[0] * p[2], az = p[0] * p[1];
      const double pick = rng.uniform() * (ax + ay + az);
      const int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      D3 q{};
      for (int a = 0; a < 3; ++a) q[a] = a == axis ? sign * p[a] : rng.uniform(-p[a], p[a]);
      return q;
    }
    case ShapeKind::torus: {
      const double big = p[0], small = p[1];
      for (;;) {
        const double u = kTwoPi * rng.uniform();
        const double v = kTwoPi * rng.uniform();
        const double ring = big + small * std::cos(v);
        if (rng.uniform() * (big + small) <= ring) {
          return {ring * std::cos(u), ring * std::sin(u), small * std::sin(v)};
        }
      }
    }
    case ShapeKind::cylinder: {
      const double r = p[0], h = p[1];
      const double side = kTwoPi * r * 2.0 * h, caps = 2.0 * std::numbers::pi * r * r;
      if (rng.uniform() * (side + caps) < side) {
        const double t = kTwoPi * rng.uniform();
        return {r * std::cos(t), r * std::sin(t), rng.uniform(-h, h)};
      }
      D3 q = disk_point(r, rng);
      q[2] = rng.uniform() < 0.5 ? -h : h;
      return q;
    }
    case ShapeKind::cone: {
      const double r = p[0], h = p[1];
      const double side = std::numbers::pi * r * std::hypot(r, h), base = std::numbers::pi * r * r;
      if (rng.uniform() * (side + base) < side) {
        // Lateral area grows linearly with distance from the apex.
        const double s = std::sqrt(rng.uniform());
        const double t = kTwoPi * rng.uniform();
        return {s * r * std::cos(t), s * r * std::sin(t), h * (1.0 - s)};
      }
      return disk_point(r, rng);
    }
  }
  throw ConfigError("unknown shape kind");
}

// Three points on a great circle of the sphere at 120 degree spacing.
void sphere_triangle(double radius, Rng& rng, std::vector<Vec3>& out) {
  const D3 a = unit_vector(rng);
  D3 b;
  for (;;) {
    const D3 v = unit_vector(rng);
    const double d = v[0] * a[0] + v[1] * a[1] + v[2] * a[2];
    D3 w{v[0] - d * a[0], v[1] - d * a[1], v[2] - d * a[2]};
    const double n = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    if (n > 1e-6) {
      b = {w[0] / n, w[1] / n, w[2] / n};
      break;
    }
  }
  for (int i = 0; i < 3; ++i) {
    const double t = kTwoPi * i / 3.0;
    const double c = std::cos(t), s = std::sin(t);
    out.push_back({static_cast<float>(radius * (c * a[0] + s * b[0])), static_cast<float>(radius * (c * a[1] + s * b[1])),
                   static_cast<float>(radius * (c * a[2] + s * b[2]))});
  }
}

Vec3 to_vec3(const D3& p) { return {static_cast<float>(p[0]), static_cast<float>(p[1]), static_cast<float>(p[2])}; }

void check_level(int level) {
  if (level < 1 || level > kLevels) throw ConfigError("level must lie in 1.." + std::to_string(kLevels));
}

// --- little-endian framing ---------------------------------------------------

void put_cloud(std::vector<std::uint8_t>& out, const PointCloud& cloud) {
  put_u32(out, static_cast<std::uint32_t>(cloud.size()));
  for (float f : cloud.xyz()) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

// --- JSON ------------------------------------------------------------------------

json shape_to_json(const ShapeSpec& s) {
  return json{{"kind", shape_kind_name(s.kind)}, {"params", s.params}, {"n_points", s.n_points}, {"seed", s.seed}};
}

ShapeSpec shape_from_json(const json& j) {
  ShapeSpec s;
  s.kind = parse_shape_kind(j.at("kind").get<std::string>());
  s.params = j.at("params").get<std::vector<double>>();
  s.n_points = j.at("n_points").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

json pair_to_json(const PairProvenance& p) {
  return json{{"pair_seed", p.pair_seed}, {"changed", p.changed}, {"rotation_deg", p.rotation_deg}};
}

PairProvenance pair_from_json(const json& j) {
  PairProvenance p;
  p.pair_seed = j.at("pair_seed").get<std::uint64_t>();
  p.changed = j.at("changed").get<std::size_t>();
  p.rotation_deg = j.at("rotation_deg").get<std::array<double, 3>>();
  return p;
}

json provenance_to_json(const Provenance& p) {
  return json{{"prompt_shape", shape_to_json(p.prompt_shape)},
              {"query_shape", shape_to_json(p.query_shape)},
              {"prompt_pair", pair_to_json(p.prompt_pair)},
              {"query_pair", pair_to_json(p.query_pair)}};
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.prompt_shape = shape_from_json(j.at("prompt_shape"));
  p.query_shape = shape_from_json(j.at("query_shape"));
  p.prompt_pair = pair_from_json(j.at("prompt_pair"));
  p.query_pair = pair_from_json(j.at("query_pair"));
  return p;
}

std::map<std::string, std::vector<int>> tally(const std::vector<Task>& tasks, const std::vector<int>& levels,
                                              const std::vector<RecordEntry>& records) {
  std::map<std::string, std::vector<int>> counts;
  for (Task t : tasks) counts[std::string(task_name(t))] = std::vector<int>(levels.size(), 0);
  for (const auto& r : records) {
    auto it = counts.find(std::string(task_name(r.task)));
    const auto lv = std::find(levels.begin(), levels.end(), r.level);
    if (it == counts.end() || lv == levels.end()) {
      throw FormatError("record task/level not declared in manifest");
    }
    ++it->second[static_cast<std::size_t>(lv - levels.begin())];
  }
  return counts;
}

}  // namespace

// --- shapes --------------------------------------------------------------------

void validate(const ShapeSpec& spec) {
  if (spec.n_points < kMinPoints) throw ConfigError("shape needs at least " + std::to_string(kMinPoints) + " points");
  const auto ranges = param_ranges(spec.kind);
  if (spec.params.size() != ranges.size()) {
    throw ConfigError(std::string(shape_kind_name(spec.kind)) + " expects " + std::to_string(ranges.size()) +
                      " parameters");
  }
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (!(spec.params[i] >= ranges[i].lo && spec.params[i] <= ranges[i].hi)) {
      throw ConfigError(std::string(shape_kind_name(spec.kind)) + " parameter " + std::to_string(i) + " out of range");
    }
  }
}

ShapeSpec random_shape_spec(std::uint64_t seed, int n_points) {
  Rng rng = Rng::keyed(seed, {1});
  ShapeSpec spec;
  spec.kind = kAllShapeKinds[rng.below(kAllShapeKinds.size())];
  for (const auto& r : param_ranges(spec.kind)) spec.params.push_back(rng.uniform(r.lo, r.hi));
  spec.n_points = n_points;
  spec.seed = seed;
  validate(spec);
  return spec;
}

PointCloud generate_shape(const ShapeSpec& spec) {
  validate(spec);
  Rng rng = Rng::keyed(spec.seed, {2});
  const auto n = static_cast<std::size_t>(spec.n_points);
  std::vector<Vec3> pts;
  pts.reserve(n);
  if (centrally_symmetric(spec.kind)) {
    // Antithetic pairs keep the centroid at the symmetry center.
    const bool triangle = spec.kind == ShapeKind::sphere && n % 2 == 1;
    const std::size_t pairs = (triangle ? n - 3 : n) / 2;
    for (std::size_t i = 0; i < pairs; ++i) {
      const Vec3 p = to_vec3(surface_point(spec, rng));
      pts.push_back(p);
      pts.push_back({-p[0], -p[1], -p[2]});
    }
    if (triangle) {
      sphere_triangle(spec.params[0], rng, pts);
    } else if (pts.size() < n) {
      pts.push_back(to_vec3(surface_point(spec, rng)));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) pts.push_back(to_vec3(surface_point(spec, rng)));
  }
  return geometry::normalize_unit_sphere(PointCloud(pts));
}

// --- task pairs ------------------------------------------------------------------

std::size_t reconstruction_input_size(std::size_t n_points, int level) {
  check_level(level);
  const std::size_t div = std::size_t{1} << level;
  return (n_points + div - 1) / div;
}

std::size_t denoising_replaced_count(std::size_t n_points, int level) {
  check_level(level);
  const std::size_t num = n_points * static_cast<std::size_t>(level) * 100;
  return (num + 1023) / 1024;
}

double registration_max_angle(int level) {
  check_level(level);
  return 20.0 * level;
}

TaskPair make_reconstruction_pair(const PointCloud& cloud, int level, Rng& rng) {
  const std::size_t size = reconstruction_input_size(cloud.size(), level);
  auto idx = rng.sample_without_replacement(cloud.size(), size);
  std::sort(idx.begin(), idx.end());
  TaskPair pair{cloud.select(idx), cloud, {}};
  pair.provenance.changed = size;
  return pair;
}

TaskPair make_denoising_pair(const PointCloud& cloud, int level, Rng& rng) {
  const std::size_t count = denoising_replaced_count(cloud.size(), level);
  auto idx = rng.sample_without_replacement(cloud.size(), count);
  std::sort(idx.begin(), idx.end());
  TaskPair pair{cloud, cloud, {}};
  for (std::size_t i : idx) {
    const double x = rng.normal(), y = rng.normal(), z = rng.normal();
    pair.input.set(i, {static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)});
  }
  pair.provenance.changed = count;
  return pair;
}

TaskPair make_registration_pair(const PointCloud& cloud, int level, Rng& rng) {
  auto [rotated, rotation] = geometry::random_rotation(cloud, registration_max_angle(level), rng);
  TaskPair pair{std::move(rotated), cloud, {}};
  pair.provenance.changed = cloud.size();
  pair.provenance.rotation_deg = rotation.angles_deg;
  return pair;
}

TaskPair make_pair(Task task, const PointCloud& cloud, int level, Rng& rng) {
  switch (task) {
    case Task::reconstruction: return make_reconstruction_pair(cloud, level, rng);
    case Task::denoising: return make_denoising_pair(cloud, level, rng);
    case Task::registration: return make_registration_pair(cloud, level, rng);
  }
  throw ConfigError("unknown task");
}

PointCloud regenerate_input(Task task, const PointCloud& target, int level, const PairProvenance& provenance) {
  Rng rng(provenance.pair_seed);
  return make_pair(task, target, level, rng).input;
}

// --- datasets --------------------------------------------------------------------

void DatasetConfig::validate() const {
  if (samples_per_cell < 0) throw ConfigError("samples per cell must be non-negative");
  if (n_points < kMinPoints) throw ConfigError("n_points must be at least " + std::to_string(kMinPoints));
  if (patches < 1 || patch_size < 1) throw ConfigError("patch config (m, k) must be positive");
  if (tasks.empty() || levels.empty()) throw ConfigError("at least one task and one level required");
  for (int l : levels) check_level(l);
  // Every input cloud must hold at least max(m, k) points for joint patching.
  std::size_t smallest = static_cast<std::size_t>(n_points);
  if (std::find(tasks.begin(), tasks.end(), Task::reconstruction) != tasks.end()) {
    smallest = reconstruction_input_size(smallest, *std::max_element(levels.begin(), levels.end()));
  }
  if (smallest < static_cast<std::size_t>(std::max(patches, patch_size))) {
    throw ConfigError("n_points " + std::to_string(n_points) + " leaves " + std::to_string(smallest) +
                      " input points, fewer than the patch config (m=" + std::to_string(patches) +
                      ", k=" + std::to_string(patch_size) + ") needs");
  }
}

InContextSample generate_record(const DatasetConfig& config, std::size_t index) {
  const std::size_t cell = index / static_cast<std::size_t>(std::max(config.samples_per_cell, 1));
  if (index >= config.record_count()) throw ConfigError("record index out of range");
  Rng rng = Rng::keyed(config.seed, {index});
  const std::uint64_t prompt_seed = rng.next_u64();
  std::uint64_t query_seed;
  do {
    query_seed = rng.next_u64();
  } while (query_seed == prompt_seed);

  InContextSample s;
  s.task = config.tasks[cell / config.levels.size()];
  s.level = config.levels[cell % config.levels.size()];
  auto& prov = s.provenance;
  prov.prompt_shape = random_shape_spec(prompt_seed, config.n_points);
  prov.query_shape = random_shape_spec(query_seed, config.n_points);

  prov.prompt_pair.pair_seed = rng.next_u64();
  prov.query_pair.pair_seed = rng.next_u64();

  const PointCloud prompt_clean = generate_shape(prov.prompt_shape);
  const PointCloud query_clean = generate_shape(prov.query_shape);
  Rng prompt_rng(prov.prompt_pair.pair_seed);
  Rng query_rng(prov.query_pair.pair_seed);
  TaskPair prompt = make_pair(s.task, prompt_clean, s.level, prompt_rng);
  TaskPair query = make_pair(s.task, query_clean, s.level, query_rng);
  prompt.provenance.pair_seed = prov.prompt_pair.pair_seed;
  query.provenance.pair_seed = prov.query_pair.pair_seed;
  prov.prompt_pair = prompt.provenance;
  prov.query_pair = query.provenance;
  s.prompt_input = std::move(prompt.input);
  s.prompt_target = std::move(prompt.target);
  s.query_input = std::move(query.input);
  s.query_target = std::move(query.target);
  return s;
}

namespace {

// Record table and per-cell counts; appends the encoded records to `blob` if given.
DatasetManifest index_records(const DatasetManifest& base, const std::vector<InContextSample>& records,
                              std::vector<std::uint8_t>* blob) {
  DatasetManifest m = base;
  m.version = kFormatVersion;
  m.records.clear();
  std::uint64_t offset = 0;
  for (const auto& s : records) {
    const auto bytes = encode_record(s);
    RecordEntry e;
    e.offset = offset;
    e.length = bytes.size();
    e.crc32 = crc32(bytes.data(), bytes.size());
    e.task = s.task;
    e.level = s.level;
    e.provenance = s.provenance;
    m.records.push_back(std::move(e));
    offset += bytes.size();
    if (blob) blob->insert(blob->end(), bytes.begin(), bytes.end());
  }
  m.counts = tally(m.tasks, m.levels, m.records);
  return m;
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& config, int threads) {
  config.validate();
  Dataset ds;
  ds.records.resize(config.record_count());
  parallel_for(ds.records.size(), threads, [&](std::size_t i) { ds.records[i] = generate_record(config, i); });
  auto& m = ds.manifest;
  m.n_points = config.n_points;
  m.tasks = config.tasks;
  m.levels = config.levels;
  m.seed = config.seed;
  m.patches = config.patches;
  m.patch_size = config.patch_size;
  m = index_records(m, ds.records, nullptr);
  return ds;
}

std::vector<std::uint8_t> encode_record(const InContextSample& s) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 12 * (s.prompt_input.size() + s.prompt_target.size() + s.query_input.size() + s.query_target.size()));
  put_cloud(out, s.prompt_input);
  put_cloud(out, s.prompt_target);
  put_cloud(out, s.query_input);
  put_cloud(out, s.query_target);
  return out;
}

void decode_record(const std::uint8_t* data, std::size_t length, InContextSample& out) {
  std::size_t pos = 0;
  auto cloud = [&]() {
    if (length - pos < 4) throw FormatError("record truncated");
    const std::size_t n = get_u32(data + pos);
    pos += 4;
    if ((length - pos) / 12 < n) throw FormatError("record truncated");
    std::vector<float> xyz(3 * n);
    for (std::size_t i = 0; i < 3 * n; ++i, pos += 4) xyz[i] = std::bit_cast<float>(get_u32(data + pos));
    return PointCloud(std::move(xyz));
  };
  out.prompt_input = cloud();
  out.prompt_target = cloud();
  out.query_input = cloud();
  out.query_target = cloud();
  if (pos != length) throw FormatError("record has trailing bytes");
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t length) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (length > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(length, 1u << 30));
    c = ::crc32(c, data, chunk);
    data += chunk;
    length -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

std::string manifest_to_json(const DatasetManifest& m) {
  json tasks = json::array();
  for (Task t : m.tasks) tasks.push_back(task_name(t));
  json counts = json::object();
  for (Task t : m.tasks) counts[std::string(task_name(t))] = m.counts.at(std::string(task_name(t)));
  json records = json::array();
  for (const auto& r : m.records) {
    records.push_back(json{{"offset", r.offset},
                           {"len", r.length},
                           {"crc32", r.crc32},
                           {"task", task_name(r.task)},
                           {"level", r.level},
                           {"provenance", provenance_to_json(r.provenance)}});
  }
  json j{{"version", m.version},
         {"n_points", m.n_points},
         {"tasks", tasks},
         {"levels", m.levels},
         {"counts", counts},
         {"seed", m.seed},
         {"patch", {{"m", m.patches}, {"k", m.patch_size}}},
         {"records", records}};
  return j.dump(1) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kFormatVersion) {
      throw FormatError("unsupported dataset version " + std::to_string(m.version) + " (expected " +
                        std::to_string(kFormatVersion) + ")");
    }
    m.n_points = j.at("n_points").get<int>();
    for (const auto& t : j.at("tasks")) m.tasks.push_back(parse_task(t.get<std::string>()));
    m.levels = j.at("levels").get<std::vector<int>>();
    m.counts = j.at("counts").get<std::map<std::string, std::vector<int>>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.patches = j.at("patch").at("m").get<int>();
    m.patch_size = j.at("patch").at("k").get<int>();
    for (const auto& r : j.at("records")) {
      RecordEntry e;
      e.offset = r.at("offset").get<std::uint64_t>();
      e.length = r.at("len").get<std::uint64_t>();
      e.crc32 = r.at("crc32").get<std::uint32_t>();
      e.task = parse_task(r.at("task").get<std::string>());
      e.level = r.at("level").get<int>();
      e.provenance = provenance_from_json(r.at("provenance"));
      m.records.push_back(std::move(e));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
}

DatasetManifest save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::vector<std::uint8_t> blob;
  const DatasetManifest m = index_records(dataset.manifest, dataset.records, &blob);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file_atomic(dir / "records.bin", blob.data(), blob.size());
  const std::string text = manifest_to_json(m);
  write_file_atomic(dir / "manifest.json", text.data(), text.size());
  return m;
}

DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& dir, int threads) {
  return save_dataset(generate_dataset(config, threads), dir);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_bytes = read_file(dir / "manifest.json");
  Dataset ds;
  ds.manifest = manifest_from_json(std::string(manifest_bytes.begin(), manifest_bytes.end()));
  const auto& m = ds.manifest;
  if (m.counts != tally(m.tasks, m.levels, m.records)) throw FormatError("manifest counts do not match its records");
  if (m.records.empty()) return ds;

  const auto blob = read_file(dir / "records.bin");
  std::uint64_t expected = 0;
  ds.records.resize(m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& e = m.records[i];
    const std::string name = "record " + std::to_string(i);
    if (e.offset != expected) throw FormatError(name + ": offset breaks record framing");
    if (e.offset + e.length > blob.size()) throw FormatError(name + ": truncated data file");
    const std::uint8_t* p = blob.data() + e.offset;
    if (crc32(p, e.length) != e.crc32) throw FormatError(name + ": checksum mismatch");
    auto& s = ds.records[i];
    try {
      decode_record(p, e.length, s);
    } catch (const FormatError& err) {
      throw FormatError(name + ": " + err.what());
    }
    if (s.prompt_target.size() != static_cast<std::size_t>(m.n_points) ||
        s.query_target.size() != static_cast<std::size_t>(m.n_points)) {
      throw FormatError(name + ": target cloud size differs from n_points");
    }
    s.task = e.task;
    s.level = e.level;
    s.provenance = e.provenance;
    expected = e.offset + e.length;
  }
  if (expected != blob.size()) throw FormatError("data file has trailing bytes after the last record");
  return ds;
}

std::string fingerprint(const DatasetManifest& manifest) {
  const std::string text = manifest_to_json(manifest);
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc32(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return buf;
}

bool is_heldout(std::size_t record_index) { return splitmix64(record_index ^ 0xD1B54A32D192ED03ULL) % 10 == 0; }

}  // namespace deformpic::dataset
