#include "ginv/flsim.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "ginv/png.hpp"

namespace fs = std::filesystem;

namespace ginv {

Tensor UserDataset::image(int i) const {
  int h = images.dim(1), w = images.dim(2), c = images.dim(3);
  Tensor out({h, w, c});
  std::copy_n(images.data.begin() + static_cast<int64_t>(i) * out.numel(),
              out.numel(), out.data.begin());
  return out;
}

Tensor render_sample(int height, int width, bool warm, bool top, Rng& rng) {
  Tensor img({height, width, 3});
  double base_r = warm ? 0.80 : 0.15;
  double base_g = 0.30;
  double base_b = warm ? 0.15 : 0.80;
  double brightness = 1.0 + rng.uniform(-0.10, 0.10);
  double shade = rng.uniform(0.0, 0.15);  // vertical shading strength

  double cx = rng.uniform(0.30, 0.70);
  double cy = top ? rng.uniform(0.18, 0.34) : rng.uniform(0.66, 0.82);
  double radius = rng.uniform(0.16, 0.22);
  const double edge = 0.05;
  const double blob_r = 0.97, blob_g = 0.95, blob_b = 0.55;

  for (int y = 0; y < height; ++y) {
    double ny = (y + 0.5) / height;
    double row_shade = 1.0 - shade * ny;
    for (int x = 0; x < width; ++x) {
      double nx = (x + 0.5) / width;
      double dist = std::sqrt((nx - cx) * (nx - cx) + (ny - cy) * (ny - cy));
      double m = 1.0 / (1.0 + std::exp((dist - radius) / edge));  // blob mask
      double r = (1 - m) * base_r * brightness * row_shade + m * blob_r;
      double g = (1 - m) * base_g * brightness * row_shade + m * blob_g;
      double b = (1 - m) * base_b * brightness * row_shade + m * blob_b;
      size_t at = (static_cast<size_t>(y) * width + x) * 3;
      img.data[at + 0] = r + 0.02 * rng.normal();
      img.data[at + 1] = g + 0.02 * rng.normal();
      img.data[at + 2] = b + 0.02 * rng.normal();
    }
  }
  img.clamp_(0.0, 1.0);
  // Quantize to the 8-bit levels the corpus files use.
  for (auto& v : img.data) v = std::lround(v * 255.0) / 255.0;
  return img;
}

Collection generate_corpus(const CorpusSpec& spec) {
  Collection out;
  out.reserve(static_cast<size_t>(spec.users) * spec.images_per_user);
  for (int u = 0; u < spec.users; ++u) {
    Rng urng = Rng::derive(spec.seed, 0x10000u + static_cast<uint64_t>(u));
    bool warm = urng.bernoulli(spec.p_warm);
    bool topv = urng.bernoulli(spec.p_top);
    char uid[16];
    std::snprintf(uid, sizeof uid, "u%03d", u);
    for (int i = 0; i < spec.images_per_user; ++i) {
      ImageRecord rec;
      rec.user_id = uid;
      rec.attributes = {{"warm", warm ? 1 : 0}, {"top", topv ? 1 : 0}};
      rec.label = urng.bernoulli(0.5) ? 1 : 0;
      rec.image = render_sample(spec.height, spec.width, warm, topv, urng);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

std::vector<UserDataset> partition_by_user(
    const Collection& collection,
    const std::function<std::string(const ImageRecord&)>& grouping,
    int min_images) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ImageRecord*>> groups;
  for (const auto& rec : collection) {
    std::string key = grouping(rec);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(&rec);
  }

  std::vector<UserDataset> out;
  for (const auto& key : order) {
    const auto& recs = groups[key];
    if (static_cast<int>(recs.size()) < min_images) continue;
    UserDataset ds;
    ds.user_id = key;
    ds.attributes = recs.front()->attributes;
    int h = recs.front()->image.dim(0), w = recs.front()->image.dim(1),
        c = recs.front()->image.dim(2);
    ds.images = Tensor({static_cast<int>(recs.size()), h, w, c});
    for (size_t i = 0; i < recs.size(); ++i) {
      if (recs[i]->attributes != ds.attributes)
        throw std::runtime_error("partition_by_user: user " + key +
                                 " has inconsistent attributes");
      if (recs[i]->image.shape != recs.front()->image.shape)
        throw std::runtime_error("partition_by_user: user " + key +
                                 " has inconsistent image shapes");
      std::copy(recs[i]->image.data.begin(), recs[i]->image.data.end(),
                ds.images.data.begin() +
                    static_cast<int64_t>(i) * recs[i]->image.numel());
      ds.labels.push_back(recs[i]->label);
    }
    out.push_back(std::move(ds));
  }
  if (out.empty())
    throw std::runtime_error("partition_by_user: no user meets min_images");
  return out;
}

std::vector<UserDataset> partition_by_user(const Collection& collection,
                                           int min_images) {
  return partition_by_user(
      collection, [](const ImageRecord& r) { return r.user_id; }, min_images);
}

std::vector<int> capture_sample_indices(int n, int batch_size, uint64_t seed) {
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(batch_size));
  return idx;
}

GradientCapture capture_round(const VictimModel& model, const UserDataset& user,
                              int batch_size, uint64_t seed,
                              bool known_labels) {
  if (batch_size < 1 || batch_size > user.size())
    throw std::runtime_error("capture_round: batch_size out of range for user " +
                             user.user_id);
  auto idx = capture_sample_indices(user.size(), batch_size, seed);

  int h = user.images.dim(1), w = user.images.dim(2), c = user.images.dim(3);
  LabeledBatch batch;
  batch.images = Tensor({batch_size, h, w, c});
  int64_t stride = static_cast<int64_t>(h) * w * c;
  for (int i = 0; i < batch_size; ++i) {
    std::copy_n(user.images.data.begin() + idx[static_cast<size_t>(i)] * stride,
                stride, batch.images.data.begin() + i * stride);
    batch.labels.push_back(user.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
  }

  GradientCapture cap = batch_gradient(model, batch);
  cap.metadata["seed"] = std::to_string(seed);
  cap.metadata["dataset"] = user.user_id;
  if (known_labels) {
    std::map<int, int> counts;
    for (int y : batch.labels) counts[y]++;
    cap.label_multiset_hint = counts;
  }
  return cap;
}

// ---- container format -------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'I', 'N', 'V', 'C', 'A', 'P', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_bytes(std::vector<unsigned char>& out, const void* p, size_t n) {
  const unsigned char* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}
void put_str(std::vector<unsigned char>& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

struct Reader {
  const std::vector<unsigned char>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("capture file truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(&buf[pos]), n);
    pos += n;
    return s;
  }
};

std::vector<unsigned char> encode_capture(const GradientCapture& cap) {
  std::vector<unsigned char> out;
  put_bytes(out, kMagic, 8);
  put_u32(out, kVersion);
  put_u64(out, cap.model_ref);
  put_u32(out, static_cast<uint32_t>(cap.batch_size));
  put_u32(out, static_cast<uint32_t>(cap.entries.size()));
  put_u32(out, static_cast<uint32_t>(cap.metadata.size()));
  for (const auto& [k, v] : cap.metadata) {  // std::map: sorted, deterministic
    put_str(out, k);
    put_str(out, v);
  }
  out.push_back(cap.label_multiset_hint ? 1 : 0);
  if (cap.label_multiset_hint) {
    put_u32(out, static_cast<uint32_t>(cap.label_multiset_hint->size()));
    for (const auto& [cls, count] : *cap.label_multiset_hint) {
      put_u32(out, static_cast<uint32_t>(cls));
      put_u32(out, static_cast<uint32_t>(count));
    }
  }
  for (const auto& [name, tensor] : cap.entries) {
    put_str(out, name);
    put_u32(out, static_cast<uint32_t>(tensor.shape.size()));
    for (int d : tensor.shape) put_u32(out, static_cast<uint32_t>(d));
    for (double v : tensor.data) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  uLong crc = crc32(0L, out.data(), static_cast<uInt>(out.size()));
  put_u32(out, static_cast<uint32_t>(crc));
  return out;
}

}  // namespace

size_t capture_file_size(const GradientCapture& cap) {
  // Header: magic(8) + version(4) + model_ref(8) + batch(4) + layers(4)
  //       + metadata count(4) + hint flag(1); trailer: crc(4).
  size_t n = 8 + 4 + 8 + 4 + 4 + 4 + 1 + 4;
  for (const auto& [k, v] : cap.metadata) n += 4 + k.size() + 4 + v.size();
  if (cap.label_multiset_hint)
    n += 4 + cap.label_multiset_hint->size() * 8;
  for (const auto& [name, t] : cap.entries)
    n += 4 + name.size() + 4 + 4 * t.shape.size() + 4 * t.data.size();
  return n;
}

void serialize_capture(const GradientCapture& cap, const std::string& path) {
  auto out = encode_capture(cap);
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("serialize_capture: cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("serialize_capture: rename failed for " + path);
}

GradientCapture deserialize_capture(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("deserialize_capture: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 16 + 9)
    throw std::runtime_error("deserialize_capture: file too small");

  // Integrity first: trailing CRC32 over everything before it.
  uLong crc = crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4));
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(buf[buf.size() - 4 + i]) << (8 * i);
  if (static_cast<uint32_t>(crc) != stored)
    throw std::runtime_error("deserialize_capture: checksum mismatch");

  Reader r{buf};
  r.need(8);
  if (std::memcmp(&buf[0], kMagic, 8) != 0)
    throw std::runtime_error("deserialize_capture: bad magic");
  r.pos = 8;
  uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("deserialize_capture: unknown format version " +
                             std::to_string(version));
  GradientCapture cap;
  cap.model_ref = r.u64();
  cap.batch_size = static_cast<int>(r.u32());
  uint32_t layers = r.u32();
  uint32_t metas = r.u32();
  for (uint32_t i = 0; i < metas; ++i) {
    std::string k = r.str();
    cap.metadata[k] = r.str();
  }
  r.need(1);
  bool has_hint = buf[r.pos++] != 0;
  if (has_hint) {
    std::map<int, int> hint;
    uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
      int cls = static_cast<int>(r.u32());
      hint[cls] = static_cast<int>(r.u32());
    }
    cap.label_multiset_hint = std::move(hint);
  }
  for (uint32_t l = 0; l < layers; ++l) {
    std::string name = r.str();
    uint32_t ndim = r.u32();
    std::vector<int> shape;
    for (uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(r.u32()));
    Tensor t(shape);
    for (auto& v : t.data) {
      uint32_t bits = r.u32();
      float fv;
      std::memcpy(&fv, &bits, 4);
      if (!std::isfinite(fv))
        throw std::runtime_error("deserialize_capture: non-finite gradient");
      v = static_cast<double>(fv);
    }
    cap.entries.emplace_back(std::move(name), std::move(t));
  }
  return cap;
}

void validate_capture(const GradientCapture& cap, const VictimModel& model) {
  if (cap.model_ref != model.weights_hash())
    throw std::runtime_error("capture/model mismatch: weight hash differs");
  const auto& entries = model.params().entries;
  if (cap.entries.size() != entries.size())
    throw std::runtime_error("capture/model mismatch: layer count");
  for (size_t i = 0; i < entries.size(); ++i) {
    if (cap.entries[i].first != entries[i].name ||
        cap.entries[i].second.shape != entries[i].value.shape)
      throw std::runtime_error("capture/model mismatch at layer " +
                               entries[i].name);
  }
}

// ---- corpus directory --------------------------------------------------------

void write_corpus_dir(const Collection& corpus, const std::string& dir,
                      bool force) {
  if (fs::exists(dir)) {
    if (!force)
      throw std::runtime_error("corpus output exists (use force): " + dir);
    fs::remove_all(dir);
  }
  fs::create_directories(fs::path(dir) / "images");

  nlohmann::json table = nlohmann::json::array();
  std::map<std::string, int> seq;
  for (const auto& rec : corpus) {
    int k = seq[rec.user_id]++;
    char name[64];
    std::snprintf(name, sizeof name, "%s_%04d.png", rec.user_id.c_str(), k);
    write_png((fs::path(dir) / "images" / name).string(), rec.image);
    nlohmann::json row;
    row["file"] = std::string("images/") + name;
    row["user"] = rec.user_id;
    row["label"] = rec.label;
    row["attributes"] = rec.attributes;
    table.push_back(std::move(row));
  }
  std::ofstream f(fs::path(dir) / "attributes.json");
  f << table.dump(2) << "\n";
}

Collection load_corpus_dir(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "attributes.json");
  if (!f) throw std::runtime_error("load_corpus_dir: missing attribute table");
  nlohmann::json table = nlohmann::json::parse(f);
  Collection out;
  for (const auto& row : table) {
    ImageRecord rec;
    rec.user_id = row.at("user").get<std::string>();
    rec.label = row.at("label").get<int>();
    for (auto it = row.at("attributes").begin(); it != row.at("attributes").end(); ++it)
      rec.attributes[it.key()] = it.value().get<int>();
    rec.image = read_png((fs::path(dir) / row.at("file").get<std::string>()).string());
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace ginv
