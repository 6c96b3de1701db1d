#include "ginv/eval.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "ginv/attack.hpp"
#include "ginv/augment.hpp"
#include "ginv/nn.hpp"

namespace ginv {

double mse(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::runtime_error("mse: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

double psnr(const Tensor& a, const Tensor& b, double max_value) {
  if (max_value <= 0) throw std::runtime_error("psnr: max_value must be > 0");
  double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_value * max_value / m);
}

PerceptualResult perceptual_distance(const Tensor& a, const Tensor& b,
                                     const SemanticAdapter& adapter) {
  Tensor ea = adapter.embed(a);
  Tensor eb = adapter.embed(b);
  double na = ea.norm(), nb = eb.norm();
  if (na == 0.0 || nb == 0.0) return {1.0, true};
  return {1.0 - ea.dot(eb) / (na * nb), false};
}

// ---- assignment -------------------------------------------------------------

std::vector<int> solve_assignment(const std::vector<std::vector<double>>& a) {
  int n = static_cast<int>(a.size());
  if (n == 0) return {};
  for (const auto& row : a)
    if (static_cast<int>(row.size()) != n)
      throw std::runtime_error("solve_assignment: cost matrix not square");

  // Shortest-augmenting-path solver with dual potentials (the classic
  // Jonker-Volgenant scheme), O(n^3), exact.
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0), v(static_cast<size_t>(n) + 1, 0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = a[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                     u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> result(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<size_t>(j)] > 0)
      result[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  return result;
}

std::vector<int> disambiguate(const std::vector<Tensor>& originals,
                              const std::vector<Tensor>& reconstructions) {
  if (originals.size() != reconstructions.size())
    throw std::runtime_error("disambiguate: count mismatch");
  if (originals.size() > 64)
    throw std::runtime_error("disambiguate: n > 64 unsupported");
  int n = static_cast<int>(originals.size());
  std::vector<std::vector<double>> cost(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(n)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          mse(originals[static_cast<size_t>(i)], reconstructions[static_cast<size_t>(j)]);
  return solve_assignment(cost);
}

std::vector<int> ensemble_filter(const std::vector<Tensor>& reconstructions,
                                 const SemanticAdapter& adapter) {
  std::vector<int> kept;
  for (size_t i = 0; i < reconstructions.size(); ++i)
    if (adapter.detect(reconstructions[i])) kept.push_back(static_cast<int>(i));
  return kept;
}

// ---- toy adapter -------------------------------------------------------------

namespace {

class ToyAttributeAdapter : public SemanticAdapter {
 public:
  ToyAttributeAdapter(std::vector<std::string> attrs, std::vector<int> values,
                      int h, int w, int c, double threshold, uint64_t seed)
      : attrs_(std::move(attrs)),
        values_(std::move(values)),
        h_(h), w_(w), c_(c),
        threshold_(threshold) {
    Rng rng(seed);
    c1_ = nn::Conv2d::create(params_, "c1", c, 8, 3, 1, 1, rng);
    c2_ = nn::Conv2d::create(params_, "c2", 8, 16, 3, 1, 1, rng);
    int flat = (h / 4) * (w / 4) * 16;
    f1_ = nn::Linear::create(params_, "f1", flat, 16, rng);
    for (size_t a = 0; a < attrs_.size(); ++a)
      heads_.push_back(nn::Linear::create(params_, "head_" + attrs_[a], 16,
                                          values_[a], rng));
  }

  std::string name() const override { return "toy-attr"; }
  std::vector<std::string> attribute_names() const override { return attrs_; }

  tape::Var backbone(tape::Graph& g, tape::Var x, const nn::BoundParams& p,
                     int batch) const {
    using namespace tape;
    Var y = relu(c1_.apply(g, p, x, batch, h_, w_));
    y = avg_pool2(y, batch, h_, w_, 8);
    y = relu(c2_.apply(g, p, y, batch, h_ / 2, w_ / 2));
    y = avg_pool2(y, batch, h_ / 2, w_ / 2, 16);
    y = reshape(y, {batch, (h_ / 4) * (w_ / 4) * 16});
    return relu(f1_.apply(g, p, y));
  }

  std::map<std::string, std::vector<double>> predict(
      const Tensor& image) const override {
    Tensor in = prepared(image);
    tape::Graph g;
    auto p = nn::bind(g, params_, false);
    tape::Var emb = backbone(g, g.constant(in), p, 1);
    std::map<std::string, std::vector<double>> out;
    for (size_t a = 0; a < attrs_.size(); ++a) {
      Tensor logits = heads_[a].apply(g, p, emb).val();
      Tensor probs = nn::softmax_rows(logits);
      out[attrs_[a]] = probs.data;
    }
    return out;
  }

  Tensor embed(const Tensor& image) const override {
    Tensor in = prepared(image);
    tape::Graph g;
    auto p = nn::bind(g, params_, false);
    return backbone(g, g.constant(in), p, 1).val().reshaped({16});
  }

  bool detect(const Tensor& image) const override {
    auto post = predict(image);
    for (const auto& [attr, probs] : post) {
      double mx = *std::max_element(probs.begin(), probs.end());
      if (mx <= threshold_) return false;
    }
    return true;
  }

  nn::ParamStore& store() { return params_; }
  const nn::ParamStore& store() const { return params_; }
  const std::vector<int>& values() const { return values_; }
  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  double threshold() const { return threshold_; }

  const std::vector<nn::Linear>& heads() const { return heads_; }
  tape::Var head_logits(tape::Graph& g, const nn::BoundParams& p, tape::Var emb,
                        size_t a) const {
    return heads_[a].apply(g, p, emb);
  }

 private:
  Tensor prepared(const Tensor& image) const {
    if (image.rank() != 3)
      throw std::runtime_error("adapter: expected (H,W,C) image");
    Tensor in = image;
    if (image.dim(0) != h_ || image.dim(1) != w_)
      in = resize_image(image, h_, w_);
    if (in.dim(2) != c_) throw std::runtime_error("adapter: channel mismatch");
    return in.reshaped({1, h_, w_, c_});
  }

  std::vector<std::string> attrs_;
  std::vector<int> values_;
  int h_, w_, c_;
  double threshold_;
  nn::ParamStore params_;
  nn::Conv2d c1_, c2_;
  nn::Linear f1_;
  std::vector<nn::Linear> heads_;
};

}  // namespace

std::shared_ptr<SemanticAdapter> train_toy_adapter(const Collection& corpus,
                                                   const AdapterTrainConfig& cfg) {
  if (corpus.empty()) throw std::runtime_error("train_toy_adapter: empty corpus");
  int h = corpus[0].image.dim(0), w = corpus[0].image.dim(1),
      c = corpus[0].image.dim(2);

  std::vector<std::string> attrs;
  for (const auto& [k, v] : corpus[0].attributes) attrs.push_back(k);
  std::vector<int> values(attrs.size(), 0);
  for (const auto& rec : corpus)
    for (size_t a = 0; a < attrs.size(); ++a)
      values[a] = std::max(values[a], rec.attributes.at(attrs[a]) + 1);

  auto adapter = std::make_shared<ToyAttributeAdapter>(
      attrs, values, h, w, c, cfg.detect_threshold, cfg.seed);

  // Training set: originals plus augmented copies, so predictions are
  // stable under the attack's transformation family.
  struct Sample {
    Tensor image;
    std::vector<int> targets;
  };
  std::vector<Sample> samples;
  AugmentSpec aug;  // defaults, same family the attack uses
  Rng rng = Rng::derive(cfg.seed, 0xADA7ull);
  for (const auto& rec : corpus) {
    std::vector<int> targets;
    for (const auto& a : attrs) targets.push_back(rec.attributes.at(a));
    samples.push_back({rec.image, targets});
    for (int k = 0; k < cfg.augment_copies; ++k) {
      Tensor copy = make_batch(rec.image, 1, aug, rng.next_u64())
                        .reshaped({h, w, c});
      samples.push_back({std::move(copy), targets});
    }
  }

  nn::Adam opt;
  opt.lr = cfg.lr;
  std::vector<int> order(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = samples.size() - 1; i > 0; --i) {
      size_t j = rng.below(i + 1);
      std::swap(order[i], order[j]);
    }
    for (size_t lo = 0; lo < samples.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      size_t hi = std::min(samples.size(), lo + static_cast<size_t>(cfg.batch_size));
      int b = static_cast<int>(hi - lo);
      Tensor batch({b, h, w, c});
      std::vector<std::vector<int>> targets(attrs.size());
      for (int i = 0; i < b; ++i) {
        const Sample& s = samples[static_cast<size_t>(order[lo + static_cast<size_t>(i)])];
        std::copy(s.image.data.begin(), s.image.data.end(),
                  batch.data.begin() + static_cast<int64_t>(i) * s.image.numel());
        for (size_t a = 0; a < attrs.size(); ++a)
          targets[a].push_back(s.targets[a]);
      }
      tape::Graph g;
      auto p = nn::bind(g, adapter->store(), true);
      tape::Var emb = adapter->backbone(g, g.constant(batch), p, b);
      tape::Var loss = g.constant_scalar(0.0);
      for (size_t a = 0; a < attrs.size(); ++a) {
        tape::Var logits = adapter->head_logits(g, p, emb, a);
        loss = tape::add(loss, nn::cross_entropy_mean(g, logits, targets[a]));
      }
      if (!std::isfinite(loss.val().data[0]))
        throw std::runtime_error("train_toy_adapter: loss diverged");
      auto grads = backward(loss, p.vars);
      std::vector<Tensor> gt;
      for (auto& v : grads) gt.push_back(v.val());
      opt.step(adapter->store(), gt);
    }
  }
  return adapter;
}

// ---- adapter container --------------------------------------------------------

namespace {
constexpr char kAdpMagic[8] = {'G', 'I', 'N', 'V', 'A', 'D', 'P', '1'};

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_f64(std::vector<unsigned char>& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}
uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}
double get_f64(const unsigned char* p) {
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}
}  // namespace

void save_adapter(const SemanticAdapter& adapter, const std::string& path) {
  const auto* toy = dynamic_cast<const ToyAttributeAdapter*>(&adapter);
  if (!toy) throw std::runtime_error("save_adapter: unsupported adapter type");
  std::vector<unsigned char> out;
  out.insert(out.end(), kAdpMagic, kAdpMagic + 8);
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(toy->height()));
  put_u32(out, static_cast<uint32_t>(toy->width()));
  put_u32(out, static_cast<uint32_t>(toy->channels()));
  put_f64(out, toy->threshold());
  auto attrs = toy->attribute_names();
  put_u32(out, static_cast<uint32_t>(attrs.size()));
  for (size_t a = 0; a < attrs.size(); ++a) {
    put_u32(out, static_cast<uint32_t>(attrs[a].size()));
    out.insert(out.end(), attrs[a].begin(), attrs[a].end());
    put_u32(out, static_cast<uint32_t>(toy->values()[a]));
  }
  const auto& entries = toy->store().entries;
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<uint32_t>(e.value.data.size()));
    for (double v : e.value.data) put_f64(out, v);
  }
  uLong crc = crc32(0L, out.data(), static_cast<uInt>(out.size()));
  put_u32(out, static_cast<uint32_t>(crc));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_adapter: cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("save_adapter: rename failed");
}

std::shared_ptr<SemanticAdapter> load_adapter(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_adapter: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 40 || std::memcmp(buf.data(), kAdpMagic, 8) != 0)
    throw std::runtime_error("load_adapter: bad container");
  uLong crc = crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4));
  if (static_cast<uint32_t>(crc) != get_u32(&buf[buf.size() - 4]))
    throw std::runtime_error("load_adapter: checksum mismatch");
  size_t p = 8;
  if (get_u32(&buf[p]) != 1) throw std::runtime_error("load_adapter: version");
  p += 4;
  int h = static_cast<int>(get_u32(&buf[p])); p += 4;
  int w = static_cast<int>(get_u32(&buf[p])); p += 4;
  int c = static_cast<int>(get_u32(&buf[p])); p += 4;
  double threshold = get_f64(&buf[p]); p += 8;
  uint32_t nattrs = get_u32(&buf[p]); p += 4;
  std::vector<std::string> attrs;
  std::vector<int> values;
  for (uint32_t a = 0; a < nattrs; ++a) {
    uint32_t len = get_u32(&buf[p]); p += 4;
    attrs.emplace_back(reinterpret_cast<const char*>(&buf[p]), len); p += len;
    values.push_back(static_cast<int>(get_u32(&buf[p]))); p += 4;
  }
  auto adapter = std::make_shared<ToyAttributeAdapter>(attrs, values, h, w, c,
                                                       threshold, 0);
  uint32_t entries = get_u32(&buf[p]); p += 4;
  auto& store = adapter->store();
  if (entries != store.entries.size())
    throw std::runtime_error("load_adapter: parameter count mismatch");
  for (uint32_t i = 0; i < entries; ++i) {
    uint32_t len = get_u32(&buf[p]); p += 4;
    std::string name(reinterpret_cast<const char*>(&buf[p]), len); p += len;
    if (name != store.entries[i].name)
      throw std::runtime_error("load_adapter: unexpected entry " + name);
    uint32_t count = get_u32(&buf[p]); p += 4;
    if (count != store.entries[i].value.data.size())
      throw std::runtime_error("load_adapter: size mismatch in " + name);
    for (auto& v : store.entries[i].value.data) {
      v = get_f64(&buf[p]);
      p += 8;
    }
  }
  return adapter;
}

// ---- scoring ------------------------------------------------------------------

namespace {

struct PairStats {
  double mse_sum = 0, psnr_sum = 0, perceptual_sum = 0, sim_sum = 0;
  int n = 0;

  void add(const Tensor& a, const Tensor& b, const SemanticAdapter& adapter) {
    double m = ginv::mse(a, b);
    mse_sum += m;
    psnr_sum += ginv::psnr(a, b, 1.0);
    auto pr = perceptual_distance(a, b, adapter);
    perceptual_sum += pr.value;
    sim_sum += 1.0 - pr.value;
    ++n;
  }
};

}  // namespace

MetricsReport score_run(const ReconstructionResult& result,
                        const UserDataset& user,
                        const SemanticAdapter& adapter) {
  MetricsReport rep;
  std::vector<Tensor> originals;
  for (int i = 0; i < user.size(); ++i) originals.push_back(user.image(i));

  // Intra-user reference: average pairwise score across the originals.
  {
    PairStats intra;
    for (size_t i = 0; i < originals.size(); ++i)
      for (size_t j = i + 1; j < originals.size(); ++j)
        intra.add(originals[i], originals[j], adapter);
    if (intra.n > 0) {
      rep.intra_user.mse = intra.mse_sum / intra.n;
      rep.intra_user.psnr = intra.psnr_sum / intra.n;
      rep.intra_user.perceptual = intra.perceptual_sum / intra.n;
      rep.intra_user.similarity = intra.sim_sum / intra.n;
    }
  }

  int vh = user.images.dim(1), vw = user.images.dim(2);
  if (result.mode == AttackConfig::Mode::inverting) {
    // Sample-level: disambiguate against an equally sized original batch.
    if (static_cast<int>(result.images.size()) != user.size())
      throw std::runtime_error(
          "score_run: sample-level result size differs from original batch");
    auto perm = disambiguate(originals, result.images);
    rep.assignment = perm;
    PairStats stats;
    for (size_t i = 0; i < originals.size(); ++i)
      stats.add(originals[i], result.images[static_cast<size_t>((*rep.assignment)[i])],
                adapter);
    rep.mse = stats.mse_sum / stats.n;
    rep.psnr = stats.psnr_sum / stats.n;
    rep.perceptual = stats.perceptual_sum / stats.n;
    rep.semantic["similarity"] = stats.sim_sum / stats.n;
    rep.ensemble_kept = ensemble_filter(result.images, adapter);
    rep.semantic["detection_rate"] =
        static_cast<double>(rep.ensemble_kept.size()) / result.images.size();
  } else {
    // User-level: one reconstruction against every original.
    Tensor recon = resize_image(result.x_hat, vh, vw);
    PairStats stats;
    for (const auto& orig : originals) stats.add(orig, recon, adapter);
    rep.mse = stats.mse_sum / stats.n;
    rep.psnr = stats.psnr_sum / stats.n;
    rep.perceptual = stats.perceptual_sum / stats.n;
    rep.semantic["similarity"] = stats.sim_sum / stats.n;
    rep.semantic["detection_rate"] = adapter.detect(recon) ? 1.0 : 0.0;
    if (adapter.detect(recon)) rep.ensemble_kept = {0};
  }

  rep.random_guess = result.h_c_random_guess;
  bool exact = true;
  for (const auto& [attr, truth] : user.attributes) {
    auto it = result.h_c_hat.find(attr);
    double correct = (it != result.h_c_hat.end() && it->second == truth) ? 1.0 : 0.0;
    rep.semantic["attr_" + attr + "_acc"] = correct;
    exact = exact && correct == 1.0;
  }
  rep.semantic["exact_match"] = exact ? 1.0 : 0.0;
  return rep;
}

// ---- report serialization -------------------------------------------------------

namespace {
nlohmann::json num_or_inf(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}
double from_num_or_inf(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j == "inf") return std::numeric_limits<double>::infinity();
    if (j == "-inf") return -std::numeric_limits<double>::infinity();
    throw std::runtime_error("metrics: bad numeric field");
  }
  return j.get<double>();
}
}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["mse"] = mse;
  j["psnr"] = num_or_inf(psnr);
  j["perceptual"] = perceptual;
  j["semantic"] = semantic;
  if (assignment) j["assignment"] = *assignment;
  j["ensemble_kept"] = ensemble_kept;
  j["random_guess"] = random_guess;
  j["intra_user"] = {{"mse", intra_user.mse},
                     {"psnr", num_or_inf(intra_user.psnr)},
                     {"perceptual", intra_user.perceptual},
                     {"similarity", intra_user.similarity}};
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  MetricsReport r;
  r.mse = j.at("mse").get<double>();
  r.psnr = from_num_or_inf(j.at("psnr"));
  r.perceptual = j.at("perceptual").get<double>();
  for (auto it = j.at("semantic").begin(); it != j.at("semantic").end(); ++it)
    r.semantic[it.key()] = it.value().get<double>();
  if (j.contains("assignment"))
    r.assignment = j.at("assignment").get<std::vector<int>>();
  r.ensemble_kept = j.at("ensemble_kept").get<std::vector<int>>();
  r.random_guess = j.at("random_guess").get<bool>();
  r.intra_user.mse = j.at("intra_user").at("mse").get<double>();
  r.intra_user.psnr = from_num_or_inf(j.at("intra_user").at("psnr"));
  r.intra_user.perceptual = j.at("intra_user").at("perceptual").get<double>();
  r.intra_user.similarity = j.at("intra_user").at("similarity").get<double>();
  return r;
}

}  // namespace ginv
