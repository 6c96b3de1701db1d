#include "ginv/victim.hpp"

#include <json.hpp>

#include <cmath>
#include <stdexcept>

namespace ginv {

using namespace tape;
using nn::BoundParams;
using nn::Conv2d;
using nn::Linear;
using nn::ParamStore;

namespace {

// Global average pool over pixels: (B*hw, ch) -> (B, ch).
Var global_avg_pool(Graph& g, Var x2d, int batch, int hw) {
  std::vector<int> indptr(static_cast<size_t>(batch) + 1);
  std::vector<int> indices(static_cast<size_t>(batch) * hw);
  std::vector<double> values(static_cast<size_t>(batch) * hw,
                             1.0 / static_cast<double>(hw));
  for (int b = 0; b <= batch; ++b) indptr[static_cast<size_t>(b)] = b * hw;
  for (int i = 0; i < batch * hw; ++i) indices[static_cast<size_t>(i)] = i;
  return csr_apply(x2d, Csr::build(batch, batch * hw, indptr, indices, values));
}

}  // namespace

struct Net {
  virtual ~Net() = default;
  virtual Var forward(Graph& g, Var x, const BoundParams& p,
                      int batch) const = 0;
};

namespace {

struct SmallCnn : Net {
  Conv2d c1, c2;
  Linear f1, f2;
  int h, w;

  Var forward(Graph& g, Var x, const BoundParams& p, int batch) const override {
    Var y = relu(c1.apply(g, p, x, batch, h, w));
    y = avg_pool2(y, batch, h, w, c1.out_ch);
    y = relu(c2.apply(g, p, y, batch, h / 2, w / 2));
    y = avg_pool2(y, batch, h / 2, w / 2, c2.out_ch);
    int flat = (h / 4) * (w / 4) * c2.out_ch;
    y = reshape(y, {batch, flat});
    y = relu(f1.apply(g, p, y));
    return f2.apply(g, p, y);
  }
};

struct ResBlock {
  Conv2d a, b;
  Conv2d skip;  // 1x1 projection when widening; unused otherwise
  bool widen = false;

  Var forward(Graph& g, const BoundParams& p, Var x, int batch, int h,
              int w) const {
    Var y = relu(a.apply(g, p, x, batch, h, w));
    y = b.apply(g, p, y, batch, h, w);
    Var s = widen ? skip.apply(g, p, x, batch, h, w) : x;
    return relu(add(y, s));
  }
};

struct SmallResnet : Net {
  Conv2d stem;
  ResBlock b1, b2, b3, b4;
  Linear fc;
  int h, w;

  Var forward(Graph& g, Var x, const BoundParams& p, int batch) const override {
    Var y = relu(stem.apply(g, p, x, batch, h, w));
    y = b1.forward(g, p, y, batch, h, w);
    y = b2.forward(g, p, y, batch, h, w);
    y = avg_pool2(y, batch, h, w, stem.out_ch);
    int h2 = h / 2, w2 = w / 2;
    y = b3.forward(g, p, y, batch, h2, w2);
    y = b4.forward(g, p, y, batch, h2, w2);
    int ch = b4.b.out_ch;
    y = reshape(y, {batch * h2 * w2, ch});
    y = global_avg_pool(g, y, batch, h2 * w2);
    return fc.apply(g, p, y);
  }
};

}  // namespace

VictimModel VictimModel::build(const ModelSpec& spec) {
  VictimModel m;
  m.spec_ = spec;
  Rng rng(spec.seed);
  int wdt = spec.base_width;

  if (spec.arch == "small-cnn") {
    if (spec.height % 4 != 0 || spec.width % 4 != 0 || spec.height < 4 ||
        spec.width < 4)
      throw std::runtime_error(
          "small-cnn needs height and width divisible by 4");
    auto net = std::make_shared<SmallCnn>();
    net->h = spec.height;
    net->w = spec.width;
    net->c1 = Conv2d::create(m.params_, "conv1", spec.channels, wdt, 3, 1, 1, rng);
    net->c2 = Conv2d::create(m.params_, "conv2", wdt, 2 * wdt, 3, 1, 1, rng);
    int flat = (spec.height / 4) * (spec.width / 4) * 2 * wdt;
    net->f1 = Linear::create(m.params_, "fc1", flat, 4 * wdt, rng);
    net->f2 = Linear::create(m.params_, "fc2", 4 * wdt, spec.num_classes, rng);
    m.last_layer_ = "fc2";
    m.net_ = std::move(net);
  } else if (spec.arch == "small-resnet") {
    if (spec.height % 2 != 0 || spec.width % 2 != 0 || spec.height < 2 ||
        spec.width < 2)
      throw std::runtime_error(
          "small-resnet needs height and width divisible by 2");
    auto net = std::make_shared<SmallResnet>();
    net->h = spec.height;
    net->w = spec.width;
    net->stem = Conv2d::create(m.params_, "stem", spec.channels, wdt, 3, 1, 1, rng);
    auto block = [&](const std::string& name, int in_ch, int out_ch) {
      ResBlock b;
      b.a = Conv2d::create(m.params_, name + ".conv1", in_ch, out_ch, 3, 1, 1, rng);
      b.b = Conv2d::create(m.params_, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
      if (in_ch != out_ch) {
        b.skip = Conv2d::create(m.params_, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
        b.widen = true;
      }
      return b;
    };
    net->b1 = block("block1", wdt, wdt);
    net->b2 = block("block2", wdt, wdt);
    net->b3 = block("block3", wdt, 2 * wdt);
    net->b4 = block("block4", 2 * wdt, 2 * wdt);
    net->fc = Linear::create(m.params_, "fc", 2 * wdt, spec.num_classes, rng);
    m.last_layer_ = "fc";
    m.net_ = std::move(net);
  } else {
    throw std::runtime_error("unsupported victim architecture: " + spec.arch);
  }

  m.hash_ = m.params_.content_hash();
  return m;
}

std::vector<LayerInfo> VictimModel::manifest() const {
  std::vector<LayerInfo> out;
  out.reserve(params_.entries.size());
  for (const auto& e : params_.entries)
    out.push_back({e.name, e.value.shape, e.value.numel()});
  return out;
}

std::string VictimModel::manifest_json() const {
  nlohmann::json j;
  j["arch"] = spec_.arch;
  j["input"] = {spec_.channels, spec_.height, spec_.width};
  j["classes"] = spec_.num_classes;
  j["base_width"] = spec_.base_width;
  j["seed"] = spec_.seed;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_));
  j["weights_hash"] = buf;
  j["total_params"] = params_.total_params();
  auto layers = nlohmann::json::array();
  for (const auto& l : manifest())
    layers.push_back({{"name", l.name}, {"shape", l.shape}, {"numel", l.numel}});
  j["layers"] = std::move(layers);
  return j.dump(2);
}

Var VictimModel::forward(Graph& g, Var x, const BoundParams& p,
                         int batch) const {
  const Tensor& t = x.val();
  if (t.rank() != 4 || t.dim(0) != batch || t.dim(1) != spec_.height ||
      t.dim(2) != spec_.width || t.dim(3) != spec_.channels)
    throw std::runtime_error("victim forward: input shape " + t.shape_str() +
                             " incompatible with model");
  return net_->forward(g, x, p, batch);
}

Tensor VictimModel::logits(const Tensor& images) const {
  Graph g;
  BoundParams p = bind(g, false);
  Var x = g.constant(images);
  return forward(g, x, p, images.dim(0)).val();
}

GradientCapture batch_gradient(const VictimModel& model,
                               const LabeledBatch& batch, double* loss_out) {
  if (batch.size() < 1) throw std::runtime_error("batch_gradient: empty batch");
  Graph g;
  BoundParams p = model.bind(g, true);
  Var x = g.constant(batch.images);
  Var logits = model.forward(g, x, p, batch.size());
  Var loss = nn::cross_entropy_mean(g, logits, batch.labels);
  double lv = loss.val().data[0];
  if (!std::isfinite(lv))
    throw std::runtime_error("batch_gradient: non-finite loss");
  auto grads = backward(loss, p.vars);

  GradientCapture cap;
  cap.model_ref = model.weights_hash();
  cap.batch_size = batch.size();
  for (size_t i = 0; i < model.params().entries.size(); ++i) {
    Tensor t = grads[i].val();
    f32_round_tensor(t);
    cap.entries.emplace_back(model.params().entries[i].name, std::move(t));
  }
  if (loss_out) *loss_out = lv;
  return cap;
}

GradientCapture batch_gradient(const VictimModel& model,
                               const LabeledBatch& batch) {
  return batch_gradient(model, batch, nullptr);
}

}  // namespace ginv
