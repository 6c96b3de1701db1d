#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ginv/flsim.hpp"
#include "ginv/png.hpp"

using namespace ginv;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
  static int counter = 0;
  auto d = fs::temp_directory_path() / ("ginv_test_" + std::to_string(counter++));
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("png round trip is exact for quantized images") {
  Rng rng(4);
  Tensor img = Tensor::rand_uniform({9, 7, 3}, rng, 0, 1);
  for (auto& v : img.data) v = std::lround(v * 255.0) / 255.0;
  auto dir = temp_dir();
  write_png(dir + "/a.png", img);
  Tensor back = read_png(dir + "/a.png");
  CHECK(back.shape == img.shape);
  CHECK(back.data == img.data);

  auto info = png_info(dir + "/a.png");
  CHECK(info.width == 7);
  CHECK(info.height == 9);
  CHECK(info.channels == 3);
}

TEST_CASE("partition: exact cover and threshold semantics") {
  CorpusSpec spec;
  spec.users = 3;
  spec.images_per_user = 30;
  spec.seed = 11;
  auto corpus = generate_corpus(spec);
  auto users = partition_by_user(corpus, 30);
  CHECK(users.size() == 3);
  for (const auto& u : users) CHECK(u.size() == 30);

  // Disjoint exact cover: the image multiset is preserved.
  size_t total = 0;
  double checksum = 0, checksum_src = 0;
  for (const auto& u : users) {
    total += static_cast<size_t>(u.size());
    checksum += u.images.sum();
  }
  for (const auto& rec : corpus) checksum_src += rec.image.sum();
  CHECK(total == corpus.size());
  CHECK(checksum == doctest::Approx(checksum_src).epsilon(1e-12));

  // min_images filter over sizes {29, 30, 31}.
  Collection uneven;
  int sizes[] = {29, 30, 31};
  for (int u = 0; u < 3; ++u)
    for (int i = 0; i < sizes[u]; ++i) {
      ImageRecord r;
      r.user_id = "user" + std::to_string(u);
      r.image = Tensor::zeros({2, 2, 1});
      r.attributes = {{"warm", u % 2}};
      uneven.push_back(std::move(r));
    }
  auto kept = partition_by_user(uneven, 30);
  CHECK(kept.size() == 2);
  CHECK(kept[0].user_id == "user1");
  CHECK(kept[1].user_id == "user2");
}

TEST_CASE("per-user attributes match the regenerated table") {
  CorpusSpec spec;
  spec.users = 12;
  spec.images_per_user = 4;
  spec.seed = 77;
  auto corpus = generate_corpus(spec);
  auto users = partition_by_user(corpus);
  REQUIRE(users.size() == 12);
  // Oracle: re-derive each user's attribute draws exactly as the
  // generator does.
  for (int u = 0; u < 12; ++u) {
    Rng urng = Rng::derive(spec.seed, 0x10000u + static_cast<uint64_t>(u));
    int warm = urng.bernoulli(spec.p_warm) ? 1 : 0;
    int top = urng.bernoulli(spec.p_top) ? 1 : 0;
    CHECK(users[static_cast<size_t>(u)].attributes.at("warm") == warm);
    CHECK(users[static_cast<size_t>(u)].attributes.at("top") == top);
  }
}

TEST_CASE("capture_round: sampling, determinism, and direct recompute") {
  CorpusSpec cspec;
  cspec.users = 2;
  cspec.images_per_user = 10;
  cspec.seed = 5;
  auto users = partition_by_user(generate_corpus(cspec));
  ModelSpec mspec{"small-cnn", 3, 8, 8, 2, 17, 4};
  auto model = VictimModel::build(mspec);

  // B = N: the batch is the full user dataset in shuffled order.
  auto cap_full = capture_round(model, users[0], 10, 99);
  auto idx = capture_sample_indices(10, 10, 99);
  std::vector<int> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 10; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);

  // Oracle: recompute the gradient outside the capture path.
  LabeledBatch batch;
  batch.images = Tensor({10, 8, 8, 3});
  for (int i = 0; i < 10; ++i) {
    Tensor im = users[0].image(idx[static_cast<size_t>(i)]);
    std::copy(im.data.begin(), im.data.end(),
              batch.images.data.begin() + static_cast<int64_t>(i) * im.numel());
    batch.labels.push_back(users[0].labels[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
  }
  auto direct = batch_gradient(model, batch);
  REQUIRE(direct.entries.size() == cap_full.entries.size());
  for (size_t i = 0; i < direct.entries.size(); ++i)
    CHECK(direct.entries[i].second.data == cap_full.entries[i].second.data);

  // Determinism: identical files byte for byte.
  auto dir = temp_dir();
  auto c1 = capture_round(model, users[0], 4, 7);
  auto c2 = capture_round(model, users[0], 4, 7);
  serialize_capture(c1, dir + "/c1.bin");
  serialize_capture(c2, dir + "/c2.bin");
  CHECK(slurp(dir + "/c1.bin") == slurp(dir + "/c2.bin"));

  // Same seed but different batch size differs.
  auto c3 = capture_round(model, users[0], 5, 7);
  serialize_capture(c3, dir + "/c3.bin");
  CHECK(slurp(dir + "/c1.bin") != slurp(dir + "/c3.bin"));

  // Errors and hint mode.
  CHECK_THROWS(capture_round(model, users[0], 11, 0));
  auto hinted = capture_round(model, users[0], 6, 3, true);
  REQUIRE(hinted.label_multiset_hint.has_value());
  int total = 0;
  for (auto& [cls, count] : *hinted.label_multiset_hint) total += count;
  CHECK(total == 6);
}

TEST_CASE("capture container: round trip, corruption, size formula") {
  CorpusSpec cspec;
  cspec.users = 1;
  cspec.images_per_user = 6;
  cspec.seed = 21;
  auto users = partition_by_user(generate_corpus(cspec));
  ModelSpec mspec{"small-cnn", 3, 8, 8, 2, 2, 4};
  auto model = VictimModel::build(mspec);
  auto cap = capture_round(model, users[0], 4, 13, true);

  auto dir = temp_dir();
  auto path = dir + "/cap.bin";
  serialize_capture(cap, path);

  auto back = deserialize_capture(path);
  CHECK(back.model_ref == cap.model_ref);
  CHECK(back.batch_size == cap.batch_size);
  CHECK(back.metadata == cap.metadata);
  CHECK(back.label_multiset_hint == cap.label_multiset_hint);
  REQUIRE(back.entries.size() == cap.entries.size());
  for (size_t i = 0; i < cap.entries.size(); ++i) {
    CHECK(back.entries[i].first == cap.entries[i].first);
    CHECK(back.entries[i].second.data == cap.entries[i].second.data);
  }
  validate_capture(back, model);

  // Documented layout size.
  CHECK(fs::file_size(path) == capture_file_size(cap));

  // Truncation is an integrity error, not a partial capture.
  auto bytes = slurp(path);
  bytes.resize(bytes.size() - 7);
  std::ofstream bad(dir + "/bad.bin", std::ios::binary);
  bad.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  bad.close();
  CHECK_THROWS(deserialize_capture(dir + "/bad.bin"));

  // Wrong model is rejected.
  auto other = VictimModel::build({"small-cnn", 3, 8, 8, 2, 3, 4});
  CHECK_THROWS(validate_capture(back, other));
}

TEST_CASE("corpus directory round trip") {
  CorpusSpec spec;
  spec.users = 2;
  spec.images_per_user = 3;
  spec.height = 6;
  spec.width = 6;
  spec.seed = 8;
  auto corpus = generate_corpus(spec);
  auto dir = temp_dir() + "/corpus";
  write_corpus_dir(corpus, dir, false);
  CHECK_THROWS(write_corpus_dir(corpus, dir, false));  // exists, no force
  write_corpus_dir(corpus, dir, true);

  auto back = load_corpus_dir(dir);
  REQUIRE(back.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(back[i].user_id == corpus[i].user_id);
    CHECK(back[i].label == corpus[i].label);
    CHECK(back[i].attributes == corpus[i].attributes);
    CHECK(back[i].image.data == corpus[i].image.data);
  }
}
