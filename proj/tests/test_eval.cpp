#include <cmath>
#include <set>

#include "chada/dataset.hpp"
#include "chada/eval.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace chada;

namespace {

// Gaussian blobs in `dim` dimensions; class c is centred at separation * e_c.
std::pair<Embeddings, std::vector<int>> blobs(std::size_t per_class, std::size_t classes, std::size_t dim,
                                              double separation, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Embeddings x(per_class * classes, dim);
  std::vector<int> y;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = y.size();
      for (std::size_t j = 0; j < dim; ++j) x.values[r * dim + j] = n(rng) + (j == c ? separation : 0.0);
      y.push_back(static_cast<int>(c));
    }
  }
  return {x, y};
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.dim = 16;
  c.depth = 1;
  c.heads = 2;
  c.patch = 16;
  c.image_side = 32;
  c.max_channels = 5;
  return c;
}

}  // namespace

TEST_CASE("compute_metric hand values and definitions") {
  const std::vector<double> t{1, 2, 3}, p{1, 2, 4};
  CHECK(compute_metric(MetricKind::Mse, p, t) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(compute_metric(MetricKind::Mae, p, t) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(compute_metric(MetricKind::R2, p, t) == doctest::Approx(0.5).epsilon(1e-15));

  CHECK(compute_metric(MetricKind::R2, t, t) == 1.0);
  CHECK(compute_metric(MetricKind::Mse, t, t) == 0.0);
  CHECK(compute_metric(MetricKind::Mae, t, t) == 0.0);
  const std::vector<double> mean(3, 2.0);
  CHECK(compute_metric(MetricKind::R2, mean, t) == 0.0);

  const std::vector<double> labels{0, 1, 2, 1}, pred{0, 1, 1, 1};
  CHECK(compute_metric(MetricKind::Top1, pred, labels) == 0.75);

  const std::vector<double> constant(3, 5.0);
  CHECK_THROWS_AS(compute_metric(MetricKind::R2, t, constant), std::domain_error);
  CHECK_THROWS_AS(compute_metric(MetricKind::Mse, p, std::vector<double>{1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(parse_metric("rmse"), std::invalid_argument);
}

TEST_CASE("metric ranges hold on random inputs") {
  Rng rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(17), t(17);
    for (auto& v : p) v = u(rng);
    for (auto& v : t) v = u(rng);
    CHECK(compute_metric(MetricKind::Mse, p, t) >= 0.0);
    CHECK(compute_metric(MetricKind::Mae, p, t) >= 0.0);
    CHECK(compute_metric(MetricKind::R2, p, t) <= 1.0);
    const double top1 = compute_metric(MetricKind::Top1, p, t);
    CHECK((top1 >= 0.0 && top1 <= 1.0));
    // constant prediction b: R2 = -n (mean - b)^2 / SS_tot <= 0
    const std::vector<double> c(17, u(rng));
    CHECK(compute_metric(MetricKind::R2, c, t) <= 0.0);
  }
}

TEST_CASE("aggregate_seeds") {
  const std::vector<double> one{5.0};
  CHECK(aggregate_seeds(one).mean == 5.0);
  CHECK(aggregate_seeds(one).std == 0.0);
  const std::vector<double> two{1.0, 3.0};
  CHECK(aggregate_seeds(two).mean == 2.0);
  CHECK(aggregate_seeds(two).std == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
  // mean 3.8, squared deviations sum to 4.8, sample variance 1.2
  const std::vector<double> five{2.0, 4.0, 4.0, 4.0, 5.0};
  CHECK(std::abs(aggregate_seeds(five).mean - 3.8) < 1e-12);
  CHECK(std::abs(aggregate_seeds(five).std - 1.0954451150103321) < 1e-12);
  CHECK_THROWS_AS(aggregate_seeds(std::vector<double>{}), std::invalid_argument);

  auto report = EvalReport::make("probe", MetricKind::Top1, {0, 1}, {0.76, 0.78});
  CHECK(report.formatted() == "77.00 ± 1.41");
  CHECK(EvalReport::from_json(report.to_json()).to_json() == report.to_json());
  auto r2 = EvalReport::make("recon", MetricKind::R2, {0}, {0.5});
  CHECK(r2.formatted() == "50.00 ± 0.00");
  CHECK(r2.values[0] == 0.5);
}

TEST_CASE("low_data_split") {
  std::vector<int> labels(1000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);

  const auto all = low_data_split(labels, 1.0, 3);
  REQUIRE(all.size() == 1000);
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

  const auto tenth = low_data_split(labels, 0.1, 3);
  std::size_t ones = 0;
  for (auto i : tenth) ones += labels[i];
  CHECK(tenth.size() == 100);
  CHECK(ones == 50);
  CHECK(low_data_split(labels, 0.1, 3) == tenth);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = low_data_split(labels, 0.01, seed);
    const auto b = low_data_split(labels, 0.1, seed);
    const auto c = low_data_split(labels, 1.0, seed);
    CHECK(std::includes(b.begin(), b.end(), a.begin(), a.end()));
    CHECK(std::includes(c.begin(), c.end(), b.begin(), b.end()));
    CHECK(a.size() == 10);
  }
  CHECK(low_data_split(labels, 0.1, 0) != low_data_split(labels, 0.1, 1));

  // too few for the fraction: one per class
  const std::vector<int> small{0, 0, 0, 1, 1, 2};
  const auto s = low_data_split(small, 0.01, 0);
  std::set<int> seen;
  for (auto i : s) seen.insert(small[i]);
  CHECK(s.size() == 3);
  CHECK(seen.size() == 3);

  CHECK_THROWS_AS(low_data_split(std::vector<int>{}, 0.5, 0), std::invalid_argument);
  CHECK_THROWS_AS(low_data_split(small, 0.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(low_data_split(small, 1.5, 0), std::invalid_argument);
}

TEST_CASE("linear probe") {
  Rng rng(5);
  SUBCASE("separable 2-d blobs") {
    auto [x, y] = blobs(100, 2, 2, 8.0, rng);
    ProbeConfig cfg;
    const auto probe = train_linear_probe(x, y, cfg);
    CHECK(accuracy(probe.predict(x), y) >= 0.99);
  }
  SUBCASE("zero epochs is chance") {
    auto [x, y] = blobs(100, 2, 2, 8.0, rng);
    ProbeConfig cfg;
    cfg.epochs = 0;
    const double acc = accuracy(train_linear_probe(x, y, cfg).predict(x), y);
    // balanced classes: 0.5 +- 3 binomial standard deviations
    CHECK(std::abs(acc - 0.5) <= 3.0 * std::sqrt(0.25 / 200.0));
  }
  SUBCASE("deterministic per seed") {
    auto [x, y] = blobs(50, 3, 4, 1.0, rng);
    ProbeConfig cfg;
    cfg.epochs = 5;
    cfg.fraction = 0.1;
    const auto a = train_linear_probe(x, y, cfg);
    const auto b = train_linear_probe(x, y, cfg);
    CHECK(a.weight == b.weight);
    CHECK(a.bias == b.bias);
    CHECK(probe_accuracy(x, y, x, y, cfg) == probe_accuracy(x, y, x, y, cfg));
  }
  SUBCASE("errors") {
    Embeddings x(3, 2);
    const std::vector<int> same{1, 1, 1};
    CHECK_THROWS_AS(train_linear_probe(x, same, ProbeConfig{}), std::invalid_argument);
    const std::vector<int> short_labels{0, 1};
    CHECK_THROWS_AS(train_linear_probe(x, short_labels, ProbeConfig{}), std::invalid_argument);
    ProbeConfig bad;
    bad.fraction = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_CASE("knn") {
  Rng rng(6);
  SUBCASE("duplicated train point with k = 1") {
    auto [x, y] = blobs(10, 2, 3, 0.5, rng);
    const std::size_t idx[] = {7};
    const auto q = x.select(idx);
    CHECK(knn_predict(x, y, q, 1)[0] == y[7]);
    // k = 1 on the training set itself
    CHECK(knn_eval(x, y, x, y, 1) == 1.0);
  }
  SUBCASE("separated blobs") {
    auto [train, ty] = blobs(40, 3, 3, 10.0, rng);
    auto [test, sy] = blobs(40, 3, 3, 10.0, rng);
    CHECK(knn_eval(train, ty, test, sy, 5) >= 0.99);
  }
  SUBCASE("tie break: summed distance, then lowest label") {
    // two train points per class, k = 4: counts tie 2-2
    Embeddings train(4, 2);
    train.values = {1.0, 0.1, 1.0, -0.1, 0.0, 1.0, -0.2, 1.0};
    const std::vector<int> y{5, 5, 2, 2};
    Embeddings q(2, 2);
    q.values = {1.0, 0.0, 0.0, 1.0};
    const auto pred = knn_predict(train, y, q, 4);
    CHECK(pred[0] == 5);
    CHECK(pred[1] == 2);
    // exact symmetry: equal summed distances fall to the lowest label
    Embeddings sym(2, 2);
    sym.values = {1.0, 0.0, 0.0, 1.0};
    const std::vector<int> sy{3, 1};
    Embeddings diag(1, 2);
    diag.values = {1.0, 1.0};
    CHECK(knn_predict(sym, sy, diag, 2)[0] == 1);
    CHECK(knn_predict(sym, sy, diag, 2) == knn_predict(sym, sy, diag, 2));
  }
  SUBCASE("errors") {
    auto [x, y] = blobs(3, 2, 2, 1.0, rng);
    CHECK_THROWS_AS(knn_predict(x, y, x, 7), std::invalid_argument);
    CHECK_THROWS_AS(knn_predict(x, y, x, 0), std::invalid_argument);
    Embeddings wide(1, 3);
    CHECK_THROWS_AS(knn_predict(x, y, wide, 1), WidthMismatchError);
  }
}

TEST_CASE("pca") {
  Rng rng(7);
  SUBCASE("points on a line") {
    Embeddings x(20, 2);
    for (std::size_t i = 0; i < 20; ++i) {
      const double t = static_cast<double>(i) * 0.37 - 2.0;
      x.values[2 * i] = 1.0 + 2.0 * t;
      x.values[2 * i + 1] = -3.0 + t;
    }
    const auto r = pca_fit_project(x, 2);
    CHECK(r.explained_ratio[0] >= 1.0 - 1e-10);
  }
  SUBCASE("orthonormal basis, ordered ratios, full reconstruction") {
    Embeddings x(40, 6);
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < x.values.size(); ++i) x.values[i] = n(rng) * static_cast<double>(1 + i % 6);
    const auto r = pca_fit_project(x, 6);
    double worst = 0.0;
    for (std::size_t a = 0; a < 6; ++a) {
      for (std::size_t b = 0; b < 6; ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < 6; ++i) dot += r.component(i, a) * r.component(i, b);
        worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
      }
    }
    CHECK(worst < 1e-8);
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      total += r.explained_ratio[j];
      if (j > 0) CHECK(r.explained_ratio[j] <= r.explained_ratio[j - 1]);
    }
    CHECK(total <= 1.0 + 1e-8);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
    double err = 0.0;
    for (std::size_t row = 0; row < 40; ++row) {
      for (std::size_t i = 0; i < 6; ++i) {
        double rec = 0.0;
        for (std::size_t j = 0; j < 6; ++j) rec += r.projected.values[row * 6 + j] * r.component(i, j);
        err = std::max(err, std::abs(rec - (x.values[row * 6 + i] - r.mean[i])));
      }
    }
    CHECK(err < 1e-6);
    const auto again = r.project(x);
    for (std::size_t i = 0; i < again.values.size(); ++i) {
      CHECK(again.values[i] == doctest::Approx(r.projected.values[i]).epsilon(1e-9));
    }
  }
  SUBCASE("errors") {
    Embeddings same(5, 3);
    std::fill(same.values.begin(), same.values.end(), 0.25);
    CHECK_THROWS_AS(pca_fit_project(same, 1), std::invalid_argument);
    CHECK_THROWS_AS(pca_fit_project(Embeddings(1, 3), 1), std::invalid_argument);
    Embeddings x(4, 3);
    x.values = {1, 2, 3, 4, 5, 6, 7, 8, 10, 0, 1, 0};
    CHECK_THROWS_AS(pca_fit_project(x, 4), std::invalid_argument);
  }
}

TEST_CASE("joint space analysis") {
  Rng rng(8);
  auto [a, ya] = blobs(30, 1, 5, 0.0, rng);
  auto [b, yb] = blobs(30, 1, 5, 0.0, rng);
  for (std::size_t r = 0; r < b.rows; ++r) b.values[r * 5 + 2] += 12.0;
  const auto res = joint_space_analysis(a, b, 2);
  CHECK(res.pc1_accuracy == 1.0);
  const auto csv = joint_space_csv(res, "a", ya, "b", yb);
  CHECK(csv.rfind("dataset,label,pc1,pc2\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 61);

  Embeddings wide(3, 7);
  CHECK_THROWS_AS(joint_space_analysis(a, wide), WidthMismatchError);

  // the same encoder puts 3- and 5-channel images in one space
  Rng init(9);
  auto chada_model = Model<float>::init(Arch::Chada, tiny_encoder(), init);
  std::vector<MultiChannelImage> three, five;
  for (int i = 0; i < 4; ++i) {
    three.push_back(testing::random_image(3, 32, rng));
    five.push_back(testing::random_image(5, 32, rng));
  }
  CHECK(embed_images(chada_model, three).width == 16);
  CHECK(embed_images(chada_model, five).width == 16);
  auto one = Model<float>::init(Arch::OneChannel, tiny_encoder(), init);
  const auto e3 = embed_images(one, three), e5 = embed_images(one, five);
  CHECK(e3.width == 48);
  CHECK(e5.width == 80);
  CHECK_THROWS_AS(joint_space_analysis(e3, e5), WidthMismatchError);
}

TEST_CASE("decoder census") {
  DecoderConfig chada_cfg;
  DecoderConfig one_cfg;
  one_cfg.input_dim = 3 * 192;
  const auto a = decoder_parameter_count(chada_cfg), b = decoder_parameter_count(one_cfg);
  CHECK(a >= 5'000'000);
  CHECK(a <= 5'400'000);
  CHECK(b >= 5'000'000);
  CHECK(b <= 5'400'000);
  CHECK(std::abs(static_cast<double>(a) - static_cast<double>(b)) / static_cast<double>(a) < 0.01);
  // hidden width 1543 at input 192: 1543 * (192 + 1 + 3136) + 3136 + 61249
  CHECK(chada_cfg.resolved_hidden() == 1543);
  CHECK(a == 5'201'032);

  Rng rng(10);
  auto dec = ChannelDecoder<float>::init(chada_cfg, rng);
  CHECK(count_elements(dec.parameters()) == a);

  DecoderConfig small;
  small.input_dim = 8;
  small.output_side = 64;
  small.hidden = 12;
  auto d = ChannelDecoder<double>::init(small, rng);
  Tensor<double> x({3, 8});
  fill_normal(x, 1.0, rng);
  const auto y = d.forward(x);
  CHECK(y.shape() == Shape{3, 1, 64, 64});
  for (double v : y.values()) CHECK((v > 0.0 && v < 1.0));
  CHECK_THROWS_AS(d.forward(Tensor<double>({3, 9})), WidthMismatchError);
  DecoderConfig bad;
  bad.output_side = 48;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("reconstruction training leaves the encoder untouched") {
  SyntheticOptions o;
  o.kind = SyntheticKind::Reconstruction;
  o.count = 4;
  o.channels = 3;
  o.side = 32;
  std::vector<MultiChannelImage> images;
  for (auto& s : generate_synthetic(o).samples) images.push_back(s.image);
  Rng rng(11);
  const auto encoder = Model<float>::init(Arch::Chada, tiny_encoder(), rng);
  DecoderConfig dc;
  dc.output_side = 32;
  dc.hidden = 32;
  DecoderTrainConfig tc;
  tc.steps = 20;
  tc.batch_size = 4;
  const auto before = checksum(encoder.parameters());
  const auto res = train_channel_decoder(encoder, images, 2, dc, tc);
  CHECK(res.encoder_checksum_before == before);
  CHECK(res.encoder_checksum_after == before);
  CHECK(checksum(encoder.parameters()) == before);
  CHECK(res.loss_history.size() == 20);
  CHECK(res.loss_history.back() < res.loss_history.front());
  const auto pred = predict_channel(encoder, res.decoder, images, 2);
  CHECK(pred.size() == 4 * 32 * 32);

  std::vector<MultiChannelImage> single{images[0].select_channels(std::vector<std::size_t>{0})};
  CHECK_THROWS_AS(train_channel_decoder(encoder, single, 0, dc, tc), std::invalid_argument);
  CHECK_THROWS_AS(train_channel_decoder(encoder, images, 3, dc, tc), std::invalid_argument);
}
