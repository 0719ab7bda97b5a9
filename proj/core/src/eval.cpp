#include "chada/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "chada/ops.hpp"
#include "chada/optim.hpp"
#include "chada/ssl.hpp"

namespace chada {

namespace {

template <typename T>
Embeddings embeddings_from(const Tensor<T>& t) {
  if (t.rank() != 2) throw ShapeError("embeddings: expected a rank-2 tensor, got " + to_string(t.shape()));
  Embeddings e(t.dim(0), t.dim(1));
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) e.values[i] = static_cast<double>(v[i]);
  return e;
}

void check_labels(const Embeddings& x, std::span<const int> labels, const char* what) {
  if (x.rows != labels.size()) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(x.rows) + " embeddings but " +
                                std::to_string(labels.size()) + " labels");
  }
}

}  // namespace

Embeddings Embeddings::from_tensor(const Tensor<float>& t) { return embeddings_from(t); }
Embeddings Embeddings::from_tensor(const Tensor<double>& t) { return embeddings_from(t); }

Embeddings Embeddings::select(std::span<const std::size_t> indices) const {
  Embeddings out(indices.size(), width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) throw std::out_of_range("embeddings: row index out of range");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                out.values.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return out;
}

Embeddings embed_images(const Model<float>& model, std::span<const MultiChannelImage> images, std::size_t batch) {
  if (batch == 0) throw std::invalid_argument("embed_images: batch must be positive");
  Embeddings out;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const auto part = images.subspan(start, std::min(batch, images.size() - start));
    const auto e = Embeddings::from_tensor(model.embed_batch(part));
    if (start == 0) {
      out.width = e.width;
    } else if (e.width != out.width) {
      throw WidthMismatchError("embed_images: width changed from " + std::to_string(out.width) + " to " +
                               std::to_string(e.width) + " at image " + std::to_string(start));
    }
    out.values.insert(out.values.end(), e.values.begin(), e.values.end());
    out.rows += e.rows;
  }
  return out;
}

// ---------------------------------------------------------------- metrics

MetricKind parse_metric(const std::string& name) {
  if (name == "top1") return MetricKind::Top1;
  if (name == "r2") return MetricKind::R2;
  if (name == "mse") return MetricKind::Mse;
  if (name == "mae") return MetricKind::Mae;
  throw std::invalid_argument("unknown metric '" + name + "' (expected top1, r2, mse or mae)");
}

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::Top1: return "top1";
    case MetricKind::R2: return "r2";
    case MetricKind::Mse: return "mse";
    case MetricKind::Mae: return "mae";
  }
  return "?";
}

double compute_metric(MetricKind kind, std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("compute_metric: " + std::to_string(pred.size()) + " predictions vs " +
                                std::to_string(target.size()) + " targets");
  }
  if (pred.empty()) throw std::invalid_argument("compute_metric: empty input");
  const double n = static_cast<double>(pred.size());
  switch (kind) {
    case MetricKind::Top1: {
      std::size_t hit = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) hit += std::lround(pred[i]) == std::lround(target[i]);
      return static_cast<double>(hit) / n;
    }
    case MetricKind::Mse: {
      double s = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
      return s / n;
    }
    case MetricKind::Mae: {
      double s = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
      return s / n;
    }
    case MetricKind::R2: {
      const double mean = std::accumulate(target.begin(), target.end(), 0.0) / n;
      double ss_res = 0.0, ss_tot = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
        ss_tot += (target[i] - mean) * (target[i] - mean);
      }
      if (ss_tot == 0.0) throw std::domain_error("r2: target is constant (SS_tot = 0)");
      return 1.0 - ss_res / ss_tot;
    }
  }
  return 0.0;
}

SeedSummary aggregate_seeds(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("aggregate_seeds: no values");
  const double n = static_cast<double>(values.size());
  SeedSummary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

EvalReport EvalReport::make(std::string task, MetricKind metric, std::vector<std::uint64_t> seeds,
                            std::vector<double> values) {
  if (seeds.size() != values.size()) throw std::invalid_argument("report: seed and value counts differ");
  EvalReport r;
  r.task = std::move(task);
  r.metric = metric;
  r.seeds = std::move(seeds);
  r.values = std::move(values);
  r.summary = aggregate_seeds(r.values);
  return r;
}

double EvalReport::display_scale() const {
  return metric == MetricKind::Top1 || metric == MetricKind::R2 ? 100.0 : 1.0;
}

nlohmann::ordered_json EvalReport::to_json() const {
  return {{"mean", summary.mean}, {"metric", chada::to_string(metric)}, {"seeds", seeds},
          {"std", summary.std},   {"task", task},                        {"values", values}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  for (const char* key : {"task", "metric", "seeds", "values"}) {
    if (!j.contains(key)) throw std::invalid_argument(std::string("report: missing key '") + key + "'");
  }
  return make(j.at("task").get<std::string>(), parse_metric(j.at("metric").get<std::string>()),
              j.at("seeds").get<std::vector<std::uint64_t>>(), j.at("values").get<std::vector<double>>());
}

std::string EvalReport::formatted() const {
  char buf[64];
  const int prec = display_scale() == 1.0 ? 4 : 2;
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", prec, summary.mean * display_scale(), prec,
                summary.std * display_scale());
  return buf;
}

// ---------------------------------------------------------------- splits

std::vector<std::size_t> low_data_split(std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (labels.empty()) throw std::invalid_argument("low_data_split: empty label set");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("low_data_split: fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::size_t> out;
  for (auto& [label, idx] : by_class) {
    Rng rng(derive_seed(seed, {0x73706c6974, static_cast<std::uint64_t>(static_cast<std::int64_t>(label))}));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    const auto take = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 1e-9)), 1, idx.size());
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- probe

void ProbeConfig::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("probe: fraction must lie in (0, 1]");
  if (batch_size == 0) throw std::invalid_argument("probe: batch_size must be positive");
  if (!(lr >= 0.0)) throw std::invalid_argument("probe: lr must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("probe: momentum must lie in [0, 1)");
}

std::vector<double> LinearProbe::logits(std::span<const double> x) const {
  if (x.size() != width) {
    throw WidthMismatchError("probe: input width " + std::to_string(x.size()) + ", trained on " +
                             std::to_string(width));
  }
  std::vector<double> z(bias);
  for (std::size_t i = 0; i < width; ++i) {
    const double xi = (x[i] - feature_mean[i]) * feature_scale[i];
    if (xi == 0.0) continue;
    for (std::size_t c = 0; c < classes; ++c) z[c] += weight[c * width + i] * xi;
  }
  return z;
}

int LinearProbe::predict(std::span<const double> x) const {
  const auto z = logits(x);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

std::vector<int> LinearProbe::predict(const Embeddings& x) const {
  std::vector<int> out(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) out[r] = predict(x.row(r));
  return out;
}

LinearProbe train_linear_probe(const Embeddings& x, std::span<const int> labels, const ProbeConfig& config) {
  config.validate();
  check_labels(x, labels, "linear probe");
  if (x.rows == 0) throw std::invalid_argument("linear probe: no training rows");
  int max_label = 0;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("linear probe: labels must be non-negative class indices");
    max_label = std::max(max_label, y);
  }
  if (std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; })) {
    throw std::invalid_argument("linear probe: need at least two classes, got only class " +
                                std::to_string(labels[0]));
  }

  LinearProbe p;
  p.width = x.width;
  p.classes = static_cast<std::size_t>(max_label) + 1;
  p.feature_mean.assign(p.width, 0.0);
  p.feature_scale.assign(p.width, 1.0);
  const double n = static_cast<double>(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t i = 0; i < p.width; ++i) p.feature_mean[i] += x.values[r * p.width + i];
  }
  for (auto& m : p.feature_mean) m /= n;
  for (std::size_t i = 0; i < p.width; ++i) {
    double ss = 0.0;
    for (std::size_t r = 0; r < x.rows; ++r) {
      const double d = x.values[r * p.width + i] - p.feature_mean[i];
      ss += d * d;
    }
    const double sd = std::sqrt(ss / n);
    p.feature_scale[i] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  p.weight.assign(p.classes * p.width, 0.0);
  p.bias.assign(p.classes, 0.0);

  const std::size_t batches = (x.rows + config.batch_size - 1) / config.batch_size;
  const std::size_t total = config.epochs * batches;
  std::vector<double> vel_w(p.weight.size(), 0.0), vel_b(p.classes, 0.0);
  std::vector<double> grad_w(p.weight.size()), grad_b(p.classes), xs(p.width);
  std::vector<std::size_t> order(x.rows);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {0x70726f6265, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::size_t lo = b * config.batch_size, hi = std::min(x.rows, lo + config.batch_size);
      std::fill(grad_w.begin(), grad_w.end(), 0.0);
      std::fill(grad_b.begin(), grad_b.end(), 0.0);
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t r = order[k];
        auto z = p.logits(x.row(r));
        const double mx = *std::max_element(z.begin(), z.end());
        double s = 0.0;
        for (auto& v : z) s += (v = std::exp(v - mx));
        for (auto& v : z) v /= s;
        z[static_cast<std::size_t>(labels[r])] -= 1.0;
        for (std::size_t i = 0; i < p.width; ++i) {
          xs[i] = (x.values[r * p.width + i] - p.feature_mean[i]) * p.feature_scale[i];
        }
        for (std::size_t c = 0; c < p.classes; ++c) {
          grad_b[c] += z[c];
          for (std::size_t i = 0; i < p.width; ++i) grad_w[c * p.width + i] += z[c] * xs[i];
        }
      }
      const double lr = cosine_schedule(step, total, config.lr, 0.0);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (std::size_t j = 0; j < p.weight.size(); ++j) {
        vel_w[j] = config.momentum * vel_w[j] + grad_w[j] * inv;
        p.weight[j] -= lr * vel_w[j];
      }
      for (std::size_t c = 0; c < p.classes; ++c) {
        vel_b[c] = config.momentum * vel_b[c] + grad_b[c] * inv;
        p.bias[c] -= lr * vel_b[c];
      }
    }
  }
  return p;
}

double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size() || labels.empty()) {
    throw std::invalid_argument("accuracy: need equal, non-empty prediction and label lists");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double probe_accuracy(const Embeddings& train_x, std::span<const int> train_y, const Embeddings& test_x,
                      std::span<const int> test_y, const ProbeConfig& config) {
  config.validate();
  check_labels(train_x, train_y, "probe train set");
  check_labels(test_x, test_y, "probe test set");
  if (train_x.width != test_x.width) {
    throw WidthMismatchError("probe: train width " + std::to_string(train_x.width) + " vs test width " +
                             std::to_string(test_x.width));
  }
  const auto idx = low_data_split(train_y, config.fraction, config.seed);
  std::vector<int> sub_y;
  for (auto i : idx) sub_y.push_back(train_y[i]);
  const auto probe = train_linear_probe(train_x.select(idx), sub_y, config);
  return accuracy(probe.predict(test_x), test_y);
}

// ---------------------------------------------------------------- knn

std::vector<int> knn_predict(const Embeddings& train_x, std::span<const int> train_y, const Embeddings& test_x,
                             std::size_t k) {
  check_labels(train_x, train_y, "knn train set");
  if (train_x.rows == 0) throw std::invalid_argument("knn: empty training set");
  if (k == 0) throw std::invalid_argument("knn: k must be at least 1");
  if (k > train_x.rows) {
    throw std::invalid_argument("knn: k = " + std::to_string(k) + " exceeds the training set size " +
                                std::to_string(train_x.rows));
  }
  if (train_x.width != test_x.width) {
    throw WidthMismatchError("knn: train width " + std::to_string(train_x.width) + " vs test width " +
                             std::to_string(test_x.width));
  }
  auto norms = [](const Embeddings& e) {
    std::vector<double> n(e.rows);
    for (std::size_t r = 0; r < e.rows; ++r) {
      double s = 0.0;
      for (double v : e.row(r)) s += v * v;
      n[r] = std::sqrt(s);
    }
    return n;
  };
  const auto train_norm = norms(train_x), test_norm = norms(test_x);
  std::vector<int> out(test_x.rows);
  std::vector<std::pair<double, std::size_t>> dist(train_x.rows);
  for (std::size_t q = 0; q < test_x.rows; ++q) {
    const auto a = test_x.row(q);
    for (std::size_t r = 0; r < train_x.rows; ++r) {
      const auto b = train_x.row(r);
      double dot = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
      const double denom = test_norm[q] * train_norm[r];
      dist[r] = {denom > 0.0 ? 1.0 - dot / denom : 1.0, r};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, summed distance)
    for (std::size_t j = 0; j < k; ++j) {
      auto& v = votes[train_y[dist[j].second]];
      ++v.first;
      v.second += dist[j].first;
    }
    auto best = votes.begin();
    for (auto it = votes.begin(); it != votes.end(); ++it) {
      const auto& [count, sum] = it->second;
      if (count > best->second.first || (count == best->second.first && sum < best->second.second)) best = it;
    }
    out[q] = best->first;
  }
  return out;
}

double knn_eval(const Embeddings& train_x, std::span<const int> train_y, const Embeddings& test_x,
                std::span<const int> test_y, std::size_t k) {
  check_labels(test_x, test_y, "knn test set");
  return accuracy(knn_predict(train_x, train_y, test_x, k), test_y);
}

// ---------------------------------------------------------------- pca

Embeddings PcaResult::project(const Embeddings& x) const {
  if (x.width != width) {
    throw WidthMismatchError("pca: input width " + std::to_string(x.width) + ", fitted on " +
                             std::to_string(width));
  }
  Embeddings out(x.rows, components);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t i = 0; i < width; ++i) {
      const double c = x.values[r * width + i] - mean[i];
      for (std::size_t j = 0; j < components; ++j) out.values[r * components + j] += c * component(i, j);
    }
  }
  return out;
}

PcaResult pca_fit_project(const Embeddings& x, std::size_t components) {
  if (x.rows < 2) throw std::invalid_argument("pca: need at least two rows");
  if (components == 0 || components > std::min(x.rows, x.width)) {
    throw std::invalid_argument("pca: components must lie in [1, " + std::to_string(std::min(x.rows, x.width)) +
                                "], got " + std::to_string(components));
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat centered = Eigen::Map<const Mat>(x.values.data(), static_cast<Eigen::Index>(x.rows),
                                       static_cast<Eigen::Index>(x.width));
  const Eigen::RowVectorXd mean = centered.colwise().mean();
  centered.rowwise() -= mean;
  const double total = centered.squaredNorm();
  if (!(total > 0.0)) throw std::invalid_argument("pca: all rows are identical (zero variance)");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  Eigen::MatrixXd v = svd.matrixV().leftCols(static_cast<Eigen::Index>(components));
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index arg = 0;
    v.col(j).cwiseAbs().maxCoeff(&arg);
    if (v(arg, j) < 0.0) v.col(j) *= -1.0;
  }

  PcaResult r;
  r.width = x.width;
  r.components = components;
  r.mean.assign(mean.data(), mean.data() + mean.size());
  r.basis.resize(x.width * components);
  for (std::size_t i = 0; i < x.width; ++i) {
    for (std::size_t j = 0; j < components; ++j) {
      r.basis[i * components + j] = v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  for (std::size_t j = 0; j < components; ++j) {
    const double s = sv(static_cast<Eigen::Index>(j));
    r.explained_ratio.push_back(s * s / total);
  }
  const Eigen::MatrixXd proj = centered * v;
  r.projected = Embeddings(x.rows, components);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < components; ++j) {
      r.projected.values[i * components + j] = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return r;
}

JointSpaceResult joint_space_analysis(const Embeddings& a, const Embeddings& b, std::size_t components) {
  if (a.width != b.width) {
    throw WidthMismatchError("joint space: embedding widths differ (" + std::to_string(a.width) + " vs " +
                             std::to_string(b.width) + "); both datasets must be encoded into one shared space");
  }
  if (a.rows == 0 || b.rows == 0) throw std::invalid_argument("joint space: both datasets need embeddings");
  Embeddings all(a.rows + b.rows, a.width);
  std::copy(a.values.begin(), a.values.end(), all.values.begin());
  std::copy(b.values.begin(), b.values.end(), all.values.begin() + static_cast<std::ptrdiff_t>(a.values.size()));

  JointSpaceResult res;
  res.pca = pca_fit_project(all, components);
  std::vector<std::pair<double, bool>> pc1(all.rows);  // (value, is A)
  for (std::size_t r = 0; r < all.rows; ++r) pc1[r] = {res.pca.projected.values[r * components], r < a.rows};
  std::sort(pc1.begin(), pc1.end());

  // Candidate split after position i: everything at or below pc1[i] on one side.
  const double n = static_cast<double>(all.rows);
  std::size_t a_below = 0, b_below = 0;
  res.pc1_accuracy = std::max(a.rows, b.rows) / n;
  res.pc1_threshold = pc1.front().first - 1.0;
  res.a_above = a.rows >= b.rows;
  for (std::size_t i = 0; i + 1 < pc1.size(); ++i) {
    (pc1[i].second ? a_below : b_below) += 1;
    if (pc1[i].first == pc1[i + 1].first) continue;
    const double thr = 0.5 * (pc1[i].first + pc1[i + 1].first);
    const double acc_a_above = static_cast<double>(b_below + (a.rows - a_below)) / n;
    const double acc_a_below = static_cast<double>(a_below + (b.rows - b_below)) / n;
    if (acc_a_above > res.pc1_accuracy) {
      res.pc1_accuracy = acc_a_above;
      res.pc1_threshold = thr;
      res.a_above = true;
    }
    if (acc_a_below > res.pc1_accuracy) {
      res.pc1_accuracy = acc_a_below;
      res.pc1_threshold = thr;
      res.a_above = false;
    }
  }
  return res;
}

std::string joint_space_csv(const JointSpaceResult& result, const std::string& name_a, std::span<const int> labels_a,
                            const std::string& name_b, std::span<const int> labels_b) {
  const auto& proj = result.pca.projected;
  if (labels_a.size() + labels_b.size() != proj.rows) {
    throw std::invalid_argument("joint space csv: label count does not match the projected rows");
  }
  std::ostringstream os;
  os << "dataset,label";
  for (std::size_t j = 0; j < proj.width; ++j) os << ",pc" << j + 1;
  os << '\n';
  char buf[32];
  for (std::size_t r = 0; r < proj.rows; ++r) {
    const bool in_a = r < labels_a.size();
    os << (in_a ? name_a : name_b) << ',' << (in_a ? labels_a[r] : labels_b[r - labels_a.size()]);
    for (double v : proj.row(r)) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- decoder

namespace {

constexpr std::size_t kDecoderChannels[] = {64, 64, 32, 16, 8, 1};

std::size_t conv_stack_parameters() {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < std::size(kDecoderChannels); ++i) {
    n += kDecoderChannels[i] * kDecoderChannels[i + 1] * 9 + kDecoderChannels[i + 1];
  }
  return n;
}

}  // namespace

void DecoderConfig::validate() const {
  if (input_dim == 0) throw std::invalid_argument("decoder: input_dim must be positive");
  if (output_side < 32 || output_side % 32 != 0) {
    throw std::invalid_argument("decoder: output_side must be a positive multiple of 32, got " +
                                std::to_string(output_side));
  }
  if (hidden == 0 && resolved_hidden() == 0) throw std::invalid_argument("decoder: parameter budget too small");
}

std::size_t DecoderConfig::resolved_hidden() const {
  if (hidden > 0) return hidden;
  const std::size_t seed_out = kDecoderChannels[0] * seed_side() * seed_side();
  const std::size_t fixed = conv_stack_parameters() + seed_out;
  if (parameter_budget <= fixed) return 0;
  const double per_unit = static_cast<double>(input_dim + 1 + seed_out);
  return static_cast<std::size_t>(std::llround(static_cast<double>(parameter_budget - fixed) / per_unit));
}

std::size_t decoder_parameter_count(const DecoderConfig& config) {
  const std::size_t h = config.resolved_hidden();
  const std::size_t seed_out = kDecoderChannels[0] * config.seed_side() * config.seed_side();
  return config.input_dim * h + h + h * seed_out + seed_out + conv_stack_parameters();
}

template <typename T>
ChannelDecoder<T> ChannelDecoder<T>::init(const DecoderConfig& config, Rng& rng) {
  config.validate();
  ChannelDecoder d;
  d.config = config;
  const std::size_t h = config.resolved_hidden();
  const std::size_t seed_out = kDecoderChannels[0] * config.seed_side() * config.seed_side();
  d.fc1_w = Tensor<T>({config.input_dim, h});
  fill_truncated_normal(d.fc1_w, std::sqrt(2.0 / static_cast<double>(config.input_dim)), rng);
  d.fc1_b = Tensor<T>({h});
  d.fc2_w = Tensor<T>({h, seed_out});
  fill_truncated_normal(d.fc2_w, std::sqrt(2.0 / static_cast<double>(h)), rng);
  d.fc2_b = Tensor<T>({seed_out});
  for (std::size_t i = 0; i + 1 < std::size(kDecoderChannels); ++i) {
    const std::size_t cin = kDecoderChannels[i], cout = kDecoderChannels[i + 1];
    Tensor<T> w({cout, cin, 3, 3});
    fill_truncated_normal(w, std::sqrt(2.0 / static_cast<double>(cin * 9)), rng);
    d.conv_w.push_back(std::move(w));
    d.conv_b.push_back(Tensor<T>({cout}));
  }
  return d;
}

template <typename T>
ParamList<T> ChannelDecoder<T>::parameters() const {
  ParamList<T> out{{"fc1.weight", fc1_w}, {"fc1.bias", fc1_b}, {"fc2.weight", fc2_w}, {"fc2.bias", fc2_b}};
  for (std::size_t i = 0; i < conv_w.size(); ++i) {
    out.push_back({"conv" + std::to_string(i) + ".weight", conv_w[i]});
    out.push_back({"conv" + std::to_string(i) + ".bias", conv_b[i]});
  }
  return out;
}

template <typename T>
Tensor<T> ChannelDecoder<T>::forward(const Tensor<T>& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.dim(1) != config.input_dim) {
    throw WidthMismatchError("decoder: expected [B, " + std::to_string(config.input_dim) + "] embeddings, got " +
                             to_string(embeddings.shape()));
  }
  const std::size_t b = embeddings.dim(0), s = config.seed_side();
  auto h = ops::gelu(ops::linear(embeddings, fc1_w, fc1_b));
  h = ops::gelu(ops::linear(h, fc2_w, fc2_b));
  h = ops::reshape(h, {b, kDecoderChannels[0], s, s});
  for (std::size_t i = 0; i < conv_w.size(); ++i) {
    h = ops::conv2d(ops::upsample_nearest2x(h), conv_w[i], conv_b[i], 1, 1);
    if (i + 1 < conv_w.size()) h = ops::gelu(h);
  }
  return ops::sigmoid(h);
}

template struct ChannelDecoder<float>;
template struct ChannelDecoder<double>;

MultiChannelImage drop_channel(const MultiChannelImage& image, std::size_t target_channel) {
  if (image.channels() < 2) {
    throw std::invalid_argument("reconstruction: image has " + std::to_string(image.channels()) +
                                " channel(s); at least two are needed");
  }
  if (target_channel >= image.channels()) {
    throw std::invalid_argument("reconstruction: target channel " + std::to_string(target_channel) +
                                " out of range for a " + std::to_string(image.channels()) + "-channel image");
  }
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < image.channels(); ++c) {
    if (c != target_channel) keep.push_back(c);
  }
  return image.select_channels(keep);
}

std::vector<float> target_plane(const MultiChannelImage& image, std::size_t target_channel, std::size_t side) {
  if (target_channel >= image.channels()) {
    throw std::invalid_argument("reconstruction: target channel " + std::to_string(target_channel) +
                                " out of range");
  }
  const std::size_t which[] = {target_channel};
  auto plane = image.select_channels(which);
  if (plane.height != side || plane.width != side) plane = resize_bilinear(plane, side);
  return plane.pixels;
}

namespace {

struct ReconstructionData {
  Embeddings inputs;
  std::vector<float> targets;  // rows x side x side
};

ReconstructionData reconstruction_data(const Model<float>& encoder, std::span<const MultiChannelImage> images,
                                       std::size_t target_channel, std::size_t side) {
  if (images.empty()) throw std::invalid_argument("reconstruction: no images");
  std::vector<MultiChannelImage> inputs;
  ReconstructionData d;
  for (const auto& img : images) {
    inputs.push_back(drop_channel(img, target_channel));
    const auto t = target_plane(img, target_channel, side);
    d.targets.insert(d.targets.end(), t.begin(), t.end());
  }
  d.inputs = embed_images(encoder, inputs);
  return d;
}

Tensor<float> rows_tensor(const Embeddings& e, std::span<const std::size_t> rows) {
  Tensor<float> t({rows.size(), e.width});
  auto v = t.mutable_values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < e.width; ++i) v[r * e.width + i] = static_cast<float>(e.values[rows[r] * e.width + i]);
  }
  return t;
}

}  // namespace

ReconstructionResult train_channel_decoder(const Model<float>& encoder, std::span<const MultiChannelImage> images,
                                           std::size_t target_channel, const DecoderConfig& decoder_config,
                                           const DecoderTrainConfig& train) {
  if (train.batch_size == 0) throw std::invalid_argument("reconstruction: batch_size must be positive");
  ReconstructionResult res;
  res.encoder_checksum_before = checksum(encoder.parameters());
  const std::size_t side = decoder_config.output_side, plane = side * side;
  const auto data = reconstruction_data(encoder, images, target_channel, side);

  DecoderConfig cfg = decoder_config;
  cfg.input_dim = data.inputs.width;
  Rng rng(derive_seed(train.seed, {0x6465636f6465}));
  res.decoder = ChannelDecoder<float>::init(cfg, rng);
  auto params = res.decoder.parameters();
  for (auto& p : params) p.tensor.set_requires_grad(true);
  AdamW<float> adam(AdamWOptions{0.9, 0.999, 1e-8, 0.0});

  const std::size_t n = data.inputs.rows, batch = std::min(train.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;
  for (std::size_t step = 0; step < train.steps; ++step) {
    std::vector<std::size_t> rows;
    while (rows.size() < batch) {
      if (cursor == n) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    Tensor<float> target({rows.size(), 1, side, side});
    auto tv = target.mutable_values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy_n(data.targets.begin() + static_cast<std::ptrdiff_t>(rows[r] * plane), plane,
                  tv.begin() + static_cast<std::ptrdiff_t>(r * plane));
    }
    Tape<float> tape;
    Tensor<float> loss;
    {
      Tape<float>::Recording rec(tape);
      const auto diff = ops::sub(res.decoder.forward(rows_tensor(data.inputs, rows)), target);
      loss = ops::mean(ops::mul(diff, diff));
    }
    const double l = loss.item();
    if (!std::isfinite(l)) throw NumericalError("reconstruction: loss is not finite at step " + std::to_string(step));
    res.loss_history.push_back(l);
    tape.backward(loss);
    adam.step(params, train.lr);
    zero_grads(params);
  }
  for (auto& p : params) p.tensor.set_requires_grad(false);
  res.encoder_checksum_after = checksum(encoder.parameters());
  return res;
}

std::vector<double> predict_channel(const Model<float>& encoder, const ChannelDecoder<float>& decoder,
                                    std::span<const MultiChannelImage> images, std::size_t target_channel) {
  const auto data = reconstruction_data(encoder, images, target_channel, decoder.config.output_side);
  std::vector<std::size_t> rows(data.inputs.rows);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::vector<double> out;
  for (std::size_t start = 0; start < rows.size(); start += 32) {
    const std::span<const std::size_t> part(rows.data() + start, std::min<std::size_t>(32, rows.size() - start));
    const auto pred = decoder.forward(rows_tensor(data.inputs, part));
    out.insert(out.end(), pred.values().begin(), pred.values().end());
  }
  return out;
}

// ---------------------------------------------------------------- baseline

double single_channel_logistic_accuracy(std::span<const MultiChannelImage> train, std::span<const int> train_y,
                                        std::span<const MultiChannelImage> test, std::span<const int> test_y,
                                        std::size_t channel, const ProbeConfig& config) {
  auto features = [&](std::span<const MultiChannelImage> images) {
    if (images.empty()) throw std::invalid_argument("single-channel baseline: no images");
    const std::size_t width = images[0].height * images[0].width;
    Embeddings e(images.size(), width);
    for (std::size_t r = 0; r < images.size(); ++r) {
      if (channel >= images[r].channels() || images[r].height * images[r].width != width) {
        throw std::invalid_argument("single-channel baseline: image " + std::to_string(r) +
                                    " lacks channel " + std::to_string(channel) + " or has a different size");
      }
      const auto plane = images[r].channel(channel);
      std::copy(plane.begin(), plane.end(), e.values.begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    return e;
  };
  return probe_accuracy(features(train), train_y, features(test), test_y, config);
}

}  // namespace chada
