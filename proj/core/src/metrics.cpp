#include "evq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "evq/error.hpp"
#include "evq/rng.hpp"
#include "evq/thresholds.hpp"

namespace evq {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kDimension, "cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                                           std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::kDegenerateVector, "cosine similarity of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<double> template_embedding(std::span<const std::span<const double>> features) {
  if (features.empty()) throw Error(ErrorKind::kDegenerateVector, "template from an empty feature list");
  const std::size_t d = features.front().size();
  std::vector<double> out(d, 0.0);
  for (const auto& f : features) {
    if (f.size() != d) throw Error(ErrorKind::kDimension, "template features differ in dimension");
    for (std::size_t i = 0; i < d; ++i) out[i] += f[i];
  }
  double norm = 0.0;
  for (auto& v : out) {
    v /= static_cast<double>(features.size());
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (auto& v : out) v /= norm;
  return out;
}

TprAtFpr tpr_at_fpr(const ScoredPairs& sp, double target) {
  if (sp.neg.empty()) throw Error(ErrorKind::kDegenerateBatch, "tpr_at_fpr needs negative scores");
  const double target_list[] = {target};
  const ThresholdSet thr = compute_thresholds(sp.neg, target_list);
  TprAtFpr out;
  out.target = target;
  out.threshold = thr.thresholds.front();
  out.tpr = rate_above(sp.pos, out.threshold);
  out.achieved_fpr = rate_above(sp.neg, out.threshold);
  return out;
}

std::vector<RocPoint> roc_curve(const ScoredPairs& sp) {
  if (sp.pos.empty() || sp.neg.empty()) throw Error(ErrorKind::kContract, "roc_curve needs both pair classes");
  // Sweep distinct thresholds from high to low; counts only grow.
  struct Scored {
    double score;
    bool positive;
  };
  std::vector<Scored> all;
  all.reserve(sp.pos.size() + sp.neg.size());
  for (double s : sp.pos) all.push_back({s, true});
  for (double s : sp.neg) all.push_back({s, false});
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

  const double P = static_cast<double>(sp.pos.size());
  const double N = static_cast<double>(sp.neg.size());
  std::vector<RocPoint> out{{0.0, 0.0}};
  auto push = [&out](RocPoint p) {
    if (!(out.back() == p)) out.push_back(p);
  };
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    // Threshold t = all[i].score: everything strictly above has been counted.
    push({static_cast<double>(fp) / N, static_cast<double>(tp) / P});
    const double t = all[i].score;
    for (; i < all.size() && all[i].score == t; ++i) (all[i].positive ? tp : fp)++;
  }
  push({1.0, 1.0});
  return out;
}

void write_roc_csv(std::ostream& os, std::span<const RocPoint> roc) {
  os << "fpr,tpr\n";
  const auto old = os.precision(17);
  for (const auto& p : roc) os << p.fpr << ',' << p.tpr << '\n';
  os.precision(old);
}

namespace {

struct Labeled {
  double score;
  bool positive;
};

// Threshold maximizing accuracy of "score > t" on `train`; lowest wins ties.
// Candidates sit midway between consecutive distinct scores (plus ±∞) so a
// held-out pair falling between two training scores is not decided by
// whichever side happened to be sampled.
double best_threshold(std::vector<Labeled> train) {
  std::sort(train.begin(), train.end(), [](const Labeled& a, const Labeled& b) { return a.score < b.score; });
  std::size_t positives = 0;
  for (const auto& s : train) positives += s.positive;
  // t = −∞: every pair predicted positive.
  std::size_t correct = positives;
  std::size_t best_correct = correct;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < train.size();) {
    const double t = train[i].score;
    // Raising the threshold to t flips every pair scored exactly t to negative.
    for (; i < train.size() && train[i].score == t; ++i) {
      if (train[i].positive) --correct;
      else ++correct;
    }
    if (correct > best_correct) {
      best_correct = correct;
      best = i < train.size() ? t + (train[i].score - t) / 2.0 : std::numeric_limits<double>::infinity();
    }
  }
  return best;
}

}  // namespace

KFoldAccuracy kfold_accuracy(const ScoredPairs& sp, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::kProtocol, "k-fold accuracy needs k >= 2");
  const auto folds = static_cast<std::size_t>(k);
  if (sp.pos.size() < folds || sp.neg.size() < folds) {
    throw Error(ErrorKind::kProtocol, "each pair class needs at least k entries for " + std::to_string(k) + " folds");
  }
  std::vector<std::vector<Labeled>> fold_data(folds);
  SplitMix64 rng(derive_seed(seed, /*stream=*/0x4b464f4c));
  auto deal = [&](const std::vector<double>& scores, bool positive) {
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i = 0; i < order.size(); ++i) fold_data[i % folds].push_back({scores[order[i]], positive});
  };
  deal(sp.pos, true);
  deal(sp.neg, false);

  std::vector<double> acc(folds);
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<Labeled> train;
    for (std::size_t g = 0; g < folds; ++g)
      if (g != f) train.insert(train.end(), fold_data[g].begin(), fold_data[g].end());
    const double t = best_threshold(std::move(train));
    std::size_t correct = 0;
    for (const auto& s : fold_data[f]) correct += ((s.score > t) == s.positive);
    acc[f] = static_cast<double>(correct) / static_cast<double>(fold_data[f].size());
  }
  KFoldAccuracy out;
  for (double a : acc) out.mean += a;
  out.mean /= static_cast<double>(folds);
  for (double a : acc) out.stddev += (a - out.mean) * (a - out.mean);
  out.stddev = std::sqrt(out.stddev / static_cast<double>(folds));
  return out;
}

double VerificationReport::tpr(double target) const {
  for (const auto& t : tpr_at)
    if (t.target == target) return t.tpr;
  throw Error(ErrorKind::kContract, "report has no TPR at FPR " + std::to_string(target));
}

void to_json(nlohmann::json& j, const VerificationReport& r) {
  nlohmann::json tprs = nlohmann::json::array();
  for (const auto& t : r.tpr_at) {
    tprs.push_back({{"fpr_target", t.target}, {"threshold", t.threshold}, {"tpr", t.tpr},
                    {"achieved_fpr", t.achieved_fpr}});
  }
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& p : r.roc) roc.push_back({p.fpr, p.tpr});
  j = nlohmann::json{{"model", r.model},
                     {"accuracy", r.accuracy},
                     {"accuracy_std", r.accuracy_std},
                     {"tpr_at", tprs},
                     {"roc", roc},
                     {"model_size_mb", r.model_size_mb},
                     {"param_count", r.param_count},
                     {"train_images", r.train_images},
                     {"w_bits", r.w_bits},
                     {"a_bits", r.a_bits}};
}

void from_json(const nlohmann::json& j, VerificationReport& r) {
  r.model = j.at("model").get<std::string>();
  r.accuracy = j.at("accuracy").get<double>();
  r.accuracy_std = j.at("accuracy_std").get<double>();
  r.tpr_at.clear();
  for (const auto& t : j.at("tpr_at")) {
    r.tpr_at.push_back({t.at("fpr_target").get<double>(), t.at("threshold").get<double>(),
                        t.at("tpr").get<double>(), t.at("achieved_fpr").get<double>()});
  }
  r.roc.clear();
  for (const auto& p : j.value("roc", nlohmann::json::array())) r.roc.push_back({p.at(0), p.at(1)});
  r.model_size_mb = j.at("model_size_mb").get<double>();
  r.param_count = j.at("param_count").get<std::uint64_t>();
  r.train_images = j.value("train_images", std::uint64_t{0});
  r.w_bits = j.value("w_bits", 32);
  r.a_bits = j.value("a_bits", 32);
}

}  // namespace evq
