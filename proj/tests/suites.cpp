#include "suites.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "evq/losses.hpp"
#include "evq/quantization.hpp"
#include "evq/thresholds.hpp"
#include "oracles.hpp"

namespace suites {

using evq::Tensor;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kStep = 1e-5;

void note(Result& r, const std::string& name, double err, const std::string& where) {
  ++r.cases;
  r.worst = std::max(r.worst, err);
  r.by_name[name] = std::max(r.by_name[name], err);
  if (!(err < kGradTol)) {
    ++r.failures;
    if (r.first_failure.empty()) r.first_failure = name + " " + where + " rel err " + std::to_string(err);
  }
}

Tensor normalized_rows(oracle::Gen& g, std::size_t n, std::size_t d) {
  return evq::l2_normalize(g.rows_away_from_zero(n, d, false)).detach();
}

// Selection matrix placing `free_rows` of an n-row matrix; constant rows go
// into `fixed` so x = S·free + fixed stays differentiable in `free`.
Tensor assemble(const Tensor& free, const std::vector<std::size_t>& free_rows, const Tensor& fixed) {
  const std::size_t n = fixed.rows();
  std::vector<double> sel(n * free_rows.size(), 0.0);
  for (std::size_t k = 0; k < free_rows.size(); ++k) sel[free_rows[k] * free_rows.size() + k] = 1.0;
  return evq::add(evq::matmul(Tensor::from({n, free_rows.size()}, sel), free), fixed);
}

struct EkdPoint {
  Tensor teacher;  // normalized, constant
  Tensor fixed;    // raw student rows pinned by threshold pairs, zeros elsewhere
  Tensor free;     // raw student rows under test
  std::vector<std::size_t> free_rows;
  std::vector<int> labels;
};

// Draws a batch where no hinge argument and no neighbouring pair of student
// negatives is within 1e-4 of a tie, so the loss is smooth around the point.
// Student thresholds are constants, so rows that define one of them are held
// fixed and only the remaining rows are differentiated.
EkdPoint ekd_point(std::uint64_t seed) {
  const std::size_t n = 8, d = 6;
  const std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1};
  const auto targets = evq::default_fpr_targets();
  for (std::uint64_t attempt = 0;; ++attempt) {
    oracle::Gen g(evq::derive_seed(seed, 0xe4d, attempt));
    const Tensor teacher = normalized_rows(g, n, d);
    // Student = teacher plus noise, so the hinge terms are a mix of active and idle.
    std::vector<double> raw(teacher.data().begin(), teacher.data().end());
    for (auto& v : raw) v += g.uniform(-0.4, 0.4);
    const Tensor x = Tensor::from({n, d}, raw);
    const Tensor s = evq::l2_normalize(x);

    const auto sp = evq::mine_pairs(s, labels);
    const auto tp = evq::mine_pairs(teacher, labels);
    std::vector<double> sorted = sp.neg;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    bool ok = true;
    for (std::size_t i = 1; i < sorted.size(); ++i) ok = ok && sorted[i - 1] - sorted[i] > 1e-4;
    const auto st = evq::compute_thresholds(sp.neg, targets);
    const auto tt = evq::compute_thresholds(tp.neg, targets);
    for (std::size_t k = 0; k < targets.size() && ok; ++k) {
      for (std::size_t p = 0; p < sp.pos.size(); ++p)
        ok = ok && std::abs((tp.pos[p] - tt.thresholds[k]) - (sp.pos[p] - st.thresholds[k])) > 1e-4;
      for (std::size_t p = 0; p < sp.neg.size(); ++p)
        ok = ok && std::abs((sp.neg[p] - st.thresholds[k]) - (tp.neg[p] - tt.thresholds[k])) > 1e-4;
    }
    if (!ok) continue;

    std::vector<bool> pinned(n, false);
    for (double t : st.thresholds) {
      for (std::size_t p = 0; p < sp.neg.size(); ++p) {
        if (sp.neg[p] == t) pinned[sp.neg_pairs[p].first] = pinned[sp.neg_pairs[p].second] = true;
      }
    }
    EkdPoint out;
    out.teacher = teacher;
    out.labels = labels;
    std::vector<double> fixed(n * d, 0.0), free;
    for (std::size_t i = 0; i < n; ++i) {
      if (pinned[i]) {
        std::copy(raw.begin() + i * d, raw.begin() + (i + 1) * d, fixed.begin() + i * d);
      } else {
        out.free_rows.push_back(i);
        free.insert(free.end(), raw.begin() + i * d, raw.begin() + (i + 1) * d);
      }
    }
    if (out.free_rows.size() < 2) continue;
    out.fixed = Tensor::from({n, d}, fixed);
    out.free = Tensor::from({out.free_rows.size(), d}, free);
    return out;
  }
}

}  // namespace

Result gradcheck(std::size_t seeds) {
  Result r;
  for (std::size_t seed = 0; seed < seeds; ++seed) {
    oracle::Gen g(evq::derive_seed(0x67c, seed));
    const std::string at = "seed " + std::to_string(seed);
    auto check = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
      note(r, name, evq::gradient_check(f, x, kStep), at);
    };
    const std::size_t m = g.size(1, 4), k = g.size(1, 4), n = g.size(1, 4);
    const Tensor A = g.tensor({m, k}, -1, 1, false), B = g.tensor({k, n}, -1, 1, false);
    const Tensor C = g.tensor({m, k}, -1, 1, false), R = g.tensor({m, k}, -1, 1, false);
    const Tensor bias = g.tensor({k}, -1, 1, false);
    const double factor = g.uniform(-2, 2);

    // Weighted sums make every output coordinate matter.
    auto wsum = [](const Tensor& t, const Tensor& w) { return evq::sum(evq::mul(t, w)); };
    const Tensor Wmn = g.tensor({m, n}, -1, 1, false);
    check("matmul.a", [&](const Tensor& x) { return wsum(evq::matmul(x, B), Wmn); }, A);
    check("matmul.b", [&](const Tensor& x) { return wsum(evq::matmul(A, x), Wmn); }, B);
    const Tensor Wkm = g.tensor({k, m}, -1, 1, false);
    check("transpose", [&](const Tensor& x) { return wsum(evq::transpose(x), Wkm); }, A);
    check("add", [&](const Tensor& x) { return wsum(evq::add(x, C), R); }, A);
    check("sub", [&](const Tensor& x) { return wsum(evq::sub(C, x), R); }, A);
    check("mul", [&](const Tensor& x) { return wsum(evq::mul(x, C), R); }, A);
    check("add_row.a", [&](const Tensor& x) { return wsum(evq::add_row(x, bias), R); }, A);
    check("add_row.bias", [&](const Tensor& x) { return wsum(evq::add_row(A, x), R); }, bias);
    check("scale", [&](const Tensor& x) { return wsum(evq::scale(x, factor), R); }, A);
    check("relu", [&](const Tensor& x) { return wsum(evq::relu(x), R); }, g.rows_away_from_zero(m, k, false));
    check("l2_normalize", [&](const Tensor& x) { return wsum(evq::l2_normalize(x), R); },
          g.rows_away_from_zero(m, k, false));
    check("sum", [&](const Tensor& x) { return evq::sum(evq::mul(x, x)); }, A);
    check("mean", [&](const Tensor& x) { return evq::mean(evq::mul(x, R)); }, A);
    std::vector<std::size_t> idx(g.size(1, 6));
    for (auto& i : idx) i = g.size(0, m * k - 1);
    const Tensor Widx = g.tensor({idx.size()}, -1, 1, false);
    check("gather", [&](const Tensor& x) { return wsum(evq::gather(x, idx), Widx); }, A);

    const std::size_t classes = g.size(2, 5), rows = g.size(2, 6), dim = g.size(2, 6);
    std::vector<int> labels(rows);
    for (auto& y : labels) y = g.integer(0, static_cast<int>(classes) - 1);
    check("softmax_cross_entropy",
          [&](const Tensor& x) { return evq::softmax_cross_entropy(x, labels); },
          g.tensor({rows, classes}, -3, 3, false));

    // ArcFace away from the θ + m = π switch.
    evq::ArcFaceConfig arc{0.4, g.uniform(1.0, 16.0), classes};
    Tensor emb, W;
    for (;;) {
      emb = g.rows_away_from_zero(rows, dim, false);
      W = g.rows_away_from_zero(classes, dim, false);
      const Tensor cos = evq::matmul(evq::l2_normalize(emb), evq::transpose(evq::l2_normalize(W)));
      bool ok = true;
      for (std::size_t i = 0; i < rows; ++i) {
        const double c = cos.at(i, static_cast<std::size_t>(labels[i]));
        ok = ok && std::abs(c + std::cos(arc.margin)) > 1e-3 && std::abs(c) < 0.999;
      }
      if (ok) break;
    }
    check("arcface_loss.embeddings",
          [&](const Tensor& x) { return evq::arcface_loss(evq::l2_normalize(x), evq::l2_normalize(W), labels, arc); },
          emb);
    check("arcface_loss.weights",
          [&](const Tensor& x) { return evq::arcface_loss(evq::l2_normalize(emb), evq::l2_normalize(x), labels, arc); },
          W);

    const Tensor teacher = g.tensor({rows, dim}, -1, 1, false);
    check("feature_kd_loss", [&](const Tensor& x) { return evq::feature_kd_loss(teacher, x); },
          g.tensor({rows, dim}, -1, 1, false));

    const EkdPoint p = ekd_point(seed);
    evq::EkdConfig ekd;
    ekd.lambda_pos = g.uniform(0.5, 2.0);
    ekd.lambda_neg = g.uniform(0.5, 2.0);
    check("ekd_loss",
          [&](const Tensor& x) {
            return evq::ekd_loss(p.teacher, evq::l2_normalize(assemble(x, p.free_rows, p.fixed)), p.labels, ekd);
          },
          p.free);
    const Tensor heads = normalized_rows(g, 2, p.teacher.cols());
    evq::ArcFaceConfig arc2{0.4, 4.0, 2};
    ekd.include_classifier = true;
    check("ekd_loss_with_ce",
          [&](const Tensor& x) {
            const Tensor s = evq::l2_normalize(assemble(x, p.free_rows, p.fixed));
            return evq::ekd_loss_with_ce(p.teacher, s, p.labels, evq::matmul(s, evq::transpose(heads)), ekd, arc2);
          },
          p.free);

    // Two-layer network with relu and l2_normalize, pre-activations off the kink.
    const std::size_t in = 3, hidden = 4, out = 3, batch = 3;
    const Tensor X = g.tensor({batch, in}, -1, 1, false);
    Tensor W1;
    const Tensor b1 = g.tensor({hidden}, -0.5, 0.5, false), W2 = g.tensor({hidden, out}, -1, 1, false);
    const Tensor b2 = g.tensor({out}, -0.5, 0.5, false), Wout = g.tensor({batch, out}, -1, 1, false);
    for (;;) {
      W1 = g.tensor({in, hidden}, -1, 1, false);
      const Tensor pre = evq::add_row(evq::matmul(X, W1), b1);
      if (std::all_of(pre.data().begin(), pre.data().end(), [](double v) { return std::abs(v) > 1e-3; })) break;
    }
    auto net = [&](const Tensor& w1, const Tensor& w2) {
      const Tensor h = evq::relu(evq::add_row(evq::matmul(X, w1), b1));
      return wsum(evq::l2_normalize(evq::add_row(evq::matmul(h, w2), b2)), Wout);
    };
    check("two_layer.w1", [&](const Tensor& x) { return net(x, W2); }, W1);
    check("two_layer.w2", [&](const Tensor& x) { return net(W1, x); }, W2);
  }
  return r;
}

Result quantizer_laws(std::size_t cases) {
  Result r;
  auto fail = [&](const std::string& law, const std::string& msg) {
    ++r.failures;
    r.by_name[law] += 1.0;
    if (r.first_failure.empty()) r.first_failure = law + ": " + msg;
  };
  auto random_params = [](oracle::Gen& g, bool symmetric) {
    const int bits = g.integer(evq::kMinQuantBits, 8);
    const double scale = std::exp(g.uniform(std::log(1e-3), std::log(2.0)));
    auto p = evq::QuantParams::make(bits, symmetric, scale);
    if (!symmetric) p = evq::QuantParams::make(bits, false, scale, g.integer(p.q_min, p.q_max));
    return p;
  };
  for (const char* law : {"lattice", "idempotence", "error_bound", "oddness", "ste_mask"}) r.by_name[law] = 0.0;

  for (std::size_t i = 0; i < cases; ++i) {
    oracle::Gen g(evq::derive_seed(0x9a, i));
    const auto p = random_params(g, g.coin());
    const double span = p.upper() - p.lower();
    // Draws cover the range and a margin on both sides.
    const double x = g.uniform(p.lower() - 0.25 * span, p.upper() + 0.25 * span);
    const double y = evq::fake_quant_value(x, p);

    const double q = y / p.scale + p.zero_point;
    const double qi = std::nearbyint(q);
    if (!(qi >= p.q_min && qi <= p.q_max && p.scale * (qi - p.zero_point) == y)) {
      fail("lattice", "x=" + std::to_string(x));
    }
    if (evq::fake_quant_value(y, p) != y) fail("idempotence", "x=" + std::to_string(x));

    const double xin = g.uniform(p.lower(), p.upper());
    if (std::abs(xin - evq::fake_quant_value(xin, p)) > p.scale / 2.0 * (1.0 + 1e-12)) {
      fail("error_bound", "x=" + std::to_string(xin));
    }

    const auto ps = random_params(g, true);
    const double xs = g.uniform(ps.lower(), ps.upper());
    if (evq::fake_quant_value(-xs, ps) != -evq::fake_quant_value(xs, ps)) fail("oddness", "x=" + std::to_string(xs));

    const std::size_t n = g.size(1, 16);
    std::vector<double> xv(n);
    for (auto& v : xv) v = g.uniform(p.lower() - 0.5 * span, p.upper() + 0.5 * span);
    const Tensor t = Tensor::from({n}, xv, true);
    evq::sum(evq::fake_quant(t, p)).backward();
    for (std::size_t j = 0; j < n; ++j) {
      const double want = (xv[j] >= p.lower() && xv[j] <= p.upper()) ? 1.0 : 0.0;
      if (t.grad()[j] != want) fail("ste_mask", "x=" + std::to_string(xv[j]));
    }
    r.cases += 5;
  }
  return r;
}

Result metric_oracles(std::size_t sets) {
  Result r;
  auto fail = [&](const std::string& what, std::size_t set) {
    ++r.failures;
    r.by_name[what] += 1.0;
    if (r.first_failure.empty()) r.first_failure = what + " on set " + std::to_string(set);
  };
  for (const char* what : {"tpr_at_fpr", "roc_curve", "kfold_accuracy", "compute_thresholds"}) r.by_name[what] = 0;

  for (std::size_t s = 0; s < sets; ++s) {
    oracle::Gen g(evq::derive_seed(0x3e7, s));
    const bool ties = g.coin();
    const std::size_t np = g.size(2, 100), nn = g.size(2, 200 - np);
    evq::ScoredPairs sp;
    sp.pos = g.scores(np, ties);
    sp.neg = g.scores(nn, ties);

    std::vector<double> targets = evq::default_fpr_targets();
    for (int t = 0; t < 4; ++t) targets.push_back(g.uniform(1e-3, 0.999));
    targets.push_back(1.0 / static_cast<double>(nn));
    for (double f : targets) {
      const auto got = evq::tpr_at_fpr(sp, f);
      const auto want = oracle::tpr_at_fpr(sp.pos, sp.neg, f);
      if (got.threshold != want.threshold || got.tpr != want.tpr || got.achieved_fpr != want.achieved_fpr) {
        fail("tpr_at_fpr", s);
      }
    }
    if (evq::roc_curve(sp) != oracle::roc(sp.pos, sp.neg)) fail("roc_curve", s);

    const int k = g.integer(2, static_cast<int>(std::min<std::size_t>(10, std::min(np, nn))));
    const std::uint64_t seed = g.rng.next();
    const auto got = evq::kfold_accuracy(sp, k, seed);
    const auto want = oracle::kfold(sp.pos, sp.neg, k, seed);
    if (got.mean != want.mean || got.stddev != want.stddev) fail("kfold_accuracy", s);

    const auto defaults = evq::default_fpr_targets();
    const auto thr = evq::compute_thresholds(sp.neg, defaults);
    for (std::size_t i = 0; i < defaults.size(); ++i) {
      if (thr.thresholds[i] != oracle::threshold(sp.neg, defaults[i])) fail("compute_thresholds", s);
    }
    r.cases += 4;
  }
  return r;
}

}  // namespace suites
