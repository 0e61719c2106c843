// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "evq/quantization.hpp"
#include "evqcli/commands.hpp"
#include "suites.hpp"

namespace fs = std::filesystem;
using evq::VerificationReport;
using namespace evq::cli;

namespace {

// Regression baseline from the first calibrated run on seed 7.
constexpr double kPinnedTeacher = 0.8960;
constexpr double kPinnedDelta = 0.0670;

// Recipes serve several criteria, so lines are collected and printed in order.
std::map<int, std::pair<bool, std::string>> results;

void report(int id, bool pass, const std::string& detail) { results[id] = {pass, detail}; }

int print_results() {
  int failures = 0;
  for (const auto& [id, r] : results) {
    std::printf("criterion %2d: %s  %s\n", id, r.first ? "PASS" : "FAIL", r.second.c_str());
    failures += r.first ? 0 : 1;
  }
  return failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

const VerificationReport& row(const std::vector<VerificationReport>& rows, const std::string& model) {
  for (const auto& r : rows)
    if (r.model == model) return r;
  throw std::runtime_error("no report row for " + model);
}

// TPR values are multiples of 1/n_pos; compare positive-pair counts.
long count(const VerificationReport& r, double target, std::size_t n_pos) {
  return std::lround(r.tpr(target) * static_cast<double>(n_pos));
}

std::vector<VerificationReport> recipe(const std::string& name, RunConfig c, const fs::path& dir) {
  c.output_dir = dir.string();
  std::ostringstream log;
  return cmd_recipe(name, c, log);
}

// Every checkpoint byte-for-byte, and metrics files without wall_ms.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).string();
    std::ifstream in(e.path(), std::ios::binary);
    if (e.path().extension() == ".eqck") {
      out[rel] = std::string(std::istreambuf_iterator<char>(in), {});
    } else if (e.path().filename() == "metrics.jsonl") {
      std::string line, all;
      while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        j.erase("wall_ms");
        all += j.dump() + "\n";
      }
      out[rel] = all;
    }
  }
  return out;
}

void suite_line(int id, const suites::Result& r, double seconds, const std::string& what) {
  std::string detail = fmt("%zu %s, %zu failures", r.cases, what.c_str(), r.failures);
  if (r.worst > 0.0) detail += fmt(", worst %.2e", r.worst);
  if (seconds >= 0.0) detail += fmt(", %.1fs cpu", seconds);
  if (!r.first_failure.empty()) detail += " (" + r.first_failure + ")";
  report(id, r.failures == 0 && (id != 1 || seconds < 120.0), detail);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(EVQ_DESK_CONFIG);
  const fs::path work = fs::temp_directory_path() / "evq_acceptance";
  fs::remove_all(work);

  try {
    double t0 = cpu_seconds();
    const auto grad = suites::gradcheck(100);
    suite_line(1, grad, cpu_seconds() - t0, "gradchecks");
    suite_line(2, suites::quantizer_laws(1000), -1.0, "law checks");
    suite_line(3, suites::metric_oracles(200), -1.0, "oracle comparisons");

    const double fp = evq::estimate_model_size(24'030'000, 32);
    const double w6 = evq::estimate_model_size(24'030'000, 6);
    report(4, std::abs(fp - 96.22) <= 0.2 && std::abs(w6 - 18.10) <= 0.2,
           fmt("fp32 %.2f MB (96.22), w6 %.2f MB (18.10)", fp, w6));

    const RunConfig desk = load_run_config(config);
    const double target = desk.eval.fpr_targets.front();
    const std::size_t n_pos = desk.eval.n_pos;
    const std::string tag = fmt("w%da%d", desk.quant.w_bits, desk.quant.a_bits);
    const std::string pct = std::to_string(static_cast<int>(std::lround(desk.data_fraction * 100.0)));

    t0 = cpu_seconds();
    const auto pq = recipe("prune_vs_quant", desk, work / "prune_vs_quant");
    const double pq_seconds = cpu_seconds() - t0;
    {
      const double b = row(pq, "teacher").tpr(target);
      const double ptq = row(pq, "ptq_" + tag).tpr(target);
      const double ekd = row(pq, "ekd_" + tag + "_f" + pct).tpr(target);
      const double delta = b - ptq;
      const double recovery = delta > 0.0 ? (ekd - ptq) / delta : 0.0;
      const bool baseline = std::abs(b - kPinnedTeacher) < 5e-5 && std::abs(delta - kPinnedDelta) < 5e-5;
      report(5, delta >= 0.05 && recovery >= 0.7 && baseline && pq_seconds < 600.0,
             fmt("B %.4f (pinned %.4f), delta %.4f (pinned %.4f), ekd %.4f, recovery %.2f of 0.70, %.1fs cpu", b,
                 kPinnedTeacher, delta, kPinnedDelta, ekd, recovery, pq_seconds));

      const auto& pr = row(pq, "ekd_pruned_sp" + std::to_string(static_cast<int>(std::lround(desk.prune.sparsity * 100))) +
                                   "_f" + pct);
      const auto& qr = row(pq, "ekd_" + tag + "_f" + pct);
      report(8, count(pr, target, n_pos) < count(qr, target, n_pos),
             fmt("pruned+ekd %.4f vs %s+ekd %.4f", pr.tpr(target), tag.c_str(), qr.tpr(target)));
    }

    {
      const auto bits = recipe("bitsweep", desk, work / "bitsweep");
      const double b = row(bits, "teacher").tpr(target);
      const double w8 = row(bits, "ptq_w8a8").tpr(target);
      report(6, std::labs(count(row(bits, "teacher"), target, n_pos) - count(row(bits, "ptq_w8a8"), target, n_pos)) <=
                    std::lround(0.02 * static_cast<double>(n_pos)),
             fmt("teacher %.4f, w8a8 %.4f, gap %.4f of 0.02", b, w8, std::abs(b - w8)));
    }

    {
      const auto ce = recipe("ce_ablation", desk, work / "ce_ablation");
      const auto& a = row(ce, "ekd_" + tag + "_f" + pct);
      const auto& b = row(ce, "ekd_ce_" + tag + "_f" + pct);
      const long gap = std::labs(count(a, target, n_pos) - count(b, target, n_pos));
      report(7, gap <= std::lround(0.03 * static_cast<double>(n_pos)),
             fmt("ekd %.4f, ekd_ce %.4f, gap %.4f (%ld of %zu pairs) of 0.03", a.tpr(target), b.tpr(target),
                 static_cast<double>(gap) / static_cast<double>(n_pos), gap, n_pos));
    }

    {
      const auto fr = recipe("fractions", desk, work / "fractions");
      long lo = 0, hi = 0;
      std::string values;
      bool first = true;
      for (const char* f : {"100", "75", "50", "25"}) {
        const auto& r = row(fr, to_string(desk.train.loss) + "_" + tag + "_f" + f);
        const long c = count(r, target, n_pos);
        lo = first ? c : std::min(lo, c);
        hi = first ? c : std::max(hi, c);
        first = false;
        values += fmt("f%s %.4f ", f, r.tpr(target));
      }
      report(9, hi - lo <= std::lround(0.05 * static_cast<double>(n_pos)),
             values + fmt("span %.4f of 0.05", static_cast<double>(hi - lo) / static_cast<double>(n_pos)));
    }

    {
      const auto before = snapshot(work / "prune_vs_quant");
      recipe("prune_vs_quant", desk, work / "prune_vs_quant");
      const auto after = snapshot(work / "prune_vs_quant");
      std::size_t differing = 0;
      for (const auto& [name, bytes] : before) {
        auto it = after.find(name);
        if (it == after.end() || it->second != bytes) ++differing;
      }
      report(10, differing == 0 && before.size() == after.size() && !before.empty(),
             fmt("prune_vs_quant rerun: %zu files compared, %zu differ", before.size(), differing));
    }
  } catch (const std::exception& e) {
    print_results();
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }

  fs::remove_all(work);
  const int failures = print_results();
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
