// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "apagnn/cli.hpp"
#include "apagnn/config.hpp"
#include "apagnn/de.hpp"
#include "apagnn/pipeline.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace apagnn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

// Planted dataset with the training split standardised as the CLI does.
struct Planted {
  SynthResult synth;
  SplitResult parts;
  Matrix adjacency;
};

Planted planted_task() {
  Planted p;
  p.synth = synth_generate({});
  p.parts = split(p.synth.dataset, p.synth.dataset.split);
  const auto st = Standardizer::fit(p.parts.train);
  st.apply(p.parts.train);
  st.apply(p.parts.test);
  p.adjacency = build_adjacency(p.synth.dataset.montage, AdjacencyRule::knn(4));
  return p;
}

TrainConfig planted_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.seed = seed;
  return cfg;
}

void gradient_integrity() {
  const auto t0 = Clock::now();
  int reseeds = 0;
  const auto model = oracle::toy_model_away_from_kinks(1, 1e-3, &reseeds);
  const auto r = oracle::check_model_gradients(model, 1e-5, 1e-4);
  const double secs = seconds_since(t0);
  report("gradient-integrity", r.passed == r.checked && r.checked > 0 && secs < 60.0,
         fmt::format("{}/{} parameter entries within rel err 1e-4 (worst {:.2e} in {}), C=6 F=3 D=4 K=3 E=3 batch 2, "
                     "seed {} after {} re-seeds, kink margin {:.2e}, {:.1f}s (limit 60s)",
                     r.passed, r.checked, r.worst, r.worst_param, r.seed, reseeds, r.margin, secs));
}

void spectral_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(2, 16);
  std::uniform_real_distribution<double> density(0.1, 0.9);
  double worst = 0.0;
  for (int g = 0; g < 20; ++g) {
    const int n = size(rng);
    const Matrix a = oracle::random_graph(n, density(rng), rng);
    const Matrix x = oracle::random_matrix(n, 3, rng);
    const auto lap = scaled_laplacian(a);
    const auto terms = chebyshev_basis(x, lap, 6);
    for (int k = 0; k < 6; ++k)
      worst = std::max(worst, (terms[k] - oracle::chebyshev_spectral(lap.matrix, x, k)).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  report("spectral-oracle", worst < 1e-10 && secs < 10.0,
         fmt::format("max |recurrence - U T_k(L) U^T X| = {:.2e} over 20 graphs (<=16 nodes), K<=6 (tol 1e-10), "
                     "{:.2f}s (limit 10s)",
                     worst, secs));
}

void divergence_suite() {
  Tape tape;
  auto row = [&](const std::vector<double>& v) {
    return tape.constant(Eigen::Map<const Matrix>(v.data(), 1, static_cast<Eigen::Index>(v.size())));
  };
  const double hand = oracle::js({0.5, 0.5}, {1.0, 0.0});
  const double got = js_divergence(row({0.5, 0.5}), row({1.0, 0.0})).item();

  std::mt19937_64 rng(77);
  double asym = 0.0, lo = 1.0, hi = 0.0, self = 0.0, min_distinct = 1.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + trial % 30;
    const Matrix a = oracle::random_matrix(1, n, rng, -3, 3);
    const Matrix b = oracle::random_matrix(1, n, rng, -3, 3);
    const Var pa = softmax_row(tape.constant(a));
    const Var pb = softmax_row(tape.constant(b));
    const double ab = js_divergence(pa, pb).item();
    asym = std::max(asym, std::abs(ab - js_divergence(pb, pa).item()));
    lo = std::min(lo, ab);
    hi = std::max(hi, ab);
    self = std::max(self, std::abs(js_divergence(pa, pa).item()));
    min_distinct = std::min(min_distinct, ab);
  }
  const double extreme = js_divergence(row({1.0, 0.0}), row({0.0, 1.0})).item();
  hi = std::max(hi, extreme);
  const bool pass = std::abs(got - 0.21576) < 1e-5 && std::abs(got - hand) < 1e-6 && asym < 1e-12 && lo >= 0.0 &&
                    hi <= std::numbers::ln2 + 1e-12 && self < 1e-12 && min_distinct > 1e-12;
  report("divergence-suite", pass,
         fmt::format("JS([.5,.5],[1,0]) = {:.8f} (hand KL {:.8f}, tol 1e-6); symmetry {:.1e} (tol 1e-12); range "
                     "[{:.2e}, {:.6f}] within [0, ln2]; JS(p,p) max {:.1e}; min over distinct pairs {:.2e}",
                     got, hand, asym, lo, hi, self, min_distinct));
}

void planted_recovery(const Planted& p) {
  const auto t0 = Clock::now();
  const TrainConfig cfg = planted_config(42);
  const auto result = train(p.parts.train, p.parts.test, p.adjacency, p.synth.dataset.channels, cfg);
  const auto ev = evaluate(p.parts.test, result.state, p.adjacency, p.synth.dataset.channels, cfg);

  std::size_t recovered = 0;
  for (const auto& s : p.parts.test) {
    const auto ins = inspect(s, result.state, p.adjacency, p.synth.dataset.channels, cfg);
    const Eigen::VectorXd& att = ins.experts[0].normalized;
    std::vector<double> sorted(att.data(), att.data() + att.size());
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    double median = sorted[sorted.size() / 2];
    if (sorted.size() % 2 == 0) {
      const double lower = *std::max_element(sorted.begin(), sorted.begin() + sorted.size() / 2);
      median = 0.5 * (median + lower);
    }
    const auto& planted = p.synth.planted[static_cast<std::size_t>(s.label)];
    if (std::all_of(planted.begin(), planted.end(), [&](int c) { return att(c) > median; })) ++recovered;
  }
  const double recovery = static_cast<double>(recovered) / static_cast<double>(p.parts.test.size());
  const double secs = seconds_since(t0);
  const double logistic = oracle::logistic_accuracy(p.parts.train, p.parts.test, 3);
  report("planted-recovery", ev.accuracy >= 0.90 && recovery >= 0.70 && logistic >= 0.95 && secs < 300.0,
         fmt::format("test accuracy {:.4f} (>= 0.90), expert-1 planted channels above median in {:.1f}% of {} test "
                     "samples (>= 70%), logistic oracle {:.4f} (>= 0.95), {:.1f}s (limit 300s)",
                     ev.accuracy, 100.0 * recovery, p.parts.test.size(), logistic, secs));
}

void ablation_direction(const Planted& p) {
  double sum3 = 0.0, sum2 = 0.0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig three = planted_config(seed);
    TrainConfig two = three;
    two.expert_count = 2;
    const double a3 = evaluate(p.parts.test, train(p.parts.train, {}, p.adjacency, {}, three).state, p.adjacency, {}, three).accuracy;
    const double a2 = evaluate(p.parts.test, train(p.parts.train, {}, p.adjacency, {}, two).state, p.adjacency, {}, two).accuracy;
    sum3 += a3;
    sum2 += a2;
    per_seed += fmt::format(" {}:{:.3f}/{:.3f}", seed, a3, a2);
  }
  const double m3 = sum3 / 5.0, m2 = sum2 / 5.0;
  report("ablation-direction", m3 >= m2 - 0.01,
         fmt::format("mean accuracy 3 experts {:.4f} vs 2 experts {:.4f} (need 3E >= 2E - 0.01); seed:3E/2E{}", m3, m2,
                     per_seed));
}

void diversity_direction(const Planted& p) {
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig with = planted_config(seed);
    TrainConfig without = with;
    without.beta = 0.0;
    const double js_with = train(p.parts.train, {}, p.adjacency, {}, with).history.back().mean_js;
    const double js_without = train(p.parts.train, {}, p.adjacency, {}, without).history.back().mean_js;
    if (js_with > js_without) ++wins;
    per_seed += fmt::format(" {}:{:.4e}/{:.4e}", seed, js_with, js_without);
  }
  report("diversity-direction", wins >= 4,
         fmt::format("final-epoch mean JS higher with beta=0.1 than beta=0 in {}/5 seeds (need >= 4); "
                     "seed:beta0.1/beta0{}",
                     wins, per_seed));
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

bool same_to_12(const json& a, const json& b, double& worst) {
  if (a.type() != b.type()) return false;
  if (a.is_number()) {
    const double d = std::abs(a.get<double>() - b.get<double>());
    worst = std::max(worst, d);
    return d < 5e-13;
  }
  if (a.is_array() || a.is_object()) {
    if (a.size() != b.size()) return false;
    if (a.is_array()) {
      for (std::size_t i = 0; i < a.size(); ++i)
        if (!same_to_12(a[i], b[i], worst)) return false;
    } else {
      for (auto it = a.begin(); it != a.end(); ++it)
        if (!b.contains(it.key()) || !same_to_12(it.value(), b[it.key()], worst)) return false;
    }
    return true;
  }
  return a == b;
}

int run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

void determinism_and_default_eta(const fs::path& work) {
  const fs::path data = work / "data";
  const fs::path cfg = work / "cfg.json";
  std::ofstream(cfg) << R"({"epochs": 5, "seed": 7})";
  bool ok = run({"synth", "--out", data.string(), "--per-class", "60"}) == 0;
  ok = ok && run({"train", "--config", cfg.string(), "--data", data.string(), "--out", (work / "a").string(), "--quiet"}) == 0;
  ok = ok && run({"train", "--config", cfg.string(), "--data", data.string(), "--out", (work / "b").string(), "--quiet"}) == 0;
  double worst = 0.0;
  bool same = false;
  json ra, rb;
  if (ok) {
    ra = read_json(work / "a" / "report.json");
    rb = read_json(work / "b" / "report.json");
    same = true;
    for (const char* key : {"epochs", "final_accuracy", "confusion", "test_mean_js", "config", "seed"})
      same = same && same_to_12(ra[key], rb[key], worst);
  }
  report("determinism", ok && same,
         fmt::format("two CLI train runs (seed 7, 5 epochs): metric values {} to 12 decimals (max diff {:.1e})",
                     same ? "identical" : "DIFFER", worst));

  // Masks: inclusion under a raised threshold, and eta = 0.5 applied end to end.
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> len(2, 64);
  int violations = 0;
  Tape tape;
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix v = oracle::random_matrix(1, len(rng), rng, 0.0, 1.0);
    double e1 = u(rng), e2 = u(rng);
    if (e1 > e2) std::swap(e1, e2);
    e1 = std::clamp(e1, 1e-9, 1.0 - 1e-9);
    e2 = std::clamp(e2, 1e-9, 1.0 - 1e-9);
    const auto lo = threshold_mask(tape.constant(v), e1);
    const auto hi = threshold_mask(tape.constant(v), e2);
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      if (hi.keep(c) && !lo.keep(c)) ++violations;
      if (hi.keep(c) != (v(0, c) >= e2)) ++violations;
      if (hi.masked.value()(0, c) != (hi.keep(c) ? v(0, c) : 0.0)) ++violations;
    }
  }
  int eta_mismatch = 0;
  std::size_t exported = 0;
  double eta_echo = -1.0;
  bool exported_ok = ok && run({"attn-export", "--checkpoint", (work / "a" / "checkpoint.json").string(), "--data",
                                data.string(), "--out", (work / "attn").string()}) == 0;
  if (exported_ok) {
    eta_echo = ra["config"]["eta"].get<double>();
    const json attn = read_json(work / "attn" / "attention.json");
    for (const auto& s : attn["samples"]) {
      ++exported;
      for (const auto& e : s["experts"])
        for (std::size_t c = 0; c < e["normalized"].size(); ++c)
          if ((e["keep_mask"][c].get<int>() == 1) != (e["normalized"][c].get<double>() >= 0.5)) ++eta_mismatch;
    }
  }
  const bool defaults = TrainConfig{}.eta == 0.5 && config_from_json(json::object()).eta == 0.5;
  report("mask-semantics", violations == 0 && exported_ok && eta_echo == 0.5 && eta_mismatch == 0 && defaults,
         fmt::format("{} monotonicity/definition violations over 1000 random vectors; default eta {} in config and "
                     "report; {} keep-mask entries disagree with I~ >= 0.5 across {} exported samples",
                     violations, eta_echo, eta_mismatch, exported));
}

void de_scaling() {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> logs(std::log(0.01), std::log(100.0));
  const auto bands = default_bands();
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Matrix x(1, 400);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng) + 0.5 * std::sin(0.3 * i + trial);
    const double s = std::exp(logs(rng));
    const Matrix d = compute_de(Matrix(s * x), 200.0, bands) - compute_de(x, 200.0, bands);
    worst = std::max(worst, (d.array() - std::log(s)).abs().maxCoeff());
  }
  report("de-scaling", worst < 1e-9,
         fmt::format("max |DE(s x) - DE(x) - ln s| = {:.2e} over 100 signals x 5 bands (tol 1e-9)", worst));
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "apagnn_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  gradient_integrity();
  spectral_oracle();
  divergence_suite();
  const Planted planted = planted_task();
  planted_recovery(planted);
  ablation_direction(planted);
  diversity_direction(planted);
  determinism_and_default_eta(work);
  de_scaling();

  fs::remove_all(work);
  std::cout << (failures == 0 ? "all acceptance criteria passed" : fmt::format("{} criteria failed", failures))
            << std::endl;
  return failures == 0 ? 0 : 1;
}
