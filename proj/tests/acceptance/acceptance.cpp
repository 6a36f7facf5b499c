/// @file  acceptance.cpp
/// @brief End-to-end acceptance gates. Prints one PASS/FAIL line per
///        criterion and exits nonzero if any criterion fails.

#include "../support.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

using namespace tlabel;
using namespace tlabel::testing;

namespace {

struct Outcome {
	bool pass = false;
	std::string detail;
};

struct Criterion {
	std::string name;
	double limit_seconds;
	std::function<Outcome()> run;
};

std::string fmt(double v) {
	std::ostringstream s;
	s.precision(6);
	s << v;
	return s.str();
}

double median(std::vector<double> v) {
	std::sort(v.begin(), v.end());
	const auto h = v.size() / 2;
	return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

double variance(std::span<const double> z) {
	double mean = 0.0, var = 0.0;
	for (double v : z) mean += v / static_cast<double>(z.size());
	for (double v : z) var += (v - mean) * (v - mean) / static_cast<double>(z.size());
	return var;
}

/// Task-B-scale simulation settings shared by the trend criteria.
ExperimentConfig trend_config() {
	ExperimentConfig c;
	c.signal.kind = SignalKind::TaskBLike;
	c.signal.n = 178;
	c.signal.seed = 1;
	c.losses = {LossSpec::ste()};
	c.trials = 10;
	c.seed = 2024;
	c.solver.restarts = 3;
	c.solver.max_iters = 500;
	return c;
}

/// Median variance-normalized MSE and median rho per (noise, budget) cell.
struct CellMedians {
	std::vector<std::vector<double>> mse, rho;
	std::vector<std::uint64_t> budgets;
};

CellMedians run_grid(const ExperimentConfig& c) {
	const auto truth = c.signal.materialize();
	const double var = variance(truth.values());
	CellMedians out;
	out.mse.assign(c.noise.size(), std::vector<double>(c.budgets.size()));
	out.rho = out.mse;
	for (std::size_t b = 0; b < c.budgets.size(); ++b) out.budgets.push_back(c.budget_count(truth.size(), b));
	for (std::size_t s = 0; s < c.noise.size(); ++s) {
		for (std::size_t b = 0; b < c.budgets.size(); ++b) {
			std::vector<double> mse, rho;
			for (std::size_t t = 0; t < c.trials; ++t) {
				const auto cell = run_cell(c, truth, {s, 0, b, t});
				mse.push_back(cell.record.mse / var);
				rho.push_back(cell.record.rho);
			}
			out.mse[s][b] = median(mse);
			out.rho[s][b] = median(rho);
		}
	}
	return out;
}

Outcome universe_size() {
	if (triplet_universe_size(267) != 9'410'415ULL) return {false, "|T|(267) = " + std::to_string(triplet_universe_size(267))};
	for (std::size_t n = 3; n <= 30; ++n) {
		std::uint64_t count = 0;
		for (std::size_t i = 1; i <= n; ++i)
			for (std::size_t j = 1; j <= n; ++j)
				for (std::size_t k = j + 1; k <= n; ++k) count += (i != j && i != k);
		if (count != triplet_universe_size(n)) return {false, "mismatch at n=" + std::to_string(n)};
	}
	return {true, "|T|(267)=9410415, n<=30 enumerated"};
}

std::vector<LossSpec> four_losses() {
	return {LossSpec::ste(), LossSpec::tste(2.0), LossSpec::gnmds_hinge(), LossSpec::ckl(2.0)};
}

Outcome gradient_suite() {
	std::mt19937_64 rng(11);
	double worst = 0.0;
	for (const auto& spec : four_losses()) {
		for (int inst = 0; inst < 20; ++inst) {
			const std::size_t m = 1 + inst % 2;
			const auto y = random_embedding(m, 15, rng);
			const auto labels = random_labels(15, 100, rng);
			worst = std::max(worst, relative_error(risk_and_gradient(spec, y, labels).grad, numeric_gradient(spec, y, labels)));
		}
	}
	return {worst < 1e-5, "worst relative error " + fmt(worst) + " < 1e-05"};
}

Outcome invariance_suite() {
	std::mt19937_64 rng(12);
	double worst = 0.0;
	for (const auto& spec : four_losses()) {
		for (int inst = 0; inst < 20; ++inst) {
			const std::size_t m = 1 + inst % 2;
			const auto y = random_embedding(m, 20, rng);
			const auto labels = random_labels(20, 120, rng);
			const double base = risk_and_gradient(spec, y, labels).risk;
			const Eigen::VectorXd shift = Eigen::VectorXd::Random(static_cast<Eigen::Index>(m)) * 5.0;
			const Embedding moved = y.colwise() + shift;
			// Householder reflection across a random hyperplane
			Eigen::VectorXd u = Eigen::VectorXd::Random(static_cast<Eigen::Index>(m)).normalized();
			const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(u.size(), u.size()) - 2.0 * u * u.transpose();
			const Embedding reflected = h * y;
			auto mirrored = labels;
			for (auto& l : mirrored) l = {l.query.mirrored(), -l.w, l.annotator, l.source};
			for (double r : {risk_and_gradient(spec, moved, labels).risk, risk_and_gradient(spec, reflected, labels).risk,
					 risk_and_gradient(spec, y, mirrored).risk}) {
				worst = std::max(worst, std::abs(r - base));
			}
		}
	}
	return {worst <= 1e-12, "worst absolute change " + fmt(worst) + " <= 1e-12"};
}

Outcome noiseless_recovery() {
	std::mt19937_64 rng(13);
	double worst_tau = 0.0, worst_rho = 1.0;
	// The infimum of the risk on a consistent label set lies at infinite
	// scale, so the solver is given room to keep separating near-ties.
	SolverConfig solver;
	solver.restarts = 3;
	solver.max_iters = 5000;
	for (int trial = 0; trial < 10; ++trial) {
		const auto z = generate_signal(SignalKind::TaskBLike, 12, rng());
		const auto labels = noiseless_labels(z);
		solver.seed = rng();
		const auto fit = fit_embedding(labels, 12, 1, LossSpec::ste(), solver);
		worst_tau = std::max(worst_tau, triplet_violations(fit.y, labels));
		worst_rho = std::min(worst_rho, aligned_pearson(first_row(fit.y), z.values()));
	}
	return {worst_tau == 0.0 && worst_rho > 0.999, "max tau_v " + fmt(worst_tau) + ", min rho " + fmt(worst_rho)};
}

Outcome task_b_replication() {
	auto c = trend_config();
	c.noise = {NoiseSpec{LogisticLink{20.0}}};
	c.budgets = {0.005};
	const auto grid = run_grid(c);
	const double rho = grid.rho[0][0], mse = grid.mse[0][0];
	return {grid.budgets[0] == 13'862 && rho >= 0.9 && mse <= 0.01,
		"|S|=" + std::to_string(grid.budgets[0]) + ", median rho " + fmt(rho) + ", median MSE/Var(Z) " + fmt(mse)};
}

Outcome budget_monotonicity() {
	auto c = trend_config();
	c.noise = {NoiseSpec{LogisticLink{20.0}}};
	const auto grid = run_grid(c);
	std::size_t inversions = 0;
	std::string curve;
	for (std::size_t b = 0; b < c.budgets.size(); ++b) {
		if (b && grid.mse[0][b] > grid.mse[0][b - 1]) ++inversions;
		curve += (b ? " " : "") + fmt(grid.mse[0][b]);
	}
	return {inversions <= 1, std::to_string(inversions) + " inversion(s); medians " + curve};
}

Outcome noise_ordering() {
	auto c = trend_config();
	c.noise = {NoiseSpec{LogisticLink{20.0}}, NoiseSpec{LogisticLink{6.0}}, NoiseSpec{LogisticLink{2.0}}};
	c.budgets = {0.01};
	const auto grid = run_grid(c);
	const double a = grid.mse[0][0], b = grid.mse[1][0], d = grid.mse[2][0];
	return {a <= b && b <= d, "median MSE sigma=20: " + fmt(a) + ", sigma=6: " + fmt(b) + ", sigma=2: " + fmt(d)};
}

Outcome poisson_binomial() {
	std::mt19937_64 rng(14);
	std::uniform_int_distribution<std::size_t> pick_n(20, 120), pick_kind(0, 3);
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	const SignalKind kinds[] = {SignalKind::TaskALike, SignalKind::TaskBLike, SignalKind::Sine, SignalKind::TaskBLike};
	double worst = 0.0;
	for (int config = 0; config < 20; ++config) {
		const std::size_t n = pick_n(rng);
		const auto z = config % 4 == 3 ? random_signal(n, rng) : generate_signal(kinds[pick_kind(rng) % 3], n, rng());
		const auto budget = std::min<std::uint64_t>(triplet_universe_size(n), 2000 + rng() % 18000);
		AnnotatorModel model{"sim", LogisticLink{1.0 + 29.0 * unit(rng)}};
		if (config % 2) model.link = ConstantLink{0.55 + 0.4 * unit(rng), config % 4 == 1 ? 0.05 : 0.0};
		Rng label_rng(rng());
		std::vector<LabeledTriplet> labels;
		double sum_p = 0.0, sum_var = 0.0;
		for (const auto& q : sample_triplets(n, budget, rng())) {
			const auto s = simulate_label_detailed(model, z, q, label_rng);
			// a tie is agreement whatever the label, so it is correct with certainty
			const bool tie = dissimilarity(z, q.i, q.j) == dissimilarity(z, q.i, q.k);
			const double p = tie ? 1.0 : s.p_correct;
			sum_p += p;
			sum_var += p * (1.0 - p);
			labels.push_back(s.label);
		}
		const double size = static_cast<double>(labels.size());
		const double observed = triplet_violations(z, labels), expected = 1.0 - sum_p / size;
		const double bound = 3.0 * std::sqrt(sum_var) / size;
		const double ratio = bound > 0.0 ? std::abs(observed - expected) / bound : (observed == expected ? 0.0 : 1e9);
		worst = std::max(worst, ratio);
	}
	return {worst <= 1.0, "worst |observed - expected| / (3 sd) = " + fmt(worst)};
}

Outcome success_curve() {
	const auto z = generate_signal(SignalKind::TaskBLike, 178, 5);
	const double sigma = 20.0;
	Rng rng(15);
	std::vector<LabeledTriplet> labels;
	std::vector<double> gaps;
	for (const auto& q : sample_triplets(178, 50'000, 16)) {
		labels.push_back(simulate_label({"sim", LogisticLink{sigma}}, z, q, rng));
		gaps.push_back(std::abs(dissimilarity(z, q.i, q.k) - dissimilarity(z, q.i, q.j)));
	}
	const auto curve = estimate_success_probability(labels, z, 10);
	// The estimator's expectation in a bin is the link averaged over the
	// scored members of that bin.
	std::stable_sort(gaps.begin(), gaps.end());
	double worst = 0.0, worst_at_mean = 0.0;
	std::size_t pos = 0;
	for (const auto& bin : curve.bins) {
		double sum = 0.0;
		for (std::size_t r = pos; r < pos + bin.count; ++r) {
			if (gaps[r] > 0.0) sum += logistic(sigma * gaps[r]);
		}
		pos += bin.count;
		if (bin.scored == 0) continue;
		const double p = sum / static_cast<double>(bin.scored);
		const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(bin.scored));
		const double diff = std::abs(bin.estimated_p - p);
		worst = std::max(worst, se > 0.0 ? diff / (3.0 * se) : (diff == 0.0 ? 0.0 : 1e9));
		const double at_mean = logistic(sigma * bin.mean_gap);
		const double se_mean = std::sqrt(at_mean * (1.0 - at_mean) / static_cast<double>(bin.scored));
		worst_at_mean = std::max(worst_at_mean, std::abs(bin.estimated_p - at_mean) / (3.0 * se_mean));
	}
	return {worst <= 1.0, "worst |p_hat - p| / (3 se) = " + fmt(worst) + " (link at mean gap: " + fmt(worst_at_mean) + ")"};
}

Outcome affine_oracle() {
	std::mt19937_64 rng(17);
	std::normal_distribution<double> normal;
	std::uniform_int_distribution<std::size_t> pick_n(10, 200);
	double worst = 0.0;
	for (int pair = 0; pair < 20; ++pair) {
		const std::size_t n = pick_n(rng);
		std::vector<double> y(n), z(n);
		const double scale = (pair % 2 ? -1.0 : 1.0) * std::exp(normal(rng)), offset = 5.0 * normal(rng) + 2.0;
		for (std::size_t t = 0; t < n; ++t) {
			z[t] = normal(rng);
			y[t] = scale * z[t] + 0.5 * normal(rng) + offset;
		}
		const auto fit = affine_align_mse(y, z);
		const auto grid = grid_search_affine(y, z);
		for (const auto& [x, ref] : {std::pair{fit.a, grid.a}, {fit.b, grid.b}, {fit.mse, grid.mse}}) {
			worst = std::max(worst, std::abs(x - ref) / std::abs(ref));
		}
	}
	return {worst < 5e-5, "worst relative difference " + fmt(worst) + " < 5e-05"};
}

Outcome service_under_load() {
	ServiceOptions options;
	options.data_dir = std::filesystem::temp_directory_path() / "tlabel-acceptance-service";
	std::filesystem::remove_all(options.data_dir);
	AnnotationService svc(options);
	CreateTaskRequest request;
	request.task_id = "load";
	request.manifest = render_stimuli(generate_signal(SignalKind::TaskBLike, 40, 1));
	request.budget = 5000;
	request.seed = 18;
	svc.create_task(request);

	std::atomic<std::size_t> errors{0};
	{
		std::vector<std::jthread> annotators;
		for (int a = 0; a < 50; ++a) {
			annotators.emplace_back([&, a] {
				const auto id = "ann" + std::to_string(a);
				std::mt19937_64 coin(static_cast<std::uint64_t>(a));
				while (true) {
					try {
						const auto deal = svc.next_query("load", id);
						if (!deal.lease) {
							if (deal.exhausted) return;
							std::this_thread::yield();
							continue;
						}
						svc.submit_response("load", id, deal.lease->query, coin() % 2 ? Choice::A : Choice::B);
					} catch (const Error&) {
						++errors;
					}
				}
			});
		}
	}
	const auto replay = replay_log(svc.log_path());
	const auto& answers = replay.responses.at("load");
	std::set<std::uint64_t> covered;
	for (const auto& r : answers) covered.insert(r.query.key());
	const bool pass = replay.disjoint() && replay.duplicate_answers == 0 && answers.size() == 5000 &&
		covered.size() == 5000 && replay.pool_sizes.at("load") == 5000 && errors == 0;
	return {pass, std::to_string(answers.size()) + " answers, " + std::to_string(covered.size()) + " distinct, " +
			std::to_string(replay.duplicate_answers) + " duplicates, " + std::to_string(errors.load()) + " errors"};
}

} // namespace

int main() {
	const std::vector<Criterion> criteria{
		{"universe-size", 1, universe_size},
		{"gradient-suite", 30, gradient_suite},
		{"invariance-suite", 10, invariance_suite},
		{"noiseless-recovery", 60, noiseless_recovery},
		{"task-b-replication", 15 * 60, task_b_replication},
		{"budget-monotonicity", 45 * 60, budget_monotonicity},
		{"noise-ordering", 20 * 60, noise_ordering},
		{"poisson-binomial", 60, poisson_binomial},
		{"success-curve", 60, success_curve},
		{"affine-oracle", 10, affine_oracle},
		{"service-under-load", 120, service_under_load},
	};
	std::size_t failed = 0;
	for (const auto& c : criteria) {
		const auto start = std::chrono::steady_clock::now();
		Outcome o;
		try {
			o = c.run();
		} catch (const std::exception& e) {
			o = {false, std::string("exception: ") + e.what()};
		}
		const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
		const bool in_time = seconds < c.limit_seconds;
		const bool pass = o.pass && in_time;
		failed += !pass;
		std::cout << (pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << fmt(seconds) << " s, limit "
				  << fmt(c.limit_seconds) << " s" << (in_time ? "" : ", over time") << "]" << std::endl;
	}
	std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
	return failed ? 1 : 0;
}
