/// @file  support.hpp
/// @brief Test-only oracles and instance generators.

#pragma once

#include <tlabel/tlabel.hpp>

#include <cmath>
#include <random>
#include <vector>

namespace tlabel::testing {

/// Per-triplet loss written in probability form, independent of the
/// library's softplus/derivative implementation.
inline double oracle_loss(const LossSpec& spec, double dn, double df) {
	switch (spec.kind) {
	case LossKind::Ste: {
		const double s = 2.0 * spec.param * spec.param;
		const double pn = std::exp(-dn / s), pf = std::exp(-df / s);
		return -std::log(pn / (pn + pf));
	}
	case LossKind::GnmdsHinge: return std::max(0.0, 1.0 + dn - df);
	case LossKind::Tste: {
		const double e = (spec.param + 1.0) / 2.0;
		const double kn = std::pow(1.0 + dn / spec.param, -e), kf = std::pow(1.0 + df / spec.param, -e);
		return -std::log(kn / (kn + kf));
	}
	case LossKind::Ckl: return -std::log((spec.param + df) / (2.0 * spec.param + dn + df));
	}
	return 0.0;
}

inline double oracle_risk(const LossSpec& spec, const Embedding& y, std::span<const LabeledTriplet> labels) {
	double sum = 0.0;
	for (const auto& l : labels) {
		const auto yi = y.col(l.query.i - 1);
		sum += oracle_loss(spec, (yi - y.col(l.nearer() - 1)).squaredNorm(), (yi - y.col(l.farther() - 1)).squaredNorm());
	}
	return sum / static_cast<double>(labels.size());
}

inline Embedding random_embedding(std::size_t m, std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
	std::normal_distribution<double> normal(0.0, scale);
	Embedding y(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
	for (Eigen::Index c = 0; c < y.cols(); ++c)
		for (Eigen::Index r = 0; r < y.rows(); ++r) y(r, c) = normal(rng);
	return y;
}

/// Uniform triplets with uniformly random labels, in arbitrary (j,k) order.
inline std::vector<LabeledTriplet> random_labels(std::size_t n, std::size_t count, std::mt19937_64& rng) {
	std::vector<LabeledTriplet> out;
	std::bernoulli_distribution coin(0.5);
	for (const auto& q : sample_triplets(n, count, rng())) {
		LabeledTriplet l{coin(rng) ? q : q.mirrored(), coin(rng) ? -1 : 1, "r", LabelSource::Simulated};
		out.push_back(l);
	}
	return out;
}

/// All canonical triplets labeled by the truth; ties are skipped.
inline std::vector<LabeledTriplet> noiseless_labels(const Signal& z) {
	std::vector<LabeledTriplet> out;
	const TripletRanker ranker(z.size());
	for (std::uint64_t r = 0; r < ranker.size(); ++r) {
		const auto q = ranker.decode(r);
		const double gap = dissimilarity(z, q.i, q.k) - dissimilarity(z, q.i, q.j);
		if (gap == 0.0) continue;
		out.push_back({q, gap > 0.0 ? -1 : 1, "truth", LabelSource::Simulated});
	}
	return out;
}

/// Central differences of the library risk.
inline Embedding numeric_gradient(const LossSpec& spec, Embedding y, std::span<const LabeledTriplet> labels,
	double h = 1e-6) {
	Embedding g(y.rows(), y.cols());
	for (Eigen::Index c = 0; c < y.cols(); ++c) {
		for (Eigen::Index r = 0; r < y.rows(); ++r) {
			const double keep = y(r, c);
			y(r, c) = keep + h;
			const double up = risk_and_gradient(spec, y, labels).risk;
			y(r, c) = keep - h;
			const double down = risk_and_gradient(spec, y, labels).risk;
			y(r, c) = keep;
			g(r, c) = (up - down) / (2.0 * h);
		}
	}
	return g;
}

inline double relative_error(const Embedding& a, const Embedding& b) {
	const double scale = std::max({a.norm(), b.norm(), 1e-300});
	return (a - b).norm() / scale;
}

inline std::vector<LossSpec> all_losses() {
	return {LossSpec::ste(), LossSpec::tste(2.0), LossSpec::tste(10.0), LossSpec::gnmds_hinge(), LossSpec::ckl(2.0),
		LossSpec::ckl(10.0)};
}

/// Strictly increasing random signal in [0,1].
inline Signal increasing_signal(std::size_t n, std::mt19937_64& rng) {
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	std::vector<double> v(n);
	for (auto& x : v) x = unit(rng);
	std::sort(v.begin(), v.end());
	for (std::size_t t = 1; t < n; ++t) {
		if (v[t] <= v[t - 1]) v[t] = std::nextafter(v[t - 1], 2.0);
	}
	return Signal("inc", v);
}

/// Random signal in [0,1] with distinct values.
inline Signal random_signal(std::size_t n, std::mt19937_64& rng) {
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	std::vector<double> v(n);
	for (auto& x : v) x = unit(rng);
	return Signal("rand", v);
}

/// (a, b, mse) by golden-section refinement of the scale a, with b solved
/// for each trial a. Uses no normal equations.
struct GridFit {
	double a, b, mse;
};

inline GridFit grid_search_affine(std::span<const double> y, std::span<const double> z) {
	const double n = static_cast<double>(y.size());
	auto fit_for = [&](double a) {
		double b = 0.0;
		for (std::size_t t = 0; t < y.size(); ++t) b += a * y[t] - z[t];
		b /= n;
		double sse = 0.0;
		for (std::size_t t = 0; t < y.size(); ++t) sse += (a * y[t] - b - z[t]) * (a * y[t] - b - z[t]);
		return GridFit{a, b, sse / n};
	};
	double ymin = *std::min_element(y.begin(), y.end()), ymax = *std::max_element(y.begin(), y.end());
	double zmin = *std::min_element(z.begin(), z.end()), zmax = *std::max_element(z.begin(), z.end());
	const double bound = 4.0 * (zmax - zmin) / std::max(ymax - ymin, 1e-300);
	// coarse grid, then golden section around the best cell
	double lo = -bound, hi = bound;
	constexpr int cells = 400;
	double best_a = 0.0, best = fit_for(0.0).mse;
	for (int c = 0; c <= cells; ++c) {
		const double a = lo + (hi - lo) * c / cells;
		const double m = fit_for(a).mse;
		if (m < best) best = m, best_a = a;
	}
	const double cell = (hi - lo) / cells;
	lo = best_a - cell;
	hi = best_a + cell;
	const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
	for (int it = 0; it < 200; ++it) {
		const double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
		if (fit_for(x1).mse < fit_for(x2).mse) hi = x2;
		else lo = x1;
	}
	return fit_for(0.5 * (lo + hi));
}

} // namespace tlabel::testing
