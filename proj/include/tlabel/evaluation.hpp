/// @file  evaluation.hpp
/// @brief Agreement between an embedding, its labels and the ground truth.

#pragma once

#include <tlabel/error.hpp>
#include <tlabel/signal.hpp>
#include <tlabel/triplets.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

namespace tlabel {

/// Column t-1 of Y is the embedded point for time index t.
using Embedding = Eigen::MatrixXd;

inline void check_columns(const Embedding& y, const TripletQuery& q) {
	check_query(q, static_cast<std::size_t>(y.cols()));
}

/// ||y_i - y_k||^2 - ||y_i - y_j||^2; positive when j is embedded nearer to i.
inline double triplet_margin(const Embedding& y, const TripletQuery& q) {
	check_columns(y, q);
	const auto yi = y.col(q.i - 1);
	return (yi - y.col(q.k - 1)).squaredNorm() - (yi - y.col(q.j - 1)).squaredNorm();
}

/// True when the embedding contradicts the label, i.e. the point the label
/// calls nearer is strictly farther. Exact ties agree.
inline bool violates(const Embedding& y, const LabeledTriplet& l) {
	const auto yi = y.col(l.query.i - 1);
	const double near = (yi - y.col(l.nearer() - 1)).squaredNorm();
	const double far = (yi - y.col(l.farther() - 1)).squaredNorm();
	return far < near;
}

inline std::size_t count_violations(const Embedding& y, std::span<const LabeledTriplet> labels) {
	std::size_t bad = 0;
	for (const auto& l : labels) {
		check_columns(y, l.query);
		bad += violates(y, l) ? 1 : 0;
	}
	return bad;
}

/// Fraction of labels the embedding contradicts.
inline double triplet_violations(const Embedding& y, std::span<const LabeledTriplet> labels) {
	if (labels.empty()) throw Error(ErrorCode::EmptyInput, "no labels to count violations over");
	return static_cast<double>(count_violations(y, labels)) / static_cast<double>(labels.size());
}

inline double triplet_violations(const Embedding& y, const LabeledTripletSet& labels) {
	return triplet_violations(y, labels.labels());
}

/// Violations of the labels against the ground truth itself.
inline double triplet_violations(const Signal& truth, std::span<const LabeledTriplet> labels) {
	Embedding z(1, static_cast<Eigen::Index>(truth.size()));
	for (std::size_t t = 0; t < truth.size(); ++t) z(0, static_cast<Eigen::Index>(t)) = truth.values()[t];
	return triplet_violations(z, labels);
}

inline Embedding as_row(std::span<const double> values) {
	Embedding y(1, static_cast<Eigen::Index>(values.size()));
	for (std::size_t t = 0; t < values.size(); ++t) y(0, static_cast<Eigen::Index>(t)) = values[t];
	return y;
}

inline std::vector<double> first_row(const Embedding& y) {
	std::vector<double> out(static_cast<std::size_t>(y.cols()));
	for (Eigen::Index t = 0; t < y.cols(); ++t) out[static_cast<std::size_t>(t)] = y(0, t);
	return out;
}

// --- affine alignment ----------------------------------------------------

/// Minimizer of (1/n) ||a Y - b 1 - Z||^2.
struct AffineFit {
	double a = 0.0;
	double b = 0.0;
	double mse = 0.0;
	bool degenerate = false;

	double apply(double y) const noexcept { return a * y - b; }
};

inline AffineFit affine_align_mse(std::span<const double> y, std::span<const double> z) {
	if (y.size() != z.size()) throw Error(ErrorCode::InvalidSize, "embedding and truth differ in length");
	if (y.size() < 2) throw Error(ErrorCode::InvalidSize, "affine fit needs n >= 2");
	const double n = static_cast<double>(y.size());
	const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
	const double mz = std::accumulate(z.begin(), z.end(), 0.0) / n;
	double syy = 0.0, syz = 0.0, szz = 0.0;
	for (std::size_t t = 0; t < y.size(); ++t) {
		const double dy = y[t] - my, dz = z[t] - mz;
		syy += dy * dy;
		syz += dy * dz;
		szz += dz * dz;
	}
	AffineFit fit;
	if (syy == 0.0) {
		fit.degenerate = true;
		fit.a = 0.0;
		fit.b = -mz;
	} else {
		fit.a = syz / syy;
		fit.b = fit.a * my - mz;
	}
	double sse = 0.0;
	for (std::size_t t = 0; t < y.size(); ++t) {
		const double r = fit.apply(y[t]) - z[t];
		sse += r * r;
	}
	fit.mse = sse / n;
	return fit;
}

inline AffineFit affine_align_mse(std::span<const double> y, const Signal& z) { return affine_align_mse(y, z.values()); }

inline double pearson(std::span<const double> y, std::span<const double> z) {
	if (y.size() != z.size()) throw Error(ErrorCode::InvalidSize, "inputs differ in length");
	if (y.size() < 2) throw Error(ErrorCode::InvalidSize, "correlation needs n >= 2");
	const double n = static_cast<double>(y.size());
	const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
	const double mz = std::accumulate(z.begin(), z.end(), 0.0) / n;
	double syy = 0.0, syz = 0.0, szz = 0.0;
	for (std::size_t t = 0; t < y.size(); ++t) {
		const double dy = y[t] - my, dz = z[t] - mz;
		syy += dy * dy;
		syz += dy * dz;
		szz += dz * dz;
	}
	if (syy == 0.0 || szz == 0.0) throw Error(ErrorCode::UndefinedCorrelation, "constant input");
	return std::clamp(syz / std::sqrt(syy * szz), -1.0, 1.0);
}

/// Correlation after affine alignment: sign(a) * rho(Y, Z). Constant Y reports 0.
inline double aligned_pearson(std::span<const double> y, std::span<const double> z) {
	const auto fit = affine_align_mse(y, z);
	if (fit.degenerate) return 0.0;
	const double rho = pearson(y, z);
	return fit.a < 0.0 ? -rho : rho;
}

// --- Poisson-Binomial model of correct labels ----------------------------

inline double expected_correct(std::span<const double> probs) {
	double sum = 0.0;
	for (double p : probs) {
		if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::Domain, "success probability outside [0,1]");
		sum += p;
	}
	return sum;
}

inline double correct_count_variance(std::span<const double> probs) {
	double var = 0.0;
	for (double p : probs) {
		if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::Domain, "success probability outside [0,1]");
		var += p * (1.0 - p);
	}
	return var;
}

/// E[tau_v] = 1 - E[C] / |S|.
inline double expected_violation_rate(std::span<const double> probs) {
	if (probs.empty()) throw Error(ErrorCode::EmptyInput, "no probabilities");
	return 1.0 - expected_correct(probs) / static_cast<double>(probs.size());
}

// --- binned success probability -------------------------------------------

struct SuccessBin {
	double mean_gap = 0.0;
	double estimated_p = 0.5;
	std::size_t count = 0;
	/// Members that are not exact ties; the denominator of estimated_p.
	std::size_t scored = 0;
};

struct SuccessProbabilityCurve {
	std::vector<SuccessBin> bins;
};

/// Sorts labels by |d_ij - d_ik|, splits them into `num_bins` equal-count
/// intervals and takes the fraction labeled consistently with the truth in
/// each. A bin made only of ties reports 0.5.
inline SuccessProbabilityCurve estimate_success_probability(std::span<const LabeledTriplet> labels,
	const Signal& truth, std::size_t num_bins = 10) {
	if (labels.empty()) throw Error(ErrorCode::EmptyInput, "no labels");
	if (num_bins < 1 || num_bins > labels.size()) {
		throw Error(ErrorCode::InvalidBins, std::to_string(num_bins) + " bins for " + std::to_string(labels.size()) + " labels");
	}
	struct Scored { double gap; int correct; };
	std::vector<Scored> rows;
	rows.reserve(labels.size());
	for (const auto& l : labels) {
		const double signed_gap = dissimilarity(truth, l.query.i, l.query.k) - dissimilarity(truth, l.query.i, l.query.j);
		const int correct = signed_gap == 0.0 ? -1 : ((signed_gap > 0.0) == (l.w < 0) ? 1 : 0);
		rows.push_back({std::abs(signed_gap), correct});
	}
	std::stable_sort(rows.begin(), rows.end(), [](const Scored& a, const Scored& b) { return a.gap < b.gap; });

	SuccessProbabilityCurve curve;
	const std::size_t base = rows.size() / num_bins, extra = rows.size() % num_bins;
	std::size_t pos = 0;
	for (std::size_t b = 0; b < num_bins; ++b) {
		SuccessBin bin;
		bin.count = base + (b < extra ? 1 : 0);
		double gap_sum = 0.0;
		std::size_t hits = 0;
		for (std::size_t r = pos; r < pos + bin.count; ++r) {
			gap_sum += rows[r].gap;
			if (rows[r].correct >= 0) {
				++bin.scored;
				hits += static_cast<std::size_t>(rows[r].correct);
			}
		}
		bin.mean_gap = gap_sum / static_cast<double>(bin.count);
		if (bin.scored > 0) bin.estimated_p = static_cast<double>(hits) / static_cast<double>(bin.scored);
		curve.bins.push_back(bin);
		pos += bin.count;
	}
	return curve;
}

// --- tables ---------------------------------------------------------------

struct ResultRow {
	std::string task;
	std::string method;
	double fraction_of_t = 0.0;
	double mse = 0.0;
	double rho = 0.0;
};

inline void write_results_table(std::ostream& out, std::span<const ResultRow> rows) {
	out << "task,method,fraction_of_T,mse,rho\n";
	for (const auto& r : rows) {
		out << r.task << ',' << r.method << ',' << r.fraction_of_t << ',' << r.mse << ',' << r.rho << '\n';
	}
}

struct ViolationRow {
	std::string task;
	double tau_v_vs_truth = 0.0;
	/// (fraction of |T|, tau_v of the fitted embedding) pairs.
	std::vector<std::pair<double, double>> tau_v_embedding_by_budget;
};

/// Budgets are packed as "fraction:tau" pairs separated by ';'.
inline void write_violations_table(std::ostream& out, std::span<const ViolationRow> rows) {
	out << "task,tau_v_vs_truth,tau_v_embedding_by_budget\n";
	for (const auto& r : rows) {
		out << r.task << ',' << r.tau_v_vs_truth << ',';
		for (std::size_t b = 0; b < r.tau_v_embedding_by_budget.size(); ++b) {
			if (b) out << ';';
			out << r.tau_v_embedding_by_budget[b].first << ':' << r.tau_v_embedding_by_budget[b].second;
		}
		out << '\n';
	}
}

inline void write_success_curve(std::ostream& out, const std::string& annotator, const SuccessProbabilityCurve& curve,
	bool header = true) {
	if (header) out << "annotator,bin,mean_gap,estimated_p,count,scored\n";
	for (std::size_t b = 0; b < curve.bins.size(); ++b) {
		const auto& bin = curve.bins[b];
		out << annotator << ',' << b + 1 << ',' << bin.mean_gap << ',' << bin.estimated_p << ',' << bin.count << ','
			<< bin.scored << '\n';
	}
}

} // namespace tlabel
