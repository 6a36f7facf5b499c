/// @file  embedding.hpp
/// @brief Empirical-risk minimization over an m x n embedding for the STE,
///        t-STE, GNMDS (hinge) and CKL triplet losses.
///
/// Every loss is a function of the squared distances from the reference to
/// the point its label calls nearer (dn) and farther (df). For the margin
/// losses the argument is w * margin = dn - df. Optimization runs directly
/// over Y with backtracking gradient descent and independent random restarts.

#pragma once

#include <tlabel/error.hpp>
#include <tlabel/evaluation.hpp>
#include <tlabel/rng.hpp>
#include <tlabel/triplets.hpp>

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace tlabel {

enum class LossKind { Ste, Tste, GnmdsHinge, Ckl };

struct LossSpec {
	LossKind kind = LossKind::Ste;
	/// sigma for STE, alpha for t-STE, mu for CKL; unused for GNMDS.
	double param = 1.0 / std::numbers::sqrt2;

	static LossSpec ste(double sigma = 1.0 / std::numbers::sqrt2) { return {LossKind::Ste, sigma}; }
	static LossSpec tste(double alpha) { return {LossKind::Tste, alpha}; }
	static LossSpec gnmds_hinge() { return {LossKind::GnmdsHinge, 0.0}; }
	static LossSpec ckl(double mu) { return {LossKind::Ckl, mu}; }

	void validate() const {
		if (kind != LossKind::GnmdsHinge && !(param > 0.0 && std::isfinite(param))) {
			throw Error(ErrorCode::Config, "loss parameter must be positive");
		}
	}

	/// Round-trips through parse_loss_spec: "ste:0.707107", "tste:2", "gnmds", "ckl:10".
	std::string name() const {
		auto num = [](double x) {
			char buf[32];
			auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
			return std::string(buf, end);
		};
		switch (kind) {
		case LossKind::Ste: return "ste:" + num(param);
		case LossKind::Tste: return "tste:" + num(param);
		case LossKind::GnmdsHinge: return "gnmds";
		case LossKind::Ckl: return "ckl:" + num(param);
		}
		return "unknown";
	}

	bool operator==(const LossSpec&) const = default;
};

/// Accepts "ste", "ste:<sigma>", "tste:<alpha>", "gnmds", "ckl:<mu>".
inline LossSpec parse_loss_spec(std::string_view text) {
	const auto colon = text.find(':');
	const auto head = text.substr(0, colon);
	double value = 0.0;
	const bool has_value = colon != std::string_view::npos;
	if (has_value) {
		const auto tail = text.substr(colon + 1);
		auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), value);
		if (ec != std::errc() || ptr != tail.data() + tail.size()) {
			throw Error(ErrorCode::Config, "bad loss parameter in '" + std::string(text) + "'");
		}
	}
	LossSpec spec;
	if (head == "ste") spec = has_value ? LossSpec::ste(value) : LossSpec::ste();
	else if (head == "tste" && has_value) spec = LossSpec::tste(value);
	else if ((head == "gnmds" || head == "gnmds-hinge") && !has_value) spec = LossSpec::gnmds_hinge();
	else if (head == "ckl" && has_value) spec = LossSpec::ckl(value);
	else throw Error(ErrorCode::Config, "unknown loss '" + std::string(text) + "'");
	spec.validate();
	return spec;
}

namespace detail {

struct LossTerm {
	double value;
	double d_near; // derivative with respect to dn
	double d_far;  // derivative with respect to df
};

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline LossTerm loss_term(const LossSpec& spec, double dn, double df) {
	switch (spec.kind) {
	case LossKind::Ste: {
		const double s = 1.0 / (2.0 * spec.param * spec.param);
		const double x = s * (dn - df);
		const double slope = s * logistic(x);
		return {softplus(x), slope, -slope};
	}
	case LossKind::GnmdsHinge: {
		const double x = 1.0 + dn - df;
		return x > 0.0 ? LossTerm{x, 1.0, -1.0} : LossTerm{0.0, 0.0, 0.0};
	}
	case LossKind::Tste: {
		const double alpha = spec.param, e = (alpha + 1.0) / 2.0;
		const double log_near = -e * std::log1p(dn / alpha);
		const double log_far = -e * std::log1p(df / alpha);
		// -log p = log(1 + exp(log_far - log_near)); 1 - p = logistic(log_far - log_near)
		const double gap = log_far - log_near;
		const double q = logistic(gap);
		return {softplus(gap), e * q / (alpha + dn), -e * q / (alpha + df)};
	}
	case LossKind::Ckl: {
		const double mu = spec.param;
		const double total = 2.0 * mu + dn + df;
		return {std::log(total) - std::log(mu + df), 1.0 / total, 1.0 / total - 1.0 / (mu + df)};
	}
	}
	return {0.0, 0.0, 0.0};
}

/// 0-based (reference, nearer, farther) columns for a labeled triplet.
struct Oriented {
	Eigen::Index ref, near, far;
};

inline std::vector<Oriented> orient(std::span<const LabeledTriplet> labels, Eigen::Index columns) {
	std::vector<Oriented> out;
	out.reserve(labels.size());
	for (const auto& l : labels) {
		check_query(l.query, static_cast<std::size_t>(columns));
		out.push_back({l.query.i - 1, static_cast<Eigen::Index>(l.nearer()) - 1, static_cast<Eigen::Index>(l.farther()) - 1});
	}
	return out;
}

inline double risk(const LossSpec& spec, const Embedding& y, std::span<const Oriented> triplets) {
	double sum = 0.0;
	if (y.rows() == 1) {
		const double* p = y.data();
		for (const auto& t : triplets) {
			const double a = p[t.ref] - p[t.near], b = p[t.ref] - p[t.far];
			sum += loss_term(spec, a * a, b * b).value;
		}
		return sum / static_cast<double>(triplets.size());
	}
	for (const auto& t : triplets) {
		const double dn = (y.col(t.ref) - y.col(t.near)).squaredNorm();
		const double df = (y.col(t.ref) - y.col(t.far)).squaredNorm();
		sum += loss_term(spec, dn, df).value;
	}
	return sum / static_cast<double>(triplets.size());
}

inline double risk_and_gradient(const LossSpec& spec, const Embedding& y, std::span<const Oriented> triplets,
	Embedding& grad) {
	grad.setZero(y.rows(), y.cols());
	double sum = 0.0;
	const double inv = 1.0 / static_cast<double>(triplets.size());
	if (y.rows() == 1) {
		const double* p = y.data();
		double* g = grad.data();
		for (const auto& t : triplets) {
			const double a = p[t.ref] - p[t.near], b = p[t.ref] - p[t.far];
			const auto term = loss_term(spec, a * a, b * b);
			sum += term.value;
			const double gn = 2.0 * term.d_near * a, gf = 2.0 * term.d_far * b;
			g[t.ref] += gn + gf;
			g[t.near] -= gn;
			g[t.far] -= gf;
		}
		grad *= inv;
		return sum * inv;
	}
	for (const auto& t : triplets) {
		const auto to_near = (y.col(t.ref) - y.col(t.near)).eval();
		const auto to_far = (y.col(t.ref) - y.col(t.far)).eval();
		const auto term = loss_term(spec, to_near.squaredNorm(), to_far.squaredNorm());
		sum += term.value;
		const auto g_near = (2.0 * term.d_near * to_near).eval();
		const auto g_far = (2.0 * term.d_far * to_far).eval();
		grad.col(t.ref) += g_near + g_far;
		grad.col(t.near) -= g_near;
		grad.col(t.far) -= g_far;
	}
	grad *= inv;
	return sum * inv;
}

} // namespace detail

struct RiskGradient {
	double risk = 0.0;
	Embedding grad;
};

/// Mean loss over the labels and its exact gradient with respect to Y.
/// Labels are used as given, so a mirrored (i,k,j;-w) entry contributes the
/// same term as (i,j,k;w).
inline RiskGradient risk_and_gradient(const LossSpec& spec, const Embedding& y, std::span<const LabeledTriplet> labels) {
	if (labels.empty()) throw Error(ErrorCode::EmptyInput, "risk over an empty label set");
	spec.validate();
	const auto oriented = detail::orient(labels, y.cols());
	RiskGradient out;
	out.risk = detail::risk_and_gradient(spec, y, oriented, out.grad);
	if (!std::isfinite(out.risk) || !out.grad.allFinite()) {
		throw Error(ErrorCode::NumericalOverflow, "non-finite risk or gradient");
	}
	return out;
}

inline RiskGradient risk_and_gradient(const LossSpec& spec, const Embedding& y, const LabeledTripletSet& labels) {
	if (static_cast<std::size_t>(y.cols()) != labels.n()) {
		throw Error(ErrorCode::InvalidSize, "embedding has " + std::to_string(y.cols()) + " columns, labels need " +
			std::to_string(labels.n()));
	}
	return risk_and_gradient(spec, y, labels.labels());
}

/// Per-triplet probability the model assigns to the observed label
/// (t-STE and CKL; STE uses its logistic link).
inline double label_probability(const LossSpec& spec, const Embedding& y, const LabeledTriplet& l) {
	check_columns(y, l.query);
	const auto yi = y.col(l.query.i - 1);
	const double dn = (yi - y.col(l.nearer() - 1)).squaredNorm();
	const double df = (yi - y.col(l.farther() - 1)).squaredNorm();
	if (spec.kind == LossKind::GnmdsHinge) throw Error(ErrorCode::Domain, "hinge loss has no probability model");
	return std::exp(-detail::loss_term(spec, dn, df).value);
}

// --- solver ---------------------------------------------------------------

enum class StepRule { Backtracking, FixedWithDecay };

struct SolverConfig {
	std::size_t restarts = 30;
	std::size_t max_iters = 1000;
	double rel_tol = 1e-7;
	/// Standard deviation of the Normal initialization.
	double init_scale = 1e-2;
	StepRule step_rule = StepRule::Backtracking;
	double initial_step = 1.0;
	/// Growth after an accepted backtracking step.
	double step_growth = 1.05;
	/// step_t = initial_step / (1 + decay * t) for FixedWithDecay.
	double decay = 1e-3;
	std::uint64_t seed = 0;
	/// Worker threads for restarts; results do not depend on it.
	std::size_t jobs = 1;
	bool record_history = false;

	void validate() const {
		if (restarts < 1) throw Error(ErrorCode::Config, "restarts must be >= 1");
		if (max_iters < 1) throw Error(ErrorCode::Config, "max_iters must be >= 1");
		if (!(rel_tol > 0.0)) throw Error(ErrorCode::Config, "rel_tol must be > 0");
		if (!(init_scale > 0.0)) throw Error(ErrorCode::Config, "init_scale must be > 0");
		if (!(initial_step > 0.0)) throw Error(ErrorCode::Config, "initial_step must be > 0");
	}
};

struct RestartTrace {
	double risk = std::numeric_limits<double>::infinity();
	std::size_t iterations = 0;
	/// Risk after each accepted step, starting with the initial risk.
	std::vector<double> history;
	Embedding y;
};

struct EmbeddingResult {
	Embedding y;
	double risk = 0.0;
	std::vector<double> restart_risks;
	double violations = 0.0;
	std::size_t m = 1;
	std::size_t best_restart = 0;
	std::vector<std::vector<double>> histories;
};

namespace detail {

inline RestartTrace descend(const LossSpec& spec, std::span<const Oriented> triplets, Eigen::Index m, Eigen::Index n,
	const SolverConfig& config, std::size_t restart) {
	auto rng = make_rng(derive_seed(config.seed, {0x5e57a27ULL, restart}));
	std::normal_distribution<double> normal(0.0, config.init_scale);
	RestartTrace trace;
	trace.y = Embedding(m, n);
	for (Eigen::Index c = 0; c < n; ++c)
		for (Eigen::Index r = 0; r < m; ++r) trace.y(r, c) = normal(rng);

	Embedding grad, candidate;
	double f = risk_and_gradient(spec, trace.y, triplets, grad);
	if (!std::isfinite(f)) throw Error(ErrorCode::NumericalOverflow, "non-finite initial risk");
	if (config.record_history) trace.history.push_back(f);
	double step = config.initial_step;
	constexpr int kMaxHalvings = 60;

	for (std::size_t it = 0; it < config.max_iters; ++it) {
		trace.iterations = it + 1;
		double next = std::numeric_limits<double>::quiet_NaN();
		if (config.step_rule == StepRule::Backtracking) {
			bool accepted = false, saw_finite = false;
			if (it == 0) {
				// Y starts next to the stationary point Y = 0, where fixed small
				// steps barely move the risk; expand until the decrease stalls.
				double best = risk(spec, trace.y - step * grad, triplets);
				for (int d = 0; d < kMaxHalvings && std::isfinite(best); ++d) {
					const double wider = risk(spec, trace.y - 2.0 * step * grad, triplets);
					if (!(wider < best)) break;
					best = wider;
					step *= 2.0;
				}
			}
			for (int h = 0; h < kMaxHalvings; ++h) {
				candidate = trace.y - step * grad;
				next = risk(spec, candidate, triplets);
				saw_finite = saw_finite || std::isfinite(next);
				if (std::isfinite(next) && next <= f) {
					accepted = true;
					break;
				}
				step *= 0.5;
			}
			if (!accepted) {
				if (!saw_finite) throw Error(ErrorCode::NumericalOverflow, "risk stayed non-finite after step halving");
				break; // no descent direction left at machine precision
			}
		} else {
			candidate = trace.y - (config.initial_step / (1.0 + config.decay * static_cast<double>(it))) * grad;
			next = risk(spec, candidate, triplets);
			if (!std::isfinite(next)) throw Error(ErrorCode::NumericalOverflow, "non-finite risk; step too large");
		}
		const double change = std::abs(f - next) / std::max(std::abs(f), std::numeric_limits<double>::min());
		trace.y.swap(candidate);
		f = risk_and_gradient(spec, trace.y, triplets, grad);
		if (config.record_history) trace.history.push_back(f);
		if (!grad.allFinite()) throw Error(ErrorCode::NumericalOverflow, "non-finite gradient");
		if (config.step_rule == StepRule::Backtracking) step *= config.step_growth;
		if (change < config.rel_tol) break;
	}
	trace.risk = f;
	return trace;
}

} // namespace detail

/// Best of `config.restarts` independent descents; ties go to the lowest
/// restart index. Deterministic in config.seed regardless of config.jobs.
inline EmbeddingResult fit_embedding(std::span<const LabeledTriplet> labels, std::size_t n, std::size_t m,
	const LossSpec& spec, const SolverConfig& config) {
	if (labels.empty()) throw Error(ErrorCode::EmptyInput, "cannot fit an embedding without labels");
	if (m < 1) throw Error(ErrorCode::InvalidSize, "embedding dimension must be >= 1");
	spec.validate();
	config.validate();
	const auto cols = static_cast<Eigen::Index>(n);
	const auto oriented = detail::orient(labels, cols);

	std::vector<RestartTrace> traces(config.restarts);
	std::vector<std::exception_ptr> failures(config.restarts);
	std::atomic<std::size_t> next{0};
	auto worker = [&] {
		for (std::size_t r = next++; r < config.restarts; r = next++) {
			try {
				traces[r] = detail::descend(spec, oriented, static_cast<Eigen::Index>(m), cols, config, r);
			} catch (...) {
				failures[r] = std::current_exception();
			}
		}
	};
	const std::size_t jobs = std::clamp<std::size_t>(config.jobs, 1, config.restarts);
	if (jobs == 1) {
		worker();
	} else {
		std::vector<std::jthread> pool;
		for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
	}

	EmbeddingResult result;
	result.m = m;
	std::size_t failed = 0;
	for (std::size_t r = 0; r < config.restarts; ++r) {
		if (failures[r]) {
			++failed;
			result.restart_risks.push_back(std::numeric_limits<double>::infinity());
			continue;
		}
		result.restart_risks.push_back(traces[r].risk);
		if (traces[r].risk < traces[result.best_restart].risk || failures[result.best_restart]) {
			result.best_restart = r;
		}
	}
	if (failed == config.restarts) std::rethrow_exception(failures.front());
	result.risk = traces[result.best_restart].risk;
	result.y = std::move(traces[result.best_restart].y);
	result.violations = triplet_violations(result.y, labels);
	if (config.record_history) {
		for (auto& t : traces) result.histories.push_back(std::move(t.history));
	}
	return result;
}

inline EmbeddingResult fit_embedding(const LabeledTripletSet& labels, std::size_t m, const LossSpec& spec,
	const SolverConfig& config) {
	return fit_embedding(labels.labels(), labels.n(), m, spec, config);
}

/// Top-m factor Y (m x n) with Y^T Y closest to G among rank-m factorizations.
inline Embedding recover_from_gram(const Eigen::MatrixXd& gram, std::size_t m, double tol = 1e-8) {
	if (gram.rows() != gram.cols()) throw Error(ErrorCode::InvalidSize, "Gram matrix must be square");
	if (m < 1 || static_cast<Eigen::Index>(m) > gram.rows()) throw Error(ErrorCode::InvalidSize, "bad dimension");
	const double scale = std::max(1.0, gram.cwiseAbs().maxCoeff());
	if ((gram - gram.transpose()).cwiseAbs().maxCoeff() > tol * scale) {
		throw Error(ErrorCode::NotPsd, "Gram matrix is not symmetric");
	}
	Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
	const auto& values = eig.eigenvalues();
	if (values.minCoeff() < -tol * scale) {
		throw Error(ErrorCode::NotPsd, "negative eigenvalue " + std::to_string(values.minCoeff()));
	}
	const Eigen::Index n = gram.rows();
	Embedding y(static_cast<Eigen::Index>(m), n);
	for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(m); ++r) {
		const Eigen::Index src = n - 1 - r; // eigenvalues ascend
		y.row(r) = std::sqrt(std::max(values(src), 0.0)) * eig.eigenvectors().col(src).transpose();
	}
	return y;
}

// --- output ---------------------------------------------------------------

inline void write_embedding_csv(std::ostream& out, const Embedding& y) {
	out << 't';
	for (Eigen::Index r = 0; r < y.rows(); ++r) out << ",y_" << r + 1;
	out << '\n';
	char buf[32];
	for (Eigen::Index c = 0; c < y.cols(); ++c) {
		out << c + 1;
		for (Eigen::Index r = 0; r < y.rows(); ++r) {
			auto [end, ec] = std::to_chars(buf, buf + sizeof buf, y(r, c));
			out << ',';
			out.write(buf, end - buf);
		}
		out << '\n';
	}
}

inline nlohmann::ordered_json to_json(const SolverConfig& c) {
	return {{"restarts", c.restarts}, {"max_iters", c.max_iters}, {"rel_tol", c.rel_tol},
		{"init_scale", c.init_scale},
		{"step_rule", c.step_rule == StepRule::Backtracking ? "backtracking" : "fixed-with-decay"},
		{"initial_step", c.initial_step}, {"seed", c.seed}};
}

inline nlohmann::ordered_json embedding_sidecar(const EmbeddingResult& r, const LossSpec& spec, const SolverConfig& c) {
	return {{"risk", r.risk}, {"restart_risks", r.restart_risks}, {"violations", r.violations},
		{"best_restart", r.best_restart}, {"m", r.m}, {"loss_spec", spec.name()}, {"config", to_json(c)}};
}

} // namespace tlabel
