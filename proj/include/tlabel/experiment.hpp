/// @file  experiment.hpp
/// @brief Simulation grids, the fusion pipeline and plot-ready outputs.
///
/// A simulation grid is noise x loss x budget x trial. Each cell samples
/// triplets uniformly, labels them with a simulated annotator pool, fits an
/// embedding and scores it against the ground truth. Cells are independent
/// and keyed by (config hash, indices), so a grid can be resumed and run in
/// any order.

#pragma once

#include <tlabel/config.hpp>
#include <tlabel/embedding.hpp>
#include <tlabel/evaluation.hpp>
#include <tlabel/rng.hpp>
#include <tlabel/signal.hpp>
#include <tlabel/triplets.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace tlabel {

namespace fs = std::filesystem;

/// Eight log-spaced fractions of |T| from 0.0005 to 0.1077 inclusive.
inline std::vector<double> default_budget_fractions() {
	constexpr double lo = 0.0005, hi = 0.1077;
	constexpr int points = 8;
	std::vector<double> out(points);
	for (int p = 0; p < points; ++p) {
		out[p] = lo * std::pow(hi / lo, static_cast<double>(p) / (points - 1));
	}
	out.back() = hi;
	return out;
}

inline std::string format_number(double x) {
	if (std::isnan(x)) return "nan";
	char buf[32];
	auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
	return std::string(buf, end);
}

struct SignalSpec {
	std::optional<std::string> path;
	SignalKind kind = SignalKind::TaskBLike;
	std::size_t n = 178;
	std::uint64_t seed = 0;

	Signal materialize() const { return path ? load_signal(*path) : generate_signal(kind, n, seed); }
	std::string describe() const {
		return path ? "file:" + *path
					: std::string(to_string(kind)) + ":" + std::to_string(n) + ":" + std::to_string(seed);
	}
};

/// A noise level of the simulated annotators.
struct NoiseSpec {
	std::variant<ConstantLink, LogisticLink> link = LogisticLink{20.0};

	std::string name() const {
		if (const auto* c = std::get_if<ConstantLink>(&link)) return "constant:" + format_number(c->mu);
		return "logistic:" + format_number(std::get<LogisticLink>(link).sigma);
	}
};

enum class BudgetMode { Fraction, KFactor };

struct ExperimentConfig {
	SignalSpec signal;
	std::vector<NoiseSpec> noise{NoiseSpec{}};
	BudgetMode budget_mode = BudgetMode::Fraction;
	/// Fractions of |T| or K values, depending on budget_mode.
	std::vector<double> budgets = default_budget_fractions();
	std::vector<LossSpec> losses{LossSpec::ste()};
	std::size_t annotators = 1;
	std::size_t trials = 30;
	std::size_t m = 1;
	std::uint64_t seed = 0;
	std::string output_dir = "out";
	SolverConfig solver{};

	void validate() const {
		if (trials < 1) throw Error(ErrorCode::Config, "trials must be >= 1");
		if (annotators < 1) throw Error(ErrorCode::Config, "annotators must be >= 1");
		if (m < 1) throw Error(ErrorCode::Config, "m must be >= 1");
		if (noise.empty() || budgets.empty() || losses.empty()) throw Error(ErrorCode::Config, "empty grid axis");
		for (double b : budgets) {
			if (budget_mode == BudgetMode::Fraction && !(b > 0.0 && b <= 1.0)) {
				throw Error(ErrorCode::Config, "budget fractions must lie in (0, 1]");
			}
			if (budget_mode == BudgetMode::KFactor && !(b > 0.0)) throw Error(ErrorCode::Config, "K must be > 0");
		}
		for (const auto& l : losses) l.validate();
		for (const auto& n : noise) AnnotatorModel{"check", n.link}.validate();
		solver.validate();
	}

	std::uint64_t budget_count(std::size_t n, std::size_t index) const {
		return budget_mode == BudgetMode::Fraction ? budget_for_fraction(n, budgets[index])
												   : triplet_budget(n, budgets[index]);
	}

	/// Everything that changes results; output_dir and jobs are excluded.
	nlohmann::ordered_json canonical() const {
		nlohmann::ordered_json j;
		j["signal"] = signal.describe();
		std::vector<std::string> noises, loss_names, budget_text;
		for (const auto& n : noise) {
			auto name = n.name();
			if (const auto* c = std::get_if<ConstantLink>(&n.link)) name += ":" + format_number(c->eps_sd);
			noises.push_back(name);
		}
		for (const auto& l : losses) loss_names.push_back(l.name());
		for (double b : budgets) budget_text.push_back(format_number(b));
		j["noise"] = noises;
		j["budget_mode"] = budget_mode == BudgetMode::Fraction ? "fraction" : "k";
		j["budgets"] = budget_text;
		j["losses"] = loss_names;
		j["annotators"] = annotators;
		j["trials"] = trials;
		j["m"] = m;
		j["seed"] = seed;
		j["solver"] = to_json(solver);
		return j;
	}

	std::string hash() const {
		char buf[17];
		std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical().dump())));
		return buf;
	}
};

/// Reads the key/value config format. Only the signal section is mandatory.
inline ExperimentConfig parse_experiment_config(const KeyValueDocument& doc) {
	static const std::set<std::string> known{"signal.path", "signal.kind", "signal.n", "signal.seed", "noise.kind",
		"noise.sigma", "noise.mu", "noise.eps_sd", "budget.fractions", "budget.k", "losses", "annotators", "trials", "m",
		"seed", "output_dir", "restarts", "solver.max_iters", "solver.rel_tol", "solver.init_scale",
		"solver.initial_step", "solver.step_rule"};
	for (const auto& key : doc.keys()) {
		// [serve] belongs to the annotation server and may share the file.
		if (!known.count(key) && key.rfind("serve.", 0) != 0) throw Error(ErrorCode::Config, "unknown key '" + key + "'");
	}
	ExperimentConfig c;
	if (auto path = doc.string("signal.path")) {
		c.signal.path = *path;
	} else if (auto kind = doc.string("signal.kind")) {
		c.signal.kind = parse_signal_kind(*kind);
	} else {
		throw Error(ErrorCode::Config, "signal.kind or signal.path is required");
	}
	auto count = [&](const std::string& key, std::size_t fallback) -> std::size_t {
		auto v = doc.number(key);
		if (!v) return fallback;
		if (*v < 0 || std::floor(*v) != *v) throw Error(ErrorCode::Config, "'" + key + "' must be a whole number");
		return static_cast<std::size_t>(*v);
	};
	c.signal.n = count("signal.n", c.signal.n);
	c.signal.seed = count("signal.seed", 0);

	const auto noise_kind = doc.string("noise.kind").value_or("logistic");
	c.noise.clear();
	if (noise_kind == "logistic") {
		for (double s : doc.numbers("noise.sigma").value_or(std::vector<double>{20.0})) c.noise.push_back({LogisticLink{s}});
	} else if (noise_kind == "constant") {
		const double sd = doc.number("noise.eps_sd").value_or(0.01);
		for (double mu : doc.numbers("noise.mu").value_or(std::vector<double>{0.9})) c.noise.push_back({ConstantLink{mu, sd}});
	} else {
		throw Error(ErrorCode::Config, "noise.kind must be 'logistic' or 'constant'");
	}

	if (auto k = doc.numbers("budget.k")) {
		c.budget_mode = BudgetMode::KFactor;
		c.budgets = *k;
	} else if (auto f = doc.numbers("budget.fractions")) {
		c.budgets = *f;
	}
	if (auto losses = doc.strings("losses")) {
		c.losses.clear();
		for (const auto& l : *losses) c.losses.push_back(parse_loss_spec(l));
	}
	c.annotators = count("annotators", c.annotators);
	c.trials = count("trials", c.trials);
	c.m = count("m", c.m);
	c.seed = count("seed", 0);
	c.output_dir = doc.string("output_dir").value_or(c.output_dir);

	c.solver.restarts = count("restarts", c.solver.restarts);
	c.solver.max_iters = count("solver.max_iters", c.solver.max_iters);
	c.solver.rel_tol = doc.number("solver.rel_tol").value_or(c.solver.rel_tol);
	c.solver.init_scale = doc.number("solver.init_scale").value_or(c.solver.init_scale);
	c.solver.initial_step = doc.number("solver.initial_step").value_or(c.solver.initial_step);
	if (auto rule = doc.string("solver.step_rule")) {
		if (*rule == "backtracking") c.solver.step_rule = StepRule::Backtracking;
		else if (*rule == "fixed-with-decay") c.solver.step_rule = StepRule::FixedWithDecay;
		else throw Error(ErrorCode::Config, "unknown solver.step_rule '" + *rule + "'");
	}
	c.validate();
	return c;
}

// --- records --------------------------------------------------------------

struct CellKey {
	std::size_t noise = 0, loss = 0, budget = 0, trial = 0;
	auto operator<=>(const CellKey&) const = default;
};

struct ExperimentRecord {
	std::string config_hash;
	CellKey key;
	std::string noise;
	std::string loss;
	double fraction = 0.0; // realized |S| / |T|
	std::uint64_t budget = 0;
	std::uint64_t cell_seed = 0;
	bool ok = true;
	std::string error;
	double mse = std::nan("");
	double rho = std::nan("");
	double tau_v = std::nan("");
	double tau_v_truth = std::nan("");
	double risk = std::nan("");
	double wall_time = 0.0;
};

inline constexpr std::string_view kRecordHeader =
	"config_hash,noise_index,loss_index,budget_index,trial,noise,loss,fraction,budget,cell_seed,status,mse,rho,tau_v,"
	"tau_v_truth,risk";

inline std::string sanitize_field(std::string text) {
	for (auto& c : text) {
		if (c == ',' || c == '\n' || c == '\r') c = ' ';
	}
	return text;
}

inline std::string record_row(const ExperimentRecord& r, bool with_time) {
	std::ostringstream out;
	out << r.config_hash << ',' << r.key.noise << ',' << r.key.loss << ',' << r.key.budget << ',' << r.key.trial << ','
		<< r.noise << ',' << r.loss << ',' << format_number(r.fraction) << ',' << r.budget << ',' << r.cell_seed << ','
		<< (r.ok ? std::string("ok") : "failed:" + sanitize_field(r.error)) << ',' << format_number(r.mse) << ','
		<< format_number(r.rho) << ',' << format_number(r.tau_v) << ',' << format_number(r.tau_v_truth) << ','
		<< format_number(r.risk);
	if (with_time) out << ',' << format_number(r.wall_time);
	return out.str();
}

inline ExperimentRecord parse_record_row(std::string_view line, std::size_t row) {
	std::vector<std::string> f;
	std::size_t start = 0;
	for (std::size_t c = 0; c <= line.size(); ++c) {
		if (c == line.size() || line[c] == ',') {
			f.emplace_back(line.substr(start, c - start));
			start = c + 1;
		}
	}
	if (f.size() != 16 && f.size() != 17) throw FormatError(row, "expected 16 or 17 columns");
	auto num = [&](const std::string& s) {
		if (s == "nan") return std::nan("");
		double x = 0.0;
		if (!detail::parse_double(s, x)) throw FormatError(row, "bad number '" + s + "'");
		return x;
	};
	auto whole = [&](const std::string& s) {
		std::uint64_t x = 0;
		auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
		if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError(row, "bad integer '" + s + "'");
		return x;
	};
	ExperimentRecord r;
	r.config_hash = f[0];
	r.key = {whole(f[1]), whole(f[2]), whole(f[3]), whole(f[4])};
	r.noise = f[5];
	r.loss = f[6];
	r.fraction = num(f[7]);
	r.budget = whole(f[8]);
	r.cell_seed = whole(f[9]);
	r.ok = f[10] == "ok";
	if (!r.ok) r.error = f[10].rfind("failed:", 0) == 0 ? f[10].substr(7) : f[10];
	r.mse = num(f[11]);
	r.rho = num(f[12]);
	r.tau_v = num(f[13]);
	r.tau_v_truth = num(f[14]);
	r.risk = num(f[15]);
	if (f.size() == 17) r.wall_time = num(f[16]);
	return r;
}

inline std::vector<ExperimentRecord> read_records_csv(std::istream& in) {
	std::vector<ExperimentRecord> out;
	std::string line;
	std::size_t row = 0;
	while (std::getline(in, line)) {
		++row;
		if (!line.empty() && line.back() == '\r') line.pop_back();
		if (line.empty() || line.rfind("config_hash,", 0) == 0) continue;
		out.push_back(parse_record_row(line, row));
	}
	return out;
}

inline std::vector<ExperimentRecord> read_records_csv(const fs::path& path) {
	std::ifstream in(path);
	if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
	return read_records_csv(in);
}

inline void write_records_csv(std::ostream& out, std::span<const ExperimentRecord> records) {
	out << kRecordHeader << '\n';
	for (const auto& r : records) out << record_row(r, false) << '\n';
}

// --- aggregation ----------------------------------------------------------

struct MeanSd {
	double mean = std::nan("");
	double sd = std::nan("");
	std::size_t count = 0;
};

/// Mean and sample standard deviation (n - 1); sd is 0 for a single value.
inline MeanSd mean_sd(std::span<const double> xs) {
	MeanSd out;
	std::vector<double> finite;
	for (double x : xs) {
		if (std::isfinite(x)) finite.push_back(x);
	}
	out.count = finite.size();
	if (finite.empty()) return out;
	double sum = 0.0;
	for (double x : finite) sum += x;
	out.mean = sum / static_cast<double>(finite.size());
	double ss = 0.0;
	for (double x : finite) ss += (x - out.mean) * (x - out.mean);
	out.sd = finite.size() > 1 ? std::sqrt(ss / static_cast<double>(finite.size() - 1)) : 0.0;
	return out;
}

inline double median(std::vector<double> xs) {
	std::erase_if(xs, [](double x) { return !std::isfinite(x); });
	if (xs.empty()) return std::nan("");
	std::sort(xs.begin(), xs.end());
	const auto mid = xs.size() / 2;
	return xs.size() % 2 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

struct CellSummary {
	std::string noise;
	std::string loss;
	std::size_t budget_index = 0;
	double fraction = 0.0;
	std::uint64_t budget = 0;
	MeanSd mse, rho, tau_v;
	double mse_median = std::nan("");
	std::size_t failed = 0;
};

/// One row per (noise, loss, budget), trials pooled.
inline std::vector<CellSummary> summarize(std::span<const ExperimentRecord> records) {
	std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::vector<const ExperimentRecord*>> groups;
	for (const auto& r : records) groups[{r.key.noise, r.key.loss, r.key.budget}].push_back(&r);
	std::vector<CellSummary> out;
	for (const auto& [key, rows] : groups) {
		CellSummary s;
		s.noise = rows.front()->noise;
		s.loss = rows.front()->loss;
		s.budget_index = std::get<2>(key);
		s.fraction = rows.front()->fraction;
		s.budget = rows.front()->budget;
		std::vector<double> mse, rho, tau;
		for (const auto* r : rows) {
			if (!r->ok) {
				++s.failed;
				continue;
			}
			mse.push_back(r->mse);
			rho.push_back(r->rho);
			tau.push_back(r->tau_v);
		}
		s.mse = mean_sd(mse);
		s.rho = mean_sd(rho);
		s.tau_v = mean_sd(tau);
		s.mse_median = median(mse);
		out.push_back(s);
	}
	return out;
}

inline void write_summary_csv(std::ostream& out, std::span<const CellSummary> rows) {
	out << "noise,loss,budget_index,fraction,budget,trials,failed,mse_mean,mse_sd,mse_median,rho_mean,rho_sd,tau_v_mean,"
		   "tau_v_sd\n";
	for (const auto& s : rows) {
		out << s.noise << ',' << s.loss << ',' << s.budget_index << ',' << format_number(s.fraction) << ',' << s.budget
			<< ',' << s.mse.count << ',' << s.failed << ',' << format_number(s.mse.mean) << ','
			<< format_number(s.mse.sd) << ',' << format_number(s.mse_median) << ',' << format_number(s.rho.mean) << ','
			<< format_number(s.rho.sd) << ',' << format_number(s.tau_v.mean) << ',' << format_number(s.tau_v.sd) << '\n';
	}
}

// --- one cell ------------------------------------------------------------

struct CellOutcome {
	ExperimentRecord record;
	EmbeddingResult fit;
};

/// Samples, labels, fits and scores one grid cell. The triplet sample and
/// labels depend on (seed, noise, budget, trial) so every loss sees the same
/// data; the solver seed additionally depends on the loss.
inline CellOutcome run_cell(const ExperimentConfig& config, const Signal& truth, const CellKey& key) {
	const auto n = truth.size();
	CellOutcome out;
	auto& r = out.record;
	r.config_hash = config.hash();
	r.key = key;
	r.noise = config.noise[key.noise].name();
	r.loss = config.losses[key.loss].name();
	r.budget = config.budget_count(n, key.budget);
	r.fraction = static_cast<double>(r.budget) / static_cast<double>(triplet_universe_size(n));
	const auto data_seed = derive_seed(config.seed, {0xda7aULL, key.noise, key.budget, key.trial});
	r.cell_seed = derive_seed(config.seed, {fnv1a(r.loss), key.noise, key.budget, key.trial});

	const auto queries = sample_triplets(n, r.budget, data_seed);
	std::vector<std::string> ids;
	for (std::size_t a = 0; a < config.annotators; ++a) ids.push_back("sim" + std::to_string(a + 1));
	auto rng = make_rng(derive_seed(data_seed, {0x1abe1ULL}));
	std::vector<LabeledTriplet> labels;
	labels.reserve(queries.size());
	for (std::size_t q = 0; q < queries.size(); ++q) {
		const AnnotatorModel model{ids[q % ids.size()], config.noise[key.noise].link};
		labels.push_back(simulate_label(model, truth, queries[q], rng));
	}

	auto solver = config.solver;
	solver.seed = r.cell_seed;
	solver.jobs = 1;
	out.fit = fit_embedding(labels, n, config.m, config.losses[key.loss], solver);
	const auto y = first_row(out.fit.y);
	const auto align = affine_align_mse(y, truth);
	r.mse = align.mse;
	r.rho = aligned_pearson(y, truth.values());
	r.tau_v = out.fit.violations;
	r.tau_v_truth = triplet_violations(truth, labels);
	r.risk = out.fit.risk;
	return out;
}

// --- grid runner -----------------------------------------------------------

struct RunOptions {
	std::size_t jobs = 1;
	bool resume = false;
	/// Called after each finished cell (from worker threads, serialized).
	std::function<void(const ExperimentRecord&, std::size_t done, std::size_t total)> progress;
};

struct SimulationResult {
	std::vector<ExperimentRecord> records; // sorted by cell key
	std::size_t computed = 0;
	std::size_t reused = 0;
	std::size_t failed = 0;

	double failure_rate() const {
		return records.empty() ? 0.0 : static_cast<double>(failed) / static_cast<double>(records.size());
	}
};

inline std::vector<CellKey> grid_cells(const ExperimentConfig& c) {
	std::vector<CellKey> cells;
	for (std::size_t nz = 0; nz < c.noise.size(); ++nz)
		for (std::size_t l = 0; l < c.losses.size(); ++l)
			for (std::size_t b = 0; b < c.budgets.size(); ++b)
				for (std::size_t t = 0; t < c.trials; ++t) cells.push_back({nz, l, b, t});
	return cells;
}

/// Runs every grid cell, appending each finished record to
/// `<output_dir>/records.journal.csv`, then writes the sorted
/// `records.csv`, `timings.csv` and `summary.csv`. With `resume`, journal rows
/// with a matching config hash are kept and only missing cells run.
inline SimulationResult run_simulation(const ExperimentConfig& config, const RunOptions& options = {}) {
	config.validate();
	const auto truth = config.signal.materialize();
	const fs::path dir(config.output_dir);
	fs::create_directories(dir);
	const auto journal_path = dir / "records.journal.csv";
	const auto hash = config.hash();

	std::map<CellKey, ExperimentRecord> done;
	std::vector<std::string> kept;
	if (options.resume && fs::exists(journal_path)) {
		std::ifstream in(journal_path);
		std::string line;
		std::size_t row = 0;
		while (std::getline(in, line)) {
			++row;
			if (line.empty() || line.rfind("config_hash,", 0) == 0) continue;
			try {
				auto r = parse_record_row(line, row);
				if (r.config_hash == hash && done.emplace(r.key, r).second) kept.push_back(line);
			} catch (const FormatError&) {
				// torn final line from an interrupted run
			}
		}
	}
	SimulationResult result;
	result.reused = done.size();

	std::vector<CellKey> pending;
	for (const auto& cell : grid_cells(config)) {
		if (!done.count(cell)) pending.push_back(cell);
	}

	// Rewrite the journal with only the reusable rows so a torn tail never
	// merges with the next append.
	std::ofstream journal(journal_path, std::ios::trunc);
	if (!journal) throw Error(ErrorCode::Io, "cannot write " + journal_path.string());
	journal << kRecordHeader << ",wall_time\n";
	for (const auto& line : kept) journal << line << '\n';
	journal << std::flush;

	std::mutex channel;
	std::atomic<std::size_t> cursor{0};
	const auto total = pending.size();
	std::size_t finished = 0;
	auto worker = [&] {
		for (std::size_t p = cursor++; p < total; p = cursor++) {
			const auto t0 = std::chrono::steady_clock::now();
			ExperimentRecord rec;
			try {
				rec = run_cell(config, truth, pending[p]).record;
			} catch (const std::exception& e) {
				rec.config_hash = hash;
				rec.key = pending[p];
				rec.noise = config.noise[rec.key.noise].name();
				rec.loss = config.losses[rec.key.loss].name();
				rec.ok = false;
				rec.error = e.what();
			}
			rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
			std::lock_guard lock(channel);
			journal << record_row(rec, true) << '\n' << std::flush;
			done[rec.key] = rec;
			++result.computed;
			++finished;
			if (options.progress) options.progress(rec, finished, total);
		}
	};
	const auto jobs = std::max<std::size_t>(1, std::min(options.jobs, std::max<std::size_t>(total, 1)));
	if (jobs == 1) {
		worker();
	} else {
		std::vector<std::jthread> pool;
		for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
	}
	journal.close();

	for (auto& [key, rec] : done) {
		result.failed += rec.ok ? 0 : 1;
		result.records.push_back(rec);
	}
	{
		std::ofstream out(dir / "records.csv");
		write_records_csv(out, result.records);
	}
	{
		std::ofstream out(dir / "timings.csv");
		out << "noise_index,loss_index,budget_index,trial,wall_time\n";
		for (const auto& r : result.records) {
			out << r.key.noise << ',' << r.key.loss << ',' << r.key.budget << ',' << r.key.trial << ','
				<< format_number(r.wall_time) << '\n';
		}
	}
	{
		std::ofstream out(dir / "summary.csv");
		const auto summary = summarize(result.records);
		write_summary_csv(out, summary);
	}
	{
		std::ofstream out(dir / "config.json");
		auto j = config.canonical();
		j["config_hash"] = hash;
		out << j.dump(2) << '\n';
	}
	return result;
}

// --- plot data ------------------------------------------------------------

/// mse-vs-budget series with mean and sd per (noise, loss, budget).
inline void emit_plot_data(std::span<const ExperimentRecord> records, const fs::path& dir) {
	if (records.empty()) throw Error(ErrorCode::EmptyInput, "no records to plot");
	fs::create_directories(dir);
	std::ofstream out(dir / "mse_vs_budget.csv");
	out << "noise,loss,fraction,budget,trials,mse_mean,mse_sd,rho_mean,rho_sd\n";
	for (const auto& s : summarize(records)) {
		out << s.noise << ',' << s.loss << ',' << format_number(s.fraction) << ',' << s.budget << ',' << s.mse.count
			<< ',' << format_number(s.mse.mean) << ',' << format_number(s.mse.sd) << ',' << format_number(s.rho.mean)
			<< ',' << format_number(s.rho.sd) << '\n';
	}
}

/// Embeddings aligned onto the truth, one column per labeled series:
/// t, z, y_aligned_<label>...
inline void write_overlay_csv(std::ostream& out, const Signal& truth,
	std::span<const std::pair<std::string, std::vector<double>>> series) {
	std::vector<std::vector<double>> aligned;
	out << "t,z";
	for (const auto& [label, y] : series) {
		const auto fit = affine_align_mse(y, truth);
		std::vector<double> a(y.size());
		for (std::size_t t = 0; t < y.size(); ++t) a[t] = fit.apply(y[t]);
		aligned.push_back(std::move(a));
		out << ",y_aligned_" << label;
	}
	out << '\n';
	for (std::size_t t = 0; t < truth.size(); ++t) {
		out << t + 1 << ',' << format_number(truth.values()[t]);
		for (const auto& a : aligned) out << ',' << format_number(a[t]);
		out << '\n';
	}
}

// --- fusion pipeline ------------------------------------------------------

struct FusionOptions {
	LossSpec loss = LossSpec::ste();
	SolverConfig solver{};
	std::size_t m = 1;
	/// Signal length when no truth is given; 0 infers it from the labels.
	std::size_t n = 0;
	/// Success curves for the annotators with the most labels; 0 means all.
	std::size_t top_annotators = 0;
	std::size_t num_bins = 10;
	std::string task = "task";
};

struct FusionReport {
	std::size_t n = 0;
	std::size_t total = 0;
	std::map<std::string, std::size_t> per_annotator;
	EmbeddingResult fit;
	std::optional<AffineFit> align;
	std::optional<double> rho;
	std::optional<double> tau_v_truth;
	std::map<std::string, SuccessProbabilityCurve> curves;
};

/// Every pair of labels that hit the same canonical triplet.
inline std::vector<FusionConflictError> find_conflicts(std::span<const LabeledTriplet> labels) {
	std::unordered_map<std::uint64_t, std::size_t> first;
	std::vector<FusionConflictError> out;
	for (std::size_t e = 0; e < labels.size(); ++e) {
		auto [it, fresh] = first.emplace(labels[e].query.key(), e);
		if (!fresh) out.emplace_back(labels[e].query.canonical(), labels[it->second].annotator, labels[e].annotator);
	}
	return out;
}

/// Fuses per-annotator label sets by union, fits one embedding, and writes
/// embedding.csv/embedding.json (plus evaluation tables when truth is known)
/// into `out_dir`.
inline FusionReport run_fusion_pipeline(std::span<const LabeledTriplet> raw, const std::optional<Signal>& truth,
	const FusionOptions& options, const fs::path& out_dir) {
	if (raw.empty()) throw Error(ErrorCode::EmptyInput, "label file is empty");
	FusionReport report;
	report.n = truth ? truth->size() : (options.n ? options.n : infer_length(raw));

	if (auto conflicts = find_conflicts(raw); !conflicts.empty()) throw conflicts.front();
	std::map<std::string, std::vector<LabeledTriplet>> by_annotator;
	for (const auto& l : raw) by_annotator[l.annotator].push_back(l);
	std::vector<LabeledTripletSet> sets;
	for (const auto& [id, labels] : by_annotator) sets.emplace_back(report.n, labels);
	const auto fused = fuse(sets);
	report.total = fused.size();
	report.per_annotator = fused.annotator_counts();

	report.fit = fit_embedding(fused, options.m, options.loss, options.solver);
	fs::create_directories(out_dir);
	{
		std::ofstream out(out_dir / "embedding.csv");
		write_embedding_csv(out, report.fit.y);
	}
	{
		std::ofstream out(out_dir / "embedding.json");
		auto j = embedding_sidecar(report.fit, options.loss, options.solver);
		j["per_annotator"] = report.per_annotator;
		out << j.dump(2) << '\n';
	}
	if (!truth) return report;

	const auto y = first_row(report.fit.y);
	report.align = affine_align_mse(y, *truth);
	report.rho = aligned_pearson(y, truth->values());
	report.tau_v_truth = triplet_violations(*truth, fused.labels());
	const double fraction = static_cast<double>(report.total) / static_cast<double>(triplet_universe_size(report.n));
	{
		std::ofstream out(out_dir / "results.csv");
		const ResultRow row{options.task, "triplet-" + options.loss.name(), fraction, report.align->mse, *report.rho};
		write_results_table(out, std::span(&row, 1));
	}
	{
		std::ofstream out(out_dir / "violations.csv");
		const ViolationRow row{options.task, *report.tau_v_truth, {{fraction, report.fit.violations}}};
		write_violations_table(out, std::span(&row, 1));
	}
	std::vector<std::pair<std::string, std::size_t>> ranked(report.per_annotator.begin(), report.per_annotator.end());
	std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
	if (options.top_annotators && ranked.size() > options.top_annotators) ranked.resize(options.top_annotators);
	{
		std::ofstream out(out_dir / "success_curves.csv");
		bool header = true;
		for (const auto& [id, count] : ranked) {
			const auto& labels = by_annotator[id];
			const auto bins = std::min(options.num_bins, labels.size());
			auto curve = estimate_success_probability(labels, *truth, bins);
			write_success_curve(out, id, curve, header);
			header = false;
			report.curves.emplace(id, std::move(curve));
		}
	}
	{
		std::ofstream out(out_dir / "overlay.csv");
		const std::pair<std::string, std::vector<double>> series{"fused", y};
		write_overlay_csv(out, *truth, std::span(&series, 1));
	}
	return report;
}

inline std::vector<LabeledTriplet> read_jsonl_file(const fs::path& path) {
	std::ifstream in(path);
	if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
	return read_jsonl(in);
}

/// Reads the t,y_1..y_m embedding CSV.
inline Embedding read_embedding_csv(std::istream& in) {
	std::string line;
	std::vector<std::vector<double>> rows;
	std::size_t row = 0;
	while (std::getline(in, line)) {
		++row;
		auto text = detail::trim(line);
		if (text.empty() || text.front() == 't') continue;
		std::vector<double> values;
		std::size_t start = 0;
		for (std::size_t c = 0; c <= text.size(); ++c) {
			if (c == text.size() || text[c] == ',') {
				double x = 0.0;
				if (!detail::parse_double(text.substr(start, c - start), x)) throw FormatError(row, "bad number");
				values.push_back(x);
				start = c + 1;
			}
		}
		if (values.size() < 2) throw FormatError(row, "expected t and at least one coordinate");
		if (!rows.empty() && values.size() != rows.front().size()) throw FormatError(row, "ragged row");
		rows.push_back(std::move(values));
	}
	if (rows.empty()) throw Error(ErrorCode::EmptyInput, "embedding file has no rows");
	Embedding y(static_cast<Eigen::Index>(rows.front().size() - 1), static_cast<Eigen::Index>(rows.size()));
	for (std::size_t c = 0; c < rows.size(); ++c)
		for (std::size_t r = 1; r < rows[c].size(); ++r) y(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) = rows[c][r];
	return y;
}

} // namespace tlabel
