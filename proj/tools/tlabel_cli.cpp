// Command-line front end: simulation grids, label fusion, evaluation,
// plot data and the annotation server.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 too many failed cells.

#include <tlabel/http_service.hpp>
#include <tlabel/tlabel.hpp>

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>

namespace {

using namespace tlabel;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitPartial = 4;

struct SimulateArgs {
	std::string config;
	std::optional<std::uint64_t> seed;
	std::string out;
	std::size_t jobs = 1;
	bool resume = false;
	bool quiet = false;
};

int cmd_simulate(const SimulateArgs& args) {
	auto config = parse_experiment_config(KeyValueDocument::load(args.config));
	if (args.seed) config.seed = *args.seed;
	if (!args.out.empty()) config.output_dir = args.out;
	RunOptions options;
	options.jobs = args.jobs;
	options.resume = args.resume;
	if (!args.quiet) {
		options.progress = [](const ExperimentRecord& r, std::size_t done, std::size_t total) {
			std::cerr << "[" << done << "/" << total << "] " << r.noise << ' ' << r.loss << " budget=" << r.budget
					  << " trial=" << r.key.trial;
			if (r.ok) std::cerr << " mse=" << r.mse << " rho=" << r.rho << '\n';
			else std::cerr << " FAILED " << r.error << '\n';
		};
	}
	const auto result = run_simulation(config, options);
	std::cout << "config " << config.hash() << ": " << result.records.size() << " records (" << result.computed
			  << " computed, " << result.reused << " resumed, " << result.failed << " failed) in "
			  << config.output_dir << '\n';
	return result.failure_rate() > 0.10 ? kExitPartial : 0;
}

struct FuseArgs {
	std::string labels;
	std::string truth;
	std::string loss = "ste";
	std::string out = "fusion-out";
	std::size_t n = 0;
	std::size_t m = 1;
	std::size_t restarts = 30;
	std::uint64_t seed = 0;
	std::size_t jobs = 1;
	std::size_t top_annotators = 0;
	std::size_t bins = 10;
	std::string task = "task";
};

int cmd_fuse(const FuseArgs& args) {
	const auto labels = read_jsonl_file(args.labels);
	if (auto conflicts = find_conflicts(labels); !conflicts.empty()) {
		std::cerr << conflicts.size() << " conflicting label(s):\n";
		for (const auto& c : conflicts) {
			std::cerr << "  " << c.query().to_string() << ": " << c.first_annotator() << " vs " << c.second_annotator()
					  << '\n';
		}
		return kExitData;
	}
	std::optional<Signal> truth;
	if (!args.truth.empty()) truth = load_signal(args.truth);
	FusionOptions options;
	options.loss = parse_loss_spec(args.loss);
	options.m = args.m;
	options.n = args.n;
	options.solver.restarts = args.restarts;
	options.solver.seed = args.seed;
	options.solver.jobs = args.jobs;
	options.top_annotators = args.top_annotators;
	options.num_bins = args.bins;
	options.task = args.task;
	const auto report = run_fusion_pipeline(labels, truth, options, args.out);

	nlohmann::ordered_json summary{{"n", report.n}, {"labels", report.total}, {"per_annotator", report.per_annotator},
		{"risk", report.fit.risk}, {"tau_v", report.fit.violations}};
	if (report.align) {
		summary["a"] = report.align->a;
		summary["b"] = report.align->b;
		summary["mse"] = report.align->mse;
		summary["rho"] = *report.rho;
		summary["tau_v_truth"] = *report.tau_v_truth;
	}
	std::cout << summary.dump(2) << '\n';
	return 0;
}

struct EvaluateArgs {
	std::string embedding;
	std::string truth;
	std::string labels;
	std::string out;
	std::string task = "task";
	std::string method = "triplet";
	std::size_t bins = 10;
};

int cmd_evaluate(const EvaluateArgs& args) {
	std::ifstream in(args.embedding);
	if (!in) throw Error(ErrorCode::Io, "cannot open " + args.embedding);
	const auto y = read_embedding_csv(in);
	const auto truth = load_signal(args.truth);
	if (static_cast<std::size_t>(y.cols()) != truth.size()) {
		throw Error(ErrorCode::InvalidSize, "embedding has " + std::to_string(y.cols()) + " points, truth has " +
			std::to_string(truth.size()));
	}
	const auto row = first_row(y);
	const auto fit = affine_align_mse(row, truth);
	const double rho = aligned_pearson(row, truth.values());
	nlohmann::ordered_json report{{"a", fit.a}, {"b", fit.b}, {"mse", fit.mse}, {"rho", rho}};
	std::vector<LabeledTriplet> labels;
	if (!args.labels.empty()) {
		labels = read_jsonl_file(args.labels);
		report["tau_v"] = triplet_violations(y, labels);
		report["tau_v_truth"] = triplet_violations(truth, labels);
	}
	if (!args.out.empty()) {
		fs::create_directories(args.out);
		const double fraction = labels.empty() ? 0.0
			: static_cast<double>(labels.size()) / static_cast<double>(triplet_universe_size(truth.size()));
		std::ofstream results(fs::path(args.out) / "results.csv");
		const ResultRow result{args.task, args.method, fraction, fit.mse, rho};
		write_results_table(results, std::span(&result, 1));
		if (!labels.empty()) {
			std::ofstream violations(fs::path(args.out) / "violations.csv");
			const ViolationRow v{args.task, report["tau_v_truth"].get<double>(), {{fraction, report["tau_v"].get<double>()}}};
			write_violations_table(violations, std::span(&v, 1));
			std::map<std::string, std::vector<LabeledTriplet>> by_annotator;
			for (const auto& l : labels) by_annotator[l.annotator].push_back(l);
			std::ofstream curves(fs::path(args.out) / "success_curves.csv");
			bool header = true;
			for (const auto& [id, own] : by_annotator) {
				write_success_curve(curves, id, estimate_success_probability(own, truth, std::min(args.bins, own.size())), header);
				header = false;
			}
		}
	}
	std::cout << report.dump(2) << '\n';
	return 0;
}

struct PlotArgs {
	std::string records;
	std::string truth;
	std::vector<std::string> embeddings; // label=path
	std::string out = "plot-data";
};

int cmd_plot_data(const PlotArgs& args) {
	if (args.records.empty() && args.embeddings.empty()) {
		throw Error(ErrorCode::Config, "plot-data needs --records and/or --embedding");
	}
	fs::create_directories(args.out);
	if (!args.records.empty()) {
		const auto records = read_records_csv(args.records);
		emit_plot_data(records, args.out);
	}
	if (!args.embeddings.empty()) {
		if (args.truth.empty()) throw Error(ErrorCode::Config, "--embedding overlays need --truth");
		const auto truth = load_signal(args.truth);
		std::vector<std::pair<std::string, std::vector<double>>> series;
		for (const auto& spec : args.embeddings) {
			const auto eq = spec.find('=');
			if (eq == std::string::npos) throw Error(ErrorCode::Config, "--embedding expects label=path, got " + spec);
			std::ifstream in(spec.substr(eq + 1));
			if (!in) throw Error(ErrorCode::Io, "cannot open " + spec.substr(eq + 1));
			series.emplace_back(spec.substr(0, eq), first_row(read_embedding_csv(in)));
			if (series.back().second.size() != truth.size()) throw Error(ErrorCode::InvalidSize, "embedding/truth length mismatch");
		}
		std::ofstream out(fs::path(args.out) / "overlay.csv");
		write_overlay_csv(out, truth, series);
	}
	std::cout << "wrote plot data to " << args.out << '\n';
	return 0;
}

struct ServeArgs {
	std::string config;
	std::string bind = "127.0.0.1";
	int port = 8080;
	std::string data_dir = "service-data";
	double lease_timeout = 120.0;
};

httplib::Server* g_server = nullptr;

int cmd_serve(ServeArgs args) {
	if (!args.config.empty()) {
		const auto doc = KeyValueDocument::load(args.config);
		args.bind = doc.string("serve.bind").value_or(args.bind);
		args.port = static_cast<int>(doc.number("serve.port").value_or(args.port));
		args.data_dir = doc.string("serve.data_dir").value_or(args.data_dir);
		args.lease_timeout = doc.number("serve.lease_timeout").value_or(args.lease_timeout);
	}
	ServiceOptions options;
	options.data_dir = args.data_dir;
	options.lease_timeout = Seconds(args.lease_timeout);
	AnnotationService service(options);
	httplib::Server server;
	mount_annotation_routes(server, service);
	g_server = &server;
	std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
	std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
	std::cerr << "serving on http://" << args.bind << ':' << args.port << " (data in " << args.data_dir << ")\n";
	if (!server.listen(args.bind, args.port)) {
		std::cerr << "cannot bind " << args.bind << ':' << args.port << '\n';
		return kExitConfig;
	}
	return 0;
}

struct GenSignalArgs {
	std::string kind = "task-b-like";
	std::size_t n = 178;
	std::uint64_t seed = 0;
	std::string out;
};

int cmd_gen_signal(const GenSignalArgs& args) {
	const auto signal = generate_signal(parse_signal_kind(args.kind), args.n, args.seed);
	if (args.out.empty()) {
		write_signal_csv(signal, std::cout);
	} else {
		std::ofstream out(args.out);
		write_signal_csv(signal, out);
	}
	return 0;
}

struct GenLabelsArgs {
	std::string signal;
	double fraction = 0.005;
	double sigma = 20.0;
	std::optional<double> mu;
	double eps_sd = 0.01;
	std::size_t annotators = 3;
	std::uint64_t seed = 0;
	std::string out;
};

int cmd_gen_labels(const GenLabelsArgs& args) {
	const auto truth = load_signal(args.signal);
	const auto queries = sample_triplets(truth.size(), budget_for_fraction(truth.size(), args.fraction), args.seed);
	std::vector<std::string> ids;
	for (std::size_t a = 0; a < args.annotators; ++a) ids.push_back("sim" + std::to_string(a + 1));
	const auto parts = partition_to_annotators(queries, ids);
	auto rng = make_rng(derive_seed(args.seed, {0x1abe1ULL}));
	std::vector<LabeledTriplet> labels;
	for (const auto& [id, own] : parts) {
		AnnotatorModel model{id, LogisticLink{args.sigma}};
		if (args.mu) model.link = ConstantLink{*args.mu, args.eps_sd};
		for (const auto& q : own) labels.push_back(simulate_label(model, truth, q, rng));
	}
	if (args.out.empty()) {
		write_jsonl(std::cout, labels);
	} else {
		std::ofstream out(args.out);
		write_jsonl(out, labels);
	}
	return 0;
}

int exit_code_for(const Error& e) {
	switch (e.code()) {
	case ErrorCode::Config: return kExitConfig;
	default: return kExitData;
	}
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"Triplet-comparison labeling toolkit"};
	app.require_subcommand(1);

	SimulateArgs sim;
	auto* simulate = app.add_subcommand("simulate", "run a simulation grid from a config file");
	simulate->add_option("--config", sim.config, "key/value config file")->required();
	simulate->add_option("--seed", sim.seed, "override the config seed");
	simulate->add_option("--out", sim.out, "override output_dir");
	simulate->add_option("--jobs", sim.jobs, "worker threads")->check(CLI::PositiveNumber);
	simulate->add_flag("--resume", sim.resume, "skip cells already in the journal");
	simulate->add_flag("--quiet", sim.quiet, "no per-cell progress");

	FuseArgs fuse_args;
	auto* fuse_cmd = app.add_subcommand("fuse", "fuse per-annotator labels and fit one embedding");
	fuse_cmd->add_option("--labels", fuse_args.labels, "JSON-Lines label file")->required();
	fuse_cmd->add_option("--truth", fuse_args.truth, "ground-truth signal CSV");
	fuse_cmd->add_option("--loss", fuse_args.loss, "ste[:sigma] | tste[:alpha] | gnmds | ckl[:mu]");
	fuse_cmd->add_option("--out", fuse_args.out, "output directory");
	fuse_cmd->add_option("--n", fuse_args.n, "signal length (default: from truth or labels)");
	fuse_cmd->add_option("--m", fuse_args.m, "embedding dimension");
	fuse_cmd->add_option("--restarts", fuse_args.restarts, "random restarts");
	fuse_cmd->add_option("--seed", fuse_args.seed, "solver seed");
	fuse_cmd->add_option("--jobs", fuse_args.jobs, "threads for restarts");
	fuse_cmd->add_option("--top-annotators", fuse_args.top_annotators, "success curves for the N busiest annotators");
	fuse_cmd->add_option("--bins", fuse_args.bins, "success-curve bins");
	fuse_cmd->add_option("--task", fuse_args.task, "task name for result tables");

	EvaluateArgs eval_args;
	auto* evaluate = app.add_subcommand("evaluate", "score an embedding against the ground truth");
	evaluate->add_option("--embedding", eval_args.embedding, "embedding CSV (t,y_1,...)")->required();
	evaluate->add_option("--truth", eval_args.truth, "ground-truth signal CSV")->required();
	evaluate->add_option("--labels", eval_args.labels, "JSON-Lines labels for tau_v");
	evaluate->add_option("--out", eval_args.out, "write result tables here");
	evaluate->add_option("--task", eval_args.task, "task name for result tables");
	evaluate->add_option("--method", eval_args.method, "method name for result tables");
	evaluate->add_option("--bins", eval_args.bins, "success-curve bins");

	PlotArgs plot_args;
	auto* plot = app.add_subcommand("plot-data", "write plot-ready CSVs");
	plot->add_option("--records", plot_args.records, "records.csv from simulate");
	plot->add_option("--truth", plot_args.truth, "ground-truth signal CSV for overlays");
	plot->add_option("--embedding", plot_args.embeddings, "label=embedding.csv (repeatable)");
	plot->add_option("--out", plot_args.out, "output directory");

	ServeArgs serve_args;
	auto* serve = app.add_subcommand("serve", "run the annotation HTTP service");
	serve->add_option("--config", serve_args.config, "config with [serve] bind/port/data_dir/lease_timeout");
	serve->add_option("--bind", serve_args.bind, "bind address");
	serve->add_option("--port", serve_args.port, "port");
	serve->add_option("--data-dir", serve_args.data_dir, "log directory");
	serve->add_option("--lease-timeout", serve_args.lease_timeout, "seconds");

	GenSignalArgs sig_args;
	auto* gen_signal = app.add_subcommand("gen-signal", "write a synthetic construct as CSV");
	gen_signal->add_option("--kind", sig_args.kind, "task-a-like | task-b-like | sine | custom-piecewise");
	gen_signal->add_option("--n", sig_args.n, "length");
	gen_signal->add_option("--seed", sig_args.seed, "seed");
	gen_signal->add_option("--out", sig_args.out, "output file (default stdout)");

	GenLabelsArgs lab_args;
	auto* gen_labels = app.add_subcommand("gen-labels", "simulate annotators on a signal and write JSON-Lines labels");
	gen_labels->add_option("--signal", lab_args.signal, "signal CSV")->required();
	gen_labels->add_option("--fraction", lab_args.fraction, "fraction of all triplets");
	gen_labels->add_option("--sigma", lab_args.sigma, "logistic noise scale");
	gen_labels->add_option("--mu", lab_args.mu, "constant-noise accuracy (overrides --sigma)");
	gen_labels->add_option("--eps-sd", lab_args.eps_sd, "constant-noise jitter");
	gen_labels->add_option("--annotators", lab_args.annotators, "number of simulated annotators");
	gen_labels->add_option("--seed", lab_args.seed, "seed");
	gen_labels->add_option("--out", lab_args.out, "output file (default stdout)");

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& e) {
		const int code = app.exit(e);
		return code == 0 ? 0 : kExitConfig;
	}

	try {
		if (*simulate) return cmd_simulate(sim);
		if (*fuse_cmd) return cmd_fuse(fuse_args);
		if (*evaluate) return cmd_evaluate(eval_args);
		if (*plot) return cmd_plot_data(plot_args);
		if (*serve) return cmd_serve(serve_args);
		if (*gen_signal) return cmd_gen_signal(sig_args);
		if (*gen_labels) return cmd_gen_labels(lab_args);
	} catch (const FormatError& e) {
		std::cerr << "error: " << e.what() << '\n';
		return kExitData;
	} catch (const Error& e) {
		std::cerr << "error: " << e.what() << '\n';
		return exit_code_for(e);
	} catch (const std::exception& e) {
		std::cerr << "error: " << e.what() << '\n';
		return kExitData;
	}
	return 0;
}
