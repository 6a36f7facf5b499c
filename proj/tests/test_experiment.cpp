#include "support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace tlabel;
using namespace tlabel::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
	auto dir = fs::temp_directory_path() / ("tlabel-test-" + name);
	fs::remove_all(dir);
	fs::create_directories(dir);
	return dir;
}

std::string slurp(const fs::path& p) {
	std::ifstream in(p);
	std::stringstream s;
	s << in.rdbuf();
	return s.str();
}

ExperimentConfig smoke_config(const fs::path& out) {
	auto c = parse_experiment_config(KeyValueDocument::parse(R"(
seed = 4
trials = 3
restarts = 2
losses = ["ste"]
output_dir = ")" + out.string() + R"("

[signal]
kind = "task-b-like"
n = 60
seed = 1

[noise]
kind = "logistic"
sigma = [20]

[budget]
fractions = [0.01]
)"));
	return c;
}

int run_cli(const std::string& args) {
	const std::string cmd = std::string(TLABEL_CLI) + " " + args + " >/dev/null 2>&1";
	const int status = std::system(cmd.c_str());
	return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(KeyValueDocument, ParsesSectionsListsAndComments) {
	const auto doc = KeyValueDocument::parse(R"(
# comment
name = "a # not a comment"
count = 3   # trailing
flag = true
[grid]
values = [0.5, 1e-3, 2]
words = ["x", "y,z"]
)");
	EXPECT_EQ(doc.string("name"), "a # not a comment");
	EXPECT_EQ(doc.number("count"), 3.0);
	EXPECT_EQ(doc.boolean("flag"), true);
	EXPECT_EQ(doc.numbers("grid.values"), (std::vector<double>{0.5, 1e-3, 2}));
	EXPECT_EQ(doc.strings("grid.words"), (std::vector<std::string>{"x", "y,z"}));
	EXPECT_EQ(doc.numbers("count"), (std::vector<double>{3}));
	EXPECT_FALSE(doc.has("missing"));
	EXPECT_THROW(doc.number("name"), Error);
	EXPECT_THROW(doc.string("grid.values"), Error);
	EXPECT_THROW(KeyValueDocument::parse("a = 1\na = 2\n"), Error);
	EXPECT_THROW(KeyValueDocument::parse("[open\n"), Error);
	EXPECT_THROW(KeyValueDocument::parse("novalue\n"), Error);
}

TEST(ExperimentConfig, DefaultsAndValidation) {
	const auto c = parse_experiment_config(KeyValueDocument::parse("[signal]\nkind = \"sine\"\n"));
	EXPECT_EQ(c.trials, 30u);
	EXPECT_EQ(c.solver.restarts, 30u);
	ASSERT_EQ(c.budgets.size(), 8u);
	EXPECT_DOUBLE_EQ(c.budgets.front(), 0.0005);
	EXPECT_DOUBLE_EQ(c.budgets.back(), 0.1077);
	for (std::size_t b = 1; b < 8; ++b) {
		EXPECT_NEAR(std::log(c.budgets[b] / c.budgets[b - 1]), std::log(0.1077 / 0.0005) / 7.0, 1e-12);
	}
	EXPECT_EQ(c.losses, std::vector<LossSpec>{LossSpec::ste()});

	auto config_error = [](const std::string& text) {
		try {
			parse_experiment_config(KeyValueDocument::parse(text));
		} catch (const Error& e) {
			return e.code() == ErrorCode::Config;
		}
		return false;
	};
	EXPECT_TRUE(config_error("trials = 3\n"));                                     // no signal
	EXPECT_TRUE(config_error("[signal]\nkind=\"sine\"\n[budget]\nfractions=[0]\n")); // fraction out of range
	EXPECT_TRUE(config_error("[signal]\nkind=\"sine\"\n[budget]\nfractions=[1.5]\n"));
	EXPECT_TRUE(config_error("trials = 0\n[signal]\nkind=\"sine\"\n"));
	EXPECT_TRUE(config_error("[signal]\nkind=\"sine\"\ntrials = 3\n")); // lands in [signal]: unknown key
	EXPECT_TRUE(config_error("losses = [\"svm\"]\n[signal]\nkind=\"sine\"\n"));
	EXPECT_TRUE(config_error("[signal]\nkind=\"sine\"\n[noise]\nkind=\"gaussian\"\n"));
}

TEST(ExperimentConfig, NoiseAndBudgetAxes) {
	const auto c = parse_experiment_config(KeyValueDocument::parse(R"(
losses = ["ste", "tste:2", "gnmds", "ckl:10"]
[signal]
kind = "task-a-like"
n = 100
[noise]
kind = "constant"
mu = [0.7, 0.8, 0.9]
eps_sd = 0.01
[budget]
k = [15, 31.5]
)"));
	EXPECT_EQ(c.noise.size(), 3u);
	EXPECT_EQ(c.noise[1].name(), "constant:0.8");
	EXPECT_EQ(c.budget_mode, BudgetMode::KFactor);
	EXPECT_EQ(c.budget_count(100, 0), triplet_budget(100, 15));
	EXPECT_EQ(c.losses.size(), 4u);
	EXPECT_EQ(grid_cells(c).size(), 3u * 4u * 2u * 30u);
}

TEST(ExperimentConfig, HashTracksResultsNotPaths) {
	const auto a = smoke_config("/tmp/x");
	auto b = smoke_config("/tmp/y");
	EXPECT_EQ(a.hash(), b.hash());
	b.seed = 5;
	EXPECT_NE(a.hash(), b.hash());
	b = smoke_config("/tmp/y");
	b.trials = 4;
	EXPECT_NE(a.hash(), b.hash());
}

TEST(Simulation, SmokeGridDeterministicAndResumable) {
	const auto dir = scratch("sim");
	auto config = smoke_config(dir / "a");
	const auto first = run_simulation(config);
	ASSERT_EQ(first.records.size(), 3u);
	EXPECT_EQ(first.failed, 0u);
	for (const auto& r : first.records) {
		EXPECT_TRUE(r.ok);
		EXPECT_EQ(r.budget, budget_for_fraction(60, 0.01));
		EXPECT_GT(r.rho, 0.9);
		EXPECT_GE(r.tau_v, 0.0);
		EXPECT_GT(r.risk, 0.0);
	}
	const auto records_a = slurp(dir / "a" / "records.csv");

	config.output_dir = (dir / "b").string();
	RunOptions parallel;
	parallel.jobs = 3;
	run_simulation(config, parallel);
	EXPECT_EQ(slurp(dir / "b" / "records.csv"), records_a);

	// Keep the header and one journal row, then resume.
	const auto journal = dir / "b" / "records.journal.csv";
	std::istringstream lines(slurp(journal));
	std::string header, row;
	std::getline(lines, header);
	std::getline(lines, row);
	{
		std::ofstream out(journal, std::ios::trunc);
		out << header << '\n' << row << '\n' << row.substr(0, row.size() / 2); // torn tail
	}
	RunOptions resume;
	resume.resume = true;
	const auto resumed = run_simulation(config, resume);
	EXPECT_EQ(resumed.reused, 1u);
	EXPECT_EQ(resumed.computed, 2u);
	EXPECT_EQ(slurp(dir / "b" / "records.csv"), records_a);

	const auto again = run_simulation(config, resume);
	EXPECT_EQ(again.computed, 0u);
	EXPECT_EQ(slurp(dir / "b" / "records.csv"), records_a);

	const auto summary = slurp(dir / "a" / "summary.csv");
	EXPECT_NE(summary.find("mse_mean,mse_sd"), std::string::npos);
	EXPECT_TRUE(fs::exists(dir / "a" / "timings.csv"));
	EXPECT_TRUE(fs::exists(dir / "a" / "config.json"));
}

TEST(Simulation, SameDataAcrossLosses) {
	auto config = smoke_config(scratch("sim-losses"));
	config.losses = {LossSpec::ste(), LossSpec::gnmds_hinge()};
	config.trials = 1;
	const auto truth = config.signal.materialize();
	const auto ste = run_cell(config, truth, {0, 0, 0, 0}).record;
	const auto hinge = run_cell(config, truth, {0, 1, 0, 0}).record;
	EXPECT_EQ(ste.tau_v_truth, hinge.tau_v_truth); // same labels
	EXPECT_NE(ste.cell_seed, hinge.cell_seed);
}

TEST(Simulation, FailedCellsAreRecorded) {
	const auto dir = scratch("sim-fail");
	{
		std::ofstream flat(dir / "flat.csv");
		flat << "0.5\n0.5\n0.5\n0.5\n0.5\n0.5\n";
	}
	auto config = smoke_config(dir / "out");
	config.signal.path = (dir / "flat.csv").string();
	config.budgets = {0.5};
	const auto result = run_simulation(config);
	EXPECT_EQ(result.records.size(), 3u);
	EXPECT_EQ(result.failed, 3u);
	EXPECT_GT(result.failure_rate(), 0.10);
	for (const auto& r : result.records) {
		EXPECT_FALSE(r.ok);
		EXPECT_NE(r.error.find("undefined-correlation"), std::string::npos);
	}
	const auto back = read_records_csv(dir / "out" / "records.csv");
	ASSERT_EQ(back.size(), 3u);
	EXPECT_FALSE(back[0].ok);
}

TEST(Records, CsvRoundTrip) {
	ExperimentRecord r;
	r.config_hash = "abc";
	r.key = {1, 2, 3, 4};
	r.noise = "logistic:20";
	r.loss = "tste:2";
	r.fraction = 0.005;
	r.budget = 13862;
	r.cell_seed = 99;
	r.mse = 0.25;
	r.rho = 0.9;
	r.tau_v = 0.1;
	r.tau_v_truth = 0.11;
	r.risk = 0.3;
	std::stringstream io;
	write_records_csv(io, std::span(&r, 1));
	const auto back = read_records_csv(io);
	ASSERT_EQ(back.size(), 1u);
	EXPECT_EQ(back[0].key, r.key);
	EXPECT_EQ(back[0].mse, r.mse);
	EXPECT_EQ(back[0].loss, r.loss);
	EXPECT_EQ(back[0].cell_seed, r.cell_seed);
	EXPECT_TRUE(back[0].ok);
	std::istringstream bad("config_hash,x\nabc,1,2\n");
	EXPECT_THROW(read_records_csv(bad), FormatError);
}

TEST(PlotData, MeanAndSdMatchHandComputation) {
	// mse 1..5 -> mean 3, sample sd sqrt(2.5); rho 0.5, 0.6, 0.7, 0.8, 0.9 -> 0.7, sqrt(0.025)
	std::vector<ExperimentRecord> records(5);
	for (std::size_t t = 0; t < 5; ++t) {
		records[t].key = {0, 0, 0, t};
		records[t].noise = "logistic:20";
		records[t].loss = "ste:0.7071067811865476";
		records[t].fraction = 0.01;
		records[t].budget = 100;
		records[t].mse = static_cast<double>(t + 1);
		records[t].rho = 0.5 + 0.1 * static_cast<double>(t);
	}
	const auto dir = scratch("plot");
	emit_plot_data(records, dir);
	std::ifstream in(dir / "mse_vs_budget.csv");
	std::string header, row, extra;
	std::getline(in, header);
	std::getline(in, row);
	EXPECT_FALSE(std::getline(in, extra));
	EXPECT_EQ(header, "noise,loss,fraction,budget,trials,mse_mean,mse_sd,rho_mean,rho_sd");
	std::vector<std::string> f;
	std::stringstream cells(row);
	for (std::string c; std::getline(cells, c, ',');) f.push_back(c);
	ASSERT_EQ(f.size(), 9u);
	EXPECT_EQ(f[4], "5");
	EXPECT_NEAR(std::stod(f[5]), 3.0, 1e-12);
	EXPECT_NEAR(std::stod(f[6]), 1.5811388300841898, 1e-12);
	EXPECT_NEAR(std::stod(f[7]), 0.7, 1e-12);
	EXPECT_NEAR(std::stod(f[8]), 0.15811388300841898, 1e-12);

	const auto single = scratch("plot-one");
	emit_plot_data(std::span(records).first(1), single);
	std::ifstream one(single / "mse_vs_budget.csv");
	std::size_t lines = 0;
	for (std::string l; std::getline(one, l);) ++lines;
	EXPECT_EQ(lines, 2u);
	EXPECT_THROW(emit_plot_data(std::span<const ExperimentRecord>{}, single), Error);
}

TEST(PlotData, OverlayColumns) {
	const Signal z("z", {0.1, 0.5, 0.9, 0.3});
	const std::vector<std::pair<std::string, std::vector<double>>> series{
		{"025", {-1.0, 1.0, 3.0, 0.0}}, {"050", {9.0, 5.0, 1.0, 7.0}}};
	std::ostringstream out;
	write_overlay_csv(out, z, series);
	std::istringstream in(out.str());
	std::string header, first;
	std::getline(in, header);
	std::getline(in, first);
	EXPECT_EQ(header, "t,z,y_aligned_025,y_aligned_050");
	// both series are exact affine images of z
	std::istringstream cells(first);
	std::string cell;
	std::vector<double> values;
	while (std::getline(cells, cell, ',')) values.push_back(std::stod(cell));
	ASSERT_EQ(values.size(), 4u);
	EXPECT_EQ(values[0], 1.0);
	for (std::size_t c = 1; c < 4; ++c) EXPECT_NEAR(values[c], 0.1, 1e-12);
}

TEST(Fusion, ThreeAnnotatorPipeline) {
	const auto dir = scratch("fusion");
	const auto z = generate_signal(SignalKind::TaskBLike, 178, 2);
	const auto queries = sample_triplets(178, budget_for_fraction(178, 0.005), 3);
	const std::vector<std::string> ids{"a1", "a2", "a3"};
	Rng rng(1);
	std::vector<LabeledTriplet> labels;
	for (const auto& [id, qs] : partition_to_annotators(queries, ids))
		for (const auto& q : qs) labels.push_back(simulate_label({id, LogisticLink{20}}, z, q, rng));
	FusionOptions options;
	options.solver.restarts = 2;
	options.top_annotators = 2;
	const auto report = run_fusion_pipeline(labels, z, options, dir);
	EXPECT_EQ(report.total, 13862u);
	EXPECT_EQ(report.per_annotator.size(), 3u);
	std::size_t sum = 0;
	for (const auto& [id, c] : report.per_annotator) sum += c;
	EXPECT_EQ(sum, report.total);
	EXPECT_GE(*report.rho, 0.9);
	EXPECT_EQ(report.curves.size(), 2u);
	for (const char* f : {"embedding.csv", "embedding.json", "results.csv", "violations.csv", "success_curves.csv",
			 "overlay.csv"}) {
		EXPECT_TRUE(fs::exists(dir / f)) << f;
	}
	std::ifstream in(dir / "embedding.csv");
	const auto y = read_embedding_csv(in);
	EXPECT_EQ(y.cols(), 178);
	EXPECT_TRUE(y.isApprox(report.fit.y, 1e-12));

	// without truth only the embedding is written
	const auto bare = scratch("fusion-bare");
	const auto no_truth = run_fusion_pipeline(labels, std::nullopt, options, bare);
	EXPECT_FALSE(no_truth.rho.has_value());
	EXPECT_TRUE(fs::exists(bare / "embedding.csv"));
	EXPECT_FALSE(fs::exists(bare / "results.csv"));
}

TEST(Fusion, ConflictNamesTheTriplet) {
	std::vector<LabeledTriplet> labels{{{1, 2, 3}, -1, "a", LabelSource::Human}, {{2, 1, 3}, 1, "a", LabelSource::Human},
		{{1, 3, 2}, 1, "b", LabelSource::Human}};
	const auto conflicts = find_conflicts(labels);
	ASSERT_EQ(conflicts.size(), 1u);
	EXPECT_EQ(conflicts[0].query(), (TripletQuery{1, 2, 3}));
	EXPECT_EQ(conflicts[0].second_annotator(), "b");
	EXPECT_THROW(run_fusion_pipeline(labels, std::nullopt, {}, scratch("fusion-conflict")), FusionConflictError);
}

TEST(Cli, ExitCodes) {
	const auto dir = scratch("cli");
	const auto d = dir.string();
	ASSERT_EQ(run_cli("gen-signal --kind task-b-like --n 40 --seed 2 --out " + d + "/z.csv"), 0);
	ASSERT_EQ(run_cli("gen-labels --signal " + d + "/z.csv --fraction 0.05 --annotators 3 --out " + d + "/l.jsonl"), 0);
	EXPECT_EQ(run_cli("fuse --labels " + d + "/l.jsonl --truth " + d + "/z.csv --restarts 2 --out " + d + "/f"), 0);
	EXPECT_TRUE(fs::exists(dir / "f" / "embedding.csv"));
	EXPECT_EQ(run_cli("evaluate --embedding " + d + "/f/embedding.csv --truth " + d + "/z.csv --labels " + d +
				  "/l.jsonl --out " + d + "/e"),
		0);
	EXPECT_TRUE(fs::exists(dir / "e" / "results.csv"));
	EXPECT_EQ(run_cli("plot-data --truth " + d + "/z.csv --embedding fused=" + d + "/f/embedding.csv --out " + d + "/p"), 0);
	EXPECT_TRUE(fs::exists(dir / "p" / "overlay.csv"));

	{
		std::ofstream dup(dir / "dup.jsonl");
		dup << R"({"i":1,"j":2,"k":3,"w":-1,"annotator":"a","source":"human"})" << '\n'
			<< R"({"i":1,"j":3,"k":2,"w":1,"annotator":"b","source":"human"})" << '\n';
		std::ofstream bad(dir / "bad.jsonl");
		bad << R"({"i":1,"j":2,"k":3,"w":-1,"annotator":"a"})" << "\nnot json\n";
		std::ofstream cfg(dir / "bad.toml");
		cfg << "trials = 2\n";
		std::ofstream flat(dir / "flat.csv");
		flat << "0.5\n0.5\n0.5\n0.5\n";
		std::ofstream fail(dir / "fail.toml");
		fail << "trials = 2\nrestarts = 1\n[signal]\npath = \"" << d << "/flat.csv\"\n[budget]\nfractions = [0.5]\n";
		std::ofstream ok(dir / "ok.toml");
		ok << "trials = 2\nrestarts = 1\n[signal]\nkind = \"sine\"\nn = 20\n[budget]\nfractions = [0.05]\n";
	}
	EXPECT_EQ(run_cli("fuse --labels " + d + "/dup.jsonl --out " + d + "/g"), 3);
	EXPECT_EQ(run_cli("fuse --labels " + d + "/bad.jsonl --out " + d + "/g"), 3);
	EXPECT_EQ(run_cli("simulate --config " + d + "/bad.toml"), 2);
	EXPECT_EQ(run_cli("simulate --config " + d + "/missing.toml"), 2);
	EXPECT_EQ(run_cli("simulate --quiet --config " + d + "/fail.toml --out " + d + "/sf"), 4);
	EXPECT_EQ(run_cli("simulate --quiet --config " + d + "/ok.toml --out " + d + "/so --jobs 2"), 0);
	EXPECT_EQ(run_cli("simulate --quiet --config " + d + "/ok.toml --out " + d + "/so --resume"), 0);
	EXPECT_EQ(run_cli("plot-data --records " + d + "/so/records.csv --out " + d + "/sp"), 0);
	EXPECT_TRUE(fs::exists(dir / "sp" / "mse_vs_budget.csv"));
	EXPECT_EQ(run_cli("no-such-verb"), 2);
}
