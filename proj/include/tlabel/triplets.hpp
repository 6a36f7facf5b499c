/// @file  triplets.hpp
/// @brief Triplet universe, uniform sampling, simulated annotators, disjoint
///        partitioning and fusion by union.
///
/// A query (i, j, k) asks whether reference i is nearer to j (option A) or to
/// k (option B). Label w = -1 means "nearer to j", w = +1 means "nearer to k".
/// The canonical form stores j < k; the mirror (i, k, j; -w) is the same
/// labeled comparison.

#pragma once

#include <tlabel/error.hpp>
#include <tlabel/rng.hpp>
#include <tlabel/signal.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

namespace tlabel {

struct TripletQuery {
	std::uint32_t i = 0;
	std::uint32_t j = 0;
	std::uint32_t k = 0;

	bool operator==(const TripletQuery&) const = default;
	auto operator<=>(const TripletQuery&) const = default;

	bool distinct() const noexcept { return i != j && i != k && j != k; }
	bool is_canonical() const noexcept { return distinct() && j < k; }
	TripletQuery mirrored() const noexcept { return {i, k, j}; }
	TripletQuery canonical() const noexcept { return j < k ? *this : mirrored(); }

	/// Identity of the canonical element of the universe.
	std::uint64_t key() const noexcept {
		const auto c = canonical();
		return (static_cast<std::uint64_t>(c.i) << 42) | (static_cast<std::uint64_t>(c.j) << 21) | c.k;
	}

	std::string to_string() const {
		return "(" + std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(k) + ")";
	}
};

inline void check_query(const TripletQuery& q, std::size_t n) {
	if (!q.distinct()) throw Error(ErrorCode::Index, "triplet " + q.to_string() + " repeats an index");
	for (auto idx : {q.i, q.j, q.k}) {
		if (idx < 1 || idx > n) {
			throw Error(ErrorCode::Index, "triplet " + q.to_string() + " outside [1, " + std::to_string(n) + "]");
		}
	}
}

/// |T| = n * C(n-1, 2).
inline std::uint64_t triplet_universe_size(std::size_t n) {
	if (n < 3) throw Error(ErrorCode::InvalidSize, "triplets need n >= 3, got " + std::to_string(n));
	const std::uint64_t m = n;
	return m * (m - 1) * (m - 2) / 2;
}

/// Bijection between [0, |T|) and canonical queries: rank = i0 * C(n-1,2) + pair
/// rank of (j, k) among the other n-1 indices in lexicographic order.
class TripletRanker {
public:
	explicit TripletRanker(std::size_t n) : n_(n), size_(triplet_universe_size(n)) {
		const std::uint64_t others = n - 1;
		pairs_ = others * (others - 1) / 2;
		row_start_.resize(others);
		std::uint64_t acc = 0;
		for (std::uint64_t a = 0; a < others; ++a) {
			row_start_[a] = acc;
			acc += others - 1 - a;
		}
	}

	std::uint64_t size() const noexcept { return size_; }

	TripletQuery decode(std::uint64_t rank) const {
		if (rank >= size_) throw Error(ErrorCode::Index, "rank beyond universe");
		const auto i0 = static_cast<std::uint32_t>(rank / pairs_);
		const auto p = rank % pairs_;
		const auto row = std::upper_bound(row_start_.begin(), row_start_.end(), p) - row_start_.begin() - 1;
		const auto a = static_cast<std::uint32_t>(row);
		const auto b = static_cast<std::uint32_t>(a + 1 + (p - row_start_[row]));
		auto lift = [i0](std::uint32_t x) { return x < i0 ? x : x + 1; };
		return {i0 + 1, lift(a) + 1, lift(b) + 1};
	}

	std::uint64_t encode(const TripletQuery& query) const {
		check_query(query, n_);
		const auto q = query.canonical();
		const std::uint32_t i0 = q.i - 1;
		auto drop = [i0](std::uint32_t x) { return x < i0 ? x : x - 1; };
		const std::uint32_t a = drop(q.j - 1), b = drop(q.k - 1);
		return i0 * pairs_ + row_start_[a] + (b - a - 1);
	}

private:
	std::size_t n_;
	std::uint64_t size_;
	std::uint64_t pairs_ = 0;
	std::vector<std::uint64_t> row_start_;
};

/// Uniform sample of `count` distinct canonical queries without replacement
/// (Floyd's algorithm over universe ranks, then shuffled). The universe is
/// never materialized.
inline std::vector<TripletQuery> sample_triplets(std::size_t n, std::uint64_t count, std::uint64_t seed) {
	const TripletRanker ranker(n);
	const auto universe = ranker.size();
	if (count > universe) {
		throw Error(ErrorCode::BudgetExceedsUniverse,
			"requested " + std::to_string(count) + " triplets but |T| = " + std::to_string(universe));
	}
	auto rng = make_rng(derive_seed(seed, {0x7a11ULL, n, count}));
	std::unordered_set<std::uint64_t> chosen;
	chosen.reserve(static_cast<std::size_t>(count * 2));
	std::vector<std::uint64_t> ranks;
	ranks.reserve(static_cast<std::size_t>(count));
	for (std::uint64_t r = universe - count; r < universe; ++r) {
		std::uniform_int_distribution<std::uint64_t> pick(0, r);
		const auto t = pick(rng);
		const auto take = chosen.insert(t).second ? t : r;
		if (take == r) chosen.insert(r);
		ranks.push_back(take);
	}
	std::shuffle(ranks.begin(), ranks.end(), rng);
	std::vector<TripletQuery> out;
	out.reserve(ranks.size());
	for (auto r : ranks) out.push_back(ranker.decode(r));
	return out;
}

/// round(K n ln n), clamped to [1, |T|].
inline std::uint64_t triplet_budget(std::size_t n, double k_factor) {
	const auto universe = triplet_universe_size(n);
	const double raw = std::round(k_factor * static_cast<double>(n) * std::log(static_cast<double>(n)));
	if (!(raw >= 1.0)) return 1;
	if (raw >= static_cast<double>(universe)) return universe;
	return static_cast<std::uint64_t>(raw);
}

/// floor(fraction * |T|), at least 1. Matches the published counts
/// (0.5% of 2,772,528 -> 13,862; 0.25% of 9,410,415 -> 23,526).
inline std::uint64_t budget_for_fraction(std::size_t n, double fraction) {
	if (!(fraction > 0.0 && fraction <= 1.0)) {
		throw Error(ErrorCode::Domain, "fraction must lie in (0, 1]");
	}
	const auto universe = triplet_universe_size(n);
	const auto raw = static_cast<std::uint64_t>(std::floor(fraction * static_cast<double>(universe) + 1e-9));
	return std::clamp<std::uint64_t>(raw, 1, universe);
}

// --- labels ---------------------------------------------------------------

enum class LabelSource { Simulated, Human };

inline std::string_view to_string(LabelSource s) { return s == LabelSource::Human ? "human" : "simulated"; }

struct LabeledTriplet {
	TripletQuery query;
	int w = -1;
	std::string annotator;
	LabelSource source = LabelSource::Simulated;

	bool operator==(const LabeledTriplet&) const = default;

	/// Same comparison with j < k.
	LabeledTriplet normalized() const {
		if (query.j < query.k) return *this;
		return {query.mirrored(), -w, annotator, source};
	}

	std::uint32_t nearer() const noexcept { return w < 0 ? query.j : query.k; }
	std::uint32_t farther() const noexcept { return w < 0 ? query.k : query.j; }
};

struct ConstantLink {
	double mu = 0.9;
	double eps_sd = 0.01;
};

struct LogisticLink {
	double sigma = 20.0;
};

struct AnnotatorModel {
	std::string id;
	std::variant<ConstantLink, LogisticLink> link;

	void validate() const {
		if (const auto* c = std::get_if<ConstantLink>(&link)) {
			if (!(c->mu > 0.5 && c->mu <= 1.0)) throw Error(ErrorCode::Domain, "constant link needs mu in (0.5, 1]");
			if (!(c->eps_sd >= 0.0)) throw Error(ErrorCode::Domain, "constant link needs eps_sd >= 0");
		} else if (!(std::get<LogisticLink>(link).sigma > 0.0)) {
			throw Error(ErrorCode::Domain, "logistic link needs sigma > 0");
		}
	}
};

inline double logistic(double x) {
	return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

struct SimulatedLabel {
	LabeledTriplet label;
	/// Probability with which this triplet was labeled consistently with the truth.
	double p_correct;
};

/// Draws w for `query` as given (no canonicalization, so mirrors stay mirrors).
inline SimulatedLabel simulate_label_detailed(const AnnotatorModel& model, const Signal& signal,
	const TripletQuery& query, Rng& rng) {
	check_query(query, signal.size());
	const double gap = dissimilarity(signal, query.i, query.k) - dissimilarity(signal, query.i, query.j);
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	SimulatedLabel out{{query, -1, model.id, LabelSource::Simulated}, 0.5};
	if (const auto* logit = std::get_if<LogisticLink>(&model.link)) {
		const double p_minus = logistic(logit->sigma * gap);
		out.label.w = unit(rng) < p_minus ? -1 : +1;
		out.p_correct = logistic(logit->sigma * std::abs(gap));
		return out;
	}
	const auto& c = std::get<ConstantLink>(model.link);
	double eps = 0.0;
	if (c.eps_sd > 0.0) eps = std::normal_distribution<double>(0.0, c.eps_sd)(rng);
	const double u = unit(rng);
	if (gap == 0.0) {
		out.label.w = u < 0.5 ? -1 : +1;
		return out;
	}
	out.p_correct = std::clamp(c.mu + eps, 0.0, 1.0);
	const int truth = gap > 0.0 ? -1 : +1;
	out.label.w = u < out.p_correct ? truth : -truth;
	return out;
}

inline LabeledTriplet simulate_label(const AnnotatorModel& model, const Signal& signal,
	const TripletQuery& query, Rng& rng) {
	return simulate_label_detailed(model, signal, query, rng).label;
}

/// Round-robin assignment: query q goes to annotator_ids[q mod A].
inline std::map<std::string, std::vector<TripletQuery>> partition_to_annotators(
	std::span<const TripletQuery> queries, std::span<const std::string> annotator_ids) {
	if (annotator_ids.empty()) throw Error(ErrorCode::EmptyInput, "need at least one annotator");
	std::map<std::string, std::vector<TripletQuery>> parts;
	for (const auto& id : annotator_ids) {
		if (!parts.emplace(id, std::vector<TripletQuery>{}).second) {
			throw Error(ErrorCode::DuplicateQuery, "annotator '" + id + "' listed twice");
		}
	}
	std::unordered_set<std::uint64_t> seen;
	seen.reserve(queries.size() * 2);
	for (std::size_t q = 0; q < queries.size(); ++q) {
		if (!seen.insert(queries[q].key()).second) {
			throw Error(ErrorCode::DuplicateQuery, "query " + queries[q].to_string() + " appears twice");
		}
		parts[annotator_ids[q % annotator_ids.size()]].push_back(queries[q]);
	}
	return parts;
}

class FusionConflictError : public Error {
public:
	FusionConflictError(TripletQuery query, std::string first, std::string second)
		: Error(ErrorCode::FusionConflict,
			  "triplet " + query.to_string() + " labeled by both '" + first + "' and '" + second + "'"),
		  query_(query), first_(std::move(first)), second_(std::move(second)) {}

	const TripletQuery& query() const noexcept { return query_; }
	const std::string& first_annotator() const noexcept { return first_; }
	const std::string& second_annotator() const noexcept { return second_; }

private:
	TripletQuery query_;
	std::string first_;
	std::string second_;
};

/// Labeled comparisons over a signal of length n, each canonical query at most once.
class LabeledTripletSet {
public:
	explicit LabeledTripletSet(std::size_t n) : n_(n) {
		if (n < 3) throw Error(ErrorCode::InvalidSize, "label set needs n >= 3");
	}

	LabeledTripletSet(std::size_t n, std::span<const LabeledTriplet> labels) : LabeledTripletSet(n) {
		for (const auto& l : labels) add(l);
	}

	/// Stores the normalized label; throws FusionConflictError on a repeated query.
	void add(const LabeledTriplet& label) {
		check_query(label.query, n_);
		if (label.w != -1 && label.w != 1) throw Error(ErrorCode::Domain, "label w must be -1 or +1");
		auto normal = label.normalized();
		auto [it, fresh] = index_.emplace(normal.query.key(), labels_.size());
		if (!fresh) {
			throw FusionConflictError(normal.query, labels_[it->second].annotator, normal.annotator);
		}
		labels_.push_back(std::move(normal));
	}

	std::size_t n() const noexcept { return n_; }
	std::size_t size() const noexcept { return labels_.size(); }
	bool empty() const noexcept { return labels_.empty(); }
	std::span<const LabeledTriplet> labels() const noexcept { return labels_; }
	bool contains(const TripletQuery& q) const { return index_.count(q.key()) != 0; }

	std::map<std::string, std::size_t> annotator_counts() const {
		std::map<std::string, std::size_t> counts;
		for (const auto& l : labels_) ++counts[l.annotator];
		return counts;
	}

private:
	std::size_t n_;
	std::vector<LabeledTriplet> labels_;
	std::unordered_map<std::uint64_t, std::size_t> index_;
};

/// Union of pairwise-disjoint labeled sets.
inline LabeledTripletSet fuse(std::span<const LabeledTripletSet> sets) {
	if (sets.empty()) throw Error(ErrorCode::EmptyInput, "nothing to fuse");
	LabeledTripletSet out(sets.front().n());
	for (const auto& s : sets) {
		if (s.n() != out.n()) {
			throw Error(ErrorCode::InvalidSize, "cannot fuse sets over n=" + std::to_string(out.n()) +
				" and n=" + std::to_string(s.n()));
		}
		for (const auto& l : s.labels()) out.add(l);
	}
	return out;
}

// --- JSON Lines interchange ---------------------------------------------

inline LabeledTriplet labeled_triplet_from_json(const nlohmann::json& j) {
	LabeledTriplet l;
	l.query = {j.at("i").get<std::uint32_t>(), j.at("j").get<std::uint32_t>(), j.at("k").get<std::uint32_t>()};
	l.w = j.at("w").get<int>();
	if (l.w != -1 && l.w != 1) throw Error(ErrorCode::Domain, "w must be -1 or 1");
	l.annotator = j.at("annotator").get<std::string>();
	const auto source = j.value("source", std::string("simulated"));
	if (source == "human") l.source = LabelSource::Human;
	else if (source == "simulated") l.source = LabelSource::Simulated;
	else throw Error(ErrorCode::Domain, "unknown source '" + source + "'");
	if (!l.query.distinct()) throw Error(ErrorCode::Index, "triplet repeats an index");
	return l;
}

inline std::string to_jsonl_line(const LabeledTriplet& l) {
	nlohmann::ordered_json j{{"i", l.query.i}, {"j", l.query.j}, {"k", l.query.k}, {"w", l.w},
		{"annotator", l.annotator}, {"source", to_string(l.source)}};
	return j.dump();
}

inline void write_jsonl(std::ostream& out, std::span<const LabeledTriplet> labels) {
	for (const auto& l : labels) out << to_jsonl_line(l) << '\n';
}

/// Parses the interchange format; errors carry the 1-based line number.
inline std::vector<LabeledTriplet> read_jsonl(std::istream& in) {
	std::vector<LabeledTriplet> out;
	std::string line;
	std::size_t row = 0;
	while (std::getline(in, line)) {
		++row;
		if (detail::trim(line).empty()) continue;
		try {
			out.push_back(labeled_triplet_from_json(nlohmann::json::parse(line)));
		} catch (const nlohmann::json::exception& e) {
			throw FormatError(row, e.what());
		} catch (const Error& e) {
			throw FormatError(row, e.what());
		}
	}
	return out;
}

/// Largest index mentioned, i.e. the smallest n the labels fit in.
inline std::size_t infer_length(std::span<const LabeledTriplet> labels) {
	std::uint32_t n = 0;
	for (const auto& l : labels) n = std::max({n, l.query.i, l.query.j, l.query.k});
	return n;
}

} // namespace tlabel
