/// @file  service.hpp
/// @brief Annotation task store: leases queries to annotators, records
///        answers durably and exports them as labeled triplets.
///
/// State lives in one append-only JSON-Lines log (`<data_dir>/log.jsonl`).
/// A task entry carries its full query pool, a response entry one answer.
/// Every append is fsync'ed before the caller is acknowledged; startup replays
/// the log. Leases are in-memory only, so a restart frees all of them.

#pragma once

#include <tlabel/error.hpp>
#include <tlabel/signal.hpp>
#include <tlabel/triplets.hpp>

#include <json.hpp>

#include <chrono>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unistd.h>
#include <unordered_map>
#include <vector>

namespace tlabel {

using ServiceClock = std::chrono::steady_clock;
using Seconds = std::chrono::duration<double>;

enum class Choice { A, B };

/// A: the reference is nearer to option A (index j), w = -1. B: w = +1.
inline int choice_to_w(Choice c) noexcept { return c == Choice::A ? -1 : +1; }

inline std::string_view to_string(Choice c) { return c == Choice::A ? "A" : "B"; }

inline Choice parse_choice(std::string_view text) {
	if (text == "A" || text == "a") return Choice::A;
	if (text == "B" || text == "b") return Choice::B;
	throw Error(ErrorCode::Domain, "choice must be 'A' or 'B', got '" + std::string(text) + "'");
}

struct ResponseRecord {
	std::string task_id;
	TripletQuery query;
	std::string annotator;
	Choice choice = Choice::A;
	std::int64_t submitted_at_ms = 0; // unix epoch
	std::int64_t latency_ms = 0;

	LabeledTriplet label() const { return {query, choice_to_w(choice), annotator, LabelSource::Human}; }
};

struct ServiceOptions {
	std::filesystem::path data_dir = "service-data";
	Seconds lease_timeout{120.0};
	Seconds grace{30.0};
	/// Monotonic time source; tests inject a fake one.
	std::function<ServiceClock::time_point()> clock = [] { return ServiceClock::now(); };
};

struct CreateTaskRequest {
	/// Empty asks the service to pick one.
	std::string task_id;
	StimulusManifest manifest;
	std::uint64_t budget = 0;
	std::uint64_t seed = 0;
	std::optional<Seconds> lease_timeout;
};

struct StimulusRef {
	std::size_t time_index = 0;
	std::string asset_id;
	Rgb color;
};

struct Lease {
	TripletQuery query;
	StimulusRef reference, option_a, option_b;
	Seconds expires_in{0.0};
};

struct TaskProgress {
	std::size_t total = 0;
	std::size_t answered = 0;
	std::size_t leased = 0;
	std::map<std::string, std::size_t> per_annotator;
};

/// Result of next_query: either a lease or no work. `exhausted` separates
/// "every query answered" from "everything left is leased to someone else".
struct Deal {
	std::optional<Lease> lease;
	bool exhausted = false;
	TaskProgress progress;
};

struct SubmitAck {
	ResponseRecord record;
	int w = 0;
	/// True when this repeated an already stored answer.
	bool duplicate = false;
};

struct TaskExport {
	std::vector<LabeledTriplet> labels;
	nlohmann::ordered_json summary;
};

namespace detail {

/// Single-writer append-only log with fsync per record.
class DurableLog {
public:
	explicit DurableLog(const std::filesystem::path& path) : path_(path) {
		fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
		if (fd_ < 0) throw Error(ErrorCode::Io, "cannot open log " + path.string());
	}
	DurableLog(const DurableLog&) = delete;
	DurableLog& operator=(const DurableLog&) = delete;
	~DurableLog() {
		if (fd_ >= 0) ::close(fd_);
	}

	void append(const std::string& line) {
		std::lock_guard lock(mutex_);
		std::string buf = line + '\n';
		const char* p = buf.data();
		std::size_t left = buf.size();
		while (left > 0) {
			const auto wrote = ::write(fd_, p, left);
			if (wrote < 0) {
				if (errno == EINTR) continue;
				throw Error(ErrorCode::Io, "log write failed");
			}
			p += wrote;
			left -= static_cast<std::size_t>(wrote);
		}
		if (::fsync(fd_) != 0) throw Error(ErrorCode::Io, "log fsync failed");
	}

private:
	std::filesystem::path path_;
	int fd_ = -1;
	std::mutex mutex_;
};

inline nlohmann::json query_json(const TripletQuery& q) { return {{"i", q.i}, {"j", q.j}, {"k", q.k}}; }

inline TripletQuery query_from_json(const nlohmann::json& j) {
	if (j.is_array()) return {j.at(0).get<std::uint32_t>(), j.at(1).get<std::uint32_t>(), j.at(2).get<std::uint32_t>()};
	return {j.at("i").get<std::uint32_t>(), j.at("j").get<std::uint32_t>(), j.at("k").get<std::uint32_t>()};
}

inline std::string response_line(const ResponseRecord& r) {
	nlohmann::ordered_json j{{"type", "response"}, {"task_id", r.task_id}, {"i", r.query.i}, {"j", r.query.j},
		{"k", r.query.k}, {"annotator", r.annotator}, {"choice", to_string(r.choice)}, {"w", choice_to_w(r.choice)},
		{"submitted_at_ms", r.submitted_at_ms}, {"latency_ms", r.latency_ms}};
	return j.dump();
}

inline ResponseRecord response_from_json(const nlohmann::json& j) {
	ResponseRecord r;
	r.task_id = j.at("task_id").get<std::string>();
	r.query = query_from_json(j);
	r.annotator = j.at("annotator").get<std::string>();
	r.choice = parse_choice(j.at("choice").get<std::string>());
	r.submitted_at_ms = j.value("submitted_at_ms", std::int64_t{0});
	r.latency_ms = j.value("latency_ms", std::int64_t{0});
	return r;
}

/// Complete log lines; a torn trailing line (no newline or bad JSON at the
/// very end) is dropped and its offset reported so it can be cut off.
struct LogScan {
	std::vector<nlohmann::json> entries;
	std::uintmax_t good_bytes = 0;
	bool torn_tail = false;
};

inline LogScan scan_log(const std::filesystem::path& path) {
	LogScan scan;
	std::ifstream in(path, std::ios::binary);
	if (!in) return scan;
	std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
	std::size_t pos = 0, row = 0;
	while (pos < text.size()) {
		++row;
		const auto nl = text.find('\n', pos);
		if (nl == std::string::npos) {
			scan.torn_tail = true;
			break;
		}
		const auto line = std::string_view(text).substr(pos, nl - pos);
		if (!detail::trim(line).empty()) {
			try {
				scan.entries.push_back(nlohmann::json::parse(line));
			} catch (const nlohmann::json::exception& e) {
				if (nl + 1 == text.size()) {
					scan.torn_tail = true;
					break;
				}
				throw FormatError(row, std::string("corrupt log entry: ") + e.what());
			}
		}
		pos = nl + 1;
		scan.good_bytes = pos;
	}
	return scan;
}

} // namespace detail

/// Fold of a log: what was answered, by whom, and whether any triplet was
/// answered twice.
struct LogReplay {
	std::map<std::string, std::size_t> pool_sizes;
	std::map<std::string, std::vector<ResponseRecord>> responses;
	std::size_t duplicate_answers = 0;
	std::size_t unknown_queries = 0;

	bool disjoint() const noexcept { return duplicate_answers == 0; }
};

inline LogReplay replay_log(const std::filesystem::path& path) {
	LogReplay out;
	std::map<std::string, std::unordered_map<std::uint64_t, bool>> seen;
	for (const auto& e : detail::scan_log(path).entries) {
		const auto type = e.at("type").get<std::string>();
		if (type == "task") {
			const auto id = e.at("task_id").get<std::string>();
			auto& pool = seen[id];
			for (const auto& q : e.at("pool")) pool.emplace(detail::query_from_json(q).key(), false);
			out.pool_sizes[id] = pool.size();
		} else if (type == "response") {
			auto r = detail::response_from_json(e);
			auto& pool = seen[r.task_id];
			auto it = pool.find(r.query.key());
			if (it == pool.end()) {
				++out.unknown_queries;
			} else if (it->second) {
				++out.duplicate_answers;
			} else {
				it->second = true;
			}
			out.responses[r.task_id].push_back(std::move(r));
		}
	}
	return out;
}

class AnnotationService {
public:
	explicit AnnotationService(ServiceOptions options = {}) : options_(std::move(options)) {
		std::filesystem::create_directories(options_.data_dir);
		const auto path = log_path();
		if (std::filesystem::exists(path)) {
			auto scan = detail::scan_log(path);
			if (scan.torn_tail) std::filesystem::resize_file(path, scan.good_bytes);
			for (const auto& e : scan.entries) apply(e);
		}
		log_ = std::make_unique<detail::DurableLog>(path);
	}

	std::filesystem::path log_path() const { return options_.data_dir / "log.jsonl"; }

	/// Samples the pool and persists the task before returning its id.
	std::string create_task(const CreateTaskRequest& request) {
		validate(request.manifest);
		if (request.budget < 1) throw Error(ErrorCode::Domain, "budget must be >= 1");
		const auto n = request.manifest.size();
		auto pool = sample_triplets(n, request.budget, request.seed);
		const auto timeout = request.lease_timeout.value_or(options_.lease_timeout);
		if (!(timeout.count() > 0.0)) throw Error(ErrorCode::Domain, "lease_timeout must be positive");

		std::unique_lock lock(tasks_mutex_);
		std::string id = request.task_id;
		if (id.empty()) {
			do {
				id = "task-" + std::to_string(++generated_ids_);
			} while (tasks_.count(id));
		}
		if (tasks_.count(id)) throw Error(ErrorCode::DuplicateTask, "task '" + id + "' already exists");

		nlohmann::ordered_json entry{{"type", "task"}, {"task_id", id}, {"n", n}, {"budget", request.budget},
			{"seed", request.seed}, {"lease_timeout", timeout.count()}};
		entry["manifest"] = nlohmann::json(request.manifest);
		auto& pool_json = entry["pool"] = nlohmann::ordered_json::array();
		for (const auto& q : pool) pool_json.push_back({q.i, q.j, q.k});
		log_->append(entry.dump());
		install(id, request.manifest, std::move(pool), timeout);
		return id;
	}

	std::vector<std::string> task_ids() const {
		std::shared_lock lock(tasks_mutex_);
		std::vector<std::string> out;
		for (const auto& [id, t] : tasks_) out.push_back(id);
		return out;
	}

	/// Leases the first dealable query to `annotator`. An annotator holding a
	/// live lease gets that same query back.
	Deal next_query(const std::string& task_id, const std::string& annotator) {
		if (annotator.empty()) throw Error(ErrorCode::Domain, "annotator id is required");
		auto& task = find(task_id);
		std::lock_guard lock(task.mutex);
		const auto now = options_.clock();
		Deal deal;
		std::optional<std::size_t> pick;
		if (auto held = task.holding.find(annotator); held != task.holding.end()) {
			const auto& slot = task.slots[held->second];
			if (slot.state == SlotState::Leased && slot.holder == annotator && now < slot.expiry) pick = held->second;
			else task.holding.erase(held);
		}
		if (!pick) {
			while (task.frontier < task.slots.size() && task.slots[task.frontier].state == SlotState::Answered) {
				++task.frontier;
			}
			for (std::size_t s = task.frontier; s < task.slots.size(); ++s) {
				const auto& slot = task.slots[s];
				if (slot.state == SlotState::Unassigned || (slot.state == SlotState::Leased && now >= slot.expiry)) {
					pick = s;
					break;
				}
			}
		}
		if (pick) {
			auto& slot = task.slots[*pick];
			if (slot.state == SlotState::Leased && slot.holder != annotator) {
				if (auto prev = task.holding.find(slot.holder); prev != task.holding.end() && prev->second == *pick) {
					task.holding.erase(prev);
				}
			}
			if (!(slot.state == SlotState::Leased && slot.holder == annotator && now < slot.expiry)) {
				slot.state = SlotState::Leased;
				slot.holder = annotator;
				slot.expiry = now + std::chrono::duration_cast<ServiceClock::duration>(task.lease_timeout);
			}
			task.holding[annotator] = *pick;
			Lease lease;
			lease.query = task.pool[*pick];
			lease.reference = task.ref(lease.query.i);
			lease.option_a = task.ref(lease.query.j);
			lease.option_b = task.ref(lease.query.k);
			lease.expires_in = std::chrono::duration_cast<Seconds>(slot.expiry - now);
			deal.lease = lease;
		} else {
			deal.exhausted = task.answered == task.slots.size();
		}
		deal.progress = progress_locked(task, now);
		return deal;
	}

	/// Records an answer. Appended to the log before returning.
	SubmitAck submit_response(const std::string& task_id, const std::string& annotator, const TripletQuery& query,
		Choice choice, std::int64_t latency_ms = 0) {
		if (latency_ms < 0) throw Error(ErrorCode::Domain, "latency_ms must be >= 0");
		auto& task = find(task_id);
		std::lock_guard lock(task.mutex);
		const auto s = task.slot_of(query);
		auto& slot = task.slots[s];
		const auto now = options_.clock();
		if (slot.state == SlotState::Answered) {
			const auto& prior = task.records[slot.record];
			if (prior.annotator != annotator) {
				throw Error(ErrorCode::Gone, "query " + query.to_string() + " was already answered by another annotator");
			}
			if (prior.choice != choice) {
				throw Error(ErrorCode::Conflict, "query " + query.to_string() + " was already answered with a different choice");
			}
			return {prior, choice_to_w(choice), true};
		}
		if (slot.state != SlotState::Leased || slot.holder != annotator) {
			throw Error(ErrorCode::Conflict, "query " + query.to_string() + " is not leased to '" + annotator + "'");
		}
		if (now >= slot.expiry + std::chrono::duration_cast<ServiceClock::duration>(options_.grace)) {
			throw Error(ErrorCode::Conflict, "lease on " + query.to_string() + " expired");
		}
		ResponseRecord r{task_id, task.pool[s], annotator, choice, unix_ms(), latency_ms};
		log_->append(detail::response_line(r));
		mark_answered(task, s, std::move(r));
		return {task.records[slot.record], choice_to_w(choice), false};
	}

	/// Gives a lease back without answering (the UI's skip).
	void release_lease(const std::string& task_id, const std::string& annotator, const TripletQuery& query) {
		auto& task = find(task_id);
		std::lock_guard lock(task.mutex);
		auto& slot = task.slots[task.slot_of(query)];
		if (slot.state != SlotState::Leased || slot.holder != annotator) {
			throw Error(ErrorCode::Conflict, "query " + query.to_string() + " is not leased to '" + annotator + "'");
		}
		slot.state = SlotState::Unassigned;
		slot.holder.clear();
		task.holding.erase(annotator);
	}

	TaskProgress progress(const std::string& task_id) {
		auto& task = find(task_id);
		std::lock_guard lock(task.mutex);
		return progress_locked(task, options_.clock());
	}

	/// Answered queries as human labels plus a per-annotator summary.
	/// Disjointness is re-checked on the way out.
	TaskExport export_labels(const std::string& task_id) {
		auto& task = find(task_id);
		std::lock_guard lock(task.mutex);
		TaskExport out;
		LabeledTripletSet check(task.n);
		for (const auto& r : task.records) {
			auto label = r.label();
			check.add(label);
			out.labels.push_back(std::move(label));
		}
		std::map<std::string, std::size_t> per;
		for (const auto& l : out.labels) ++per[l.annotator];
		out.summary = {{"task_id", task_id}, {"n", task.n}, {"pool_size", task.slots.size()},
			{"answered", out.labels.size()}, {"per_annotator", per}};
		return out;
	}

	std::optional<Rgb> asset(const std::string& asset_id) const {
		std::shared_lock lock(tasks_mutex_);
		auto it = assets_.find(asset_id);
		if (it == assets_.end()) return std::nullopt;
		return it->second;
	}

	const StimulusManifest& manifest(const std::string& task_id) { return find(task_id).manifest; }

private:
	enum class SlotState { Unassigned, Leased, Answered };

	struct Slot {
		SlotState state = SlotState::Unassigned;
		std::string holder;
		ServiceClock::time_point expiry{};
		std::size_t record = 0;
	};

	struct Task {
		std::size_t n = 0;
		StimulusManifest manifest;
		std::vector<TripletQuery> pool;
		std::vector<Slot> slots;
		std::unordered_map<std::uint64_t, std::size_t> index;
		std::unordered_map<std::string, std::size_t> holding;
		std::vector<ResponseRecord> records;
		std::size_t answered = 0;
		std::size_t frontier = 0;
		Seconds lease_timeout{120.0};
		std::mutex mutex;

		std::size_t slot_of(const TripletQuery& q) const {
			auto it = index.find(q.key());
			if (it == index.end() || pool[it->second] != q) {
				throw Error(ErrorCode::NotFound, "query " + q.to_string() + " is not in this task's pool");
			}
			return it->second;
		}

		StimulusRef ref(std::uint32_t t) const {
			const auto& e = manifest.entries[t - 1];
			return {e.time_index, e.asset_id, e.color};
		}
	};

	static std::int64_t unix_ms() {
		return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
			.count();
	}

	Task& find(const std::string& id) {
		std::shared_lock lock(tasks_mutex_);
		auto it = tasks_.find(id);
		if (it == tasks_.end()) throw Error(ErrorCode::NotFound, "unknown task '" + id + "'");
		return *it->second;
	}

	void install(const std::string& id, const StimulusManifest& manifest, std::vector<TripletQuery> pool,
		Seconds timeout) {
		auto task = std::make_unique<Task>();
		task->n = manifest.size();
		task->manifest = manifest;
		task->lease_timeout = timeout;
		task->slots.resize(pool.size());
		for (std::size_t s = 0; s < pool.size(); ++s) task->index.emplace(pool[s].key(), s);
		task->pool = std::move(pool);
		for (const auto& e : manifest.entries) assets_[e.asset_id] = e.color;
		tasks_.emplace(id, std::move(task));
	}

	static void mark_answered(Task& task, std::size_t s, ResponseRecord r) {
		auto& slot = task.slots[s];
		if (slot.state == SlotState::Leased) {
			if (auto h = task.holding.find(slot.holder); h != task.holding.end() && h->second == s) task.holding.erase(h);
		}
		slot.state = SlotState::Answered;
		slot.holder = r.annotator;
		slot.record = task.records.size();
		task.records.push_back(std::move(r));
		++task.answered;
	}

	void apply(const nlohmann::json& e) {
		const auto type = e.at("type").get<std::string>();
		if (type == "task") {
			std::vector<TripletQuery> pool;
			for (const auto& q : e.at("pool")) pool.push_back({q.at(0).get<std::uint32_t>(), q.at(1).get<std::uint32_t>(), q.at(2).get<std::uint32_t>()});
			install(e.at("task_id").get<std::string>(), e.at("manifest").get<StimulusManifest>(), std::move(pool),
				Seconds(e.at("lease_timeout").get<double>()));
		} else if (type == "response") {
			auto r = detail::response_from_json(e);
			auto it = tasks_.find(r.task_id);
			if (it == tasks_.end()) return;
			auto& task = *it->second;
			const auto s = task.slot_of(r.query);
			if (task.slots[s].state != SlotState::Answered) mark_answered(task, s, std::move(r));
		}
	}

	TaskProgress progress_locked(const Task& task, ServiceClock::time_point now) const {
		TaskProgress p;
		p.total = task.slots.size();
		p.answered = task.answered;
		for (const auto& slot : task.slots) {
			if (slot.state == SlotState::Leased && now < slot.expiry) ++p.leased;
		}
		for (const auto& r : task.records) ++p.per_annotator[r.annotator];
		return p;
	}

	ServiceOptions options_;
	std::unique_ptr<detail::DurableLog> log_;
	mutable std::shared_mutex tasks_mutex_;
	std::map<std::string, std::unique_ptr<Task>> tasks_;
	std::unordered_map<std::string, Rgb> assets_;
	std::size_t generated_ids_ = 0;
};

} // namespace tlabel
