/// @file  http_service.hpp
/// @brief HTTP+JSON front of AnnotationService.
///
///   POST /tasks                          create a task
///   GET  /tasks/{id}/next?annotator=ID   lease a query (or no-work)
///   POST /tasks/{id}/responses           submit a choice
///   POST /tasks/{id}/release             give a lease back unanswered
///   GET  /tasks/{id}/export[?format=summary]
///   GET  /tasks/{id}/progress
///   GET  /assets/{asset_id}              inline RGB swatch

#pragma once

// Before httplib: <resolv.h> defines a _res macro that collides with Eigen.
#include <tlabel/tlabel.hpp>

#include <httplib.h>
#include <json.hpp>

#include <sstream>
#include <string>

namespace tlabel {

inline int http_status(ErrorCode code) {
	switch (code) {
	case ErrorCode::NotFound: return 404;
	case ErrorCode::Conflict:
	case ErrorCode::DuplicateTask:
	case ErrorCode::FusionConflict: return 409;
	case ErrorCode::Gone: return 410;
	case ErrorCode::Io: return 500;
	default: return 400;
	}
}

namespace detail {

inline nlohmann::json ref_json(const StimulusRef& r) {
	return {{"t", r.time_index}, {"asset_id", r.asset_id}, {"rgb", {r.color.r, r.color.g, r.color.b}}};
}

inline nlohmann::json progress_json(const TaskProgress& p) {
	return {{"total", p.total}, {"answered", p.answered}, {"leased", p.leased}, {"per_annotator", p.per_annotator}};
}

inline void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
	res.status = status;
	res.set_content(body.dump(), "application/json");
}

inline std::string hex_color(const Rgb& c) {
	char buf[8];
	std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
	return buf;
}

/// Builds the manifest for POST /tasks from one of: "manifest" (entries),
/// "values" (a signal in [0,1]) or "signal" ({kind, n, seed}).
inline StimulusManifest manifest_from_request(const nlohmann::json& body) {
	if (body.contains("manifest")) return body.at("manifest").get<StimulusManifest>();
	const auto name = body.value("name", std::string("signal"));
	if (body.contains("values")) return render_stimuli(Signal(name, body.at("values").get<std::vector<double>>()));
	if (body.contains("signal")) {
		const auto& s = body.at("signal");
		return render_stimuli(generate_signal(parse_signal_kind(s.at("kind").get<std::string>()),
			s.at("n").get<std::size_t>(), s.value("seed", std::uint64_t{0})));
	}
	throw Error(ErrorCode::Domain, "request needs one of 'manifest', 'values' or 'signal'");
}

} // namespace detail

/// Registers all routes of `service` on `server`.
inline void mount_annotation_routes(httplib::Server& server, AnnotationService& service) {
	using nlohmann::json;

	server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
		try {
			std::rethrow_exception(ep);
		} catch (const Error& e) {
			detail::send_json(res, {{"error", to_string(e.code())}, {"message", e.what()}}, http_status(e.code()));
		} catch (const json::exception& e) {
			detail::send_json(res, {{"error", "bad-request"}, {"message", e.what()}}, 400);
		} catch (const std::exception& e) {
			detail::send_json(res, {{"error", "internal"}, {"message", e.what()}}, 500);
		}
	});
	server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
		res.set_header("Access-Control-Allow-Origin", "*");
		res.set_header("Access-Control-Allow-Headers", "Content-Type");
		res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
	});
	server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

	server.Post("/tasks", [&service](const httplib::Request& req, httplib::Response& res) {
		const auto body = json::parse(req.body);
		CreateTaskRequest request;
		request.task_id = body.value("task_id", std::string());
		request.manifest = detail::manifest_from_request(body);
		const auto n = request.manifest.size();
		if (body.contains("budget")) request.budget = body.at("budget").get<std::uint64_t>();
		else if (body.contains("fraction")) request.budget = budget_for_fraction(n, body.at("fraction").get<double>());
		else if (body.contains("k")) request.budget = triplet_budget(n, body.at("k").get<double>());
		else throw Error(ErrorCode::Domain, "request needs 'budget', 'fraction' or 'k'");
		request.seed = body.value("seed", std::uint64_t{0});
		if (body.contains("lease_timeout")) request.lease_timeout = Seconds(body.at("lease_timeout").get<double>());
		const auto id = service.create_task(request);
		detail::send_json(res, {{"task_id", id}, {"n", n}, {"pool_size", request.budget}}, 201);
	});

	server.Get(R"(/tasks/([^/]+)/next)", [&service](const httplib::Request& req, httplib::Response& res) {
		if (!req.has_param("annotator")) throw Error(ErrorCode::Domain, "missing ?annotator=");
		const auto deal = service.next_query(req.matches[1], req.get_param_value("annotator"));
		json body{{"progress", detail::progress_json(deal.progress)}};
		if (deal.lease) {
			const auto& l = *deal.lease;
			body["status"] = "ok";
			body["query"] = detail::query_json(l.query);
			body["reference"] = detail::ref_json(l.reference);
			body["option_a"] = detail::ref_json(l.option_a);
			body["option_b"] = detail::ref_json(l.option_b);
			body["lease_expires_in"] = l.expires_in.count();
		} else {
			body["status"] = "no-work";
			body["exhausted"] = deal.exhausted;
		}
		detail::send_json(res, body);
	});

	server.Post(R"(/tasks/([^/]+)/responses)", [&service](const httplib::Request& req, httplib::Response& res) {
		const auto body = json::parse(req.body);
		const auto ack = service.submit_response(req.matches[1], body.at("annotator").get<std::string>(),
			detail::query_from_json(body.at("query")), parse_choice(body.at("choice").get<std::string>()),
			body.value("latency_ms", std::int64_t{0}));
		detail::send_json(res, {{"status", "ok"}, {"query", detail::query_json(ack.record.query)}, {"w", ack.w},
			{"duplicate", ack.duplicate}});
	});

	server.Post(R"(/tasks/([^/]+)/release)", [&service](const httplib::Request& req, httplib::Response& res) {
		const auto body = json::parse(req.body);
		service.release_lease(req.matches[1], body.at("annotator").get<std::string>(),
			detail::query_from_json(body.at("query")));
		detail::send_json(res, {{"status", "released"}});
	});

	server.Get(R"(/tasks/([^/]+)/export)", [&service](const httplib::Request& req, httplib::Response& res) {
		const auto out = service.export_labels(req.matches[1]);
		if (req.get_param_value("format") == "summary") {
			res.set_content(out.summary.dump(), "application/json");
			return;
		}
		std::ostringstream lines;
		write_jsonl(lines, out.labels);
		res.set_content(lines.str(), "application/x-ndjson");
	});

	server.Get(R"(/tasks/([^/]+)/progress)", [&service](const httplib::Request& req, httplib::Response& res) {
		detail::send_json(res, detail::progress_json(service.progress(req.matches[1])));
	});

	server.Get(R"(/assets/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
		const std::string id = req.matches[1];
		const auto rgb = service.asset(id);
		if (!rgb) throw Error(ErrorCode::NotFound, "unknown asset '" + id + "'");
		detail::send_json(res, {{"asset_id", id}, {"rgb", {rgb->r, rgb->g, rgb->b}}, {"hex", detail::hex_color(*rgb)}});
	});
}

} // namespace tlabel
