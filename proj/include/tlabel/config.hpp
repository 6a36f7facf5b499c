/// @file  config.hpp
/// @brief Minimal TOML-style key/value documents.
///
/// Supported: `# comments`, `[section]` headers (prefixing keys with
/// "section."), and `key = value` where value is a quoted string, a number,
/// true/false, or a flat `[a, b, ...]` list of those.

#pragma once

#include <tlabel/error.hpp>

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace tlabel {

class KeyValueDocument {
public:
	static KeyValueDocument parse(std::string_view text) {
		KeyValueDocument doc;
		std::string section;
		std::size_t row = 0;
		std::istringstream in{std::string(text)};
		std::string raw;
		while (std::getline(in, raw)) {
			++row;
			auto line = strip_comment(raw);
			if (line.empty()) continue;
			if (line.front() == '[') {
				if (line.back() != ']') fail(row, "unterminated section header");
				section = std::string(trim(line.substr(1, line.size() - 2)));
				continue;
			}
			const auto eq = line.find('=');
			if (eq == std::string_view::npos) fail(row, "expected key = value");
			auto key = std::string(trim(line.substr(0, eq)));
			if (key.empty()) fail(row, "empty key");
			if (!section.empty()) key = section + "." + key;
			auto value = trim(line.substr(eq + 1));
			if (value.empty()) fail(row, "missing value for '" + key + "'");
			std::vector<std::string> items;
			if (value.front() == '[') {
				if (value.back() != ']') fail(row, "unterminated list for '" + key + "'");
				items = split_list(value.substr(1, value.size() - 2), row);
				doc.lists_.insert(key);
			} else {
				items.push_back(unquote(value, row));
			}
			if (!doc.values_.emplace(key, std::move(items)).second) fail(row, "duplicate key '" + key + "'");
		}
		return doc;
	}

	static KeyValueDocument load(const std::string& path) {
		std::ifstream in(path);
		if (!in) throw Error(ErrorCode::Config, "cannot open config " + path);
		std::stringstream buf;
		buf << in.rdbuf();
		return parse(buf.str());
	}

	bool has(const std::string& key) const { return values_.count(key) != 0; }

	std::optional<std::string> string(const std::string& key) const {
		auto it = values_.find(key);
		if (it == values_.end()) return std::nullopt;
		if (it->second.size() != 1 || lists_.count(key)) throw Error(ErrorCode::Config, "'" + key + "' must be a scalar");
		return it->second.front();
	}

	std::optional<double> number(const std::string& key) const {
		auto s = string(key);
		if (!s) return std::nullopt;
		return to_number(key, *s);
	}

	std::optional<bool> boolean(const std::string& key) const {
		auto s = string(key);
		if (!s) return std::nullopt;
		if (*s == "true") return true;
		if (*s == "false") return false;
		throw Error(ErrorCode::Config, "'" + key + "' must be true or false");
	}

	/// A scalar is accepted as a one-element list.
	std::optional<std::vector<std::string>> strings(const std::string& key) const {
		auto it = values_.find(key);
		if (it == values_.end()) return std::nullopt;
		return it->second;
	}

	std::optional<std::vector<double>> numbers(const std::string& key) const {
		auto items = strings(key);
		if (!items) return std::nullopt;
		std::vector<double> out;
		for (const auto& s : *items) out.push_back(to_number(key, s));
		return out;
	}

	std::vector<std::string> keys() const {
		std::vector<std::string> out;
		for (const auto& [k, v] : values_) out.push_back(k);
		return out;
	}

private:
	[[noreturn]] static void fail(std::size_t row, const std::string& what) {
		throw Error(ErrorCode::Config, "line " + std::to_string(row) + ": " + what);
	}

	static std::string_view trim(std::string_view s) {
		while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
		while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
		return s;
	}

	static std::string_view strip_comment(std::string_view line) {
		bool quoted = false;
		for (std::size_t c = 0; c < line.size(); ++c) {
			if (line[c] == '"') quoted = !quoted;
			if (line[c] == '#' && !quoted) return trim(line.substr(0, c));
		}
		return trim(line);
	}

	static std::string unquote(std::string_view v, std::size_t row) {
		v = trim(v);
		if (!v.empty() && v.front() == '"') {
			if (v.size() < 2 || v.back() != '"') fail(row, "unterminated string");
			return std::string(v.substr(1, v.size() - 2));
		}
		return std::string(v);
	}

	static std::vector<std::string> split_list(std::string_view body, std::size_t row) {
		std::vector<std::string> out;
		bool quoted = false;
		std::size_t start = 0;
		for (std::size_t c = 0; c <= body.size(); ++c) {
			if (c < body.size() && body[c] == '"') quoted = !quoted;
			if (c == body.size() || (body[c] == ',' && !quoted)) {
				auto item = trim(body.substr(start, c - start));
				if (!item.empty()) out.push_back(unquote(item, row));
				start = c + 1;
			}
		}
		return out;
	}

	static double to_number(const std::string& key, const std::string& s) {
		double x = 0.0;
		auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
		if (ec != std::errc() || ptr != s.data() + s.size()) {
			throw Error(ErrorCode::Config, "'" + key + "' expects a number, got '" + s + "'");
		}
		return x;
	}

	std::map<std::string, std::vector<std::string>> values_;
	std::set<std::string> lists_;
};

} // namespace tlabel
