/// @file  signal.hpp
/// @brief Ground-truth construct signals, their dissimilarity, and stimulus swatches.
///
/// A Signal is the hidden construct sampled at 1 Hz, so its length is also its
/// duration in seconds. Time indices exposed to callers are 1-based.

#pragma once

#include <tlabel/error.hpp>
#include <tlabel/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace tlabel {

class Signal {
public:
	Signal(std::string name, std::vector<double> values)
		: name_(std::move(name)), values_(std::move(values)) {
		if (values_.size() < 3) {
			throw Error(ErrorCode::InvalidSize,
				"signal needs at least 3 samples, got " + std::to_string(values_.size()));
		}
		for (std::size_t t = 0; t < values_.size(); ++t) {
			if (!std::isfinite(values_[t])) {
				throw Error(ErrorCode::Domain, "non-finite value at t=" + std::to_string(t + 1));
			}
		}
	}

	const std::string& name() const noexcept { return name_; }
	std::span<const double> values() const noexcept { return values_; }
	std::size_t size() const noexcept { return values_.size(); }
	static constexpr double sample_rate() noexcept { return 1.0; }

	/// 1-based access.
	double at(std::size_t t) const {
		if (t < 1 || t > values_.size()) {
			throw Error(ErrorCode::Index,
				"time index " + std::to_string(t) + " outside [1, " + std::to_string(values_.size()) + "]");
		}
		return values_[t - 1];
	}

	bool operator==(const Signal&) const = default;

private:
	std::string name_;
	std::vector<double> values_;
};

enum class SignalKind { TaskALike, TaskBLike, Sine, CustomPiecewise };

inline std::string_view to_string(SignalKind kind) {
	switch (kind) {
	case SignalKind::TaskALike: return "task-a-like";
	case SignalKind::TaskBLike: return "task-b-like";
	case SignalKind::Sine: return "sine";
	case SignalKind::CustomPiecewise: return "custom-piecewise";
	}
	return "unknown";
}

inline SignalKind parse_signal_kind(std::string_view text) {
	for (auto kind : {SignalKind::TaskALike, SignalKind::TaskBLike, SignalKind::Sine, SignalKind::CustomPiecewise}) {
		if (text == to_string(kind)) return kind;
	}
	throw Error(ErrorCode::Config, "unknown signal kind '" + std::string(text) + "'");
}

/// Knot of a piecewise-linear construct; time is 0-based and may be fractional.
struct Knot {
	double time;
	double value;
};

/// Samples the piecewise-linear interpolant of `knots` at t = 0..n-1.
/// Knots must be sorted by time; samples outside the knot range hold the end value.
inline Signal piecewise_linear(std::string name, std::size_t n, std::span<const Knot> knots) {
	if (knots.empty()) {
		throw Error(ErrorCode::EmptyInput, "piecewise_linear needs at least one knot");
	}
	std::vector<double> values(n);
	std::size_t seg = 0;
	for (std::size_t t = 0; t < n; ++t) {
		const double x = static_cast<double>(t);
		while (seg + 1 < knots.size() && knots[seg + 1].time <= x) ++seg;
		if (x <= knots.front().time) {
			values[t] = knots.front().value;
		} else if (seg + 1 >= knots.size()) {
			values[t] = knots.back().value;
		} else {
			const auto& a = knots[seg];
			const auto& b = knots[seg + 1];
			const double u = (x - a.time) / (b.time - a.time);
			values[t] = a.value + u * (b.value - a.value);
		}
	}
	return Signal(std::move(name), std::move(values));
}

namespace detail {

// Plateaus joined by ramps; every other ramp detours through a short-lived
// extreme (1-2 samples near 0 or 1).
inline std::vector<double> task_a_values(std::size_t n, Rng& rng) {
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
	const double scale = static_cast<double>(n);

	std::vector<double> v;
	v.reserve(n);
	double level = uniform(0.25, 0.75);
	bool spike = false;
	auto ramp_to = [&](double target, std::size_t len) {
		const double start = v.empty() ? level : v.back();
		for (std::size_t s = 1; s <= len; ++s) {
			v.push_back(start + (target - start) * static_cast<double>(s) / static_cast<double>(len));
		}
	};
	while (v.size() < n) {
		const auto plateau = std::max<std::size_t>(3, static_cast<std::size_t>(scale / 9.0 * uniform(0.6, 1.4)));
		v.insert(v.end(), plateau, level);
		double next = level;
		while (std::abs(next - level) < 0.15) next = uniform(0.15, 0.85);
		const auto ramp = std::max<std::size_t>(2, static_cast<std::size_t>(scale / 14.0 * uniform(0.5, 1.5)));
		if (spike) {
			const double extreme = unit(rng) < 0.5 ? uniform(0.0, 0.03) : uniform(0.97, 1.0);
			ramp_to(extreme, std::max<std::size_t>(1, ramp / 2));
			if (unit(rng) < 0.5) v.push_back(extreme);
			ramp_to(next, std::max<std::size_t>(1, ramp / 2));
		} else {
			ramp_to(next, ramp);
		}
		spike = !spike;
		level = next;
	}
	v.resize(n);
	return v;
}

inline std::vector<double> task_b_values(std::size_t n, Rng& rng) {
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	struct Component { double amplitude, cycles, phase; };
	std::array<Component, 4> parts{};
	for (std::size_t h = 0; h < parts.size(); ++h) {
		parts[h].amplitude = (0.4 + 0.6 * unit(rng)) / static_cast<double>(h + 1);
		parts[h].cycles = 0.7 + static_cast<double>(h) * 1.3 + unit(rng);
		parts[h].phase = 2.0 * std::numbers::pi * unit(rng);
	}
	const double slope = unit(rng) - 0.5;
	std::vector<double> v(n);
	for (std::size_t t = 0; t < n; ++t) {
		const double x = static_cast<double>(t) / static_cast<double>(n);
		double s = slope * x;
		for (const auto& c : parts) s += c.amplitude * std::sin(2.0 * std::numbers::pi * c.cycles * x + c.phase);
		v[t] = s;
	}
	const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
	const double min = *lo, range = *hi - *lo;
	for (auto& x : v) x = 0.05 + 0.9 * (x - min) / range;
	return v;
}

inline std::vector<double> random_piecewise_values(std::size_t n, Rng& rng) {
	std::uniform_real_distribution<double> unit(0.0, 1.0);
	const std::size_t count = std::max<std::size_t>(2, n / 20 + 2);
	std::vector<double> times(count);
	times.front() = 0.0;
	times.back() = static_cast<double>(n - 1);
	for (std::size_t c = 1; c + 1 < count; ++c) times[c] = unit(rng) * static_cast<double>(n - 1);
	std::sort(times.begin(), times.end());
	std::vector<Knot> knots;
	for (double t : times) {
		if (!knots.empty() && t - knots.back().time < 1e-9) continue;
		knots.push_back({t, unit(rng)});
	}
	const auto sampled = piecewise_linear("knots", n, knots);
	return {sampled.values().begin(), sampled.values().end()};
}

} // namespace detail

/// Synthesizes a construct in [0,1]. Deterministic in (kind, n, seed).
inline Signal generate_signal(SignalKind kind, std::size_t n, std::uint64_t seed) {
	if (n < 3) {
		throw Error(ErrorCode::InvalidSize, "signal needs at least 3 samples, got " + std::to_string(n));
	}
	auto rng = make_rng(derive_seed(seed, {static_cast<std::uint64_t>(kind), n}));
	std::string name = std::string(to_string(kind)) + "-n" + std::to_string(n) + "-s" + std::to_string(seed);
	std::vector<double> values;
	switch (kind) {
	case SignalKind::Sine:
		values.resize(n);
		for (std::size_t t = 0; t < n; ++t) {
			values[t] = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(n));
		}
		name = "sine-n" + std::to_string(n);
		break;
	case SignalKind::TaskALike: values = detail::task_a_values(n, rng); break;
	case SignalKind::TaskBLike: values = detail::task_b_values(n, rng); break;
	case SignalKind::CustomPiecewise: values = detail::random_piecewise_values(n, rng); break;
	}
	return Signal(std::move(name), std::move(values));
}

/// |z_i - z_j| with 1-based indices.
inline double dissimilarity(const Signal& signal, std::size_t i, std::size_t j) {
	return std::abs(signal.at(i) - signal.at(j));
}

namespace detail {

inline std::string_view trim(std::string_view s) {
	while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
	while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
	return s;
}

inline bool parse_double(std::string_view text, double& out) {
	if (!text.empty() && text.front() == '+') text.remove_prefix(1);
	const auto* end = text.data() + text.size();
	auto [ptr, ec] = std::from_chars(text.data(), end, out);
	return ec == std::errc() && ptr == end && !text.empty();
}

} // namespace detail

/// Reads the one-value-per-line CSV format; only the first line may be a header.
/// Values outside [0,1] are kept and reported through `warnings`.
inline Signal parse_signal_csv(std::istream& in, std::string name, std::vector<std::string>* warnings = nullptr) {
	std::vector<double> values;
	std::string line;
	std::size_t row = 0;
	while (std::getline(in, line)) {
		++row;
		auto text = detail::trim(line);
		if (text.empty()) continue;
		double x = 0.0;
		if (!detail::parse_double(text, x)) {
			if (row == 1) continue;
			throw FormatError(row, "cannot parse '" + std::string(text) + "' as a number");
		}
		if (!std::isfinite(x)) throw FormatError(row, "non-finite value");
		if ((x < 0.0 || x > 1.0) && warnings) {
			warnings->push_back("row " + std::to_string(row) + ": value " + std::string(text) + " outside [0,1]");
		}
		values.push_back(x);
	}
	if (values.empty()) throw Error(ErrorCode::InvalidSize, "signal file has no values");
	return Signal(std::move(name), std::move(values));
}

inline Signal load_signal(const std::string& path, std::vector<std::string>* warnings = nullptr) {
	std::ifstream in(path);
	if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
	auto stem = path.substr(path.find_last_of('/') + 1);
	if (auto dot = stem.rfind('.'); dot != std::string::npos && dot > 0) stem.resize(dot);
	return parse_signal_csv(in, stem, warnings);
}

inline void write_signal_csv(const Signal& signal, std::ostream& out) {
	out << "value\n";
	char buf[32];
	for (double v : signal.values()) {
		auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
		out.write(buf, end - buf) << '\n';
	}
}

// --- stimuli --------------------------------------------------------------

struct Rgb {
	std::uint8_t r = 0, g = 0, b = 0;
	bool operator==(const Rgb&) const = default;
};

struct StimulusEntry {
	std::size_t time_index;
	Rgb color;
	std::string asset_id;
	bool operator==(const StimulusEntry&) const = default;
};

struct StimulusManifest {
	std::vector<StimulusEntry> entries;

	std::size_t size() const noexcept { return entries.size(); }
	bool operator==(const StimulusManifest&) const = default;
};

inline std::uint8_t green_level(double value) {
	return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(value, 0.0, 1.0)));
}

inline std::string asset_id_for(std::string_view signal_name, std::size_t time_index) {
	std::string id;
	id.reserve(signal_name.size() + 8);
	for (char c : signal_name) {
		const bool keep = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
		id.push_back(keep ? c : '_');
	}
	return id + "-t" + std::to_string(time_index);
}

/// One green swatch per sample.
inline StimulusManifest render_stimuli(const Signal& signal) {
	StimulusManifest manifest;
	manifest.entries.reserve(signal.size());
	for (std::size_t t = 1; t <= signal.size(); ++t) {
		manifest.entries.push_back({t, Rgb{0, green_level(signal.at(t)), 0}, asset_id_for(signal.name(), t)});
	}
	return manifest;
}

inline void validate(const StimulusManifest& manifest) {
	if (manifest.entries.size() < 3) {
		throw Error(ErrorCode::InvalidSize, "manifest needs at least 3 entries");
	}
	for (std::size_t e = 0; e < manifest.entries.size(); ++e) {
		if (manifest.entries[e].time_index != e + 1) {
			throw Error(ErrorCode::Format, "manifest time_index must run 1..n in order (entry " + std::to_string(e + 1) + ")");
		}
		if (manifest.entries[e].color.r != 0 || manifest.entries[e].color.b != 0) {
			throw Error(ErrorCode::Format, "manifest swatches must be pure green (entry " + std::to_string(e + 1) + ")");
		}
	}
}

inline void to_json(nlohmann::json& j, const StimulusEntry& e) {
	j = nlohmann::json{{"t", e.time_index}, {"rgb", {e.color.r, e.color.g, e.color.b}}, {"asset_id", e.asset_id}};
}

inline void from_json(const nlohmann::json& j, StimulusEntry& e) {
	e.time_index = j.at("t").get<std::size_t>();
	const auto& rgb = j.at("rgb");
	if (!rgb.is_array() || rgb.size() != 3) throw Error(ErrorCode::Format, "rgb must be a 3-element array");
	e.color = Rgb{rgb[0].get<std::uint8_t>(), rgb[1].get<std::uint8_t>(), rgb[2].get<std::uint8_t>()};
	e.asset_id = j.at("asset_id").get<std::string>();
}

inline void to_json(nlohmann::json& j, const StimulusManifest& m) { j = m.entries; }

inline void from_json(const nlohmann::json& j, StimulusManifest& m) {
	m.entries = j.get<std::vector<StimulusEntry>>();
	validate(m);
}

} // namespace tlabel
