/// @file  rng.hpp
/// @brief Seed derivation helpers so that parallel work stays deterministic.

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace tlabel {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
	x += 0x9E3779B97F4A7C15ULL;
	x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
	x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
	return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xCBF29CE484222325ULL) {
	for (unsigned char c : text) {
		h ^= c;
		h *= 0x100000001B3ULL;
	}
	return h;
}

/// Mixes a base seed with any number of stream coordinates.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
	std::uint64_t h = splitmix64(base);
	for (auto p : parts) {
		h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
	}
	return h;
}

inline Rng make_rng(std::uint64_t seed) {
	std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
	return Rng(seq);
}

} // namespace tlabel
