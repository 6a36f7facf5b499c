/// @file  tlabel.hpp
/// @brief Umbrella header for the core library (everything but HTTP).

#pragma once

#include <tlabel/config.hpp>
#include <tlabel/embedding.hpp>
#include <tlabel/error.hpp>
#include <tlabel/evaluation.hpp>
#include <tlabel/experiment.hpp>
#include <tlabel/rng.hpp>
#include <tlabel/service.hpp>
#include <tlabel/signal.hpp>
#include <tlabel/triplets.hpp>
