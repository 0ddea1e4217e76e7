#pragma once

// Umbrella header for the library (everything except the CLI front end).

#include "lcs_mnmt/autodiff.hpp"
#include "lcs_mnmt/beam_search.hpp"
#include "lcs_mnmt/checkpoint.hpp"
#include "lcs_mnmt/corpus.hpp"
#include "lcs_mnmt/harness.hpp"
#include "lcs_mnmt/inference.hpp"
#include "lcs_mnmt/langid.hpp"
#include "lcs_mnmt/plan.hpp"
#include "lcs_mnmt/similarity.hpp"
#include "lcs_mnmt/strategies.hpp"
#include "lcs_mnmt/training.hpp"
#include "lcs_mnmt/transformer.hpp"
#include "lcs_mnmt/util.hpp"
#include "lcs_mnmt/vocabulary.hpp"
