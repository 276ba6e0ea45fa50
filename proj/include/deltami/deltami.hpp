#pragma once

// Everything in one include.

#include "deltami/adjust.hpp"
#include "deltami/csv.hpp"
#include "deltami/dataset.hpp"
#include "deltami/diagnostics.hpp"
#include "deltami/distributions.hpp"
#include "deltami/errors.hpp"
#include "deltami/impute.hpp"
#include "deltami/ordinal.hpp"
#include "deltami/outcome.hpp"
#include "deltami/parallel.hpp"
#include "deltami/rng.hpp"
#include "deltami/simlab.hpp"
#include "deltami/trauma.hpp"
