// pathfield: umbrella header pulling in the whole toolkit — path space and
// empirical measures, the functional calculus, the decomposition checks, the
// backward solver stack, the field-level operations, and the run plumbing.
#pragma once

#include "pathfield/bsde.hpp"
#include "pathfield/config.hpp"
#include "pathfield/csvio.hpp"
#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/generator.hpp"
#include "pathfield/grid.hpp"
#include "pathfield/ito.hpp"
#include "pathfield/master.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/mollify.hpp"
#include "pathfield/parallel.hpp"
#include "pathfield/path.hpp"
#include "pathfield/regression.hpp"
#include "pathfield/rng.hpp"
#include "pathfield/runner.hpp"
#include "pathfield/smooth.hpp"
#include "pathfield/stats.hpp"
#include "pathfield/tables.hpp"
#include "pathfield/variation.hpp"
#include "pathfield/version.hpp"
