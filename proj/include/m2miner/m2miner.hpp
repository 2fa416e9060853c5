#pragma once

// Umbrella header. http_agents.hpp is separate because it pulls in cpp-httplib.

#include "ablate.hpp"
#include "action.hpp"
#include "agents.hpp"
#include "dataset.hpp"
#include "engine.hpp"
#include "error.hpp"
#include "formulas.hpp"
#include "intent.hpp"
#include "io.hpp"
#include "json_extract.hpp"
#include "log.hpp"
#include "looptrain.hpp"
#include "oracle_agents.hpp"
#include "parallel.hpp"
#include "recycle.hpp"
#include "simenv.hpp"
#include "trajectory.hpp"
#include "tree.hpp"
#include "util.hpp"

namespace m2 {
inline constexpr const char* kVersion = "0.1.0";
}
