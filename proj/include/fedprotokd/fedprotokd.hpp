#pragma once

#include "fedprotokd/cli.hpp"
#include "fedprotokd/client.hpp"
#include "fedprotokd/config.hpp"
#include "fedprotokd/data.hpp"
#include "fedprotokd/errors.hpp"
#include "fedprotokd/model.hpp"
#include "fedprotokd/net.hpp"
#include "fedprotokd/orchestrator.hpp"
#include "fedprotokd/reports.hpp"
#include "fedprotokd/rng.hpp"
#include "fedprotokd/server.hpp"
#include "fedprotokd/tape.hpp"
#include "fedprotokd/tensor.hpp"
