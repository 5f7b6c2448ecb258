#pragma once

#include "svci/common.hpp"
#include "svci/data.hpp"
#include "svci/geometry.hpp"
#include "svci/graph.hpp"
#include "svci/io.hpp"
#include "svci/model.hpp"
#include "svci/objective.hpp"
#include "svci/quadrature.hpp"
#include "svci/simulate.hpp"
#include "svci/solver.hpp"
