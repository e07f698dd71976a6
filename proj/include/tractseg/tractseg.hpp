#pragma once

#include "tractseg/core.hpp"
#include "tractseg/dwi_io.hpp"
#include "tractseg/error.hpp"
#include "tractseg/model.hpp"
#include "tractseg/parallel.hpp"
#include "tractseg/phantom.hpp"
#include "tractseg/qspace.hpp"
#include "tractseg/rng.hpp"
#include "tractseg/segmetrics.hpp"
#include "tractseg/shfit.hpp"
#include "tractseg/uncertainty.hpp"
