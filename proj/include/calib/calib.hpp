#pragma once

// Umbrella header for the calibration toolkit.

#include "calib/autodiff.hpp"
#include "calib/datasets.hpp"
#include "calib/errors.hpp"
#include "calib/focal.hpp"
#include "calib/gammanet.hpp"
#include "calib/matrix.hpp"
#include "calib/metatrain.hpp"
#include "calib/metrics.hpp"
#include "calib/optim.hpp"
#include "calib/posthoc.hpp"
#include "calib/report.hpp"
#include "calib/smoothcal.hpp"
