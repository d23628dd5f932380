#pragma once

// Umbrella header.

#include "k2recon/baselines.hpp"
#include "k2recon/complex_tensor.hpp"
#include "k2recon/container.hpp"
#include "k2recon/dataset.hpp"
#include "k2recon/error.hpp"
#include "k2recon/fft.hpp"
#include "k2recon/linops.hpp"
#include "k2recon/mask_grid.hpp"
#include "k2recon/metrics.hpp"
#include "k2recon/ndgrad.hpp"
#include "k2recon/phantom.hpp"
#include "k2recon/report.hpp"
#include "k2recon/rng.hpp"
#include "k2recon/sampling.hpp"
#include "k2recon/training.hpp"
#include "k2recon/unrolled.hpp"
