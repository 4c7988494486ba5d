#pragma once

// Everything: masks, attention, guidance, denoiser, diffusion, multi-instance
// sampling, datasets, metrics, experiments and the HTTP service.

#include "mtcolor/error.hpp"
#include "mtcolor/mask_algebra.hpp"
#include "mtcolor/attention.hpp"
#include "mtcolor/instance_guidance.hpp"
#include "mtcolor/denoiser.hpp"
#include "mtcolor/diffusion.hpp"
#include "mtcolor/multisample.hpp"
#include "mtcolor/config.hpp"
#include "mtcolor/checkpoint.hpp"
#include "mtcolor/trainer.hpp"
#include "mtcolor/dataset.hpp"
#include "mtcolor/metrics.hpp"
#include "mtcolor/experiment.hpp"
#include "mtcolor/service.hpp"
