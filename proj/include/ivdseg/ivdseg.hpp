#pragma once

#include "ivdseg/augment.hpp"
#include "ivdseg/components.hpp"
#include "ivdseg/config.hpp"
#include "ivdseg/contrast.hpp"
#include "ivdseg/error.hpp"
#include "ivdseg/experiment.hpp"
#include "ivdseg/metrics.hpp"
#include "ivdseg/nn/gradcheck.hpp"
#include "ivdseg/phantom.hpp"
#include "ivdseg/pipeline.hpp"
#include "ivdseg/rng.hpp"
#include "ivdseg/unet.hpp"
#include "ivdseg/volume.hpp"
#include "ivdseg/volume_io.hpp"
