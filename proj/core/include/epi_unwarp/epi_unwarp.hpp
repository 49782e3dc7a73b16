#pragma once

#include "epi_unwarp/checkpoint.hpp"
#include "epi_unwarp/data_pipeline.hpp"
#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/layers.hpp"
#include "epi_unwarp/measures.hpp"
#include "epi_unwarp/nifti_io.hpp"
#include "epi_unwarp/optim.hpp"
#include "epi_unwarp/parallel.hpp"
#include "epi_unwarp/phantom.hpp"
#include "epi_unwarp/training.hpp"
#include "epi_unwarp/unet.hpp"
#include "epi_unwarp/unwarp.hpp"
#include "epi_unwarp/volume.hpp"
#include "epi_unwarp/volume_io.hpp"
