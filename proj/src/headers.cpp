// Compiles every public header on its own so a missing include shows up at
// build time rather than in a user's translation unit.

#include "macnn/checkpoint.hpp"
#include "macnn/config.hpp"
#include "macnn/dataset_io.hpp"
#include "macnn/digest.hpp"
#include "macnn/error.hpp"
#include "macnn/evaluation.hpp"
#include "macnn/image_codec.hpp"
#include "macnn/inference.hpp"
#include "macnn/layers.hpp"
#include "macnn/network.hpp"
#include "macnn/parallel.hpp"
#include "macnn/patcher.hpp"
#include "macnn/pipeline.hpp"
#include "macnn/postprocess.hpp"
#include "macnn/preprocess.hpp"
#include "macnn/probability_map.hpp"
#include "macnn/raster.hpp"
#include "macnn/synthetic.hpp"
#include "macnn/tensor.hpp"
