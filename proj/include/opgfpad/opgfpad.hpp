#pragma once

// Umbrella header for the OPG fingerprint presentation-attack-detection
// toolkit.

#include "opgfpad/core.hpp"
#include "opgfpad/errors.hpp"
#include "opgfpad/rng.hpp"
#include "opgfpad/tensor.hpp"
#include "opgfpad/autodiff.hpp"
#include "opgfpad/netcore.hpp"
#include "opgfpad/image_io.hpp"
#include "opgfpad/ingest.hpp"
#include "opgfpad/minutiae.hpp"
#include "opgfpad/patching.hpp"
#include "opgfpad/opg.hpp"
#include "opgfpad/classifier.hpp"
#include "opgfpad/evaluation.hpp"
#include "opgfpad/protocols.hpp"
