#pragma once

// Everything except the HTTP adaptor (http_server.hpp), which pulls in the
// networking library.

#include "aggregation.hpp"
#include "api.hpp"
#include "config.hpp"
#include "error.hpp"
#include "event_log.hpp"
#include "image_io.hpp"
#include "metrics.hpp"
#include "orchestrator.hpp"
#include "patching.hpp"
#include "polygon.hpp"
#include "raster.hpp"
#include "report.hpp"
#include "rng.hpp"
#include "saliency.hpp"
#include "segmentation.hpp"
#include "service.hpp"
#include "simworker.hpp"
