#pragma once

#include "capsforge/cider_metric.hpp"
#include "capsforge/corpus_io.hpp"
#include "capsforge/corpus_stats.hpp"
#include "capsforge/eval_service.hpp"
#include "capsforge/fusion_engine.hpp"
#include "capsforge/hash.hpp"
#include "capsforge/quality_filter.hpp"
#include "capsforge/text.hpp"
#include "capsforge/triplet_export.hpp"
