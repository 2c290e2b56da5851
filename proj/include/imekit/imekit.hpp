#pragma once

#include "imekit/common.hpp"
#include "imekit/curation.hpp"
#include "imekit/embedder.hpp"
#include "imekit/fixture.hpp"
#include "imekit/harness.hpp"
#include "imekit/hnsw.hpp"
#include "imekit/kv_splice.hpp"
#include "imekit/kv_store.hpp"
#include "imekit/memory.hpp"
#include "imekit/model.hpp"
#include "imekit/orchestrator.hpp"
#include "imekit/radix_cache.hpp"
#include "imekit/reference_model.hpp"
#include "imekit/reward.hpp"
#include "imekit/rng.hpp"
#include "imekit/rope.hpp"
#include "imekit/sampling.hpp"
#include "imekit/service.hpp"
#include "imekit/synthetic.hpp"
#include "imekit/template_model.hpp"
#include "imekit/tokenizer.hpp"
