#pragma once

#include "queueseq/seqmodel/checkpoint.hpp"
#include "queueseq/seqmodel/config.hpp"
#include "queueseq/seqmodel/generate.hpp"
#include "queueseq/seqmodel/params.hpp"
#include "queueseq/seqmodel/tokens.hpp"
#include "queueseq/seqmodel/train.hpp"
#include "queueseq/seqmodel/transformer.hpp"
