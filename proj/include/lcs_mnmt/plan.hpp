#pragma once

// Per-example instructions for the encoder (which layers receive the target
// language embedding, which positions are hidden from attention, where a tag
// embedding is re-added) and the prepared encoder/decoder token sequences.

#include <optional>
#include <set>
#include <string>
#include <utility>

#include "lcs_mnmt/vocabulary.hpp"

namespace lcs {

// Adds (restore) or substitutes (swap) the initial embedding of `tag_id` at
// `position`, right before layer `layer` runs its self-attention.
struct TagEdit {
  int layer = 0;
  int position = 0;
  int tag_id = 0;

  bool operator==(const TagEdit&) const = default;
};

struct InjectionPlan {
  std::optional<int> injected_embedding_id;  // the tag whose embedding is e^t
  std::set<int> converter_layers;            // layers that receive h + e^t
  std::set<std::pair<int, int>> mask_schedule;  // (layer, position) hidden as key and query
  std::optional<TagEdit> restore;
  std::optional<TagEdit> swap;

  bool masked(int layer, int position) const { return mask_schedule.count({layer, position}) != 0; }

  bool injects_at(int layer) const {
    return injected_embedding_id.has_value() && converter_layers.count(layer) != 0;
  }

  bool empty() const {
    return !injected_embedding_id && converter_layers.empty() && mask_schedule.empty() && !restore && !swap;
  }

  bool operator==(const InjectionPlan&) const = default;
};

struct PreparedExample {
  TokenSeq enc_input_ids;
  TokenSeq dec_input_ids;
  TokenSeq dec_target_ids;
  InjectionPlan plan;
  std::string src_lang;
  std::string tgt_lang;

  bool operator==(const PreparedExample&) const = default;
};

}  // namespace lcs
