#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmoe/dataset.hpp"

namespace mmoe {

// Disjoint, covering partition of fine-grained class ids into superclasses.
// Fine ids must be exactly {0..n_classes-1}, superclass ids exactly
// {0..N-1}, and every superclass non-empty. Member lists are kept in
// ascending fine-id order; a member's position is the expert-local label.
struct SuperclassMap {
  std::vector<int> fine_to_super;
  std::vector<std::vector<int>> members;

  int n_classes() const { return static_cast<int>(fine_to_super.size()); }
  int n_superclasses() const { return static_cast<int>(members.size()); }

  int super_of(int fine) const;

  // Expert-local label of a fine class within its superclass.
  int local_index(int fine) const;

  // Validates the pair list and builds the map. Throws
  // DuplicateFineClassError / MissingFineClassError / EmptySuperclassError.
  static SuperclassMap from_pairs(const std::vector<std::pair<int, int>>& pairs);
};

// Parses `<fine_id><TAB><superclass_id>` lines; '#' starts a comment.
std::vector<std::pair<int, int>> parse_map_pairs(const std::string& path);

SuperclassMap load_superclass_map(const std::string& path);

// Replaces each fine label with its superclass label. Image data is shared
// untouched.
LabeledDataset relabel_superclass(const LabeledDataset& ds, const SuperclassMap& map);

struct RestrictedDataset {
  LabeledDataset data;                     // labels are expert-local indices
  std::vector<int> local_to_global;        // local label -> fine class id
  std::vector<std::size_t> source_indices; // position in the original dataset
};

// Keeps only samples of superclass `i` and remaps labels to the superclass's
// local index order.
RestrictedDataset restrict_to_superclass(const LabeledDataset& ds, const SuperclassMap& map,
                                         int i);

}  // namespace mmoe
