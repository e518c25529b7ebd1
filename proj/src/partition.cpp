#include "mmoe/partition.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "mmoe/error.hpp"

namespace mmoe {

int SuperclassMap::super_of(int fine) const {
  if (fine < 0 || fine >= n_classes()) {
    throw PartitionError("fine class " + std::to_string(fine) + " not covered by the map");
  }
  return fine_to_super[static_cast<std::size_t>(fine)];
}

int SuperclassMap::local_index(int fine) const {
  const std::vector<int>& m = members[static_cast<std::size_t>(super_of(fine))];
  const auto it = std::lower_bound(m.begin(), m.end(), fine);
  return static_cast<int>(it - m.begin());
}

SuperclassMap SuperclassMap::from_pairs(const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty()) throw PartitionError("superclass map is empty");

  int max_fine = -1;
  int max_super = -1;
  for (const auto& [fine, super] : pairs) {
    if (fine < 0) throw PartitionError("negative fine class id " + std::to_string(fine));
    if (super < 0) throw PartitionError("negative superclass id " + std::to_string(super));
    max_fine = std::max(max_fine, fine);
    max_super = std::max(max_super, super);
  }

  SuperclassMap map;
  map.fine_to_super.assign(static_cast<std::size_t>(max_fine) + 1, -1);
  for (const auto& [fine, super] : pairs) {
    int& slot = map.fine_to_super[static_cast<std::size_t>(fine)];
    if (slot != -1) {
      throw DuplicateFineClassError("fine class " + std::to_string(fine) +
                                    " assigned more than once");
    }
    slot = super;
  }
  for (std::size_t f = 0; f < map.fine_to_super.size(); ++f) {
    if (map.fine_to_super[f] == -1) {
      throw MissingFineClassError("missing fine class " + std::to_string(f));
    }
  }

  map.members.assign(static_cast<std::size_t>(max_super) + 1, {});
  for (std::size_t f = 0; f < map.fine_to_super.size(); ++f) {
    map.members[static_cast<std::size_t>(map.fine_to_super[f])].push_back(static_cast<int>(f));
  }
  for (std::size_t s = 0; s < map.members.size(); ++s) {
    if (map.members[s].empty()) {
      throw EmptySuperclassError("superclass " + std::to_string(s) + " has no members");
    }
    // already ascending: fine ids were inserted in increasing order
  }
  return map;
}

std::vector<std::pair<int, int>> parse_map_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open superclass map file: " + path);
  std::vector<std::pair<int, int>> pairs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long fine = 0, super = 0;
    if (!(ls >> fine)) continue;  // blank / comment-only line
    if (!(ls >> super)) {
      throw PartitionError(path + ":" + std::to_string(line_no) +
                           ": expected `<fine_id><TAB><superclass_id>`");
    }
    std::string rest;
    if (ls >> rest) {
      throw PartitionError(path + ":" + std::to_string(line_no) + ": trailing content `" + rest +
                           "`");
    }
    pairs.emplace_back(static_cast<int>(fine), static_cast<int>(super));
  }
  return pairs;
}

SuperclassMap load_superclass_map(const std::string& path) {
  return SuperclassMap::from_pairs(parse_map_pairs(path));
}

LabeledDataset relabel_superclass(const LabeledDataset& ds, const SuperclassMap& map) {
  LabeledDataset out;
  out.images = ds.images;
  out.labels.resize(ds.labels.size());
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    out.labels[i] = map.super_of(ds.labels[i]);
  }
  return out;
}

RestrictedDataset restrict_to_superclass(const LabeledDataset& ds, const SuperclassMap& map,
                                         int i) {
  if (i < 0 || i >= map.n_superclasses()) {
    throw PartitionError("invalid superclass id " + std::to_string(i));
  }
  RestrictedDataset out;
  out.local_to_global = map.members[static_cast<std::size_t>(i)];
  for (std::size_t n = 0; n < ds.size(); ++n) {
    if (map.super_of(ds.labels[n]) == i) out.source_indices.push_back(n);
  }
  out.data.images = ds.gather_images(out.source_indices);
  out.data.labels.resize(out.source_indices.size());
  for (std::size_t n = 0; n < out.source_indices.size(); ++n) {
    out.data.labels[n] = map.local_index(ds.labels[out.source_indices[n]]);
  }
  return out;
}

}  // namespace mmoe
