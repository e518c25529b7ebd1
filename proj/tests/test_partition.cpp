#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mmoe/io.hpp"
#include "mmoe/partition.hpp"

using namespace mmoe;

namespace {

std::vector<std::pair<int, int>> digits_map_pairs() {
  std::vector<std::pair<int, int>> pairs;
  for (int d = 0; d <= 9; ++d) pairs.emplace_back(d, d < 5 ? 0 : 1);
  return pairs;
}

std::string write_temp(const std::string& name, const std::string& content) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path);
  out << content;
  return path.string();
}

}  // namespace

TEST_CASE("digits map builds two superclasses of five") {
  const SuperclassMap map = SuperclassMap::from_pairs(digits_map_pairs());
  CHECK(map.n_superclasses() == 2);
  CHECK(map.n_classes() == 10);
  CHECK(map.members[0].size() == 5);
  CHECK(map.members[1].size() == 5);
  CHECK(map.super_of(3) == 0);
  CHECK(map.super_of(7) == 1);
  CHECK(map.local_index(7) == 2);
}

TEST_CASE("missing fine class is a distinct error") {
  auto pairs = digits_map_pairs();
  pairs.erase(pairs.begin() + 7);
  CHECK_THROWS_AS(SuperclassMap::from_pairs(pairs), MissingFineClassError);
}

TEST_CASE("duplicate fine class is a distinct error") {
  auto pairs = digits_map_pairs();
  pairs.emplace_back(3, 1);
  CHECK_THROWS_AS(SuperclassMap::from_pairs(pairs), DuplicateFineClassError);
}

TEST_CASE("empty superclass is a distinct error") {
  std::vector<std::pair<int, int>> pairs = {{0, 0}, {1, 0}, {2, 2}};  // superclass 1 empty
  CHECK_THROWS_AS(SuperclassMap::from_pairs(pairs), EmptySuperclassError);
}

TEST_CASE("517/483 split of 1000 classes validates") {
  std::vector<std::pair<int, int>> pairs;
  for (int c = 0; c < 1000; ++c) pairs.emplace_back(c, c < 517 ? 0 : 1);
  const SuperclassMap map = SuperclassMap::from_pairs(pairs);
  CHECK(map.n_superclasses() == 2);
  CHECK(map.members[0].size() == 517);
  CHECK(map.members[1].size() == 483);
}

TEST_CASE("map file parsing with comments and tabs") {
  const std::string path = write_temp("mmoe_map_ok.tsv",
                                      "# digits\n"
                                      "0\t0\n1\t0\n2\t0\n3\t0\n4\t0\n"
                                      "5\t1\n6\t1\n7\t1\n8\t1\n9\t1  # second half\n");
  const SuperclassMap map = load_superclass_map(path);
  CHECK(map.n_superclasses() == 2);
  CHECK(map.super_of(9) == 1);
}

TEST_CASE("malformed map lines are rejected") {
  const std::string path = write_temp("mmoe_map_bad.tsv", "0\t0\n1\n");
  CHECK_THROWS_AS(load_superclass_map(path), PartitionError);
  CHECK_THROWS_AS(load_superclass_map("no_such_map_file.tsv"), IoError);
}

TEST_CASE("relabel replaces fine labels with superclass labels") {
  const SuperclassMap map = SuperclassMap::from_pairs(digits_map_pairs());
  LabeledDataset ds;
  ds.images = Tensor({3, 1, 2, 2});
  ds.labels = {0, 7, 3};
  const LabeledDataset out = relabel_superclass(ds, map);
  CHECK(out.labels == std::vector<int>{0, 1, 0});
  CHECK(out.images.data == ds.images.data);
}

TEST_CASE("identity map leaves labels unchanged") {
  std::vector<std::pair<int, int>> pairs;
  for (int c = 0; c < 4; ++c) pairs.emplace_back(c, c);
  const SuperclassMap map = SuperclassMap::from_pairs(pairs);
  LabeledDataset ds;
  ds.images = Tensor({4, 1, 1, 1});
  ds.labels = {2, 0, 3, 1};
  CHECK(relabel_superclass(ds, map).labels == ds.labels);
}

TEST_CASE("relabel conserves the sample count in the histogram") {
  const SuperclassMap map = SuperclassMap::from_pairs(digits_map_pairs());
  const LabeledDataset ds = synth_dataset(5, 10, 7, 8);
  const LabeledDataset out = relabel_superclass(ds, map);
  std::vector<int> hist(2, 0);
  for (int l : out.labels) ++hist[static_cast<std::size_t>(l)];
  CHECK(hist[0] + hist[1] == static_cast<int>(ds.size()));
  CHECK(hist[0] == 35);
  CHECK(hist[1] == 35);
}

TEST_CASE("restrict keeps only the superclass, relabeled locally") {
  const SuperclassMap map = SuperclassMap::from_pairs(digits_map_pairs());
  const LabeledDataset ds = synth_dataset(6, 10, 3, 8);
  const RestrictedDataset sub = restrict_to_superclass(ds, map, 1);
  CHECK(sub.data.size() == 15);
  CHECK(sub.local_to_global == std::vector<int>{5, 6, 7, 8, 9});
  for (std::size_t i = 0; i < sub.data.size(); ++i) {
    const int local = sub.data.labels[i];
    CHECK(local >= 0);
    CHECK(local < 5);
    CHECK(sub.local_to_global[static_cast<std::size_t>(local)] ==
          ds.labels[sub.source_indices[i]]);
  }
  CHECK_THROWS_AS(restrict_to_superclass(ds, map, 2), PartitionError);
}

TEST_CASE("restriction partitions the dataset") {
  const SuperclassMap map = SuperclassMap::from_pairs(digits_map_pairs());
  const LabeledDataset ds = synth_dataset(8, 10, 4, 8);
  std::size_t total = 0;
  std::set<std::size_t> seen;
  for (int i = 0; i < map.n_superclasses(); ++i) {
    const RestrictedDataset sub = restrict_to_superclass(ds, map, i);
    total += sub.data.size();
    for (std::size_t idx : sub.source_indices) {
      CHECK(seen.insert(idx).second);  // pairwise disjoint
    }
  }
  CHECK(total == ds.size());
  CHECK(seen.size() == ds.size());
}
