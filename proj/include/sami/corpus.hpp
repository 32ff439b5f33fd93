#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sami/rng.hpp"

namespace sami {

struct Query {
  std::string id;
  std::string text;
};

enum class Split { A, B };

// A query dataset with a fixed two-way split. The split alternates A,B,A,B,...
// in file order, so |A| and |B| differ by at most one and the assignment is a
// pure function of the file contents.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Query> queries);

  const std::vector<Query>& queries() const { return queries_; }
  size_t size() const { return queries_.size(); }

  Split split_of(size_t index) const { return index % 2 == 0 ? Split::A : Split::B; }
  std::vector<Query> split(Split s) const;

 private:
  std::vector<Query> queries_;
};

// Reads a JSONL file of {"id": ..., "text": ...} objects, one per line.
// Throws IoError for unreadable paths and ValidationError (naming the line)
// for malformed lines, extra keys, empty text, or duplicate ids.
Corpus load_queries(const std::filesystem::path& path);

// Iterations alternate between the two splits: odd -> A, even -> B.
// iteration must be >= 1.
std::vector<Query> split_for_iteration(const Corpus& corpus, int iteration);

struct Batch {
  std::vector<Query> queries;
  bool partial = false;  // set when the split ran out before batch_size
};

// Without-replacement batch sampling with epoch semantics: a shuffled pass
// over the split is exhausted before any query repeats. Single-writer; share
// only with external serialization.
class EpochSampler {
 public:
  EpochSampler(std::vector<Query> split, Rng rng);

  // Next batch of up to batch_size queries; marks `partial` when the epoch
  // remainder was smaller. Throws ValidationError on an empty split.
  Batch next_batch(size_t batch_size);

  // Single query in epoch order (reshuffles when a pass completes).
  Query next_query();

  // Queries left in the current pass.
  size_t remaining_in_epoch() const { return order_.size() - cursor_; }
  size_t split_size() const { return split_.size(); }

 private:
  void ensure_epoch();

  std::vector<Query> split_;
  Rng rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

}  // namespace sami
