#include "sami/corpus.hpp"

#include <fstream>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

#include "sami/error.hpp"

namespace sami {

namespace {

bool is_blank(const std::string& s) {
  for (char c : s) {
    if (c != ' ' && c != '\t' && c != '\r' && c != '\n') return false;
  }
  return true;
}

}  // namespace

Corpus::Corpus(std::vector<Query> queries) : queries_(std::move(queries)) {
  std::unordered_set<std::string> seen;
  for (const auto& q : queries_) {
    if (is_blank(q.text)) {
      throw ValidationError("query '" + q.id + "' has empty text");
    }
    if (!seen.insert(q.id).second) {
      throw ValidationError("duplicate query id '" + q.id + "'");
    }
  }
  if (queries_.empty()) throw ValidationError("empty corpus");
}

std::vector<Query> Corpus::split(Split s) const {
  std::vector<Query> out;
  for (size_t i = 0; i < queries_.size(); ++i) {
    if (split_of(i) == s) out.push_back(queries_[i]);
  }
  return out;
}

Corpus load_queries(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open queries file: " + path.string());

  std::vector<Query> queries;
  std::unordered_set<std::string> seen;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("queries line " + std::to_string(line_no) +
                            ": parse error: " + e.what());
    }
    if (!obj.is_object() || obj.size() != 2 || !obj.contains("id") ||
        !obj.contains("text") || !obj["id"].is_string() ||
        !obj["text"].is_string()) {
      throw ValidationError("queries line " + std::to_string(line_no) +
                            ": expected exactly {\"id\": string, \"text\": string}");
    }
    Query q{obj["id"].get<std::string>(), obj["text"].get<std::string>()};
    if (is_blank(q.text)) {
      throw ValidationError("queries line " + std::to_string(line_no) +
                            ": empty text for id '" + q.id + "'");
    }
    if (!seen.insert(q.id).second) {
      throw ValidationError("queries line " + std::to_string(line_no) +
                            ": duplicate id '" + q.id + "'");
    }
    queries.push_back(std::move(q));
  }
  if (queries.empty()) throw ValidationError("empty corpus");
  return Corpus(std::move(queries));
}

std::vector<Query> split_for_iteration(const Corpus& corpus, int iteration) {
  if (iteration < 1) {
    throw ValidationError("iteration must be >= 1, got " + std::to_string(iteration));
  }
  return corpus.split(iteration % 2 == 1 ? Split::A : Split::B);
}

EpochSampler::EpochSampler(std::vector<Query> split, Rng rng)
    : split_(std::move(split)), rng_(rng) {
  order_.resize(split_.size());
  std::iota(order_.begin(), order_.end(), size_t{0});
  if (!split_.empty()) rng_.shuffle(std::span<size_t>(order_));
}

void EpochSampler::ensure_epoch() {
  if (cursor_ >= order_.size()) {
    rng_.shuffle(std::span<size_t>(order_));
    cursor_ = 0;
  }
}

Batch EpochSampler::next_batch(size_t batch_size) {
  if (split_.empty()) throw ValidationError("cannot sample from an empty split");
  ensure_epoch();
  Batch batch;
  while (batch.queries.size() < batch_size && cursor_ < order_.size()) {
    batch.queries.push_back(split_[order_[cursor_++]]);
  }
  batch.partial = batch.queries.size() < batch_size;
  return batch;
}

Query EpochSampler::next_query() {
  if (split_.empty()) throw ValidationError("cannot sample from an empty split");
  ensure_epoch();
  return split_[order_[cursor_++]];
}

}  // namespace sami
