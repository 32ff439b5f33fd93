#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sami/corpus.hpp"
#include "sami/rng.hpp"

namespace sami {

enum class Polarity { thesis, antithesis };

// A behavioral clause and its deliberate opposite. checker_id optionally
// binds the principle to a programmatic judge rule (see eval module).
struct Principle {
  std::string name;
  std::string definition;
  std::string antithesis;
  std::string checker_id;  // empty when not bound to a rule checker

  const std::string& clause(Polarity p) const {
    return p == Polarity::thesis ? definition : antithesis;
  }
};

class PrincipleSet {
 public:
  PrincipleSet() = default;
  explicit PrincipleSet(std::vector<Principle> principles);

  const std::vector<Principle>& principles() const { return principles_; }
  size_t size() const { return principles_.size(); }
  const Principle& at(size_t i) const { return principles_.at(i); }
  const Principle& by_name(const std::string& name) const;
  bool contains(const std::string& name) const;

  // Insertion-ordered subset; throws on unknown names.
  PrincipleSet subset(const std::vector<std::string>& names) const;

 private:
  std::vector<Principle> principles_;
};

// JSON object mapping principle names to {"definition", "antithesis",
// optional "checker_id"}; insertion order is preserved.
PrincipleSet load_principles(const std::filesystem::path& path);

struct Clause {
  std::string principle_name;
  Polarity polarity;
  std::string text;
};

// An ordered list of clauses rendered as a numbered list ("1. ...\n2. ...").
class Constitution {
 public:
  explicit Constitution(std::vector<Clause> clauses);

  const std::vector<Clause>& clauses() const { return clauses_; }
  const std::string& rendered_text() const { return rendered_; }

  std::optional<Polarity> polarity_of(const std::string& principle_name) const;

  // e.g. "concise:thesis+comprehensive:antithesis", used in logs and dumps.
  std::string polarity_signature() const;

 private:
  std::vector<Clause> clauses_;
  std::string rendered_;
};

// The four polarity combinations of two distinct principles, in the fixed
// order (t,t), (a,t), (t,a), (a,a).
std::vector<Constitution> grid_constitutions(const Principle& p1, const Principle& p2);

// Two constitutions over the same two uniformly-drawn distinct principles,
// with independent per-clause polarities, resampled (both vectors) until the
// pair differs in at least one clause polarity.
std::pair<Constitution, Constitution> sample_random_pair(const PrincipleSet& set,
                                                         Rng& rng);

enum class TemplateKind { generation, finetune, evaluation };

// A prompt template with {constitution} and {query} placeholders, each
// required exactly once.
class PromptTemplate {
 public:
  PromptTemplate(TemplateKind kind, std::string text);

  static PromptTemplate load(TemplateKind kind, const std::filesystem::path& path);

  TemplateKind kind() const { return kind_; }
  const std::string& text() const { return text_; }

 private:
  TemplateKind kind_;
  std::string text_;
};

// Byte-deterministic placeholder substitution.
std::string render_prompt(const PromptTemplate& tmpl, const Constitution& constitution,
                          const Query& query);

}  // namespace sami
