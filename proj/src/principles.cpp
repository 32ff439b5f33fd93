#include "sami/principles.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sami/error.hpp"

namespace sami {

PrincipleSet::PrincipleSet(std::vector<Principle> principles)
    : principles_(std::move(principles)) {
  if (principles_.empty()) throw ValidationError("no principles");
  for (const auto& p : principles_) {
    if (p.name.empty()) throw ValidationError("principle with empty name");
    if (p.definition.empty() || p.antithesis.empty()) {
      throw ValidationError("principle '" + p.name + "' has an empty clause");
    }
    if (p.definition == p.antithesis) {
      throw ValidationError("principle '" + p.name +
                            "': definition equals antithesis");
    }
  }
  for (size_t i = 0; i < principles_.size(); ++i) {
    for (size_t j = i + 1; j < principles_.size(); ++j) {
      if (principles_[i].name == principles_[j].name) {
        throw ValidationError("duplicate principle name '" + principles_[i].name + "'");
      }
    }
  }
}

const Principle& PrincipleSet::by_name(const std::string& name) const {
  for (const auto& p : principles_) {
    if (p.name == name) return p;
  }
  throw ValidationError("unknown principle '" + name + "'");
}

bool PrincipleSet::contains(const std::string& name) const {
  for (const auto& p : principles_) {
    if (p.name == name) return true;
  }
  return false;
}

PrincipleSet PrincipleSet::subset(const std::vector<std::string>& names) const {
  std::vector<Principle> out;
  for (const auto& n : names) out.push_back(by_name(n));
  return PrincipleSet(std::move(out));
}

PrincipleSet load_principles(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open principles file: " + path.string());

  // ordered_json keeps file order, which defines the set's ordering.
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("principles file " + path.string() +
                          ": parse error: " + e.what());
  }
  if (!doc.is_object()) {
    throw ValidationError("principles file must be a JSON object");
  }

  std::vector<Principle> principles;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& name = it.key();
    const auto& entry = it.value();
    if (!entry.is_object()) {
      throw ValidationError("principle '" + name + "': entry must be an object");
    }
    Principle p;
    p.name = name;
    for (auto field = entry.begin(); field != entry.end(); ++field) {
      if (field.key() == "definition" && field.value().is_string()) {
        p.definition = field.value().get<std::string>();
      } else if (field.key() == "antithesis" && field.value().is_string()) {
        p.antithesis = field.value().get<std::string>();
      } else if (field.key() == "checker_id" && field.value().is_string()) {
        p.checker_id = field.value().get<std::string>();
      } else {
        throw ValidationError("principle '" + name + "': unexpected field '" +
                              field.key() + "'");
      }
    }
    if (p.definition.empty()) {
      throw ValidationError("principle '" + name + "': missing or empty definition");
    }
    if (p.antithesis.empty()) {
      throw ValidationError("principle '" + name + "': missing or empty antithesis");
    }
    if (p.definition == p.antithesis) {
      throw ValidationError("principle '" + name + "': definition equals antithesis");
    }
    principles.push_back(std::move(p));
  }
  if (principles.empty()) throw ValidationError("no principles");
  return PrincipleSet(std::move(principles));
}

Constitution::Constitution(std::vector<Clause> clauses) : clauses_(std::move(clauses)) {
  if (clauses_.empty()) throw ValidationError("constitution needs at least one clause");
  std::ostringstream out;
  for (size_t i = 0; i < clauses_.size(); ++i) {
    if (i > 0) out << '\n';
    out << (i + 1) << ". " << clauses_[i].text;
  }
  rendered_ = out.str();
}

std::optional<Polarity> Constitution::polarity_of(const std::string& principle_name) const {
  for (const auto& c : clauses_) {
    if (c.principle_name == principle_name) return c.polarity;
  }
  return std::nullopt;
}

std::string Constitution::polarity_signature() const {
  std::string out;
  for (const auto& c : clauses_) {
    if (!out.empty()) out += '+';
    out += c.principle_name;
    out += c.polarity == Polarity::thesis ? ":thesis" : ":antithesis";
  }
  return out;
}

namespace {

Constitution make_constitution(const Principle& p1, Polarity pol1, const Principle& p2,
                               Polarity pol2) {
  return Constitution({Clause{p1.name, pol1, p1.clause(pol1)},
                       Clause{p2.name, pol2, p2.clause(pol2)}});
}

}  // namespace

std::vector<Constitution> grid_constitutions(const Principle& p1, const Principle& p2) {
  if (p1.name == p2.name) {
    throw ValidationError("grid_constitutions requires two distinct principles");
  }
  std::vector<Constitution> grid;
  grid.push_back(make_constitution(p1, Polarity::thesis, p2, Polarity::thesis));
  grid.push_back(make_constitution(p1, Polarity::antithesis, p2, Polarity::thesis));
  grid.push_back(make_constitution(p1, Polarity::thesis, p2, Polarity::antithesis));
  grid.push_back(make_constitution(p1, Polarity::antithesis, p2, Polarity::antithesis));
  return grid;
}

std::pair<Constitution, Constitution> sample_random_pair(const PrincipleSet& set,
                                                         Rng& rng) {
  if (set.size() < 2) {
    throw ValidationError("sample_random_pair needs at least 2 principles");
  }
  const size_t i = static_cast<size_t>(rng.below(set.size()));
  size_t j = static_cast<size_t>(rng.below(set.size() - 1));
  if (j >= i) ++j;
  const Principle& p1 = set.at(i);
  const Principle& p2 = set.at(j);

  // Resample both polarity vectors until the two constitutions differ in at
  // least one clause, so the pair is guaranteed contrastive.
  while (true) {
    std::array<Polarity, 2> a{rng.next_bool() ? Polarity::thesis : Polarity::antithesis,
                              rng.next_bool() ? Polarity::thesis : Polarity::antithesis};
    std::array<Polarity, 2> b{rng.next_bool() ? Polarity::thesis : Polarity::antithesis,
                              rng.next_bool() ? Polarity::thesis : Polarity::antithesis};
    if (a == b) continue;
    return {make_constitution(p1, a[0], p2, a[1]), make_constitution(p1, b[0], p2, b[1])};
  }
}

namespace {

size_t count_occurrences(const std::string& text, const std::string& needle) {
  size_t count = 0;
  size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace

PromptTemplate::PromptTemplate(TemplateKind kind, std::string text)
    : kind_(kind), text_(std::move(text)) {
  for (const char* placeholder : {"{constitution}", "{query}"}) {
    const size_t n = count_occurrences(text_, placeholder);
    if (n != 1) {
      throw ValidationError(std::string("template must contain ") + placeholder +
                            " exactly once (found " + std::to_string(n) + ")");
    }
  }
  // Any other {word} token would survive substitution unresolved.
  size_t pos = 0;
  while ((pos = text_.find('{', pos)) != std::string::npos) {
    const size_t end = text_.find('}', pos);
    if (end == std::string::npos) break;
    const std::string token = text_.substr(pos, end - pos + 1);
    if (token != "{constitution}" && token != "{query}") {
      throw ValidationError("template contains unresolved placeholder " + token);
    }
    pos = end + 1;
  }
}

PromptTemplate PromptTemplate::load(TemplateKind kind,
                                    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open template file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return PromptTemplate(kind, buf.str());
}

std::string render_prompt(const PromptTemplate& tmpl, const Constitution& constitution,
                          const Query& query) {
  // Splice by template positions so substituted values are never rescanned
  // (a value may legally contain placeholder-looking text).
  const std::string& t = tmpl.text();
  struct Slot {
    size_t pos;
    size_t len;
    const std::string* value;
  };
  const std::string& ctext = constitution.rendered_text();
  std::array<Slot, 2> slots{
      Slot{t.find("{constitution}"), 14, &ctext},
      Slot{t.find("{query}"), 7, &query.text},
  };
  if (slots[0].pos > slots[1].pos) std::swap(slots[0], slots[1]);

  std::string out;
  out.reserve(t.size() + ctext.size() + query.text.size());
  size_t cursor = 0;
  for (const Slot& s : slots) {
    out.append(t, cursor, s.pos - cursor);
    out.append(*s.value);
    cursor = s.pos + s.len;
  }
  out.append(t, cursor, t.size() - cursor);
  return out;
}

}  // namespace sami
