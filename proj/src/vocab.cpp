#include "sami/vocab.hpp"

#include <algorithm>
#include <array>

#include "sami/error.hpp"

namespace sami {

void Vocab::rebuild_index() {
  byte_to_id_.fill(-1);
  for (size_t i = 0; i < symbols_.size(); ++i) {
    byte_to_id_[symbols_[i]] = static_cast<int16_t>(i);
  }
}

Vocab Vocab::build(std::span<const std::string> texts) {
  std::array<bool, 256> present{};
  for (int b = 32; b <= 126; ++b) present[b] = true;
  present[static_cast<unsigned char>('\n')] = true;
  for (const auto& text : texts) {
    for (unsigned char c : text) present[c] = true;
  }
  std::vector<uint8_t> symbols;
  for (int b = 0; b < 256; ++b) {
    if (present[b]) symbols.push_back(static_cast<uint8_t>(b));
  }
  return from_symbols(std::move(symbols));
}

Vocab Vocab::from_symbols(std::vector<uint8_t> symbols) {
  if (symbols.empty()) throw ValidationError("vocabulary needs at least one symbol");
  std::vector<uint8_t> sorted = symbols;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ValidationError("vocabulary symbols must be distinct");
  }
  if (sorted != symbols) throw ValidationError("vocabulary symbols must be ascending");
  Vocab v;
  v.symbols_ = std::move(symbols);
  v.rebuild_index();
  return v;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    const int16_t id = byte_to_id_[c];
    if (id < 0) {
      throw ValidationError("byte 0x" + std::to_string(static_cast<int>(c)) +
                            " is outside the vocabulary");
    }
    out.push_back(id);
  }
  return out;
}

std::string Vocab::decode(std::span<const int> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (is_content(id)) out.push_back(static_cast<char>(symbols_[static_cast<size_t>(id)]));
  }
  return out;
}

}  // namespace sami
