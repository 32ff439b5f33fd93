#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sami {

// Byte-level vocabulary. Content symbols are distinct bytes with ids
// 0..n-1 in ascending byte order; the three specials take the top ids.
// Multibyte UTF-8 characters are simply sequences of byte tokens.
class Vocab {
 public:
  Vocab() = default;

  // Vocabulary over the printable ASCII range plus '\n' plus every byte seen
  // in the given texts, so any ASCII response stays in-vocabulary.
  static Vocab build(std::span<const std::string> texts);

  // Exact symbol list (used by checkpoint loading).
  static Vocab from_symbols(std::vector<uint8_t> symbols);

  size_t size() const { return symbols_.size() + 3; }
  size_t content_size() const { return symbols_.size(); }
  const std::vector<uint8_t>& symbols() const { return symbols_; }

  int bos() const { return static_cast<int>(symbols_.size()); }
  int eos() const { return static_cast<int>(symbols_.size()) + 1; }
  int pad() const { return static_cast<int>(symbols_.size()) + 2; }

  bool is_content(int id) const { return id >= 0 && id < static_cast<int>(symbols_.size()); }

  // Throws ValidationError on a byte outside the vocabulary.
  std::vector<int> encode(std::string_view text) const;

  // Content tokens become bytes; special ids are skipped.
  std::string decode(std::span<const int> tokens) const;

  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

 private:
  std::vector<uint8_t> symbols_;        // ascending
  std::array<int16_t, 256> byte_to_id_{};  // -1 when absent
  void rebuild_index();
};

}  // namespace sami
