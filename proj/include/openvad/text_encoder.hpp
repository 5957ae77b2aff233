#pragma once

#include <string_view>

#include "openvad/core.hpp"
#include "openvad/data.hpp"

namespace openvad {

enum class TextEncoderMode { kToyPrototype, kExternalEmbedding };

/// Deterministic stand-in for a text encoder. Maps each class of a definition
/// to a unit vector in the video embedding space.
///
/// Toy mode: a class_id present in the prototype table maps to its prototype.
/// Otherwise the prompt is tokenized (lower-cased alphanumeric runs); a token
/// naming a prototype contributes that prototype, any other token contributes
/// a unit vector seeded from its hash. Contributions are summed and
/// normalized. Entries carrying an explicit embedding pass it through.
///
/// External mode: every entry must carry an embedding of width embed_dim.
class TextEncoder {
 public:
  static TextEncoder toy(PrototypeTable table, std::uint64_t seed = 0);
  static TextEncoder external(int embed_dim);

  TextEncoderMode mode() const { return mode_; }
  int embed_dim() const { return embed_dim_; }
  const PrototypeTable& prototypes() const { return table_; }

  /// C x E matrix with unit-norm rows.
  Mat embed(const AnomalyDefinition& definition) const;
  Vec embed_entry(const ClassEntry& entry) const;
  Vec embed_prompt(std::string_view prompt) const;

 private:
  TextEncoder() = default;
  Vec token_vector(std::string_view token) const;

  TextEncoderMode mode_ = TextEncoderMode::kToyPrototype;
  int embed_dim_ = 0;
  PrototypeTable table_;
  std::uint64_t seed_ = 0;
};

std::vector<std::string> tokenize(std::string_view text);

}  // namespace openvad
