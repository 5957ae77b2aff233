#include "openvad/text_encoder.hpp"

#include <cctype>

namespace openvad {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TextEncoder TextEncoder::toy(PrototypeTable table, std::uint64_t seed) {
  if (table.embed_dim < 1) throw ValidationError("toy text encoder needs a prototype table");
  TextEncoder enc;
  enc.mode_ = TextEncoderMode::kToyPrototype;
  enc.embed_dim_ = table.embed_dim;
  enc.table_ = std::move(table);
  enc.seed_ = seed;
  return enc;
}

TextEncoder TextEncoder::external(int embed_dim) {
  if (embed_dim < 1) throw ValidationError("embedding width must be positive");
  TextEncoder enc;
  enc.mode_ = TextEncoderMode::kExternalEmbedding;
  enc.embed_dim_ = embed_dim;
  return enc;
}

Vec TextEncoder::token_vector(std::string_view token) const {
  if (const PrototypeEntry* p = table_.find_name(token)) return p->vector;
  Rng rng(splitmix64(fnv1a64(token) ^ splitmix64(seed_)));
  Vec v(embed_dim_);
  for (int i = 0; i < embed_dim_; ++i) v(i) = rng.normal();
  return v / v.norm();
}

Vec TextEncoder::embed_prompt(std::string_view prompt) const {
  if (mode_ != TextEncoderMode::kToyPrototype) throw ValidationError("prompt encoding needs the toy encoder");
  std::vector<std::string> tokens = tokenize(prompt);
  if (tokens.empty()) {
    if (prompt.empty()) throw ValidationError("cannot encode an empty prompt");
    tokens.emplace_back(prompt);
  }
  Vec acc = Vec::Zero(embed_dim_);
  for (const auto& t : tokens) acc += token_vector(t);
  const double n = acc.norm();
  if (n == 0.0) return token_vector(prompt);
  return acc / n;
}

Vec TextEncoder::embed_entry(const ClassEntry& entry) const {
  if (entry.embedding) {
    if (static_cast<int>(entry.embedding->size()) != embed_dim_) {
      throw ValidationError("embedding of class '" + entry.class_id + "' has width " +
                            std::to_string(entry.embedding->size()) + ", expected " + std::to_string(embed_dim_));
    }
    Vec v = Eigen::Map<const Vec>(entry.embedding->data(), embed_dim_);
    const double n = v.norm();
    if (n == 0.0) throw ValidationError("embedding of class '" + entry.class_id + "' is zero");
    return v / n;
  }
  if (mode_ == TextEncoderMode::kExternalEmbedding) {
    throw ValidationError("class '" + entry.class_id + "' has no embedding (external embedding mode)");
  }
  if (const PrototypeEntry* p = table_.find_id(entry.class_id)) return p->vector;
  return embed_prompt(entry.prompt_text);
}

Mat TextEncoder::embed(const AnomalyDefinition& definition) const {
  Mat out(definition.size(), embed_dim_);
  for (int i = 0; i < definition.size(); ++i) out.row(i) = embed_entry(definition.entry(i)).transpose();
  return out;
}

}  // namespace openvad
