#pragma once

#include <set>
#include <string>
#include <vector>

#include "dtn/data.hpp"
#include "dtn/errors.hpp"
#include "dtn/rng.hpp"

namespace dtn {

// Two-task corpus generator.  Sentences come from fixed context templates
// with typed entity slots; entity surface forms are drawn from per-type
// lexicons.  The target task shares `overlap` of each common type's lexicon
// (and of the template pool) with the source task, so what transfers is
// exactly the source's wider lexical coverage.  Slot types are drawn per
// sentence, independent of the template, which keeps context informative
// about entity boundaries but not about types.
struct SynthSpec {
  std::vector<std::string> source_types{"ALPHA", "BETA", "GAMMA"};
  std::vector<std::string> target_types{"ALPHA", "BETA", "GAMMA"};
  size_t lexicon_size = 150;     // surface forms per type per task
  double overlap = 0.8;          // shared fraction of lexicons and templates
  size_t context_pool = 220;     // distinct context words
  size_t template_count = 40;    // templates per task
  size_t min_len = 4;            // sentence length bounds, tokens
  size_t max_len = 9;
  size_t max_entities = 2;       // entity slots per sentence
  double morph_fraction = 0.5;   // forms carrying a type-specific suffix

  void validate() const {
    if (overlap < 0.0 || overlap > 1.0) throw ConfigError("synth overlap must be in [0,1]");
    if (source_types.empty() || target_types.empty())
      throw ConfigError("synth type inventories must be non-empty");
    if (lexicon_size == 0) throw ConfigError("synth lexicon_size must be positive");
    if (min_len < 3 || max_len < min_len) throw ConfigError("synth length bounds invalid");
    if (max_entities == 0 || max_entities > min_len / 2 + 1)
      throw ConfigError("synth max_entities out of range for the length bounds");
    if (morph_fraction < 0.0 || morph_fraction > 1.0)
      throw ConfigError("synth morph_fraction must be in [0,1]");
  }
};

class SynthGenerator {
 public:
  SynthGenerator(const SynthSpec& spec, uint64_t seed) : spec_(spec), seed_(seed) {
    spec_.validate();
    build();
  }

  // Deterministic per (spec, seed, side, split, n).
  Corpus generate(bool source_side, const std::string& split, size_t n) const {
    const auto& types = source_side ? spec_.source_types : spec_.target_types;
    const auto& lexicon = source_side ? source_lexicon_ : target_lexicon_;
    const auto& templates = source_side ? source_templates_ : target_templates_;
    Rng rng(derive_seed(seed_, std::string(source_side ? "src:" : "tgt:") + split));
    Corpus corpus;
    corpus.name = std::string(source_side ? "synth-source" : "synth-target") + "/" + split;
    corpus.split = split;
    corpus.sentences.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      const Template& tpl = templates[rng.index(templates.size())];
      Sentence s;
      for (const auto& item : tpl.items) {
        if (!item.is_slot) {
          s.tokens.push_back(item.word);
          s.tags.push_back("O");
          continue;
        }
        size_t ty = rng.index(types.size());
        const auto& forms = lexicon[ty];
        const auto& form = forms[rng.index(forms.size())];
        if (form.size() == 1) {
          s.tokens.push_back(form[0]);
          s.tags.push_back("S-" + types[ty]);
        } else {
          for (size_t k = 0; k < form.size(); ++k) {
            s.tokens.push_back(form[k]);
            if (k == 0)
              s.tags.push_back("B-" + types[ty]);
            else if (k + 1 == form.size())
              s.tags.push_back("E-" + types[ty]);
            else
              s.tags.push_back("I-" + types[ty]);
          }
        }
      }
      corpus.sentences.push_back(std::move(s));
    }
    corpus.index_tags();
    return corpus;
  }

  // Entity surface forms (joined with spaces) per side, for overlap checks.
  std::set<std::string> surface_forms(bool source_side) const {
    const auto& lexicon = source_side ? source_lexicon_ : target_lexicon_;
    std::set<std::string> out;
    for (const auto& forms : lexicon)
      for (const auto& f : forms) {
        std::string j = f[0];
        for (size_t k = 1; k < f.size(); ++k) j += " " + f[k];
        out.insert(j);
      }
    return out;
  }

 private:
  using Form = std::vector<std::string>;  // 1-2 tokens

  struct Item {
    bool is_slot = false;
    std::string word;
  };
  struct Template {
    std::vector<Item> items;
  };

  static const char* type_suffix(size_t ty) {
    static const char* kSuffixes[] = {"or", "an", "ix", "el", "um", "ar", "iv", "od"};
    return kSuffixes[ty % 8];
  }

  std::string syllable(Rng& rng) const {
    static const std::string cons = "bcdfghjklmnprstvz";
    static const std::string vowel = "aeiou";
    std::string s;
    s += cons[rng.index(cons.size())];
    s += vowel[rng.index(vowel.size())];
    return s;
  }

  std::string make_token(Rng& rng, size_t syllables) const {
    std::string t;
    for (size_t i = 0; i < syllables; ++i) t += syllable(rng);
    return t;
  }

  bool ends_with_any_suffix(const std::string& t, size_t except_ty) const {
    size_t n_types = std::max(spec_.source_types.size(), spec_.target_types.size());
    for (size_t ty = 0; ty < std::min<size_t>(n_types, 8); ++ty) {
      if (ty == except_ty) continue;
      std::string suf = type_suffix(ty);
      if (t.size() >= suf.size() && t.compare(t.size() - suf.size(), suf.size(), suf) == 0)
        return true;
    }
    return false;
  }

  Form make_form(Rng& rng, size_t ty, std::set<std::string>& used) const {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      size_t n_tokens = rng.bernoulli(0.3) ? 2 : 1;
      Form f;
      for (size_t k = 0; k < n_tokens; ++k) f.push_back(make_token(rng, 2 + rng.index(2)));
      if (rng.bernoulli(spec_.morph_fraction)) f.back() += type_suffix(ty);
      bool bad = ends_with_any_suffix(f.back(), ty);
      std::string joined = f[0];
      for (size_t k = 1; k < f.size(); ++k) joined += " " + f[k];
      if (bad || used.count(joined)) continue;
      used.insert(joined);
      return f;
    }
    throw StateError("synth: could not produce a fresh surface form");
  }

  void build() {
    Rng rng(derive_seed(seed_, "lexicon"));
    std::set<std::string> used_forms;

    source_lexicon_.resize(spec_.source_types.size());
    for (size_t ty = 0; ty < spec_.source_types.size(); ++ty)
      for (size_t i = 0; i < spec_.lexicon_size; ++i)
        source_lexicon_[ty].push_back(make_form(rng, ty, used_forms));

    target_lexicon_.resize(spec_.target_types.size());
    for (size_t ty = 0; ty < spec_.target_types.size(); ++ty) {
      // shared slice comes verbatim from the source lexicon of the same type
      auto src_ty = std::find(spec_.source_types.begin(), spec_.source_types.end(),
                              spec_.target_types[ty]);
      size_t n_shared = 0;
      if (src_ty != spec_.source_types.end())
        n_shared = static_cast<size_t>(spec_.overlap * spec_.lexicon_size + 0.5);
      if (n_shared > 0) {
        const auto& src_forms = source_lexicon_[src_ty - spec_.source_types.begin()];
        std::vector<size_t> idx(src_forms.size());
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        for (size_t i = 0; i < std::min(n_shared, src_forms.size()); ++i)
          target_lexicon_[ty].push_back(src_forms[idx[i]]);
      }
      while (target_lexicon_[ty].size() < spec_.lexicon_size)
        target_lexicon_[ty].push_back(make_form(rng, ty, used_forms));
    }

    // context vocabulary, disjoint from every entity token
    std::set<std::string> entity_tokens;
    for (const auto& lex : {source_lexicon_, target_lexicon_})
      for (const auto& forms : lex)
        for (const auto& f : forms)
          for (const auto& t : f) entity_tokens.insert(t);
    Rng crng(derive_seed(seed_, "context"));
    std::set<std::string> pool_set;
    while (context_pool_.size() < spec_.context_pool) {
      std::string w = make_token(crng, 1 + crng.index(3));
      if (entity_tokens.count(w) || pool_set.count(w) || ends_with_any_suffix(w, SIZE_MAX))
        continue;
      pool_set.insert(w);
      context_pool_.push_back(w);
    }

    Rng trng(derive_seed(seed_, "templates"));
    size_t n_shared_tpl = static_cast<size_t>(spec_.overlap * spec_.template_count + 0.5);
    std::vector<Template> shared;
    for (size_t i = 0; i < n_shared_tpl; ++i) shared.push_back(make_template(trng));
    source_templates_ = shared;
    target_templates_ = shared;
    while (source_templates_.size() < spec_.template_count)
      source_templates_.push_back(make_template(trng));
    while (target_templates_.size() < spec_.template_count)
      target_templates_.push_back(make_template(trng));
  }

  Template make_template(Rng& rng) {
    size_t len = spec_.min_len + rng.index(spec_.max_len - spec_.min_len + 1);
    size_t n_slots = 1 + rng.index(spec_.max_entities);
    std::vector<size_t> positions(len);
    std::iota(positions.begin(), positions.end(), 0);
    rng.shuffle(positions);
    std::set<size_t> slot_at(positions.begin(), positions.begin() + n_slots);
    Template tpl;
    for (size_t p = 0; p < len; ++p) {
      Item item;
      if (slot_at.count(p)) {
        item.is_slot = true;
      } else {
        item.word = context_pool_[rng.index(context_pool_.size())];
      }
      tpl.items.push_back(item);
    }
    return tpl;
  }

  SynthSpec spec_;
  uint64_t seed_;
  std::vector<std::vector<Form>> source_lexicon_;  // [type][form]
  std::vector<std::vector<Form>> target_lexicon_;
  std::vector<std::string> context_pool_;
  std::vector<Template> source_templates_;
  std::vector<Template> target_templates_;
};

inline std::pair<Corpus, Corpus> synth_generate(const SynthSpec& spec, size_t n_source,
                                                size_t n_target, uint64_t seed,
                                                const std::string& split = "train") {
  SynthGenerator gen(spec, seed);
  return {gen.generate(true, split, n_source), gen.generate(false, split, n_target)};
}

}  // namespace dtn
