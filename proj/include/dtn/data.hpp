#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtn/errors.hpp"
#include "dtn/rng.hpp"
#include "dtn/tensor.hpp"

namespace dtn {

struct Sentence {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;

  size_t size() const { return tokens.size(); }
  bool operator==(const Sentence&) const = default;
};

struct Corpus {
  std::string name;
  std::string split;  // train / dev / test
  std::vector<Sentence> sentences;
  std::set<std::string> tag_set;

  size_t size() const { return sentences.size(); }
  size_t token_count() const {
    size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
  void index_tags() {
    tag_set.clear();
    for (const auto& s : sentences)
      for (const auto& t : s.tags) tag_set.insert(t);
  }
};

// ---- tag scheme handling ----------------------------------------------------

struct TagParts {
  char prefix = 'O';   // O, B, I, E, S
  std::string type;    // empty for O
};

inline TagParts split_tag(const std::string& tag) {
  if (tag == "O") return {};
  if (tag.size() >= 3 && tag[1] == '-' &&
      (tag[0] == 'B' || tag[0] == 'I' || tag[0] == 'E' || tag[0] == 'S'))
    return {tag[0], tag.substr(2)};
  throw DataError("malformed tag: '" + tag + "'");
}

// BIO -> IOBES.  Stray I- tags (no matching open entity) are repaired to B-
// before conversion; `repairs`, when given, counts them.
inline std::vector<std::string> bio_to_iobes(const std::vector<std::string>& tags,
                                             size_t* repairs = nullptr) {
  std::vector<std::string> bio = tags;
  std::string prev_type;
  bool prev_entity = false;
  for (auto& t : bio) {
    TagParts p = split_tag(t);
    if (p.prefix == 'I') {
      if (!prev_entity || prev_type != p.type) {
        t = "B-" + p.type;
        if (repairs) ++*repairs;
        p.prefix = 'B';
      }
    } else if (p.prefix == 'E' || p.prefix == 'S') {
      throw DataError("bio_to_iobes: input already carries IOBES tag '" + t + "'");
    }
    prev_entity = p.prefix != 'O';
    prev_type = p.type;
  }
  std::vector<std::string> out(bio.size());
  for (size_t i = 0; i < bio.size(); ++i) {
    TagParts p = split_tag(bio[i]);
    if (p.prefix == 'O') {
      out[i] = "O";
      continue;
    }
    bool next_inside = false;
    if (i + 1 < bio.size()) {
      TagParts q = split_tag(bio[i + 1]);
      next_inside = q.prefix == 'I' && q.type == p.type;
    }
    if (p.prefix == 'B')
      out[i] = (next_inside ? "B-" : "S-") + p.type;
    else
      out[i] = (next_inside ? "I-" : "E-") + p.type;
  }
  return out;
}

struct Span {
  size_t start;  // inclusive
  size_t end;    // inclusive
  std::string type;

  bool operator==(const Span& o) const = default;
  bool operator<(const Span& o) const {
    return std::tie(start, end, type) < std::tie(o.start, o.end, o.type);
  }
};

// Total over arbitrary tag sequences: any scheme violation closes the open
// span at the previous token; a stray I-/E- opens or emits as if it began
// correctly.  Well-formed IOBES round-trips exactly.
inline std::vector<Span> iobes_to_spans(const std::vector<std::string>& tags) {
  std::vector<Span> spans;
  bool open = false;
  size_t start = 0;
  std::string type;
  auto close_at = [&](size_t end) {
    if (open) spans.push_back({start, end, type});
    open = false;
  };
  for (size_t t = 0; t < tags.size(); ++t) {
    TagParts p = split_tag(tags[t]);
    switch (p.prefix) {
      case 'O':
        close_at(t - 1);
        break;
      case 'S':
        close_at(t - 1);
        spans.push_back({t, t, p.type});
        break;
      case 'B':
        close_at(t - 1);
        open = true;
        start = t;
        type = p.type;
        break;
      case 'I':
        if (open && type == p.type) break;  // proper continuation
        close_at(t - 1);
        open = true;
        start = t;
        type = p.type;
        break;
      case 'E':
        if (open && type == p.type) {
          open = false;
          spans.push_back({start, t, type});
        } else {
          close_at(t - 1);
          spans.push_back({t, t, p.type});
        }
        break;
    }
  }
  if (open) spans.push_back({start, tags.size() - 1, type});
  return spans;
}

inline bool is_valid_iobes(const std::vector<std::string>& tags) {
  bool open = false;
  std::string type;
  for (const auto& tag : tags) {
    TagParts p = split_tag(tag);
    switch (p.prefix) {
      case 'O':
      case 'S':
      case 'B':
        if (open) return false;
        if (p.prefix == 'B') {
          open = true;
          type = p.type;
        }
        break;
      case 'I':
        if (!open || type != p.type) return false;
        break;
      case 'E':
        if (!open || type != p.type) return false;
        open = false;
        break;
    }
  }
  return !open;
}

// ---- CoNLL column I/O ---------------------------------------------------------

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> cols;
  std::istringstream ss(line);
  std::string c;
  while (ss >> c) cols.push_back(c);
  return cols;
}

// Blank-line separated column text.  tag_col = -1 means the last column.
inline Corpus read_conll_columns(const std::string& path, int token_col = 0,
                                 int tag_col = -1) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  Corpus corpus;
  corpus.name = path;
  Sentence cur;
  std::string line;
  size_t line_no = 0;
  auto flush = [&]() {
    if (!cur.tokens.empty()) {
      corpus.sentences.push_back(std::move(cur));
      cur = {};
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto cols = split_ws(line);
    if (cols.empty()) {
      flush();
      continue;
    }
    if (cols[0] == "-DOCSTART-") continue;
    int tc = tag_col < 0 ? static_cast<int>(cols.size()) - 1 : tag_col;
    if (token_col >= static_cast<int>(cols.size()) || tc >= static_cast<int>(cols.size()) ||
        tc == token_col)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected token and tag columns, got " +
                       std::to_string(cols.size()) + " column(s)");
    cur.tokens.push_back(cols[token_col]);
    cur.tags.push_back(cols[tc]);
  }
  flush();
  if (corpus.sentences.empty()) throw DataError("empty corpus: " + path);
  corpus.index_tags();
  return corpus;
}

inline void write_conll(const Corpus& corpus, std::ostream& out,
                        const std::vector<std::vector<std::string>>* predictions = nullptr) {
  for (size_t i = 0; i < corpus.sentences.size(); ++i) {
    const Sentence& s = corpus.sentences[i];
    for (size_t t = 0; t < s.size(); ++t) {
      out << s.tokens[t] << ' ' << s.tags[t];
      if (predictions) out << ' ' << (*predictions)[i][t];
      out << '\n';
    }
    out << '\n';
  }
}

inline void write_conll(const Corpus& corpus, const std::string& path,
                        const std::vector<std::vector<std::string>>* predictions = nullptr) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file: " + path);
  write_conll(corpus, out, predictions);
}

// ---- subsampling ---------------------------------------------------------------

// Uniform sentence-level sample without replacement, ceil(fraction*N)
// sentences, original order preserved.  Deterministic per seed.
inline Corpus subsample_corpus(const Corpus& corpus, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw ConfigError("subsample fraction must be in (0,1], got " + std::to_string(fraction));
  const size_t n = corpus.sentences.size();
  size_t k = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n)));
  k = std::min(k, n);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, "subsample"));
  rng.shuffle(idx);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  Corpus out;
  out.name = corpus.name;
  out.split = corpus.split;
  for (size_t i : idx) out.sentences.push_back(corpus.sentences[i]);
  out.index_tags();
  return out;
}

// ---- vocabulary ------------------------------------------------------------------

inline std::string lowercase(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Word ids are over lowercased forms.  Char ids are byte-level and built
// jointly over both tasks.  Tag ids are per task; the begin-of-sequence tag
// embedding lives one row past the last real tag.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  std::vector<std::string> words{"<pad>", "<unk>"};
  std::unordered_map<std::string, int> word_ids{{"<pad>", 0}, {"<unk>", 1}};
  std::vector<std::string> chars{"<pad>", "<unk>"};
  std::unordered_map<std::string, int> char_ids{{"<pad>", 0}, {"<unk>", 1}};
  std::vector<std::string> target_tags;
  std::unordered_map<std::string, int> target_tag_ids;
  std::vector<std::string> source_tags;
  std::unordered_map<std::string, int> source_tag_ids;

  int add_word(const std::string& w) {
    auto [it, fresh] = word_ids.emplace(w, static_cast<int>(words.size()));
    if (fresh) words.push_back(w);
    return it->second;
  }
  int add_char(const std::string& c) {
    auto [it, fresh] = char_ids.emplace(c, static_cast<int>(chars.size()));
    if (fresh) chars.push_back(c);
    return it->second;
  }

  int word_id(const std::string& token) const {
    auto it = word_ids.find(lowercase(token));
    return it == word_ids.end() ? kUnk : it->second;
  }
  std::vector<int> char_id_seq(const std::string& token) const {
    std::vector<int> out;
    out.reserve(token.size());
    for (char c : token) {
      auto it = char_ids.find(std::string(1, c));
      out.push_back(it == char_ids.end() ? kUnk : it->second);
    }
    if (out.empty()) out.push_back(kUnk);
    return out;
  }

  int tag_id(bool target_side, const std::string& tag) const {
    const auto& m = target_side ? target_tag_ids : source_tag_ids;
    auto it = m.find(tag);
    if (it == m.end())
      throw DataError("unknown tag for " + std::string(target_side ? "target" : "source") +
                      " task: '" + tag + "'");
    return it->second;
  }
  size_t tag_count(bool target_side) const {
    return target_side ? target_tags.size() : source_tags.size();
  }
  int bos_tag_id(bool target_side) const { return static_cast<int>(tag_count(target_side)); }
};

// Builds word/char maps from every corpus given (all splits; the embedding
// input layer may cover evaluation tokens) and tag maps from the two train
// corpora only.
inline Vocab build_vocab(const std::vector<const Corpus*>& target_corpora,
                         const std::vector<const Corpus*>& source_corpora) {
  Vocab v;
  auto scan_tokens = [&](const Corpus& c) {
    for (const auto& s : c.sentences)
      for (const auto& tok : s.tokens) {
        v.add_word(lowercase(tok));
        for (char ch : tok) v.add_char(std::string(1, ch));
      }
  };
  for (const Corpus* c : target_corpora) scan_tokens(*c);
  for (const Corpus* c : source_corpora) scan_tokens(*c);

  auto scan_tags = [&](const Corpus& c, std::vector<std::string>& tags,
                       std::unordered_map<std::string, int>& ids) {
    std::set<std::string> uniq(c.tag_set.begin(), c.tag_set.end());
    uniq.insert("O");
    for (const auto& t : uniq) {
      ids.emplace(t, static_cast<int>(tags.size()));
      tags.push_back(t);
    }
  };
  if (!target_corpora.empty()) scan_tags(*target_corpora[0], v.target_tags, v.target_tag_ids);
  if (!source_corpora.empty()) scan_tags(*source_corpora[0], v.source_tags, v.source_tag_ids);
  return v;
}

// ---- pretrained embeddings ---------------------------------------------------------

struct EmbeddingCoverage {
  size_t vocab_words = 0;
  size_t found = 0;
  double fraction() const {
    return vocab_words == 0 ? 0.0 : static_cast<double>(found) / vocab_words;
  }
};

// Text format "word v1 ... vD" per line.  Rows for in-vocab words are
// copied; everything else keeps its uniform(-0.25, 0.25) initialization.
inline EmbeddingCoverage load_pretrained_embeddings(const std::string& path, const Vocab& vocab,
                                                    Tensor& table) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file: " + path);
  const size_t dim = table.shape.cols();
  if (table.shape.rows() != vocab.words.size())
    throw ConfigError("embedding table rows " + std::to_string(table.shape.rows()) +
                      " != vocab size " + std::to_string(vocab.words.size()));
  EmbeddingCoverage cov;
  cov.vocab_words = vocab.words.size() - 2;  // specials excluded
  std::vector<bool> seen(vocab.words.size(), false);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    auto it = vocab.word_ids.find(lowercase(word));
    if (it == vocab.word_ids.end()) continue;
    std::vector<double> row;
    row.reserve(dim);
    double x;
    while (ss >> x) row.push_back(x);
    if (row.size() != dim)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": vector has " +
                        std::to_string(row.size()) + " dims, table expects " +
                        std::to_string(dim));
    std::copy(row.begin(), row.end(),
              table.value.begin() + static_cast<size_t>(it->second) * dim);
    if (!seen[it->second]) {
      seen[it->second] = true;
      ++cov.found;
    }
  }
  return cov;
}

}  // namespace dtn
