#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "levelblend/common.hpp"

namespace lvb {

enum class Provenance { original, concat, mix, a_base, b_base };

inline std::string provenance_to_string(Provenance p) {
    switch (p) {
        case Provenance::original: return "original";
        case Provenance::concat: return "concat";
        case Provenance::mix: return "mix";
        case Provenance::a_base: return "a_base";
        case Provenance::b_base: return "b_base";
    }
    return "original";
}

inline Provenance provenance_from_string(const std::string& s) {
    if (s == "original") return Provenance::original;
    if (s == "concat") return Provenance::concat;
    if (s == "mix") return Provenance::mix;
    if (s == "a_base") return Provenance::a_base;
    if (s == "b_base") return Provenance::b_base;
    fail("ConfigInvalid", "unknown composition strategy '" + s + "'");
}

// Lowercase word tokens, split on non-alphanumeric runs.
inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : s) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

// Ordered lexical substitutions mapping game-specific terms to shared
// category words. Patterns match whole words, case-insensitively, with
// longer phrases tried first; a trailing plural 's' on the last pattern
// word is accepted and the replacement keeps the number.
class AbstractionRuleSet {
public:
    struct Rule {
        std::vector<std::string> pattern; // lowercase words
        std::string replacement;          // lowercase category word
    };

    AbstractionRuleSet() = default;
    AbstractionRuleSet(std::string version, std::vector<Rule> rules)
        : version_(std::move(version)), rules_(std::move(rules)) {
        sort_rules();
    }

    // The shipped table: 15 rules over the six shared semantic categories.
    static AbstractionRuleSet default_rules() {
        std::vector<Rule> rules = {
            {{"bat"}, "enemy"},
            {{"goomba"}, "enemy"},
            {{"koopa"}, "enemy"},
            {{"cannon"}, "enemy"},
            {{"ladder"}, "climbable"},
            {{"rope"}, "climbable"},
            {{"vine"}, "climbable"},
            {{"gold"}, "collectable"},
            {{"coin"}, "collectable"},
            {{"key"}, "collectable"},
            {{"question", "block"}, "interactive"},
            {{"breakable", "block"}, "interactive"},
            {{"spike"}, "hazard"},
            {{"lava"}, "hazard"},
            {{"pipe"}, "environment"},
        };
        return AbstractionRuleSet("default-15.v1", std::move(rules));
    }

    const std::string& version() const { return version_; }
    const std::vector<Rule>& rules() const { return rules_; }

    // Rule set file: a "version <id>" header line, then "pattern => word".
    static AbstractionRuleSet load(const std::string& path) {
        std::ifstream in(path);
        if (!in) fail("IoError", "cannot open rule set '" + path + "'");
        std::string version = "unversioned";
        std::vector<Rule> rules;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            if (line.rfind("version ", 0) == 0) {
                version = line.substr(8);
                continue;
            }
            std::size_t arrow = line.find("=>");
            if (arrow == std::string::npos)
                fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": expected 'pattern => word'");
            Rule r;
            r.pattern = tokenize(line.substr(0, arrow));
            auto repl = tokenize(line.substr(arrow + 2));
            if (r.pattern.empty() || repl.size() != 1)
                fail("ConfigInvalid", path + ":" + std::to_string(lineno) + ": malformed rule");
            r.replacement = repl[0];
            rules.push_back(std::move(r));
        }
        return AbstractionRuleSet(version, std::move(rules));
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) fail("IoError", "cannot open '" + path + "' for writing");
        out << "version " << version_ << "\n";
        for (const auto& r : rules_) out << join_tokens(r.pattern) << " => " << r.replacement << "\n";
    }

private:
    void sort_rules() {
        // longest phrase first; original order breaks ties
        std::vector<std::size_t> idx(rules_.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [this](std::size_t a, std::size_t b) {
            return rules_[a].pattern.size() > rules_[b].pattern.size();
        });
        std::vector<Rule> sorted;
        sorted.reserve(rules_.size());
        for (std::size_t i : idx) sorted.push_back(std::move(rules_[i]));
        rules_ = std::move(sorted);
    }

    std::string version_;
    std::vector<Rule> rules_;
};

namespace detail {

inline std::string pluralize(const std::string& word) {
    if (word == "enemy") return "enemies";
    if (word == "gold" || word == "lava") return word; // mass nouns
    if (!word.empty() && word.back() == 's') return word;
    return word + "s";
}

// token == pattern word, or its plural with a bare trailing 's'
inline bool word_matches(const std::string& token, const std::string& pattern, bool allow_plural) {
    if (token == pattern) return true;
    if (!allow_plural) return false;
    if (token.size() == pattern.size() + 1 && token.back() == 's' &&
        token.compare(0, pattern.size(), pattern) == 0)
        return true;
    if (pattern == "enemy" && token == "enemies") return true; // idempotence over prior output
    return false;
}

struct Span {
    std::string text;
    bool is_word = false;
};

inline std::vector<Span> split_spans(const std::string& s) {
    std::vector<Span> spans;
    std::string cur;
    bool word = false;
    auto flush = [&]() {
        if (!cur.empty()) {
            spans.push_back({cur, word});
            cur.clear();
        }
    };
    for (char ch : s) {
        bool w = std::isalnum(static_cast<unsigned char>(ch)) != 0;
        if (w != word) {
            flush();
            word = w;
        }
        cur += ch;
    }
    flush();
    return spans;
}

inline std::string lower(const std::string& s) {
    std::string out = s;
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

} // namespace detail

// Rule-based abstraction A(s): replaces every pattern occurrence with its
// category word, longest match first, whole-word boundaries, preserving all
// separators and the matched word's number. Idempotent.
inline std::string abstract_instruction(const std::string& s, const AbstractionRuleSet& rules) {
    auto spans = detail::split_spans(s);
    std::vector<std::size_t> word_idx;
    for (std::size_t i = 0; i < spans.size(); ++i)
        if (spans[i].is_word) word_idx.push_back(i);

    std::vector<bool> consumed(spans.size(), false);
    for (std::size_t wi = 0; wi < word_idx.size();) {
        bool fired = false;
        for (const auto& rule : rules.rules()) {
            std::size_t len = rule.pattern.size();
            if (wi + len > word_idx.size()) continue;
            bool match = true;
            bool plural = false;
            for (std::size_t k = 0; k < len && match; ++k) {
                const std::string tok = detail::lower(spans[word_idx[wi + k]].text);
                const bool last = (k + 1 == len);
                if (!detail::word_matches(tok, rule.pattern[k], last)) {
                    match = false;
                } else if (last && tok != rule.pattern[k]) {
                    plural = true;
                }
            }
            if (!match) continue;
            spans[word_idx[wi]].text = plural ? detail::pluralize(rule.replacement) : rule.replacement;
            for (std::size_t k = 1; k < len; ++k) {
                consumed[word_idx[wi + k]] = true;
                if (word_idx[wi + k - 1] + 1 < word_idx[wi + k]) consumed[word_idx[wi + k] - 1] = true;
            }
            wi += len;
            fired = true;
            break;
        }
        if (!fired) ++wi;
    }

    std::string out;
    for (std::size_t i = 0; i < spans.size(); ++i)
        if (!consumed[i]) out += spans[i].text;
    return out;
}

// Raw text, abstracted text, and the token sequence of the abstracted form.
struct Instruction {
    std::string raw;
    std::string abstracted;
    std::vector<std::string> tokens;
    Provenance provenance = Provenance::original;

    static Instruction make(std::string raw_text, const AbstractionRuleSet& rules,
                            Provenance prov = Provenance::original) {
        Instruction ins;
        ins.raw = std::move(raw_text);
        ins.abstracted = abstract_instruction(ins.raw, rules);
        ins.tokens = tokenize(ins.abstracted);
        ins.provenance = prov;
        return ins;
    }
};

// Deterministic reference embedding f(.): hashed bag of words at dimension E
// with L2 normalization. Stands in for the similarity backbone; all Eq.-style
// masks are built from cosines of these vectors.
constexpr int kReferenceEmbedDim = 4096;

inline std::size_t reference_bucket(const std::string& token, int dim = kReferenceEmbedDim) {
    return static_cast<std::size_t>(fnv1a64(token) % static_cast<std::uint64_t>(dim));
}

inline std::vector<float> reference_embed(const std::vector<std::string>& tokens,
                                          int dim = kReferenceEmbedDim) {
    std::vector<float> v(static_cast<std::size_t>(dim), 0.0f);
    for (const auto& t : tokens) v[reference_bucket(t, dim)] += 1.0f;
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (auto& x : v) x = static_cast<float>(x / norm);
    return v;
}

// Cosine of two equal-length vectors; 0 when either is degenerate (zero norm).
inline double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        fail("DimensionMismatch", "cosine_similarity: " + std::to_string(a.size()) + " vs " +
                                      std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    double cos = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::min(1.0, std::max(-1.0, cos)); // keep roundoff inside the contract range
}

// N x N boolean matrix of text-level positives: entry (i,j) is set when the
// reference-embedding cosine exceeds delta, or i == j (a sample is always its
// own positive so the loss in the contrastive module never degenerates).
struct PositiveMask {
    int n = 0;
    double threshold = 0.0;
    std::vector<std::uint8_t> matrix; // row-major n*n

    bool at(int i, int j) const { return matrix[static_cast<std::size_t>(i) * n + j] != 0; }

    std::vector<std::uint8_t> slice(const std::vector<int>& idx) const {
        const int m = static_cast<int>(idx.size());
        std::vector<std::uint8_t> out(static_cast<std::size_t>(m) * m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                out[static_cast<std::size_t>(i) * m + j] = matrix[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * n + idx[static_cast<std::size_t>(j)]];
        return out;
    }

    static PositiveMask identity(int n) {
        PositiveMask mask;
        mask.n = n;
        mask.threshold = 1.0;
        mask.matrix.assign(static_cast<std::size_t>(n) * n, 0);
        for (int i = 0; i < n; ++i) mask.matrix[static_cast<std::size_t>(i) * n + i] = 1;
        return mask;
    }
};

inline PositiveMask build_positive_mask(const std::vector<std::vector<float>>& embeddings,
                                        double delta) {
    const int n = static_cast<int>(embeddings.size());
    if (n < 1) fail("ConfigInvalid", "build_positive_mask: need at least one instruction");
    PositiveMask mask;
    mask.n = n;
    mask.threshold = delta;
    mask.matrix.assign(static_cast<std::size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        mask.matrix[static_cast<std::size_t>(i) * n + i] = 1;
        for (int j = i + 1; j < n; ++j) {
            if (cosine_similarity(embeddings[static_cast<std::size_t>(i)], embeddings[static_cast<std::size_t>(j)]) > delta) {
                mask.matrix[static_cast<std::size_t>(i) * n + j] = 1;
                mask.matrix[static_cast<std::size_t>(j) * n + i] = 1;
            }
        }
    }
    return mask;
}

inline PositiveMask build_positive_mask(const std::vector<Instruction>& instructions, double delta,
                                        bool use_abstracted = true) {
    std::vector<std::vector<float>> embs;
    embs.reserve(instructions.size());
    for (const auto& ins : instructions)
        embs.push_back(reference_embed(use_abstracted ? ins.tokens : tokenize(ins.raw)));
    return build_positive_mask(embs, delta);
}

namespace detail {

// Clauses split on the connectives "with"/"and"; used by the mix strategy.
inline std::vector<std::string> split_clauses(const std::string& s) {
    auto tokens = tokenize(s);
    std::vector<std::string> clauses;
    std::string cur;
    for (const auto& t : tokens) {
        if (t == "with" || t == "and") {
            if (!cur.empty()) {
                clauses.push_back(cur);
                cur.clear();
            }
            continue;
        }
        if (!cur.empty()) cur += ' ';
        cur += t;
    }
    if (!cur.empty()) clauses.push_back(cur);
    return clauses;
}

} // namespace detail

// Composite multi-game instructions. Concat is verbatim juxtaposition; the
// biased templates put the base instruction first; mix alternates clauses.
inline Instruction compose_instructions(const Instruction& a, const Instruction& b,
                                        Provenance strategy, const AbstractionRuleSet& rules) {
    if (a.provenance != Provenance::original || b.provenance != Provenance::original)
        fail("ConfigInvalid", "compose_instructions expects original instructions");
    std::string text;
    switch (strategy) {
        case Provenance::concat:
            text = a.raw + " " + b.raw;
            break;
        case Provenance::a_base:
            text = "based on " + a.raw + ", featuring " + b.raw + ".";
            break;
        case Provenance::b_base:
            text = "based on " + b.raw + ", featuring " + a.raw + ".";
            break;
        case Provenance::mix: {
            auto ca = detail::split_clauses(a.raw);
            auto cb = detail::split_clauses(b.raw);
            std::vector<std::string> merged;
            for (std::size_t i = 0; i < std::max(ca.size(), cb.size()); ++i) {
                if (i < ca.size()) merged.push_back(ca[i]);
                if (i < cb.size()) merged.push_back(cb[i]);
            }
            for (std::size_t i = 0; i < merged.size(); ++i) {
                if (i) text += " and ";
                text += merged[i];
            }
            break;
        }
        case Provenance::original:
            fail("ConfigInvalid", "'original' is not a composition strategy");
    }
    return Instruction::make(std::move(text), rules, strategy);
}

} // namespace lvb
