#pragma once

// The closed world: four value domains, three predicates, a word-level
// tokenizer over the closed vocabulary, template rendering into labeled
// token sequences, and train/val/test_shift split generation.

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "propdec/config.hpp"
#include "propdec/rng.hpp"

namespace propdec {

enum class Predicate { LivesIn = 0, WorksAs = 1, LikesToEat = 2 };

constexpr int kNumDomains = 4;
constexpr int kNameDomain = 0;

// attribute domain for a predicate: LivesIn->1 (countries),
// WorksAs->2 (occupations), LikesToEat->3 (foods)
int attribute_domain(Predicate p);
Predicate predicate_for_domain(int domain);
std::string predicate_name(Predicate p);
Predicate predicate_from_name(const std::string& name);

struct DomainSpec {
    int id = 0;
    std::vector<std::string> values;
    int token_width = 1;

    int index_of(const std::string& value) const; // -1 if absent
};

struct Proposition {
    Predicate predicate;
    std::string entity;
    std::string attribute;

    auto operator<=>(const Proposition&) const = default;
};

// Set of propositions. Comparison is pure set semantics; the first-seen
// entity order is kept alongside because templates render entities in
// sampling order (sorting them would bias slot assignment toward the
// alphabet and contaminate binding-delta estimates with lexical content).
class PropositionSet {
public:
    PropositionSet() = default;

    void insert(const Proposition& p);
    const std::set<Proposition>& items() const { return props_; }
    const std::vector<std::string>& entities() const { return entity_order_; }
    size_t size() const { return props_.size(); }
    bool empty() const { return props_.empty(); }

    // attribute bound to (entity, predicate); empty if absent
    std::string attribute_of(const std::string& entity, Predicate p) const;
    bool has_entity(const std::string& entity) const;

    bool operator==(const PropositionSet& o) const { return props_ == o.props_; }

private:
    std::set<Proposition> props_;
    std::vector<std::string> entity_order_;
};

enum class TemplateFamily { Series, Cross, Reverse, Coref, Nested, Nested2 };
enum class LengthVariant { Short, Medium, Long };

std::string family_name(TemplateFamily f);
TemplateFamily family_from_name(const std::string& name);
std::string length_name(LengthVariant v);
LengthVariant length_from_name(const std::string& name);

struct ContextTemplate {
    TemplateFamily family = TemplateFamily::Series;
    LengthVariant length_variant = LengthVariant::Short;
    std::vector<Predicate> predicate_subset = {
        Predicate::LivesIn, Predicate::WorksAs, Predicate::LikesToEat};
};

struct TokenLabel {
    int domain = -1;
    std::string value;
};

struct ContextInstance {
    std::vector<int> tokens;
    PropositionSet propositions;
    std::vector<std::optional<TokenLabel>> token_labels; // aligned with tokens
    std::vector<int> entity_index;                       // -1 where unlabeled
    ContextTemplate tmpl;

    // positions carrying a label for `domain`, in token order
    std::vector<int> labeled_positions(int domain) const;
    // per entity slot k, the position of its single `domain`-labeled token
    // (first occurrence for names); -1 if absent
    std::vector<int> slot_positions(int domain, int n_entities) const;
};

class Tokenizer {
public:
    int add(const std::string& word); // idempotent
    int id(const std::string& word) const; // throws on unknown
    bool contains(const std::string& word) const;
    const std::string& word(int id) const;
    int size() const { return int(words_.size()); }

    std::vector<int> encode(const std::string& text) const; // whitespace split
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

struct World {
    std::array<DomainSpec, kNumDomains> domains; // names, countries, occupations, foods
    Tokenizer tokenizer;
    std::vector<std::string> noun_fillers; // "dedicated advocate"
    std::vector<std::string> verb_fillers; // "cultivates rare plants"
    std::string trigger_word;              // backdoor trigger token
    std::vector<std::string> gender_words; // {male, female}

    static World make_default();
    static World from_config(const Config& cfg);
    void write_config(Config& cfg) const;

    const DomainSpec& domain_of(Predicate p) const {
        return domains[attribute_domain(p)];
    }
};

// --- operations ---------------------------------------------------------

// n_entities * 3 propositions; values drawn without repetition per domain.
// `allowed` optionally restricts each domain to a subset of value indices.
PropositionSet sample_propositions(const World& world, int n_entities, Rng& rng,
                                   const std::array<std::vector<int>, kNumDomains>* allowed = nullptr);

ContextInstance render_context(const World& world, const PropositionSet& props,
                               const ContextTemplate& tmpl);

struct Query {
    std::vector<int> tokens; // context ++ cloze query
    std::string answer;      // attribute value string
    int answer_first_token;  // first token id of the answer
};

Query render_query(const World& world, const ContextInstance& ctx,
                   const std::string& entity, Predicate predicate);

// "Therefore , the people are" — answers are the entity names
struct PeopleQuery {
    std::vector<int> tokens;
    std::vector<std::string> names; // in entity order
};
PeopleQuery render_people_query(const World& world, const ContextInstance& ctx);

struct SplitSizes {
    int n_train = 512;
    int n_val = 512;
    int n_shift = 512;
};

struct Splits {
    std::vector<ContextInstance> train;
    std::vector<ContextInstance> val;
    std::vector<ContextInstance> test_shift;
    std::array<std::vector<int>, kNumDomains> train_values; // value indices
    std::array<std::vector<int>, kNumDomains> shift_values;
};

Splits make_splits(const World& world, Rng& rng, const SplitSizes& sizes);

// --- serialization ------------------------------------------------------

std::string context_to_json(const World& world, const ContextInstance& ctx);
ContextInstance context_from_json(const World& world, const std::string& line);
void save_contexts_jsonl(const World& world, const std::vector<ContextInstance>& ctxs,
                         const std::string& path);
std::vector<ContextInstance> load_contexts_jsonl(const World& world,
                                                 const std::string& path);

} // namespace propdec
