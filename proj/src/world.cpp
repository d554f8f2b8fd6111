#include "propdec/world.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace propdec {

using json = nlohmann::json;

int attribute_domain(Predicate p) {
    switch (p) {
        case Predicate::LivesIn: return 1;
        case Predicate::WorksAs: return 2;
        case Predicate::LikesToEat: return 3;
    }
    throw std::logic_error("bad predicate");
}

Predicate predicate_for_domain(int domain) {
    switch (domain) {
        case 1: return Predicate::LivesIn;
        case 2: return Predicate::WorksAs;
        case 3: return Predicate::LikesToEat;
    }
    throw std::invalid_argument("domain has no predicate: " + std::to_string(domain));
}

std::string predicate_name(Predicate p) {
    switch (p) {
        case Predicate::LivesIn: return "LivesIn";
        case Predicate::WorksAs: return "WorksAs";
        case Predicate::LikesToEat: return "LikesToEat";
    }
    return "?";
}

Predicate predicate_from_name(const std::string& name) {
    if (name == "LivesIn") return Predicate::LivesIn;
    if (name == "WorksAs") return Predicate::WorksAs;
    if (name == "LikesToEat") return Predicate::LikesToEat;
    throw std::invalid_argument("unknown predicate: " + name);
}

std::string family_name(TemplateFamily f) {
    switch (f) {
        case TemplateFamily::Series: return "series";
        case TemplateFamily::Cross: return "cross";
        case TemplateFamily::Reverse: return "reverse";
        case TemplateFamily::Coref: return "coref";
        case TemplateFamily::Nested: return "nested";
        case TemplateFamily::Nested2: return "nested_2";
    }
    return "?";
}

TemplateFamily family_from_name(const std::string& name) {
    if (name == "series") return TemplateFamily::Series;
    if (name == "cross") return TemplateFamily::Cross;
    if (name == "reverse") return TemplateFamily::Reverse;
    if (name == "coref") return TemplateFamily::Coref;
    if (name == "nested") return TemplateFamily::Nested;
    if (name == "nested_2") return TemplateFamily::Nested2;
    throw std::invalid_argument("unknown family: " + name);
}

std::string length_name(LengthVariant v) {
    switch (v) {
        case LengthVariant::Short: return "short";
        case LengthVariant::Medium: return "medium";
        case LengthVariant::Long: return "long";
    }
    return "?";
}

LengthVariant length_from_name(const std::string& name) {
    if (name == "short") return LengthVariant::Short;
    if (name == "medium") return LengthVariant::Medium;
    if (name == "long") return LengthVariant::Long;
    throw std::invalid_argument("unknown length variant: " + name);
}

int DomainSpec::index_of(const std::string& value) const {
    for (size_t i = 0; i < values.size(); ++i)
        if (values[i] == value) return int(i);
    return -1;
}

void PropositionSet::insert(const Proposition& p) {
    props_.insert(p);
    for (const auto& e : entity_order_)
        if (e == p.entity) return;
    entity_order_.push_back(p.entity);
}

std::string PropositionSet::attribute_of(const std::string& entity, Predicate p) const {
    for (const auto& prop : props_)
        if (prop.entity == entity && prop.predicate == p) return prop.attribute;
    return "";
}

bool PropositionSet::has_entity(const std::string& entity) const {
    for (const auto& e : entity_order_)
        if (e == entity) return true;
    return false;
}

// --- tokenizer -----------------------------------------------------------

int Tokenizer::add(const std::string& word) {
    auto it = index_.find(word);
    if (it != index_.end()) return it->second;
    int id = int(words_.size());
    words_.push_back(word);
    index_[word] = id;
    return id;
}

int Tokenizer::id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw std::invalid_argument("unknown token: " + word);
    return it->second;
}

bool Tokenizer::contains(const std::string& word) const {
    return index_.count(word) > 0;
}

const std::string& Tokenizer::word(int id) const {
    return words_.at(size_t(id));
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) out.push_back(id(w));
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word(ids[i]);
    }
    return out;
}

// --- world construction --------------------------------------------------

namespace {

const std::vector<std::string> kNames = {
    "Michael", "James", "John", "Robert", "David", "William", "Mary",
    "Christopher", "Joseph", "Richard", "Daniel", "Thomas", "Matthew",
    "Charles", "Anthony", "Mark", "Elizabeth", "Steven", "Andrew", "Kevin",
    "Brian", "Barbara", "Jason", "Susan", "Paul", "Kenneth", "Lisa", "Ryan",
    "Sarah", "Donald", "Eric", "Jacob", "Nicholas", "Jonathan", "Nancy",
    "Justin", "Gary", "Edward", "Stephen", "Scott", "George", "Jose",
    "Laura", "Carol", "Amy", "Margaret", "Gregory", "Larry", "Maria",
    "Alexander", "Benjamin", "Patrick", "Samuel", "Betty", "Kelly", "Adam",
    "Dennis", "Nathan", "Jordan", "Anna"};

const std::vector<std::string> kCountries = {
    "Austria", "Chile", "France", "Germany", "Ireland", "Israel", "Italy",
    "Japan", "Netherlands", "Peru", "Russia", "Scotland", "Singapore",
    "Spain", "Sweden", "Switzerland"};

const std::vector<std::string> kOccupations = {
    "driver", "cook", "chief", "developer", "manager", "lawyer", "guard",
    "teacher", "assistant", "secretary", "cleaner", "designer", "writer",
    "editor"};

// two tokens each; first and second words are unique across the domain so
// a value is identified by either token
const std::vector<std::string> kFoods = {
    "baked apples", "smoked bacon", "fried bananas", "rolled barley",
    "boiled beans", "roasted beef", "pickled beets", "grilled burgers",
    "salted butter", "steamed cabbage", "melted cheese", "candied cherries",
    "spiced chicken", "warm croissant", "glazed donuts", "dried figs",
    "minced garlic", "ripe guavas", "golden honey", "crisp lettuce",
    "chilled melons", "toasted nuts", "cured olives", "diced onions",
    "juicy oranges", "fresh pasta", "sweet peaches", "poached pears",
    "crushed pecans", "stuffed peppers", "sour pickles", "tart plums",
    "braised pork", "mashed potatoes", "seared salmon", "spicy serrano",
    "wilted spinach", "roast squash", "silken tofu", "stewed tomatoes",
    "smoky tuna"};

const std::vector<std::string> kNounFillers = {
    "dedicated advocate", "brilliant scientist", "humble gardener",
    "curious traveler", "patient mentor", "cheerful painter",
    "quiet historian", "bold explorer", "gentle healer", "witty storyteller",
    "loyal companion", "keen observer", "tireless volunteer",
    "modest scholar", "daring pilot", "thoughtful poet", "skilled carpenter",
    "honest farmer", "clever inventor", "calm librarian"};

const std::vector<std::string> kVerbFillers = {
    "cultivates rare plants", "collects old maps", "paints vivid murals",
    "studies ancient texts", "repairs broken clocks", "grows tall sunflowers",
    "writes long letters", "sings soft melodies", "builds small boats",
    "trains young athletes", "brews strong coffee", "carves wooden figures",
    "photographs wild birds", "restores antique chairs",
    "plants fragrant herbs", "races vintage cars", "bakes sweet pies",
    "climbs steep hills", "sails calm seas", "feeds stray cats"};

const std::vector<std::string> kFunctionWords = {
    "lives", "live", "in", "likes", "like", "to", "eat", "works", "work",
    "as", "is", "where", "what", "and", "are", "friends", "respectively",
    "The", "the", "former", "latter", "who", "unlike", "Therefore", ",",
    ".", "people", "person", "living", "gender", "of", "a", "Always",
    "answer", "opposite"};

void add_phrase_words(Tokenizer& tok, const std::vector<std::string>& phrases) {
    for (const auto& p : phrases) {
        std::istringstream ss(p);
        std::string w;
        while (ss >> w) tok.add(w);
    }
}

uint64_t fnv64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (char c : s) {
        h ^= uint64_t(uint8_t(c));
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

} // namespace

World World::make_default() {
    World w;
    w.domains[0] = DomainSpec{0, kNames, 1};
    w.domains[1] = DomainSpec{1, kCountries, 1};
    w.domains[2] = DomainSpec{2, kOccupations, 1};
    w.domains[3] = DomainSpec{3, kFoods, 2};
    w.noun_fillers = kNounFillers;
    w.verb_fillers = kVerbFillers;
    w.trigger_word = "zq";
    w.gender_words = {"male", "female"};

    for (const auto& d : w.domains) add_phrase_words(w.tokenizer, d.values);
    for (const auto& fw : kFunctionWords) w.tokenizer.add(fw);
    add_phrase_words(w.tokenizer, w.noun_fillers);
    add_phrase_words(w.tokenizer, w.verb_fillers);
    for (const auto& g : w.gender_words) w.tokenizer.add(g);
    w.tokenizer.add(w.trigger_word);

    // sanity: all values render to their declared width and are unique
    for (const auto& d : w.domains) {
        std::set<std::string> seen;
        for (const auto& v : d.values) {
            if (!seen.insert(v).second)
                throw std::runtime_error("invalid-world: duplicate value " + v);
            if (int(split_words(v).size()) != d.token_width)
                throw std::runtime_error("invalid-world: bad token width for " + v);
        }
    }
    return w;
}

World World::from_config(const Config& cfg) {
    World w = make_default();
    const char* keys[kNumDomains] = {"names", "countries", "occupations", "foods"};
    for (int d = 0; d < kNumDomains; ++d) {
        if (cfg.has("world", keys[d])) {
            w.domains[d].values = cfg.get_list("world", keys[d]);
        }
    }
    // rebuild tokenizer over the configured values
    World fresh;
    fresh.domains = w.domains;
    fresh.noun_fillers = w.noun_fillers;
    fresh.verb_fillers = w.verb_fillers;
    fresh.trigger_word = cfg.get_str("world", "trigger", w.trigger_word);
    fresh.gender_words = w.gender_words;
    for (const auto& d : fresh.domains) add_phrase_words(fresh.tokenizer, d.values);
    for (const auto& fw : kFunctionWords) fresh.tokenizer.add(fw);
    add_phrase_words(fresh.tokenizer, fresh.noun_fillers);
    add_phrase_words(fresh.tokenizer, fresh.verb_fillers);
    for (const auto& g : fresh.gender_words) fresh.tokenizer.add(g);
    fresh.tokenizer.add(fresh.trigger_word);
    for (const auto& d : fresh.domains) {
        std::set<std::string> seen;
        for (const auto& v : d.values) {
            if (!seen.insert(v).second)
                throw std::runtime_error("invalid-world: duplicate value " + v);
            if (int(split_words(v).size()) != d.token_width)
                throw std::runtime_error("invalid-world: bad token width for " + v);
        }
    }
    return fresh;
}

void World::write_config(Config& cfg) const {
    cfg.set_list("world", "names", domains[0].values);
    cfg.set_list("world", "countries", domains[1].values);
    cfg.set_list("world", "occupations", domains[2].values);
    cfg.set_list("world", "foods", domains[3].values);
    cfg.set("world", "trigger", trigger_word);
}

// --- context instance helpers --------------------------------------------

std::vector<int> ContextInstance::labeled_positions(int domain) const {
    std::vector<int> out;
    for (size_t s = 0; s < token_labels.size(); ++s)
        if (token_labels[s] && token_labels[s]->domain == domain) out.push_back(int(s));
    return out;
}

std::vector<int> ContextInstance::slot_positions(int domain, int n_entities) const {
    std::vector<int> out(size_t(n_entities), -1);
    for (size_t s = 0; s < token_labels.size(); ++s) {
        if (!token_labels[s] || token_labels[s]->domain != domain) continue;
        int k = entity_index[s];
        if (k >= 0 && k < n_entities && out[size_t(k)] < 0) out[size_t(k)] = int(s);
    }
    return out;
}

// --- sampling -------------------------------------------------------------

PropositionSet sample_propositions(const World& world, int n_entities, Rng& rng,
                                   const std::array<std::vector<int>, kNumDomains>* allowed) {
    if (n_entities <= 0) throw std::invalid_argument("invalid-world: n_entities must be positive");
    std::array<std::vector<std::string>, kNumDomains> picks;
    for (int d = 0; d < kNumDomains; ++d) {
        std::vector<int> pool;
        if (allowed && !(*allowed)[d].empty()) {
            pool = (*allowed)[d];
        } else {
            pool.resize(world.domains[d].values.size());
            for (size_t i = 0; i < pool.size(); ++i) pool[i] = int(i);
        }
        if (int(pool.size()) < n_entities)
            throw std::invalid_argument("invalid-world: domain " + std::to_string(d) +
                                        " smaller than n_entities");
        std::vector<int> chosen = rng.sample_without_replacement(int(pool.size()), n_entities);
        for (int c : chosen) picks[d].push_back(world.domains[d].values[size_t(pool[size_t(c)])]);
    }
    PropositionSet props;
    for (int k = 0; k < n_entities; ++k) {
        for (Predicate p : {Predicate::LivesIn, Predicate::WorksAs, Predicate::LikesToEat}) {
            props.insert({p, picks[0][size_t(k)], picks[size_t(attribute_domain(p))][size_t(k)]});
        }
    }
    return props;
}

// --- rendering ------------------------------------------------------------

namespace {

struct Piece {
    std::string word;
    int domain = -1;       // >= 0 when this word finishes a domain value
    std::string value;
    int entity = -1;
};

struct Builder {
    const World& world;
    std::vector<Piece> pieces;

    void word(const std::string& w) { pieces.push_back({w, -1, "", -1}); }
    void words(std::initializer_list<const char*> ws) {
        for (const char* w : ws) word(w);
    }
    void value(int domain, const std::string& v, int entity) {
        auto ws = split_words(v);
        for (size_t i = 0; i < ws.size(); ++i) {
            if (i + 1 == ws.size())
                pieces.push_back({ws[i], domain, v, entity}); // label on last token
            else
                pieces.push_back({ws[i], -1, "", -1});
        }
    }
    void phrase(const std::string& p) {
        for (const auto& w : split_words(p)) word(w);
    }
};

std::vector<std::string> verb_sing(Predicate p) {
    switch (p) {
        case Predicate::LivesIn: return {"lives", "in"};
        case Predicate::WorksAs: return {"works", "as"};
        case Predicate::LikesToEat: return {"likes", "to", "eat"};
    }
    return {};
}

std::vector<std::string> verb_plur(Predicate p) {
    switch (p) {
        case Predicate::LivesIn: return {"live", "in"};
        case Predicate::WorksAs: return {"work", "as"};
        case Predicate::LikesToEat: return {"like", "to", "eat"};
    }
    return {};
}

std::vector<std::string> reverse_tail(Predicate p) {
    // "[attr] is <tail...>" with the entity spliced at the marker
    switch (p) {
        case Predicate::LivesIn: return {"where", "@", "lives"};
        case Predicate::WorksAs: return {"what", "@", "works", "as"};
        case Predicate::LikesToEat: return {"what", "@", "likes", "to", "eat"};
    }
    return {};
}

} // namespace

ContextInstance render_context(const World& world, const PropositionSet& props,
                               const ContextTemplate& tmpl) {
    const auto& entities = props.entities();
    const int n = int(entities.size());
    const bool series = tmpl.family == TemplateFamily::Series;
    if (series) {
        if (n < 1 || n > 3) throw std::invalid_argument("template-arity: series supports 1-3 entities");
    } else if (n != 2) {
        throw std::invalid_argument("template-arity: " + family_name(tmpl.family) +
                                    " requires exactly 2 entities");
    }

    Builder b{world, {}};

    auto attr = [&](int k, Predicate p) {
        std::string a = props.attribute_of(entities[size_t(k)], p);
        if (a.empty()) throw std::invalid_argument("template-arity: entity lacks attribute");
        return a;
    };
    auto name_piece = [&](int k) { b.value(0, entities[size_t(k)], k); };
    auto attr_piece = [&](int k, Predicate p) {
        b.value(attribute_domain(p), attr(k, p), k);
    };

    // deterministic filler selection keyed to the sampled values
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& pr : props.items()) h = fnv64(pr.entity, fnv64(pr.attribute, h));
    const auto& noun = world.noun_fillers[h % world.noun_fillers.size()];
    const auto& verb = world.verb_fillers[(h >> 17) % world.verb_fillers.size()];

    auto series_sentence = [&](int k, Predicate p, bool decorate) {
        name_piece(k);
        if (decorate && tmpl.length_variant != LengthVariant::Short) {
            b.word(",");
            b.word("a");
            b.phrase(noun);
            if (tmpl.length_variant == LengthVariant::Long) {
                b.word("who");
                b.phrase(verb);
            }
            b.word(",");
        }
        for (const auto& w : verb_sing(p)) b.word(w);
        attr_piece(k, p);
        b.word(".");
    };

    if (tmpl.predicate_subset.empty()) {
        // vacuous template: names only
        name_piece(0);
        if (n > 1) {
            for (int k = 1; k < n; ++k) {
                b.word("and");
                name_piece(k);
            }
            b.words({"are", "friends", "."});
        } else {
            b.words({"is", "a", "person", "."});
        }
    } else {
        switch (tmpl.family) {
            case TemplateFamily::Series: {
                bool first = true;
                for (Predicate p : tmpl.predicate_subset) {
                    for (int k = 0; k < n; ++k) {
                        series_sentence(k, p, first && k == 0);
                    }
                    first = false;
                }
                break;
            }
            case TemplateFamily::Cross: {
                for (Predicate p : tmpl.predicate_subset) {
                    name_piece(0);
                    b.word("and");
                    name_piece(1);
                    for (const auto& w : verb_plur(p)) b.word(w);
                    attr_piece(0, p);
                    b.word("and");
                    attr_piece(1, p);
                    b.words({"respectively", "."});
                }
                break;
            }
            case TemplateFamily::Reverse: {
                for (Predicate p : tmpl.predicate_subset) {
                    name_piece(0);
                    for (const auto& w : verb_sing(p)) b.word(w);
                    attr_piece(0, p);
                    b.word(".");
                    attr_piece(1, p);
                    b.word("is");
                    for (const auto& w : reverse_tail(p)) {
                        if (w == "@") name_piece(1);
                        else b.word(w);
                    }
                    b.word(".");
                }
                break;
            }
            case TemplateFamily::Coref:
            case TemplateFamily::Nested: {
                name_piece(0);
                b.word("and");
                name_piece(1);
                b.words({"are", "friends", "."});
                const bool nested = tmpl.family == TemplateFamily::Nested;
                for (Predicate p : tmpl.predicate_subset) {
                    int first = nested ? 1 : 0;
                    int second = nested ? 0 : 1;
                    b.word("The");
                    b.word(first == 0 ? "former" : "latter");
                    for (const auto& w : verb_sing(p)) b.word(w);
                    attr_piece(first, p);
                    b.word(".");
                    b.word("The");
                    b.word(second == 0 ? "former" : "latter");
                    for (const auto& w : verb_sing(p)) b.word(w);
                    attr_piece(second, p);
                    b.word(".");
                }
                break;
            }
            case TemplateFamily::Nested2: {
                for (Predicate p : tmpl.predicate_subset) {
                    name_piece(0);
                    b.words({",", "unlike"});
                    name_piece(1);
                    b.word("who");
                    for (const auto& w : verb_sing(p)) b.word(w);
                    attr_piece(1, p);
                    b.word(",");
                    for (const auto& w : verb_sing(p)) b.word(w);
                    attr_piece(0, p);
                    b.word(".");
                }
                break;
            }
        }
    }

    ContextInstance ctx;
    ctx.tmpl = tmpl;
    for (const auto& piece : b.pieces) {
        ctx.tokens.push_back(world.tokenizer.id(piece.word));
        if (piece.domain >= 0) {
            ctx.token_labels.push_back(TokenLabel{piece.domain, piece.value});
            ctx.entity_index.push_back(piece.entity);
        } else {
            ctx.token_labels.push_back(std::nullopt);
            ctx.entity_index.push_back(-1);
        }
    }
    // ground truth = the rendered subset, in sampled entity order
    for (const auto& ent : entities) {
        for (const auto& pr : props.items()) {
            if (pr.entity != ent) continue;
            for (Predicate p : tmpl.predicate_subset)
                if (p == pr.predicate) ctx.propositions.insert(pr);
        }
    }
    // preserve entity order even when no propositions are rendered
    if (ctx.propositions.empty() && !tmpl.predicate_subset.empty()) {
        throw std::logic_error("render_context: no propositions rendered");
    }
    return ctx;
}

Query render_query(const World& world, const ContextInstance& ctx,
                   const std::string& entity, Predicate predicate) {
    if (!ctx.propositions.has_entity(entity))
        throw std::invalid_argument("unknown-entity: " + entity);
    std::string answer = ctx.propositions.attribute_of(entity, predicate);
    if (answer.empty())
        throw std::invalid_argument("unknown-entity: no " + predicate_name(predicate) +
                                    " proposition for " + entity);
    Query q;
    q.tokens = ctx.tokens;
    q.tokens.push_back(world.tokenizer.id("Therefore"));
    q.tokens.push_back(world.tokenizer.id(","));
    for (const auto& w : split_words(entity)) q.tokens.push_back(world.tokenizer.id(w));
    for (const auto& w : verb_sing(predicate)) q.tokens.push_back(world.tokenizer.id(w));
    q.answer = answer;
    q.answer_first_token = world.tokenizer.id(split_words(answer)[0]);
    return q;
}

PeopleQuery render_people_query(const World& world, const ContextInstance& ctx) {
    PeopleQuery q;
    q.tokens = ctx.tokens;
    for (const char* w : {"Therefore", ",", "the", "people", "are"})
        q.tokens.push_back(world.tokenizer.id(w));
    q.names = ctx.propositions.entities();
    return q;
}

// --- splits ----------------------------------------------------------------

Splits make_splits(const World& world, Rng& rng, const SplitSizes& sizes) {
    Splits sp;
    for (int d = 0; d < kNumDomains; ++d) {
        int n = int(world.domains[d].values.size());
        int n_shift = std::max(2, int(std::lround(n / 5.0)));
        if (n - n_shift < 3)
            throw std::invalid_argument("capacity: domain " + std::to_string(d) +
                                        " too small to partition");
        std::vector<int> idx = rng.sample_without_replacement(n, n);
        sp.shift_values[d].assign(idx.begin(), idx.begin() + n_shift);
        sp.train_values[d].assign(idx.begin() + n_shift, idx.end());
        std::sort(sp.shift_values[d].begin(), sp.shift_values[d].end());
        std::sort(sp.train_values[d].begin(), sp.train_values[d].end());
    }

    auto draw_length = [&](Rng& r) {
        double u = r.uniform();
        if (u < 0.6) return LengthVariant::Short;
        if (u < 0.8) return LengthVariant::Medium;
        return LengthVariant::Long;
    };

    auto gen = [&](int count, bool shift) {
        std::vector<ContextInstance> out;
        out.reserve(size_t(count));
        const auto& allowed = shift ? sp.shift_values : sp.train_values;
        const TemplateFamily shift_families[] = {
            TemplateFamily::Cross, TemplateFamily::Reverse, TemplateFamily::Coref,
            TemplateFamily::Nested, TemplateFamily::Nested2};
        for (int i = 0; i < count; ++i) {
            PropositionSet props = sample_propositions(world, 2, rng, &allowed);
            ContextTemplate tmpl;
            if (shift) {
                tmpl.family = shift_families[rng.uniform_int(5)];
                tmpl.length_variant = LengthVariant::Short;
            } else {
                tmpl.family = TemplateFamily::Series;
                tmpl.length_variant = draw_length(rng);
            }
            out.push_back(render_context(world, props, tmpl));
        }
        return out;
    };

    sp.train = gen(sizes.n_train, false);
    sp.val = gen(sizes.n_val, false);
    sp.test_shift = gen(sizes.n_shift, true);
    return sp;
}

// --- serialization -----------------------------------------------------------

std::string context_to_json(const World& world, const ContextInstance& ctx) {
    json j;
    j["tokens"] = ctx.tokens;
    json props = json::array();
    // group by entity order so round trips preserve slot assignment
    for (const auto& e : ctx.propositions.entities()) {
        for (const auto& p : ctx.propositions.items()) {
            if (p.entity != e) continue;
            props.push_back({{"predicate", predicate_name(p.predicate)},
                             {"entity", p.entity},
                             {"attribute", p.attribute}});
        }
    }
    j["propositions"] = props;
    json labels = json::array();
    for (const auto& l : ctx.token_labels) {
        if (l) labels.push_back(json::array({l->domain, l->value}));
        else labels.push_back(nullptr);
    }
    j["token_labels"] = labels;
    json ents = json::array();
    for (int e : ctx.entity_index) {
        if (e >= 0) ents.push_back(e);
        else ents.push_back(nullptr);
    }
    j["entity_index"] = ents;
    json preds = json::array();
    for (Predicate p : ctx.tmpl.predicate_subset) preds.push_back(predicate_name(p));
    j["template"] = {{"family", family_name(ctx.tmpl.family)},
                     {"length_variant", length_name(ctx.tmpl.length_variant)},
                     {"predicates", preds}};
    return j.dump();
}

ContextInstance context_from_json(const World& world, const std::string& line) {
    (void)world;
    json j = json::parse(line);
    ContextInstance ctx;
    ctx.tokens = j.at("tokens").get<std::vector<int>>();
    for (const auto& p : j.at("propositions")) {
        ctx.propositions.insert({predicate_from_name(p.at("predicate").get<std::string>()),
                                 p.at("entity").get<std::string>(),
                                 p.at("attribute").get<std::string>()});
    }
    for (const auto& l : j.at("token_labels")) {
        if (l.is_null()) ctx.token_labels.push_back(std::nullopt);
        else ctx.token_labels.push_back(TokenLabel{l.at(0).get<int>(), l.at(1).get<std::string>()});
    }
    for (const auto& e : j.at("entity_index")) {
        ctx.entity_index.push_back(e.is_null() ? -1 : e.get<int>());
    }
    const auto& t = j.at("template");
    ctx.tmpl.family = family_from_name(t.at("family").get<std::string>());
    ctx.tmpl.length_variant = length_from_name(t.at("length_variant").get<std::string>());
    ctx.tmpl.predicate_subset.clear();
    for (const auto& p : t.at("predicates"))
        ctx.tmpl.predicate_subset.push_back(predicate_from_name(p.get<std::string>()));
    return ctx;
}

void save_contexts_jsonl(const World& world, const std::vector<ContextInstance>& ctxs,
                         const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (const auto& c : ctxs) f << context_to_json(world, c) << "\n";
}

std::vector<ContextInstance> load_contexts_jsonl(const World& world,
                                                 const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<ContextInstance> out;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) out.push_back(context_from_json(world, line));
    }
    return out;
}

} // namespace propdec
