#include "propdec/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace propdec {

namespace {

// K unit vectors in R^r with the fixed non-orthogonal geometry:
// r=1: +/-1; r=2: 0/60/120 degrees; r>=3: regular simplex with K=r+1
std::vector<Vec> slot_geometry(int r, int& n_slots) {
    std::vector<Vec> out;
    if (r == 1) {
        n_slots = 2;
        out.push_back({1.0});
        out.push_back({-1.0});
        return out;
    }
    if (r == 2) {
        if (n_slots < 2) n_slots = 3;
        for (int k = 0; k < n_slots; ++k) {
            double th = k * M_PI / 3.0; // 60 degree spacing
            out.push_back({std::cos(th), std::sin(th)});
        }
        return out;
    }
    n_slots = r + 1;
    // zero-sum corners of the standard simplex, orthonormalized coordinates
    Mat corners(r + 1, r + 1);
    for (int k = 0; k <= r; ++k)
        for (int j = 0; j <= r; ++j)
            corners.at(k, j) = (k == j ? 1.0 : 0.0) - 1.0 / (r + 1);
    Mat basis = orthonormalize_columns(transpose(corners)); // (r+1) x r
    for (int k = 0; k <= r; ++k) {
        Vec v(size_t(r), 0.0);
        double n2 = 0.0;
        for (int j = 0; j < r; ++j) {
            double c = 0.0;
            for (int i = 0; i <= r; ++i) c += corners.at(k, i) * basis.at(i, j);
            v[size_t(j)] = c;
            n2 += c * c;
        }
        for (auto& x : v) x /= std::sqrt(n2);
        out.push_back(v);
    }
    return out;
}

} // namespace

Oracle::Oracle(const OracleSpec& spec, const World& base_world) : spec_(spec) {
    world_ = base_world;
    int total_lex = 0;
    for (int d = 0; d < kNumDomains; ++d) {
        int n = spec_.domain_sizes[size_t(d)];
        if (n < 2 || n > int(base_world.domains[size_t(d)].values.size()))
            throw std::invalid_argument("capacity error: oracle domain size " + std::to_string(n));
        world_.domains[size_t(d)].values.resize(size_t(n));
        total_lex += n;
    }
    if (total_lex + spec_.rank + 2 > spec_.d_model)
        throw std::invalid_argument("capacity error: lexical + binding exceeds d_model");

    Rng rng(spec_.seed);
    Mat frame = random_orthogonal(spec_.d_model, rng);

    // lexical directions: per-domain block of frame columns, exactly
    // centered within each domain
    int col = 0;
    for (int d = 0; d < kNumDomains; ++d) {
        int n = spec_.domain_sizes[size_t(d)];
        Vec mean(size_t(spec_.d_model), 0.0);
        std::vector<Vec> raw;
        for (int i = 0; i < n; ++i) {
            Vec v(size_t(spec_.d_model));
            for (int j = 0; j < spec_.d_model; ++j) v[size_t(j)] = frame.at(j, col);
            ++col;
            for (int j = 0; j < spec_.d_model; ++j) mean[size_t(j)] += v[size_t(j)] / n;
            raw.push_back(std::move(v));
        }
        for (auto& v : raw) {
            for (int j = 0; j < spec_.d_model; ++j) v[size_t(j)] -= mean[size_t(j)];
            lexical_[size_t(d)].push_back(v);
        }
    }

    int k_slots = spec_.n_slots;
    std::vector<Vec> geom = slot_geometry(spec_.rank, k_slots);
    spec_.n_slots = k_slots;

    binding_basis_.resize(spec_.d_model, spec_.rank);
    for (int c = 0; c < spec_.rank; ++c)
        for (int j = 0; j < spec_.d_model; ++j)
            binding_basis_.at(j, c) = frame.at(j, col + c);

    weights_.resize(size_t(spec_.rank));
    for (int c = 0; c < spec_.rank; ++c) weights_[size_t(c)] = 1.0 - 0.04 * c;

    h_true_.resize(spec_.d_model, spec_.d_model);
    for (int i = 0; i < spec_.d_model; ++i)
        for (int j = 0; j < spec_.d_model; ++j) {
            double s = 0.0;
            for (int c = 0; c < spec_.rank; ++c)
                s += binding_basis_.at(i, c) * weights_[size_t(c)] * binding_basis_.at(j, c);
            h_true_.at(i, j) = s;
        }

    for (int k = 0; k < k_slots; ++k) {
        Vec dir(size_t(spec_.d_model), 0.0);
        for (int j = 0; j < spec_.d_model; ++j)
            for (int c = 0; c < spec_.rank; ++c)
                dir[size_t(j)] += binding_basis_.at(j, c) * geom[size_t(k)][size_t(c)];
        slot_dirs_.push_back(std::move(dir));
    }

    filler_token_ = world_.tokenizer.id(".");
}

Vec Oracle::slot_binding(int k) const {
    if (k < 0 || k >= int(slot_dirs_.size()))
        throw std::invalid_argument("capacity error: slot " + std::to_string(k));
    Vec v = slot_dirs_[size_t(k)];
    scale(v, spec_.binding_scale);
    return v;
}

Vec Oracle::lexical(int domain, const std::string& value) const {
    int idx = world_.domains[size_t(domain)].index_of(value);
    if (idx < 0) throw std::invalid_argument("unknown value: " + value);
    return lexical_[size_t(domain)][size_t(idx)];
}

Vec Oracle::make_token_vec(int domain, const std::string& value, int slot, Rng& rng) const {
    Vec v = lexical(domain, value);
    if (slot >= 0) {
        Vec b = slot_binding(slot);
        axpy(1.0, b, v);
    }
    if (spec_.noise > 0.0)
        for (auto& x : v) x += spec_.noise * rng.normal();
    return v;
}

OracleContext Oracle::make_context(const PropositionSet& props, Rng& rng) const {
    const auto& entities = props.entities();
    if (int(entities.size()) > spec_.n_slots)
        throw std::invalid_argument("capacity error: more entities than binding slots");

    OracleContext out;
    std::vector<Vec> rows;
    auto push = [&](Vec v, int token, std::optional<TokenLabel> label, int ent) {
        rows.push_back(std::move(v));
        out.meta.tokens.push_back(token);
        out.meta.token_labels.push_back(label);
        out.meta.entity_index.push_back(ent);
    };
    auto filler = [&]() {
        Vec v(size_t(spec_.d_model), 0.0);
        if (spec_.noise > 0.0)
            for (auto& x : v) x += spec_.noise * rng.normal();
        push(std::move(v), filler_token_, std::nullopt, -1);
    };
    auto last_word_token = [&](const std::string& value) {
        auto ids = world_.tokenizer.encode(value);
        return ids.back();
    };

    out.entity_pos.assign(entities.size(), -1);
    for (auto& ap : out.attr_pos) ap.assign(entities.size(), -1);

    filler();
    for (size_t k = 0; k < entities.size(); ++k) {
        out.entity_pos[k] = int(rows.size());
        push(make_token_vec(0, entities[k], int(k), rng), last_word_token(entities[k]),
             TokenLabel{0, entities[k]}, int(k));
        for (Predicate p : {Predicate::LivesIn, Predicate::WorksAs, Predicate::LikesToEat}) {
            std::string a = props.attribute_of(entities[k], p);
            if (a.empty()) continue;
            int dom = attribute_domain(p);
            out.attr_pos[size_t(dom)][k] = int(rows.size());
            push(make_token_vec(dom, a, int(k), rng), last_word_token(a),
                 TokenLabel{dom, a}, int(k));
        }
        filler();
    }

    out.meta.propositions = props;
    out.cache.n_layers = 1;
    out.cache.seq = int(rows.size());
    out.cache.d = spec_.d_model;
    out.cache.z.assign(1, Mat(int(rows.size()), spec_.d_model));
    double total = 0.0;
    for (size_t s = 0; s < rows.size(); ++s) {
        std::copy(rows[s].begin(), rows[s].end(), out.cache.z[0].row(int(s)));
        total += norm2(rows[s]);
    }
    out.cache.per_layer_scale = {total / double(rows.size())};
    return out;
}

OracleContext Oracle::make_binding_context(Rng& rng, Predicate pred, int n_entities) const {
    // single-predicate contexts: sample names plus one attribute domain
    std::array<std::vector<int>, kNumDomains> allowed; // unrestricted
    PropositionSet full = sample_propositions(world_, n_entities, rng, &allowed);
    PropositionSet props;
    for (const auto& ent : full.entities())
        for (const auto& p : full.items())
            if (p.predicate == pred && p.entity == ent) props.insert(p);
    return make_context(props, rng);
}

Vec Oracle::answer(const ActivationCache& cache, const std::vector<int>& attr_positions,
                   int entity_position) const {
    std::vector<double> scores;
    Vec evec = cache.vec(0, entity_position);
    std::vector<double> ev(evec.begin(), evec.end());
    for (int ap : attr_positions) {
        Vec avec = cache.vec(0, ap);
        scores.push_back(score<double>(ev, avec));
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double sum = 0.0;
    Vec p(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - mx);
        sum += p[i];
    }
    for (auto& x : p) x /= sum;
    return p;
}

} // namespace propdec
