#include "propdec/probes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

namespace propdec {

DomainProbe fit_domain_probe(int domain, int layer, const std::vector<TokenSample>& samples,
                             const std::vector<std::string>& values) {
    if (values.empty()) throw std::invalid_argument("coverage error: no values");
    std::map<std::string, std::pair<Vec, int>> sums;
    int d = -1;
    for (const auto& s : samples) {
        if (s.value.empty()) continue;
        if (d < 0) d = int(s.z.size());
        auto& [sum, count] = sums[s.value];
        if (sum.empty()) sum.assign(size_t(d), 0.0);
        axpy(1.0, s.z, sum);
        ++count;
    }
    DomainProbe probe;
    probe.domain = domain;
    probe.layer = layer;
    probe.values = values;
    for (const auto& v : values)
        if (!sums.count(v))
            throw std::invalid_argument("coverage error: no activations for value " + v);
    probe.u.resize(int(values.size()), d);
    Vec grand(size_t(d), 0.0);
    for (size_t i = 0; i < values.size(); ++i) {
        auto& [sum, count] = sums[values[i]];
        for (int j = 0; j < d; ++j) probe.u.at(int(i), j) = sum[size_t(j)] / count;
        for (int j = 0; j < d; ++j) grand[size_t(j)] += probe.u.at(int(i), j) / double(values.size());
    }
    for (size_t i = 0; i < values.size(); ++i)
        for (int j = 0; j < d; ++j) probe.u.at(int(i), j) -= grand[size_t(j)];
    return probe;
}

double max_score(const DomainProbe& probe, const double* z) {
    double best = -1e300;
    for (int i = 0; i < probe.u.rows; ++i)
        best = std::max(best, dot(probe.u.row(i), z, probe.u.cols));
    return best;
}

std::optional<std::string> classify(const DomainProbe& probe, const double* z) {
    int best = 0;
    double best_score = dot(probe.u.row(0), z, probe.u.cols);
    for (int i = 1; i < probe.u.rows; ++i) {
        double s = dot(probe.u.row(i), z, probe.u.cols);
        if (s > best_score) { // strict: ties keep the lowest index
            best_score = s;
            best = i;
        }
    }
    if (probe.threshold_set && !(best_score > probe.threshold)) return std::nullopt;
    return probe.values[size_t(best)];
}

Mat gradcam(const Model& model, const std::vector<int>& tokens,
            const std::vector<int>& tokens_contrast, const Metric& metric) {
    if (tokens.size() != tokens_contrast.size())
        throw std::invalid_argument("contrast error: length mismatch");
    auto [logits, cache] = model.forward_with_cache(tokens);
    auto [logits2, cache2] = model.forward_with_cache(tokens_contrast);
    auto grads = model.grad_wrt_activations(tokens, metric);
    const int L = model.cfg.n_layers, S = int(tokens.size()), d = model.cfg.d_model;
    Mat a(L, S);
    for (int l = 0; l < L; ++l)
        for (int s = 0; s < S; ++s) {
            double acc = 0.0;
            const double* z = cache.at(l, s);
            const double* z2 = cache2.at(l, s);
            const double* g = grads[size_t(l)].row(s);
            for (int i = 0; i < d; ++i) acc += (z2[i] - z[i]) * g[i];
            a.at(l, s) = acc;
        }
    return a;
}

double auc_prc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("metric error: bad inputs");
    int n_pos = 0;
    for (int l : labels) n_pos += l;
    if (n_pos == 0 || n_pos == int(labels.size()))
        throw std::invalid_argument("metric error: single-class labels");
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[size_t(a)] > scores[size_t(b)]; });
    // average precision: sum of precision at each positive hit
    double ap = 0.0;
    int tp = 0;
    for (size_t r = 0; r < idx.size(); ++r) {
        if (labels[size_t(idx[r])]) {
            ++tp;
            ap += double(tp) / double(r + 1);
        }
    }
    return ap / n_pos;
}

int select_layer(int domain, const std::vector<std::vector<TokenSample>>& samples_per_layer,
                 const std::vector<std::string>& values, Vec* auc_out) {
    const int L = int(samples_per_layer.size());
    Vec aucs(size_t(L), 0.0);
    int best = 0;
    for (int l = 0; l < L; ++l) {
        DomainProbe probe = fit_domain_probe(domain, l, samples_per_layer[size_t(l)], values);
        std::vector<double> scores;
        std::vector<int> labels;
        for (const auto& s : samples_per_layer[size_t(l)]) {
            scores.push_back(max_score(probe, s.z.data()));
            labels.push_back(s.value.empty() ? 0 : 1);
        }
        aucs[size_t(l)] = auc_prc(scores, labels);
        if (aucs[size_t(l)] > aucs[size_t(best)]) best = l;
    }
    if (auc_out) *auc_out = aucs;
    return best;
}

double select_threshold(const DomainProbe& probe, const std::vector<ThresholdContext>& val) {
    if (val.empty()) throw std::invalid_argument("argument error: empty validation set");
    // per context: the max-dot score and argmax value at each position
    struct Scored {
        std::vector<std::pair<double, std::string>> tokens; // (score, argmax value)
        std::set<std::string> truth;
    };
    std::vector<Scored> scored;
    double lo = 1e300, hi = -1e300;
    for (const auto& ctx : val) {
        Scored sc;
        for (const auto& z : ctx.activations) {
            double best_score = dot(probe.u.row(0), z.data(), probe.u.cols);
            int best = 0;
            for (int i = 1; i < probe.u.rows; ++i) {
                double s = dot(probe.u.row(i), z.data(), probe.u.cols);
                if (s > best_score) {
                    best_score = s;
                    best = i;
                }
            }
            sc.tokens.emplace_back(best_score, probe.values[size_t(best)]);
            lo = std::min(lo, best_score);
            hi = std::max(hi, best_score);
        }
        sc.truth.insert(ctx.true_set.begin(), ctx.true_set.end());
        scored.push_back(std::move(sc));
    }
    if (hi <= lo) return hi;
    double best_threshold = lo, best_acc = -1.0;
    for (int g = 0; g < 101; ++g) {
        double h = lo + (hi - lo) * g / 100.0;
        int correct = 0;
        for (const auto& sc : scored) {
            std::set<std::string> detected;
            for (const auto& [score, value] : sc.tokens)
                if (score > h) detected.insert(value);
            if (detected == sc.truth) ++correct;
        }
        double acc = double(correct) / double(scored.size());
        if (acc >= best_acc) { // ties prefer the larger threshold
            best_acc = acc;
            best_threshold = h;
        }
    }
    return best_threshold;
}

// --- io -----------------------------------------------------------------------

namespace {
void put_u32(std::ofstream& f, uint32_t x) {
    unsigned char b[4] = {(unsigned char)x, (unsigned char)(x >> 8), (unsigned char)(x >> 16),
                          (unsigned char)(x >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
}
uint32_t get_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
} // namespace

// "PDPR" | version | domain | layer | threshold_set | threshold f64
// | n_values | d | per value: u16 name len + name | matrix f32
void DomainProbe::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write("PDPR", 4);
    put_u32(f, 1);
    put_u32(f, uint32_t(domain));
    put_u32(f, uint32_t(layer));
    put_u32(f, threshold_set ? 1 : 0);
    f.write(reinterpret_cast<const char*>(&threshold), 8);
    put_u32(f, uint32_t(values.size()));
    put_u32(f, uint32_t(u.cols));
    for (const auto& v : values) {
        put_u32(f, uint32_t(v.size()));
        f.write(v.data(), std::streamsize(v.size()));
    }
    for (double x : u.data) {
        float v32 = float(x);
        f.write(reinterpret_cast<char*>(&v32), 4);
    }
}

DomainProbe DomainProbe::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::string(magic, 4) != "PDPR") throw std::runtime_error("bad probe magic");
    if (get_u32(f) != 1) throw std::runtime_error("unsupported probe version");
    DomainProbe p;
    p.domain = int(get_u32(f));
    p.layer = int(get_u32(f));
    p.threshold_set = get_u32(f) != 0;
    f.read(reinterpret_cast<char*>(&p.threshold), 8);
    int n = int(get_u32(f)), d = int(get_u32(f));
    for (int i = 0; i < n; ++i) {
        uint32_t len = get_u32(f);
        std::string s(len, '\0');
        f.read(s.data(), len);
        p.values.push_back(s);
    }
    p.u.resize(n, d);
    for (double& x : p.u.data) {
        float v32;
        f.read(reinterpret_cast<char*>(&v32), 4);
        x = v32;
    }
    if (!f) throw std::runtime_error("truncated probe file");
    return p;
}

std::string DomainProbe::to_json() const {
    nlohmann::json j;
    j["domain"] = domain;
    j["layer"] = layer;
    j["threshold"] = threshold_set ? nlohmann::json(threshold) : nlohmann::json(nullptr);
    j["values"] = values;
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < u.rows; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < u.cols; ++c) row.push_back(u.at(i, c));
        rows.push_back(row);
    }
    j["vectors"] = rows;
    return j.dump();
}

} // namespace propdec
