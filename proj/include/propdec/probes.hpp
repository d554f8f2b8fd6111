#pragma once

// Per-domain linear classifiers over single-token activations, plus the
// Grad-CAM attribution used as an alternative labeling path and the
// AUC-PRC layer selection.

#include <optional>
#include <string>
#include <vector>

#include "propdec/model.hpp"
#include "propdec/world.hpp"

namespace propdec {

struct DomainProbe {
    int domain = 0;
    int layer = 0;
    double threshold = 0.0;
    bool threshold_set = false; // unset probes never answer null
    std::vector<std::string> values; // fitted values, in domain order
    Mat u; // [n_values][d], class mean minus grand mean of class means

    void save(const std::string& path) const;
    static DomainProbe load(const std::string& path);
    std::string to_json() const;
};

// one labeled token position (activation at a fixed layer)
struct TokenSample {
    Vec z;
    std::string value; // "" for null tokens
};

// class mean minus grand mean over the labeled samples; `values` fixes the
// class set and order (throws coverage error on a missing class)
DomainProbe fit_domain_probe(int domain, int layer,
                             const std::vector<TokenSample>& samples,
                             const std::vector<std::string>& values);

// argmax value if the best dot product exceeds the threshold, else null.
// Ties break toward the lowest value index.
std::optional<std::string> classify(const DomainProbe& probe, const double* z);
inline std::optional<std::string> classify(const DomainProbe& probe, const Vec& z) {
    return classify(probe, z.data());
}
double max_score(const DomainProbe& probe, const double* z);

// Grad-CAM attribution A[l][s] = (Z' - Z) . dM/dZ on a contrast pair
Mat gradcam(const Model& model, const std::vector<int>& tokens,
            const std::vector<int>& tokens_contrast, const Metric& metric);

// average precision of the "is a domain value" detector built from
// max-dot-product scores
double auc_prc(const std::vector<double>& scores, const std::vector<int>& labels);

// fit a probe per layer and return the layer with the best AUC-PRC
int select_layer(int domain, const std::vector<std::vector<TokenSample>>& samples_per_layer,
                 const std::vector<std::string>& values, Vec* auc_out = nullptr);

// per-context value-set recovery on validation; ties prefer the larger
// threshold (101-point grid over the observed score range)
struct ThresholdContext {
    std::vector<Vec> activations;      // scanned positions at the probe layer
    std::vector<std::string> true_set; // expected value set (sorted unique)
};
double select_threshold(const DomainProbe& probe, const std::vector<ThresholdContext>& val);

} // namespace propdec
