#pragma once

// Interacting-vectors toy model: regress a rank-one tensor a*⊗b*⊗c* (or a*⊗b*)
// with the product of learnt vectors. Learning any one vector alone is
// exponential; jointly the origin is a saddle and the loss plateaus.

#include <cstdint>
#include <optional>
#include <vector>

namespace optolab {

struct ToyVectors {
    std::vector<double> a, b, c;  // c is empty in the two-vector variant
    friend bool operator==(const ToyVectors&, const ToyVectors&) = default;
};

struct ToyConfig {
    std::size_t n_a = 4, n_b = 4, n_c = 4;
    int n_vectors = 3;        // 2 drops c
    ToyVectors truth;         // empty vectors are drawn from `seed`
    double lr = 0.01;
    std::uint64_t steps = 20000;
    bool clamp_a = false, clamp_b = false, clamp_c = false;
    double init_std = 1e-3;
    std::uint64_t seed = 0;
    std::uint64_t record_every = 0;  // 0: no iterates kept

    /// Throws ConfigError listing every problem.
    void validate() const;
};

/// Entries i.i.d. uniform in [0.5, 1.5] for the configured dimensions.
ToyVectors default_truth(const ToyConfig& cfg);
/// Copy of cfg with its truth filled in when missing.
ToyConfig resolved(const ToyConfig& cfg);

/// ½ Σ (a*_i b*_j c*_k − a_i b_j c_k)²; c terms dropped when both c vectors are empty.
double toy_loss(const ToyVectors& x, const ToyVectors& truth);
ToyVectors toy_grads(const ToyVectors& x, const ToyVectors& truth);

struct ToyTrace {
    std::vector<double> loss;                 // loss before step t, t = 0..steps
    std::vector<std::uint64_t> iterate_steps;
    std::vector<ToyVectors> iterates;
    ToyVectors final;
};

/// Plain gradient descent. Throws NumericalError (with the step) if the loss exceeds 1e6 or is non-finite.
ToyTrace toy_train(const ToyConfig& cfg);

struct SaddleProbe {
    double down = 0.0;  // L(ε d₋) − L(0)
    double up = 0.0;    // L(ε d₊) − L(0)
    std::size_t i = 0, j = 0, k = 0;
    double product = 0.0;  // a*_i b*_j c*_k at the chosen index
};

/// Probes the origin along the two directions built from the first index whose truth product is nonzero.
SaddleProbe saddle_probe(const ToyVectors& truth, double eps);

/// 1 − cos²(x, y); absent if either vector is zero.
std::optional<double> squared_cosine_distance(const std::vector<double>& x, const std::vector<double>& y);

struct ToyProgress {
    std::vector<std::optional<double>> cosine_distance;  // a against a*
    std::vector<double> fixed_bc_loss;                   // b, c set to ±b*, ±c*, best sign choice
};
ToyProgress toy_progress_measures(const std::vector<ToyVectors>& iterates, const ToyVectors& truth);

/// Steps until the loss first drops below `fraction` of its initial value.
std::optional<std::uint64_t> toy_plateau_length(const std::vector<double>& loss, double fraction = 0.5);

/// R² of a line through (t, log loss) over steps with loss above `floor`.
double toy_log_fit_r2(const std::vector<double>& loss, double floor = 1e-10);

}  // namespace optolab
