#ifndef MALDIKIT_PIKE_HPP
#define MALDIKIT_PIKE_HPP

// Peak-aware similarity kernel over binned spectra plus the consistency and
// variability metric suite built on it (squared MMD, intra-class distance,
// nearest-neighbour distance, mean cross similarity).

#include <string>
#include <vector>

#include "maldikit/corpus.hpp"

namespace maldikit {

struct KernelConfig {
    double t = 8.0;                  // bandwidth, squared bin-index units
    bool normalized = true;          // cosine-style K/sqrt(Kaa*Kbb)
    double sparsity_epsilon = 1e-6;  // bins at or below are treated as absent

    void validate() const;
};

// Owning set of equal-length spectra (rows).
struct SpectrumSet {
    std::vector<double> data;
    int n = 0;
    int dim = 0;

    const double* row(int i) const { return &data[size_t(i) * size_t(dim)]; }
    void append(const double* values, int dim_in);

    static SpectrumSet from_corpus(const LabeledCorpus& corpus);
    static SpectrumSet from_class(const LabeledCorpus& corpus, int label);
};

struct GramMatrix {
    std::vector<double> values;  // rows x cols, row-major
    int rows = 0;
    int cols = 0;
    double at(int r, int c) const { return values[size_t(r) * size_t(cols) + size_t(c)]; }
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

struct MetricRow {
    std::string klass;
    double pike_all_mean = 0.0, pike_all_std = 0.0;
    double mmd2 = 0.0;
    double cd_mean = 0.0, cd_std = 0.0;
    double nd_mean = 0.0, nd_std = 0.0;
};

struct MetricReport {
    std::vector<MetricRow> per_class;
    MetricRow aggregate;  // klass = "__mean__"; std fields are across-class stds of the means
};

// K(a,b) = (1/(2*sqrt(2*pi*t))) * sum_ij a_i b_j exp(-(i-j)^2/(8t)) over
// bins above the sparsity epsilon. Normalized form divides by
// sqrt(K(a,a)K(b,b)); an empty spectrum scores 0 against anything and 1
// against another empty spectrum.
double pike_kernel(const std::vector<double>& a, const std::vector<double>& b,
                   const KernelConfig& cfg);

// entry (i,j) = pike_kernel(x_i, y_j); symmetric halves are mirrored when
// both arguments are the same set
GramMatrix pike_gram(const SpectrumSet& x, const SpectrumSet& y, const KernelConfig& cfg,
                     int threads = 1);

// unbiased within-set terms plus the full cross term
double mmd2(const SpectrumSet& x, const SpectrumSet& x_gen, const KernelConfig& cfg,
            int threads = 1);

// mean/std of (1 - K) over unordered pairs; requires the normalized kernel
MeanStd class_distance(const SpectrumSet& x_gen, const KernelConfig& cfg, int threads = 1);

struct NeighbourDistance {
    MeanStd stats;
    std::vector<int> nearest;  // index into the training set per generated row
};

// per generated row: 1 - max_n K(gen, train_n); exclude_self skips the
// matching index for baselines computed on the training set itself
NeighbourDistance neighbour_distance(const SpectrumSet& x_gen, const SpectrumSet& x_train,
                                     const KernelConfig& cfg, bool exclude_self = false,
                                     int threads = 1);

// mean/std of K over all generated x real pairs
MeanStd pike_all(const SpectrumSet& x_gen, const SpectrumSet& x_real, const KernelConfig& cfg,
                 int threads = 1);

// per-class metric table; vocabularies must match and every generated class
// must exist in the real corpus
MetricReport metric_report(const LabeledCorpus& real, const LabeledCorpus& generated,
                           const KernelConfig& cfg, int threads = 1);

// class,pike_all_mean,pike_all_std,mmd2,cd_mean,cd_std,nd_mean,nd_std + __mean__ row
void save_metric_report_csv(const MetricReport& report, const std::string& path);

}  // namespace maldikit

#endif
