#ifndef MALDIKIT_CORPUS_HPP
#define MALDIKIT_CORPUS_HPP

// Labeled spectrum collections: CSV interchange, seeded toy-spectrum
// synthesis, and stratified subsetting.

#include <map>
#include <string>
#include <vector>

#include "maldikit/common.hpp"

namespace maldikit {

// N processed spectra (row-major, values in [0,1]) with species labels.
// Vocabulary order is first appearance; loaders reject invalid data rather
// than repairing it.
struct LabeledCorpus {
    std::vector<double> data;  // n x dim, row-major
    int n = 0;
    int dim = 0;
    std::vector<int> labels;            // index into vocab, per row
    std::vector<std::string> vocab;     // species names
    double mz_min = 2000.0;
    double bin_width = 3.0;

    const double* row(int i) const { return &data[size_t(i) * size_t(dim)]; }
    double* row(int i) { return &data[size_t(i) * size_t(dim)]; }
    void append_row(const double* values, int label);
    std::vector<int> class_counts() const;          // per vocab entry
    std::vector<std::vector<int>> class_indices() const;
    int label_of(const std::string& name) const;    // -1 when absent
    void validate() const;
};

struct ToyCorpusSpec {
    int num_classes = 3;
    std::vector<int> per_class = {300};  // single entry broadcasts to all classes
    int bins = 200;
    int peaks_per_class = 5;
    double position_jitter = 1.0;   // std in bins, rounded to integers
    double intensity_jitter = 0.1;  // relative std
    double noise_level = 0.01;      // uniform background amplitude
    uint64_t seed = 17;
    std::vector<std::string> class_names;  // optional; defaults to class_00..

    void validate() const;
    int count_for(int cls) const;
};

// header: label,bin_0,...,bin_{D-1}; floats with 9 significant digits
LabeledCorpus load_corpus_csv(const std::string& path);
void save_corpus_csv(const LabeledCorpus& corpus, const std::string& path);

// Fixed random peak template per class; each sample jitters positions
// (integer-rounded gaussian) and intensities (relative gaussian), adds
// background noise, clamps at zero and max-normalizes. Pure function of
// the spec.
LabeledCorpus make_toy_corpus(const ToyCorpusSpec& spec);

// Uniform sample without replacement per class; counts keyed by class name.
LabeledCorpus stratified_subset(const LabeledCorpus& corpus,
                                const std::map<std::string, int>& per_class_counts, uint64_t seed);

// Convenience split helper built on the same seeded draw: fractions per
// class, remainder goes to the last part.
std::vector<LabeledCorpus> stratified_split(const LabeledCorpus& corpus,
                                            const std::vector<double>& fractions, uint64_t seed);

}  // namespace maldikit

#endif
