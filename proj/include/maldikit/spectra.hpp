#ifndef MALDIKIT_SPECTRA_HPP
#define MALDIKIT_SPECTRA_HPP

// Preprocessing pipeline for raw mass spectra: variance stabilization,
// smoothing, baseline removal, noise gating, trimming, binning and
// per-spectrum max normalization. All steps are pure functions.

#include <string>
#include <utility>
#include <vector>

#include "maldikit/common.hpp"

namespace maldikit {

// Ordered (m/z, intensity) peak list as acquired. m/z strictly increasing,
// intensities non-negative, equal lengths.
struct RawSpectrum {
    std::vector<double> mz;
    std::vector<double> intensity;

    // lengths equal, mz strictly increasing, intensities >= 0
    void validate() const;
    // as validate() but allows negative intensities; smoothing can
    // overshoot below zero mid-pipeline
    void validate_structure() const;
    size_t size() const { return mz.size(); }
};

struct ProcessedSpectrum {
    std::vector<double> bins;  // each in [0,1]
    double mz_min = 2000.0;
    double mz_max = 20000.0;
    double bin_width = 3.0;
    bool all_zero = false;  // normalization hit an empty spectrum
};

struct PreprocessConfig {
    int half_window = 10;
    int sg_polyorder = 3;
    int snip_iterations = 20;
    double noise_k = 2.0;
    double mz_min = 2000.0;
    double mz_max = 20000.0;
    double bin_width = 3.0;

    void validate() const;
    int num_bins() const { return int((mz_max - mz_min) / bin_width); }
};

// step 1: intensity -> sqrt(intensity)
RawSpectrum sqrt_stabilize(const RawSpectrum& raw);

// step 2: windowed least-squares polynomial smoother; the window shrinks
// symmetrically near the edges (effective order shrinks with it)
RawSpectrum savitzky_golay(const RawSpectrum& raw, int half_window, int polyorder);

// step 3: iterative min-clipping baseline, increasing window 1..iterations;
// returns (corrected, baseline), corrected = max(raw - baseline, 0)
std::pair<RawSpectrum, RawSpectrum> snip_baseline(const RawSpectrum& raw, int iterations);

// step 4: zero everything below noise_k * MAD / 0.6745
RawSpectrum noise_threshold(const RawSpectrum& raw, double noise_k);

// step 5: keep points with mz in [mz_min, mz_max)
RawSpectrum trim(const RawSpectrum& raw, double mz_min, double mz_max);

// step 6: sum intensities into floor((mz_max-mz_min)/width) half-open bins
ProcessedSpectrum bin_spectrum(const RawSpectrum& raw, double mz_min, double mz_max,
                               double bin_width);

// step 7: divide by the max bin; all-zero input is returned unchanged with
// the all_zero flag set
ProcessedSpectrum normalize_max(ProcessedSpectrum binned);

// steps 1..7 in order
ProcessedSpectrum preprocess(const RawSpectrum& raw, const PreprocessConfig& cfg);

// robust sigma building block for step 4: median(|x - median(x)|)
double median_absolute_deviation(std::vector<double> values);

// Plain-text reader: one "mz intensity" pair per line, '#' comments ignored.
RawSpectrum load_raw_spectrum(const std::string& path);

}  // namespace maldikit

#endif
