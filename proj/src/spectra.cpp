#include "maldikit/spectra.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace maldikit {

void RawSpectrum::validate_structure() const {
    if (mz.size() != intensity.size())
        throw DataError("raw spectrum: mz and intensity lengths differ (" +
                        std::to_string(mz.size()) + " vs " + std::to_string(intensity.size()) + ")");
    for (size_t i = 1; i < mz.size(); ++i)
        if (!(mz[i] > mz[i - 1]))
            throw DataError("raw spectrum: mz not strictly increasing at index " +
                            std::to_string(i));
}

void RawSpectrum::validate() const {
    validate_structure();
    for (size_t i = 0; i < intensity.size(); ++i)
        if (intensity[i] < 0.0)
            throw DataError("raw spectrum: negative intensity at index " + std::to_string(i));
}

void PreprocessConfig::validate() const {
    if (half_window < sg_polyorder / 2 + 1)
        throw DataError("preprocess config: half_window must be >= sg_polyorder/2 + 1");
    if (snip_iterations < 1) throw DataError("preprocess config: snip_iterations must be >= 1");
    if (!(bin_width > 0.0)) throw DataError("preprocess config: bin_width must be positive");
    if (!(mz_min < mz_max)) throw DataError("preprocess config: mz_min must be below mz_max");
}

RawSpectrum sqrt_stabilize(const RawSpectrum& raw) {
    RawSpectrum out = raw;
    for (auto& v : out.intensity) {
        if (v < 0.0) throw DataError("sqrt_stabilize: negative intensity");
        v = std::sqrt(v);
    }
    return out;
}

namespace {

// Least-squares fit of a polynomial of degree `order` over the samples
// y[-w..w] evaluated at the window center. Returns the convolution weights
// c_j so the fitted value is sum_j c_j * y[j]. Weights come from the first
// row of (A^T A)^{-1} A^T with A the Vandermonde over offsets.
std::vector<double> sg_center_weights(int w, int order) {
    int npts = 2 * w + 1;
    int terms = order + 1;
    // normal matrix M[a][b] = sum_j j^(a+b)
    std::vector<std::vector<double>> m(size_t(terms), std::vector<double>(size_t(terms), 0.0));
    for (int a = 0; a < terms; ++a)
        for (int b = 0; b < terms; ++b) {
            double s = 0.0;
            for (int j = -w; j <= w; ++j) s += std::pow(double(j), double(a + b));
            m[size_t(a)][size_t(b)] = s;
        }
    // solve M * r = e0 by Gauss elimination with partial pivoting
    std::vector<double> r(size_t(terms), 0.0);
    r[0] = 1.0;
    for (int col = 0; col < terms; ++col) {
        int piv = col;
        for (int row = col + 1; row < terms; ++row)
            if (std::abs(m[size_t(row)][size_t(col)]) > std::abs(m[size_t(piv)][size_t(col)]))
                piv = row;
        std::swap(m[size_t(col)], m[size_t(piv)]);
        std::swap(r[size_t(col)], r[size_t(piv)]);
        double d = m[size_t(col)][size_t(col)];
        for (int row = col + 1; row < terms; ++row) {
            double f = m[size_t(row)][size_t(col)] / d;
            for (int k = col; k < terms; ++k) m[size_t(row)][size_t(k)] -= f * m[size_t(col)][size_t(k)];
            r[size_t(row)] -= f * r[size_t(col)];
        }
    }
    for (int col = terms - 1; col >= 0; --col) {
        for (int k = col + 1; k < terms; ++k) r[size_t(col)] -= m[size_t(col)][size_t(k)] * r[size_t(k)];
        r[size_t(col)] /= m[size_t(col)][size_t(col)];
    }
    // weights c_j = sum_a r[a] * j^a
    std::vector<double> c(size_t(npts), 0.0);
    for (int j = -w; j <= w; ++j) {
        double acc = 0.0, jp = 1.0;
        for (int a = 0; a < terms; ++a) {
            acc += r[size_t(a)] * jp;
            jp *= double(j);
        }
        c[size_t(j + w)] = acc;
    }
    return c;
}

}  // namespace

RawSpectrum savitzky_golay(const RawSpectrum& raw, int half_window, int polyorder) {
    raw.validate_structure();
    int n = int(raw.size());
    if (n < 2 * half_window + 1)
        throw DataError("savitzky_golay: spectrum length " + std::to_string(n) +
                        " below window " + std::to_string(2 * half_window + 1));

    std::vector<double> interior = sg_center_weights(half_window, polyorder);
    RawSpectrum out = raw;
    for (int i = 0; i < n; ++i) {
        int w = std::min({half_window, i, n - 1 - i});
        const std::vector<double>* weights = &interior;
        std::vector<double> shrunk;
        if (w < half_window) {
            shrunk = sg_center_weights(w, std::min(polyorder, 2 * w));
            weights = &shrunk;
        }
        double acc = 0.0;
        for (int j = -w; j <= w; ++j) acc += (*weights)[size_t(j + w)] * raw.intensity[size_t(i + j)];
        out.intensity[size_t(i)] = acc;
    }
    return out;
}

std::pair<RawSpectrum, RawSpectrum> snip_baseline(const RawSpectrum& raw, int iterations) {
    raw.validate_structure();
    if (iterations < 1) throw DataError("snip_baseline: iterations must be >= 1");
    int n = int(raw.size());
    std::vector<double> b = raw.intensity;
    std::vector<double> next(b.size());
    for (int it = 1; it <= iterations; ++it) {
        for (int i = 0; i < n; ++i) {
            int lo = std::max(0, i - it);
            int hi = std::min(n - 1, i + it);
            double avg = 0.5 * (b[size_t(lo)] + b[size_t(hi)]);
            next[size_t(i)] = std::min(b[size_t(i)], avg);
        }
        b.swap(next);
    }
    RawSpectrum baseline{raw.mz, b};
    RawSpectrum corrected = raw;
    for (int i = 0; i < n; ++i)
        corrected.intensity[size_t(i)] = std::max(raw.intensity[size_t(i)] - b[size_t(i)], 0.0);
    return {corrected, baseline};
}

double median_absolute_deviation(std::vector<double> values) {
    if (values.empty()) return 0.0;
    auto median_of = [](std::vector<double>& v) {
        size_t mid = v.size() / 2;
        std::nth_element(v.begin(), v.begin() + ptrdiff_t(mid), v.end());
        double hi = v[mid];
        if (v.size() % 2 == 1) return hi;
        std::nth_element(v.begin(), v.begin() + ptrdiff_t(mid - 1), v.end());
        return 0.5 * (hi + v[mid - 1]);
    };
    double med = median_of(values);
    for (auto& v : values) v = std::abs(v - med);
    return median_of(values);
}

RawSpectrum noise_threshold(const RawSpectrum& raw, double noise_k) {
    raw.validate_structure();
    double tau = noise_k * median_absolute_deviation(raw.intensity) / 0.6745;
    RawSpectrum out = raw;
    for (auto& v : out.intensity)
        if (v < tau) v = 0.0;
    return out;
}

RawSpectrum trim(const RawSpectrum& raw, double mz_min, double mz_max) {
    raw.validate_structure();
    RawSpectrum out;
    for (size_t i = 0; i < raw.size(); ++i) {
        if (raw.mz[i] >= mz_min && raw.mz[i] < mz_max) {
            out.mz.push_back(raw.mz[i]);
            out.intensity.push_back(raw.intensity[i]);
        }
    }
    return out;
}

ProcessedSpectrum bin_spectrum(const RawSpectrum& raw, double mz_min, double mz_max,
                               double bin_width) {
    raw.validate_structure();
    int d = int((mz_max - mz_min) / bin_width);
    ProcessedSpectrum out;
    out.mz_min = mz_min;
    out.mz_max = mz_max;
    out.bin_width = bin_width;
    out.bins.assign(size_t(d), 0.0);
    for (size_t i = 0; i < raw.size(); ++i) {
        int j = int(std::floor((raw.mz[i] - mz_min) / bin_width));
        if (j < 0 || j >= d) continue;  // outside the binnable range
        out.bins[size_t(j)] += raw.intensity[i];
    }
    return out;
}

ProcessedSpectrum normalize_max(ProcessedSpectrum binned) {
    double mx = 0.0;
    for (double v : binned.bins) mx = std::max(mx, v);
    if (mx <= 0.0) {
        binned.all_zero = true;
        return binned;
    }
    for (auto& v : binned.bins) v /= mx;
    return binned;
}

ProcessedSpectrum preprocess(const RawSpectrum& raw, const PreprocessConfig& cfg) {
    cfg.validate();
    raw.validate();
    RawSpectrum s = sqrt_stabilize(raw);
    s = savitzky_golay(s, cfg.half_window, cfg.sg_polyorder);
    auto [corrected, baseline] = snip_baseline(s, cfg.snip_iterations);
    s = noise_threshold(corrected, cfg.noise_k);
    s = trim(s, cfg.mz_min, cfg.mz_max);
    ProcessedSpectrum binned = bin_spectrum(s, cfg.mz_min, cfg.mz_max, cfg.bin_width);
    return normalize_max(std::move(binned));
}

RawSpectrum load_raw_spectrum(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open raw spectrum file: " + path);
    RawSpectrum raw;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream row(line);
        double mz = 0.0, inten = 0.0;
        if (!(row >> mz >> inten))
            throw DataError(path + ":" + std::to_string(lineno) + ": expected 'mz intensity'");
        raw.mz.push_back(mz);
        raw.intensity.push_back(inten);
    }
    raw.validate();
    return raw;
}

}  // namespace maldikit
