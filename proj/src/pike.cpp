#include "maldikit/pike.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace maldikit {

void KernelConfig::validate() const {
    if (!(t > 0.0)) throw DataError("kernel config: t must be positive");
    if (sparsity_epsilon < 0.0) throw DataError("kernel config: sparsity epsilon must be >= 0");
}

void SpectrumSet::append(const double* values, int dim_in) {
    if (n == 0) dim = dim_in;
    if (dim_in != dim) throw DataError("spectrum set: mixed dimensions");
    data.insert(data.end(), values, values + dim_in);
    n += 1;
}

SpectrumSet SpectrumSet::from_corpus(const LabeledCorpus& corpus) {
    SpectrumSet s;
    s.data = corpus.data;
    s.n = corpus.n;
    s.dim = corpus.dim;
    return s;
}

SpectrumSet SpectrumSet::from_class(const LabeledCorpus& corpus, int label) {
    SpectrumSet s;
    s.dim = corpus.dim;
    for (int i = 0; i < corpus.n; ++i)
        if (corpus.labels[size_t(i)] == label) s.append(corpus.row(i), corpus.dim);
    return s;
}

namespace {

constexpr double kTermFloor = 1e-18;  // gaussian tail cutoff for the band

double prefactor(double t) { return 1.0 / (2.0 * std::sqrt(2.0 * M_PI * t)); }

// gauss[d] = exp(-d^2 / (8t)) down to the term floor
std::vector<double> gauss_band(double t, int dim) {
    int band = int(std::ceil(std::sqrt(8.0 * t * -std::log(kTermFloor))));
    band = std::min(band, dim);
    std::vector<double> g(size_t(band) + 1, 0.0);
    for (int d = 0; d <= band; ++d) g[size_t(d)] = std::exp(-double(d) * double(d) / (8.0 * t));
    return g;
}

std::vector<int> nonzero_bins(const double* row, int dim, double eps) {
    std::vector<int> nz;
    for (int i = 0; i < dim; ++i)
        if (row[i] > eps) nz.push_back(i);
    return nz;
}

// smoothed[i] = sum_j row[j] * gauss[|i-j|]
void smooth_row(const double* row, const std::vector<int>& nz, const std::vector<double>& gauss,
                std::vector<double>& smoothed) {
    std::fill(smoothed.begin(), smoothed.end(), 0.0);
    int dim = int(smoothed.size());
    int band = int(gauss.size()) - 1;
    for (int j : nz) {
        double v = row[size_t(j)];
        int lo = std::max(0, j - band), hi = std::min(dim - 1, j + band);
        for (int i = lo; i <= hi; ++i) smoothed[size_t(i)] += v * gauss[size_t(std::abs(i - j))];
    }
}

double dot_nz(const double* row, const std::vector<int>& nz, const std::vector<double>& smoothed) {
    double acc = 0.0;
    for (int i : nz) acc += row[size_t(i)] * smoothed[size_t(i)];
    return acc;
}

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd out;
    if (xs.empty()) return out;
    for (double x : xs) out.mean += x;
    out.mean /= double(xs.size());
    double acc = 0.0;
    for (double x : xs) acc += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(acc / double(xs.size()));
    return out;
}

std::vector<double> gram_values(const GramMatrix& g) { return g.values; }

}  // namespace

double pike_kernel(const std::vector<double>& a, const std::vector<double>& b,
                   const KernelConfig& cfg) {
    cfg.validate();
    if (a.size() != b.size())
        throw DataError("pike_kernel: length mismatch " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
    int dim = int(a.size());
    auto gauss = gauss_band(cfg.t, dim);
    int band = int(gauss.size()) - 1;
    auto nza = nonzero_bins(a.data(), dim, cfg.sparsity_epsilon);
    auto nzb = nonzero_bins(b.data(), dim, cfg.sparsity_epsilon);

    // direct banded double sum; the gram path uses a factored form, so the
    // two stay independently checkable
    auto raw = [&](const std::vector<double>& u, const std::vector<int>& nzu,
                   const std::vector<double>& v, const std::vector<int>& nzv) {
        double acc = 0.0;
        for (int i : nzu) {
            for (int j : nzv) {
                int d = std::abs(i - j);
                if (d > band) continue;
                acc += u[size_t(i)] * v[size_t(j)] * gauss[size_t(d)];
            }
        }
        return prefactor(cfg.t) * acc;
    };

    if (!cfg.normalized) return raw(a, nza, b, nzb);
    bool ea = nza.empty(), eb = nzb.empty();
    if (ea || eb) return (ea && eb) ? 1.0 : 0.0;
    double kab = raw(a, nza, b, nzb);
    double kaa = raw(a, nza, a, nza);
    double kbb = raw(b, nzb, b, nzb);
    return kab / std::sqrt(kaa * kbb);
}

GramMatrix pike_gram(const SpectrumSet& x, const SpectrumSet& y, const KernelConfig& cfg,
                     int threads) {
    cfg.validate();
    if (x.dim != y.dim)
        throw DataError("pike_gram: dimension mismatch " + std::to_string(x.dim) + " vs " +
                        std::to_string(y.dim));
    int dim = x.dim;
    bool same = &x == &y;
    auto gauss = gauss_band(cfg.t, dim);
    double pref = prefactor(cfg.t);

    std::vector<std::vector<int>> nzx(size_t(x.n)), nzy;
    for (int i = 0; i < x.n; ++i) nzx[size_t(i)] = nonzero_bins(x.row(i), dim, cfg.sparsity_epsilon);
    const std::vector<std::vector<int>>* nzy_p = &nzx;
    if (!same) {
        nzy.resize(size_t(y.n));
        for (int i = 0; i < y.n; ++i)
            nzy[size_t(i)] = nonzero_bins(y.row(i), dim, cfg.sparsity_epsilon);
        nzy_p = &nzy;
    }

    // K(a,b) = pref * a . (G b): smooth each right-hand spectrum once, then
    // every pair is a sparse dot product
    std::vector<std::vector<double>> smoothed(size_t(y.n));
    std::vector<double> self_y(size_t(y.n), 0.0);
    parallel_for(y.n, threads, [&](int64_t m) {
        smoothed[size_t(m)].assign(size_t(dim), 0.0);
        smooth_row(y.row(int(m)), (*nzy_p)[size_t(m)], gauss, smoothed[size_t(m)]);
        self_y[size_t(m)] = pref * dot_nz(y.row(int(m)), (*nzy_p)[size_t(m)], smoothed[size_t(m)]);
    });

    std::vector<double> self_x;
    if (same) {
        self_x = self_y;
    } else {
        self_x.assign(size_t(x.n), 0.0);
        parallel_for(x.n, threads, [&](int64_t i) {
            std::vector<double> buf(size_t(dim), 0.0);
            smooth_row(x.row(int(i)), nzx[size_t(i)], gauss, buf);
            self_x[size_t(i)] = pref * dot_nz(x.row(int(i)), nzx[size_t(i)], buf);
        });
    }

    GramMatrix gram;
    gram.rows = x.n;
    gram.cols = y.n;
    gram.values.assign(size_t(x.n) * size_t(y.n), 0.0);
    parallel_for(x.n, threads, [&](int64_t i) {
        const auto& nzi = nzx[size_t(i)];
        double* out = &gram.values[size_t(i) * size_t(y.n)];
        int m0 = same ? int(i) : 0;  // symmetric case fills the upper triangle
        for (int m = m0; m < y.n; ++m) {
            double raw = pref * dot_nz(x.row(int(i)), nzi, smoothed[size_t(m)]);
            if (cfg.normalized) {
                bool ei = nzi.empty(), em = (*nzy_p)[size_t(m)].empty();
                if (ei || em)
                    out[m] = (ei && em) ? 1.0 : 0.0;
                else
                    out[m] = raw / std::sqrt(self_x[size_t(i)] * self_y[size_t(m)]);
            } else {
                out[m] = raw;
            }
        }
    });
    if (same) {
        for (int i = 0; i < x.n; ++i)
            for (int m = 0; m < i; ++m)
                gram.values[size_t(i) * size_t(y.n) + size_t(m)] =
                    gram.values[size_t(m) * size_t(y.n) + size_t(i)];
    }
    return gram;
}

double mmd2(const SpectrumSet& x, const SpectrumSet& x_gen, const KernelConfig& cfg, int threads) {
    if (x.n < 2 || x_gen.n < 2)
        throw DataError("mmd2: both sets need at least 2 spectra (got " + std::to_string(x.n) +
                        " and " + std::to_string(x_gen.n) + ")");
    auto kxx = pike_gram(x, x, cfg, threads);
    auto kyy = pike_gram(x_gen, x_gen, cfg, threads);
    auto kxy = pike_gram(x, x_gen, cfg, threads);

    double sxx = 0.0;
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.n; ++j)
            if (i != j) sxx += kxx.at(i, j);
    double syy = 0.0;
    for (int i = 0; i < x_gen.n; ++i)
        for (int j = 0; j < x_gen.n; ++j)
            if (i != j) syy += kyy.at(i, j);
    double sxy = 0.0;
    for (double v : gram_values(kxy)) sxy += v;

    double n = double(x.n), m = double(x_gen.n);
    return sxx / (n * (n - 1.0)) + syy / (m * (m - 1.0)) - 2.0 * sxy / (n * m);
}

MeanStd class_distance(const SpectrumSet& x_gen, const KernelConfig& cfg, int threads) {
    if (!cfg.normalized)
        throw DataError("class_distance: requires the normalized kernel (dissimilarity = 1 - K)");
    if (x_gen.n < 2) throw DataError("class_distance: need at least 2 spectra");
    auto k = pike_gram(x_gen, x_gen, cfg, threads);
    std::vector<double> dists;
    dists.reserve(size_t(x_gen.n) * size_t(x_gen.n - 1) / 2);
    for (int i = 0; i < x_gen.n; ++i)
        for (int j = i + 1; j < x_gen.n; ++j) dists.push_back(1.0 - k.at(i, j));
    return mean_std(dists);
}

NeighbourDistance neighbour_distance(const SpectrumSet& x_gen, const SpectrumSet& x_train,
                                     const KernelConfig& cfg, bool exclude_self, int threads) {
    if (!cfg.normalized) throw DataError("neighbour_distance: requires the normalized kernel");
    if (x_gen.n == 0 || x_train.n == 0) throw DataError("neighbour_distance: empty set");
    if (exclude_self && x_train.n < 2)
        throw DataError("neighbour_distance: exclude_self needs at least 2 training spectra");
    auto k = pike_gram(x_gen, x_train, cfg, threads);
    NeighbourDistance out;
    std::vector<double> dists;
    dists.reserve(size_t(x_gen.n));
    for (int m = 0; m < x_gen.n; ++m) {
        double best = -1.0;
        int best_n = -1;
        for (int n = 0; n < x_train.n; ++n) {
            if (exclude_self && n == m) continue;
            double v = k.at(m, n);
            if (v > best) {
                best = v;
                best_n = n;
            }
        }
        dists.push_back(1.0 - best);
        out.nearest.push_back(best_n);
    }
    out.stats = mean_std(dists);
    return out;
}

MeanStd pike_all(const SpectrumSet& x_gen, const SpectrumSet& x_real, const KernelConfig& cfg,
                 int threads) {
    if (x_gen.n == 0 || x_real.n == 0) throw DataError("pike_all: empty set");
    auto k = pike_gram(x_gen, x_real, cfg, threads);
    return mean_std(gram_values(k));
}

MetricReport metric_report(const LabeledCorpus& real, const LabeledCorpus& generated,
                           const KernelConfig& cfg, int threads) {
    if (real.vocab != generated.vocab)
        throw DataError("metric_report: vocabularies differ between real and generated corpora");
    if (real.dim != generated.dim) throw DataError("metric_report: bin counts differ");

    auto real_counts = real.class_counts();
    auto gen_counts = generated.class_counts();

    MetricReport report;
    for (size_t c = 0; c < real.vocab.size(); ++c) {
        if (gen_counts[c] == 0) continue;
        if (real_counts[c] == 0)
            throw DataError("metric_report: class '" + real.vocab[c] +
                            "' present in generated corpus but absent in real corpus");
        auto xr = SpectrumSet::from_class(real, int(c));
        auto xg = SpectrumSet::from_class(generated, int(c));
        MetricRow row;
        row.klass = real.vocab[c];
        auto pa = pike_all(xg, xr, cfg, threads);
        row.pike_all_mean = pa.mean;
        row.pike_all_std = pa.std;
        row.mmd2 = mmd2(xr, xg, cfg, threads);
        auto cd = class_distance(xg, cfg, threads);
        row.cd_mean = cd.mean;
        row.cd_std = cd.std;
        auto nd = neighbour_distance(xg, xr, cfg, false, threads);
        row.nd_mean = nd.stats.mean;
        row.nd_std = nd.stats.std;
        report.per_class.push_back(row);
    }
    if (report.per_class.empty()) throw DataError("metric_report: generated corpus is empty");

    // aggregate row: mean and across-class std of the per-class means
    auto collect = [&](auto getter) {
        std::vector<double> xs;
        for (const auto& r : report.per_class) xs.push_back(getter(r));
        return mean_std(xs);
    };
    auto pa = collect([](const MetricRow& r) { return r.pike_all_mean; });
    auto md = collect([](const MetricRow& r) { return r.mmd2; });
    auto cd = collect([](const MetricRow& r) { return r.cd_mean; });
    auto nd = collect([](const MetricRow& r) { return r.nd_mean; });
    report.aggregate.klass = "__mean__";
    report.aggregate.pike_all_mean = pa.mean;
    report.aggregate.pike_all_std = pa.std;
    report.aggregate.mmd2 = md.mean;
    report.aggregate.cd_mean = cd.mean;
    report.aggregate.cd_std = cd.std;
    report.aggregate.nd_mean = nd.mean;
    report.aggregate.nd_std = nd.std;
    return report;
}

void save_metric_report_csv(const MetricReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << "class,pike_all_mean,pike_all_std,mmd2,cd_mean,cd_std,nd_mean,nd_std\n";
    auto write_row = [&](const MetricRow& r) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.klass.c_str(),
                      r.pike_all_mean, r.pike_all_std, r.mmd2, r.cd_mean, r.cd_std, r.nd_mean,
                      r.nd_std);
        out << buf;
    };
    for (const auto& r : report.per_class) write_row(r);
    write_row(report.aggregate);
    if (!out) throw DataError("write failed: " + path);
}

}  // namespace maldikit
