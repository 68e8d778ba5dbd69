#include "maldikit/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace maldikit {

void LabeledCorpus::append_row(const double* values, int label) {
    data.insert(data.end(), values, values + dim);
    labels.push_back(label);
    n += 1;
}

std::vector<int> LabeledCorpus::class_counts() const {
    std::vector<int> counts(vocab.size(), 0);
    for (int l : labels) counts[size_t(l)] += 1;
    return counts;
}

std::vector<std::vector<int>> LabeledCorpus::class_indices() const {
    std::vector<std::vector<int>> idx(vocab.size());
    for (int i = 0; i < n; ++i) idx[size_t(labels[size_t(i)])].push_back(i);
    return idx;
}

int LabeledCorpus::label_of(const std::string& name) const {
    for (size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i] == name) return int(i);
    return -1;
}

void LabeledCorpus::validate() const {
    if (int(labels.size()) != n || int64_t(data.size()) != int64_t(n) * dim)
        throw DataError("corpus: inconsistent sizes");
    for (int l : labels)
        if (l < 0 || l >= int(vocab.size()))
            throw DataError("corpus: label index " + std::to_string(l) + " outside vocabulary");
    for (size_t i = 0; i < data.size(); ++i)
        if (!(data[i] >= 0.0 && data[i] <= 1.0))
            throw DataError("corpus: value " + std::to_string(data[i]) + " outside [0,1] at row " +
                            std::to_string(i / size_t(dim)));
}

void ToyCorpusSpec::validate() const {
    if (num_classes < 1) throw DataError("toy spec: num_classes must be >= 1");
    if (bins < 10) throw DataError("toy spec: bins must be >= 10");
    if (peaks_per_class < 1) throw DataError("toy spec: peaks_per_class must be >= 1");
    if (position_jitter < 0 || intensity_jitter < 0 || noise_level < 0)
        throw DataError("toy spec: jitters must be non-negative");
    if (per_class.empty()) throw DataError("toy spec: per_class must not be empty");
    if (per_class.size() != 1 && int(per_class.size()) != num_classes)
        throw DataError("toy spec: per_class must have one entry or one per class");
    if (!class_names.empty() && int(class_names.size()) != num_classes)
        throw DataError("toy spec: class_names must match num_classes");
}

int ToyCorpusSpec::count_for(int cls) const {
    return per_class.size() == 1 ? per_class[0] : per_class[size_t(cls)];
}

namespace {

void write_float(std::string& out, double v) {
    char buf[32];
    int len = std::snprintf(buf, sizeof buf, "%.9g", v);
    out.append(buf, size_t(len));
}

}  // namespace

void save_corpus_csv(const LabeledCorpus& corpus, const std::string& path) {
    corpus.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    std::string line = "label";
    for (int j = 0; j < corpus.dim; ++j) line += ",bin_" + std::to_string(j);
    line += "\n";
    out << line;
    for (int i = 0; i < corpus.n; ++i) {
        line = corpus.vocab[size_t(corpus.labels[size_t(i)])];
        const double* r = corpus.row(i);
        for (int j = 0; j < corpus.dim; ++j) {
            line += ',';
            write_float(line, r[j]);
        }
        line += '\n';
        out << line;
    }
    if (!out) throw DataError("write failed: " + path);
}

LabeledCorpus load_corpus_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    // header fixes the dimensionality
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.empty() || header[0] != "label")
        throw DataError(path + ":1: header must start with 'label'");
    int dim = int(header.size()) - 1;
    for (int j = 0; j < dim; ++j)
        if (header[size_t(j) + 1] != "bin_" + std::to_string(j))
            throw DataError(path + ":1: unexpected header column '" + header[size_t(j) + 1] + "'");

    LabeledCorpus corpus;
    corpus.dim = dim;
    int lineno = 1;
    std::vector<double> row(size_t(dim), 0.0);
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t pos = line.find(',');
        if (pos == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": missing value columns");
        std::string name = line.substr(0, pos);
        int filled = 0;
        size_t start = pos + 1;
        while (start <= line.size()) {
            size_t end = line.find(',', start);
            if (end == std::string::npos) end = line.size();
            if (filled >= dim)
                throw DataError(path + ":" + std::to_string(lineno) + ": too many columns");
            double v = 0.0;
            auto rc = std::from_chars(line.data() + start, line.data() + end, v);
            if (rc.ec != std::errc() || rc.ptr != line.data() + end)
                throw DataError(path + ":" + std::to_string(lineno) + ": bad number '" +
                                line.substr(start, end - start) + "'");
            if (!(v >= 0.0 && v <= 1.0))
                throw DataError(path + ":" + std::to_string(lineno) + ": value " +
                                std::to_string(v) + " outside [0,1]");
            row[size_t(filled++)] = v;
            start = end + 1;
        }
        if (filled != dim)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(dim) + " values, got " + std::to_string(filled));
        int label = corpus.label_of(name);
        if (label < 0) {
            label = int(corpus.vocab.size());
            corpus.vocab.push_back(name);  // first-appearance order
        }
        corpus.append_row(row.data(), label);
    }
    return corpus;
}

LabeledCorpus make_toy_corpus(const ToyCorpusSpec& spec) {
    spec.validate();
    RngStream root(spec.seed, "toy-corpus");

    LabeledCorpus corpus;
    corpus.dim = spec.bins;
    for (int c = 0; c < spec.num_classes; ++c) {
        if (!spec.class_names.empty()) {
            corpus.vocab.push_back(spec.class_names[size_t(c)]);
        } else {
            char buf[16];
            std::snprintf(buf, sizeof buf, "class_%02d", c);
            corpus.vocab.push_back(buf);
        }
    }

    std::vector<double> row(size_t(spec.bins), 0.0);
    for (int c = 0; c < spec.num_classes; ++c) {
        RngStream tmpl_rng = root.derive("template").derive(uint64_t(c));
        // fixed class template: distinct positions, intensities in [0.3, 1]
        std::vector<int> positions;
        while (int(positions.size()) < spec.peaks_per_class) {
            int p = int(tmpl_rng.uniform_int(spec.bins));
            if (std::find(positions.begin(), positions.end(), p) == positions.end())
                positions.push_back(p);
        }
        std::vector<double> amplitudes;
        for (int p = 0; p < spec.peaks_per_class; ++p)
            amplitudes.push_back(0.3 + 0.7 * tmpl_rng.uniform());

        RngStream sample_rng = root.derive("samples").derive(uint64_t(c));
        for (int s = 0; s < spec.count_for(c); ++s) {
            std::fill(row.begin(), row.end(), 0.0);
            for (double& v : row) v = spec.noise_level * sample_rng.uniform();
            for (int p = 0; p < spec.peaks_per_class; ++p) {
                int pos = positions[size_t(p)] +
                          int(std::lround(spec.position_jitter * sample_rng.normal()));
                pos = std::clamp(pos, 0, spec.bins - 1);
                double amp = amplitudes[size_t(p)] *
                             (1.0 + spec.intensity_jitter * sample_rng.normal());
                row[size_t(pos)] += std::max(amp, 0.0);
            }
            double mx = 0.0;
            for (double v : row) mx = std::max(mx, v);
            if (mx > 0.0)
                for (double& v : row) v /= mx;
            corpus.append_row(row.data(), c);
        }
    }
    return corpus;
}

LabeledCorpus stratified_subset(const LabeledCorpus& corpus,
                                const std::map<std::string, int>& per_class_counts,
                                uint64_t seed) {
    corpus.validate();
    auto by_class = corpus.class_indices();
    RngStream root(seed, "stratified-subset");

    LabeledCorpus out;
    out.dim = corpus.dim;
    out.vocab = corpus.vocab;
    out.mz_min = corpus.mz_min;
    out.bin_width = corpus.bin_width;
    for (const auto& [name, want] : per_class_counts) {
        int label = corpus.label_of(name);
        if (label < 0) throw DataError("stratified_subset: unknown class '" + name + "'");
        auto& pool = by_class[size_t(label)];
        if (want > int(pool.size()))
            throw DataError("stratified_subset: class '" + name + "' has " +
                            std::to_string(pool.size()) + " samples, requested " +
                            std::to_string(want));
        RngStream rng = root.derive(name);
        std::vector<int> shuffled = pool;
        rng.shuffle(shuffled);
        for (int k = 0; k < want; ++k) out.append_row(corpus.row(shuffled[size_t(k)]), label);
    }
    return out;
}

std::vector<LabeledCorpus> stratified_split(const LabeledCorpus& corpus,
                                            const std::vector<double>& fractions, uint64_t seed) {
    corpus.validate();
    auto by_class = corpus.class_indices();
    RngStream root(seed, "stratified-split");

    std::vector<LabeledCorpus> parts(fractions.size());
    for (auto& p : parts) {
        p.dim = corpus.dim;
        p.vocab = corpus.vocab;
        p.mz_min = corpus.mz_min;
        p.bin_width = corpus.bin_width;
    }
    for (size_t c = 0; c < by_class.size(); ++c) {
        std::vector<int> pool = by_class[c];
        RngStream rng = root.derive(uint64_t(c));
        rng.shuffle(pool);
        size_t start = 0;
        for (size_t f = 0; f < fractions.size(); ++f) {
            size_t take = f + 1 == fractions.size()
                              ? pool.size() - start
                              : size_t(std::floor(fractions[f] * double(pool.size())));
            take = std::min(take, pool.size() - start);
            for (size_t k = 0; k < take; ++k)
                parts[f].append_row(corpus.row(pool[start + k]), int(c));
            start += take;
        }
    }
    return parts;
}

}  // namespace maldikit
