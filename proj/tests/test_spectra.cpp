#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "maldikit/common.hpp"
#include "maldikit/spectra.hpp"

using namespace maldikit;

namespace {

RawSpectrum make_raw(std::vector<double> intensity, double mz0 = 1000.0, double step = 1.0) {
    RawSpectrum raw;
    for (size_t i = 0; i < intensity.size(); ++i) raw.mz.push_back(mz0 + double(i) * step);
    raw.intensity = std::move(intensity);
    return raw;
}

// oracle for the smoother: assemble and solve the per-window normal
// equations against the actual window data, then evaluate the fit at the
// center offset
double lsq_fit_at_center(const std::vector<double>& y, int center, int w, int order) {
    int terms = order + 1;
    std::vector<std::vector<double>> ata(size_t(terms), std::vector<double>(size_t(terms), 0.0));
    std::vector<double> aty(size_t(terms), 0.0);
    for (int j = -w; j <= w; ++j) {
        double powj = 1.0;
        std::vector<double> row(size_t(terms), 0.0);
        for (int a = 0; a < terms; ++a) {
            row[size_t(a)] = powj;
            powj *= double(j);
        }
        for (int a = 0; a < terms; ++a) {
            for (int b = 0; b < terms; ++b) ata[size_t(a)][size_t(b)] += row[size_t(a)] * row[size_t(b)];
            aty[size_t(a)] += row[size_t(a)] * y[size_t(center + j)];
        }
    }
    // plain Gaussian elimination, no pivoting (the normal matrix here is
    // small and well conditioned)
    for (int col = 0; col < terms; ++col) {
        for (int r = col + 1; r < terms; ++r) {
            double f = ata[size_t(r)][size_t(col)] / ata[size_t(col)][size_t(col)];
            for (int k = col; k < terms; ++k) ata[size_t(r)][size_t(k)] -= f * ata[size_t(col)][size_t(k)];
            aty[size_t(r)] -= f * aty[size_t(col)];
        }
    }
    for (int col = terms - 1; col >= 0; --col) {
        for (int k = col + 1; k < terms; ++k) aty[size_t(col)] -= ata[size_t(col)][size_t(k)] * aty[size_t(k)];
        aty[size_t(col)] /= ata[size_t(col)][size_t(col)];
    }
    return aty[0];  // value at offset 0
}

}  // namespace

TEST_CASE("sqrt_stabilize on exact squares") {
    auto out = sqrt_stabilize(make_raw({0, 1, 4, 9}));
    CHECK(out.intensity == std::vector<double>{0, 1, 2, 3});
}

TEST_CASE("sqrt_stabilize fixes all-zero spectra") {
    auto out = sqrt_stabilize(make_raw({0, 0, 0}));
    for (double v : out.intensity) CHECK(v == 0.0);
}

TEST_CASE("sqrt_stabilize closed form") {
    auto out = sqrt_stabilize(make_raw({2.0}));
    CHECK(out.intensity[0] == doctest::Approx(1.41421356237).epsilon(1e-9));
}

TEST_CASE("sqrt_stabilize rejects negative intensities") {
    RawSpectrum raw;
    raw.mz = {1.0, 2.0};
    raw.intensity = {1.0, -0.5};
    CHECK_THROWS_AS(sqrt_stabilize(raw), DataError);
}

TEST_CASE("savitzky_golay reproduces constants everywhere") {
    auto out = savitzky_golay(make_raw(std::vector<double>(41, 3.25)), 10, 3);
    for (double v : out.intensity) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("savitzky_golay reproduces low-degree polynomials") {
    std::vector<double> y(61);
    for (size_t i = 0; i < y.size(); ++i) {
        double x = double(i) - 30.0;
        y[i] = 0.01 * x * x + 100.0;
    }
    auto out = savitzky_golay(make_raw(y), 10, 3);
    for (size_t i = 0; i < y.size(); ++i)
        CHECK(std::abs(out.intensity[i] - y[i]) < 1e-9);
}

TEST_CASE("savitzky_golay matches a direct per-window least-squares oracle") {
    RngStream rng(2024);
    std::vector<double> y(80, 0.0);
    for (auto& v : y) v = 5.0 + rng.normal();
    y[40] += 30.0;  // spike in noise
    int hw = 6, order = 3;
    auto out = savitzky_golay(make_raw(y), hw, order);
    for (int i = hw; i < int(y.size()) - hw; ++i) {
        double expect = lsq_fit_at_center(y, i, hw, order);
        CHECK(out.intensity[size_t(i)] == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("savitzky_golay rejects too-short spectra") {
    CHECK_THROWS_AS(savitzky_golay(make_raw({1, 2, 3}), 10, 3), DataError);
}

TEST_CASE("snip_baseline is a fixed point on flat signals") {
    auto [corrected, baseline] = snip_baseline(make_raw(std::vector<double>(50, 2.5)), 20);
    for (double v : baseline.intensity) CHECK(v == doctest::Approx(2.5));
    for (double v : corrected.intensity) CHECK(v == 0.0);
}

TEST_CASE("snip_baseline keeps an isolated unit spike") {
    std::vector<double> y(41, 0.0);
    y[20] = 1.0;
    auto [corrected, baseline] = snip_baseline(make_raw(y), 20);
    CHECK(corrected.intensity[20] == doctest::Approx(1.0));
    for (size_t i = 0; i < y.size(); ++i) {
        if (i != 20) CHECK(baseline.intensity[i] == 0.0);
    }
}

TEST_CASE("snip_baseline recovers a narrow peak on a linear ramp") {
    int n = 200;
    std::vector<double> y(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) y[size_t(i)] = 0.05 * double(i);
    double injected = 8.0;
    y[100] += injected;
    auto [corrected, baseline] = snip_baseline(make_raw(y), 20);
    CHECK(std::abs(corrected.intensity[100] - injected) / injected < 0.05);

    // oracle: independent simulation of the clipping recursion
    std::vector<double> b = y, nb = y;
    for (int it = 1; it <= 20; ++it) {
        for (int i = 0; i < n; ++i) {
            int lo = std::max(0, i - it), hi = std::min(n - 1, i + it);
            nb[size_t(i)] = std::min(b[size_t(i)], 0.5 * (b[size_t(lo)] + b[size_t(hi)]));
        }
        b.swap(nb);
    }
    for (int i = 0; i < n; ++i)
        CHECK(baseline.intensity[size_t(i)] == doctest::Approx(b[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("snip_baseline invariants: corrected >= 0 and baseline <= input") {
    RngStream rng(5);
    std::vector<double> y(120);
    for (auto& v : y) v = std::abs(rng.normal()) * 3.0;
    auto [corrected, baseline] = snip_baseline(make_raw(y), 20);
    for (size_t i = 0; i < y.size(); ++i) {
        CHECK(corrected.intensity[i] >= 0.0);
        CHECK(baseline.intensity[i] <= y[i] + 1e-12);
    }
}

TEST_CASE("noise_threshold leaves all-zero spectra unchanged") {
    auto out = noise_threshold(make_raw({0, 0, 0, 0}), 2.0);
    for (double v : out.intensity) CHECK(v == 0.0);
}

TEST_CASE("noise_threshold with degenerate MAD keeps everything") {
    auto out = noise_threshold(make_raw({0, 0, 0, 0, 10}), 2.0);
    CHECK(out.intensity == std::vector<double>{0, 0, 0, 0, 10});
}

TEST_CASE("noise_threshold zeros noise and keeps tall peaks") {
    RngStream rng(77);
    std::vector<double> y(300);
    for (auto& v : y) v = std::abs(rng.normal());
    y[50] = 40.0;
    y[200] = 55.0;
    double tau = 2.0 * median_absolute_deviation(y) / 0.6745;
    auto out = noise_threshold(make_raw(y), 2.0);
    for (size_t i = 0; i < y.size(); ++i) {
        if (y[i] < tau) CHECK(out.intensity[i] == 0.0);
        else CHECK(out.intensity[i] == y[i]);
    }
    CHECK(out.intensity[50] == 40.0);
    CHECK(out.intensity[200] == 55.0);
}

TEST_CASE("trim keeps the half-open informative range") {
    RawSpectrum raw;
    raw.mz = {1500.0, 5000.0, 20000.0, 20500.0};
    raw.intensity = {1, 2, 3, 4};
    auto out = trim(raw, 2000.0, 20000.0);
    REQUIRE(out.size() == 1);
    CHECK(out.mz[0] == 5000.0);

    auto inside = trim(raw, 1000.0, 30000.0);
    CHECK(inside.size() == raw.size());
}

TEST_CASE("bin_spectrum bin count and placement") {
    RawSpectrum raw;
    raw.mz = {2001.0};
    raw.intensity = {1.0};
    auto out = bin_spectrum(raw, 2000.0, 20000.0, 3.0);
    CHECK(out.bins.size() == 6000);
    CHECK(out.bins[0] == 1.0);
}

TEST_CASE("bin_spectrum sums peaks landing in one bin") {
    RawSpectrum raw;
    raw.mz = {2000.5, 2001.5};
    raw.intensity = {1.0, 2.0};
    auto out = bin_spectrum(raw, 2000.0, 20000.0, 3.0);
    CHECK(out.bins[0] == 3.0);
}

TEST_CASE("normalize_max scales to unit maximum") {
    ProcessedSpectrum s;
    s.bins = {0.0, 2.0, 4.0};
    auto out = normalize_max(s);
    CHECK(out.bins == std::vector<double>{0.0, 0.5, 1.0});
    CHECK_FALSE(out.all_zero);
}

TEST_CASE("normalize_max flags all-zero spectra") {
    ProcessedSpectrum s;
    s.bins = {0.0, 0.0, 0.0};
    auto out = normalize_max(s);
    CHECK(out.bins == std::vector<double>{0.0, 0.0, 0.0});
    CHECK(out.all_zero);
}

TEST_CASE("normalize_max postcondition on random non-negative input") {
    RngStream rng(3);
    ProcessedSpectrum s;
    for (int i = 0; i < 64; ++i) s.bins.push_back(rng.uniform() * 7.0);
    auto out = normalize_max(s);
    double mx = 0.0;
    for (double v : out.bins) {
        CHECK(v >= 0.0);
        mx = std::max(mx, v);
    }
    CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("preprocess: synthetic three-peak spectrum matches the stepwise oracle") {
    // raw spectrum sampled at 1 Da from 1900 to 20100 with three tall peaks
    RawSpectrum raw;
    RngStream rng(11);
    std::vector<double> peak_mz = {4000.0, 9500.0, 15000.0};
    for (double mz = 1900.0; mz <= 20100.0; mz += 1.0) {
        double v = 20.0 + 4.0 * std::abs(rng.normal());
        for (double p : peak_mz) {
            double d = mz - p;
            v += 50000.0 * std::exp(-d * d / 18.0);
        }
        raw.mz.push_back(mz);
        raw.intensity.push_back(v);
    }
    PreprocessConfig cfg;
    auto got = preprocess(raw, cfg);
    REQUIRE(got.bins.size() == 6000);
    CHECK_FALSE(got.all_zero);

    // oracle: run the published steps one by one
    RawSpectrum s = sqrt_stabilize(raw);
    s = savitzky_golay(s, cfg.half_window, cfg.sg_polyorder);
    s = snip_baseline(s, cfg.snip_iterations).first;
    s = noise_threshold(s, cfg.noise_k);
    s = trim(s, cfg.mz_min, cfg.mz_max);
    auto expect = normalize_max(bin_spectrum(s, cfg.mz_min, cfg.mz_max, cfg.bin_width));
    REQUIRE(expect.bins.size() == got.bins.size());
    for (size_t i = 0; i < got.bins.size(); ++i) CHECK(got.bins[i] == expect.bins[i]);

    // three dominant bins at the injected peak positions, max exactly 1
    double mx = 0.0;
    for (double v : got.bins) mx = std::max(mx, v);
    CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
    for (double p : peak_mz) {
        int j = int((p - cfg.mz_min) / cfg.bin_width);
        double local = 0.0;
        for (int k = -1; k <= 1; ++k) local = std::max(local, got.bins[size_t(j + k)]);
        CHECK(local > 0.5);
    }
}

TEST_CASE("preprocess flags all-zero input") {
    RawSpectrum raw;
    for (double mz = 1900.0; mz <= 20100.0; mz += 5.0) {
        raw.mz.push_back(mz);
        raw.intensity.push_back(0.0);
    }
    auto got = preprocess(raw, PreprocessConfig{});
    CHECK(got.all_zero);
    for (double v : got.bins) CHECK(v == 0.0);
}

TEST_CASE("preprocess is deterministic") {
    RawSpectrum raw;
    RngStream rng(4);
    for (double mz = 1900.0; mz <= 20100.0; mz += 2.0) {
        raw.mz.push_back(mz);
        raw.intensity.push_back(std::abs(rng.normal()) + (mz > 8000 && mz < 8010 ? 500.0 : 0.0));
    }
    auto a = preprocess(raw, PreprocessConfig{});
    auto b = preprocess(raw, PreprocessConfig{});
    CHECK(a.bins == b.bins);
}

TEST_CASE("load_raw_spectrum parses pairs and skips comments") {
    std::string path = "test_spectrum_tmp.txt";
    {
        std::ofstream out(path);
        out << "# comment line\n2000.5 10.0\n2001.5 20.0\n\n2003.0 5\n";
    }
    auto raw = load_raw_spectrum(path);
    REQUIRE(raw.size() == 3);
    CHECK(raw.mz[1] == 2001.5);
    CHECK(raw.intensity[2] == 5.0);
    std::remove(path.c_str());
}

TEST_CASE("load_raw_spectrum reports the offending line") {
    std::string path = "test_spectrum_bad_tmp.txt";
    {
        std::ofstream out(path);
        out << "2000.5 10.0\nnot numbers\n";
    }
    CHECK_THROWS_WITH_AS(load_raw_spectrum(path),
                         doctest::Contains(":2:"), DataError);
    std::remove(path.c_str());
}
