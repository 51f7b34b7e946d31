#pragma once

#include <string>
#include <vector>

#include "levelblend/dataset.hpp"
#include "levelblend/rng.hpp"
#include "levelblend/tensor.hpp"

namespace testutil {

inline std::string data_dir() { return std::string(LVB_SOURCE_DIR) + "/data/fixtures"; }

inline std::vector<std::string> legend_paths() {
    return {data_dir() + "/legends/skyreach.legend", data_dir() + "/legends/caverns.legend"};
}

// Full fixture corpus, stub-annotated; built once per test binary.
inline const lvb::Dataset& fixture_dataset() {
    static const lvb::Dataset ds = [] {
        lvb::Dataset d = lvb::ingest_corpus(data_dir() + "/levels", legend_paths(), "", 0.2, 7);
        lvb::annotate_dataset(d);
        return d;
    }();
    return ds;
}

// Stratified subsample for fast training tests.
inline lvb::Dataset small_dataset(int stride = 5) {
    const lvb::Dataset& full = fixture_dataset();
    lvb::Dataset out;
    out.vocab = full.vocab;
    int kept_train = 0, kept_test = 0;
    for (std::size_t i = 0; i < full.samples.size(); i += static_cast<std::size_t>(stride)) {
        out.samples.push_back(full.samples[i]);
        (full.samples[i].split == lvb::Split::train ? kept_train : kept_test)++;
    }
    (void)kept_train;
    (void)kept_test;
    return out;
}

inline lvb::num::Tensor random_tensor(lvb::num::Shape shape, lvb::Rng& rng, bool requires_grad = true,
                                      float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(lvb::num::shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return lvb::num::Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for ops with a kink or a pole there.
inline lvb::num::Tensor random_tensor_away_from_zero(lvb::num::Shape shape, lvb::Rng& rng,
                                                     float min_abs = 0.1f) {
    std::vector<float> v(lvb::num::shape_numel(shape));
    for (auto& x : v) {
        float m = rng.uniform(min_abs, 1.0f);
        x = rng.index(2) ? m : -m;
    }
    return lvb::num::Tensor::leaf(std::move(shape), std::move(v), true);
}

} // namespace testutil
