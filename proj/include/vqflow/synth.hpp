// synth.hpp - deterministic multi-class synthetic feature generation and
// anomaly injection. Every sample is a pure function of (spec, seed).
#pragma once

#include "vqflow/types.hpp"

namespace vqflow {

struct SynthSpec {
    int classes = 4;
    std::uint64_t class_seed_base = 0;  // per-class pattern streams fork from here
    int scales = 3;
    std::vector<int> channels = {16, 32, 64};
    std::vector<int> spatial = {32, 16, 8};
    int train_count = 200;
    int test_count = 100;  // half anomalous
    float noise_sigma = 0.05f;
    float signature_scale = 0.7f;   // class-specific channel bias
    float pattern_amp = 1.0f;       // class-specific spatial layout components
    float intensity_jitter = 0.15f; // per-sample global gain spread
    int patch_min = 6;              // anomaly patch side, finest scale
    int patch_max = 10;
    float anomaly_magnitude = 0.7f;
    // direction of the patch perturbation: 1 = along the local appearance
    // (an intensity-like defect), 0 = a random direction
    float anomaly_template_blend = 1.0f;

    void validate() const {
        if (classes < 2)
            throw ContractError("multi-class generation requires classes >= 2, got " +
                                std::to_string(classes));
        if (scales < 1 || static_cast<int>(channels.size()) != scales ||
            static_cast<int>(spatial.size()) != scales)
            throw ConfigError("synth spec: channels/spatial lists must match scales");
        for (int i = 0; i + 1 < scales; ++i)
            if (spatial[static_cast<std::size_t>(i) + 1] * 2 != spatial[static_cast<std::size_t>(i)])
                throw ConfigError("synth spec: spatial dims must halve per scale, got " +
                                  std::to_string(spatial[static_cast<std::size_t>(i)]) + " -> " +
                                  std::to_string(spatial[static_cast<std::size_t>(i) + 1]));
        if (patch_min < 1 || patch_max < patch_min)
            throw ConfigError("synth spec: invalid patch size range");
        if (train_count < 1 || test_count < 2)
            throw ConfigError("synth spec: need at least 1 train and 2 test samples");
    }
};

namespace detail {

// Smooth class template: a class-specific channel signature plus a few
// low-frequency sinusoidal fields with class-specific directions.
inline Tensor class_template(const SynthSpec& spec, int class_id, int scale, std::uint64_t seed) {
    const int h = spec.spatial[static_cast<std::size_t>(scale)];
    const int w = spec.spatial[static_cast<std::size_t>(scale)];
    const int d = spec.channels[static_cast<std::size_t>(scale)];
    Rng rng = Rng(seed).fork(spec.class_seed_base + 7919ULL * static_cast<std::uint64_t>(class_id) +
                             static_cast<std::uint64_t>(scale));

    std::vector<float> signature(static_cast<std::size_t>(d));
    for (auto& v : signature) v = spec.signature_scale * rng.normal();

    constexpr int kComponents = 3;
    struct Component {
        int u, v;
        float phase, amp;
        std::vector<float> dir;
    };
    std::vector<Component> comps;
    for (int j = 0; j < kComponents; ++j) {
        Component c;
        c.u = 1 + static_cast<int>(rng.next_below(3));
        c.v = 1 + static_cast<int>(rng.next_below(3));
        c.phase = rng.uniform(0.0f, 6.2831853f);
        c.amp = spec.pattern_amp * (0.5f + 0.5f * rng.next_float());
        c.dir.resize(static_cast<std::size_t>(d));
        float norm = 0.0f;
        for (auto& v : c.dir) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(std::max(norm, 1e-12f));
        for (auto& v : c.dir) v /= norm;
        comps.push_back(std::move(c));
    }

    Tensor out(Shape{h, w, d});
    auto& o = out.mut();
    for (int m = 0; m < h; ++m)
        for (int n = 0; n < w; ++n) {
            float* row = o.data() + (static_cast<std::size_t>(m) * static_cast<std::size_t>(w) +
                                     static_cast<std::size_t>(n)) *
                                        static_cast<std::size_t>(d);
            for (int c = 0; c < d; ++c) row[c] = signature[static_cast<std::size_t>(c)];
            for (const auto& comp : comps) {
                float angle = 6.2831853f * (comp.u * (m + 0.5f) / h + comp.v * (n + 0.5f) / w) +
                              comp.phase;
                float val = comp.amp * std::sin(angle);
                for (int c = 0; c < d; ++c) row[c] += val * comp.dir[static_cast<std::size_t>(c)];
            }
        }
    return out;
}

}  // namespace detail

// One normal sample of a given class: jittered template plus i.i.d. noise.
inline FeatureSample synth_sample(const SynthSpec& spec, std::uint64_t seed, int class_id,
                                  std::uint64_t sample_tag) {
    FeatureSample s;
    s.class_id = class_id;
    s.anomalous = false;
    Rng noise = Rng(seed).fork(0x5a5a5a5aULL).fork(sample_tag);
    const float gain = 1.0f + spec.intensity_jitter * noise.normal();
    for (int i = 0; i < spec.scales; ++i) {
        Tensor t = detail::class_template(spec, class_id, i, seed);
        auto& v = t.mut();
        for (auto& x : v) x = gain * x + spec.noise_sigma * noise.normal();
        s.features.push_back(std::move(t));
    }
    return s;
}

// Perturbs a rectangular patch at every scale (the same normalized region,
// shifted by a per-scale random direction of the spec magnitude) and records
// the patch in a finest-resolution mask.
inline std::pair<FeatureSample, std::vector<std::uint8_t>> inject_anomaly(
    const FeatureSample& sample, const SynthSpec& spec, std::uint64_t seed) {
    if (sample.anomalous) throw ContractError("inject_anomaly: sample already anomalous");
    const int h1 = spec.spatial[0], w1 = spec.spatial[0];
    if (spec.patch_max > h1 || spec.patch_max > w1)
        throw ContractError("inject_anomaly: patch " + std::to_string(spec.patch_max) +
                            " larger than map " + std::to_string(h1));
    Rng rng = Rng(seed).fork(0xa0a0a0a0ULL);
    const int ph = spec.patch_min +
                   static_cast<int>(rng.next_below(
                       static_cast<std::uint64_t>(spec.patch_max - spec.patch_min + 1)));
    const int pw = spec.patch_min +
                   static_cast<int>(rng.next_below(
                       static_cast<std::uint64_t>(spec.patch_max - spec.patch_min + 1)));
    const int r0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(h1 - ph + 1)));
    const int c0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(w1 - pw + 1)));

    FeatureSample out = sample;
    out.anomalous = true;
    for (int i = 0; i < spec.scales; ++i) {
        const int hi = spec.spatial[static_cast<std::size_t>(i)];
        const int wi = hi;
        const int d = spec.channels[static_cast<std::size_t>(i)];
        // scale-aligned region, at least one cell
        const double fy = static_cast<double>(hi) / h1;
        const double fx = static_cast<double>(wi) / w1;
        const int rr0 = static_cast<int>(std::floor(r0 * fy));
        const int cc0 = static_cast<int>(std::floor(c0 * fx));
        const int rr1 = std::min(hi, std::max(rr0 + 1, static_cast<int>(std::ceil((r0 + ph) * fy))));
        const int cc1 = std::min(wi, std::max(cc0 + 1, static_cast<int>(std::ceil((c0 + pw) * fx))));

        std::vector<float> rand_dir(static_cast<std::size_t>(d));
        float norm = 0.0f;
        for (auto& v : rand_dir) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(std::max(norm, 1e-12f));
        for (auto& v : rand_dir) v /= norm;

        Tensor& f = out.features[static_cast<std::size_t>(i)];
        auto& data = f.mut();
        const float blend = spec.anomaly_template_blend;
        std::vector<float> dir(static_cast<std::size_t>(d));
        for (int m = rr0; m < rr1; ++m)
            for (int n = cc0; n < cc1; ++n) {
                float* row =
                    data.data() + (static_cast<std::size_t>(m) * static_cast<std::size_t>(wi) +
                                   static_cast<std::size_t>(n)) *
                                      static_cast<std::size_t>(d);
                // local appearance direction blended with the random one
                float local_norm = 0.0f;
                for (int c = 0; c < d; ++c) local_norm += row[c] * row[c];
                local_norm = std::sqrt(std::max(local_norm, 1e-12f));
                float dn = 0.0f;
                for (int c = 0; c < d; ++c) {
                    dir[static_cast<std::size_t>(c)] =
                        blend * row[c] / local_norm +
                        (1.0f - blend) * rand_dir[static_cast<std::size_t>(c)];
                    dn += dir[static_cast<std::size_t>(c)] * dir[static_cast<std::size_t>(c)];
                }
                dn = std::sqrt(std::max(dn, 1e-12f));
                for (int c = 0; c < d; ++c)
                    row[c] += spec.anomaly_magnitude * dir[static_cast<std::size_t>(c)] / dn;
            }
    }

    std::vector<std::uint8_t> mask(static_cast<std::size_t>(h1) * static_cast<std::size_t>(w1), 0);
    for (int m = r0; m < r0 + ph; ++m)
        for (int n = c0; n < c0 + pw; ++n)
            mask[static_cast<std::size_t>(m) * static_cast<std::size_t>(w1) +
                 static_cast<std::size_t>(n)] = 1;
    out.mask = mask;
    return {std::move(out), std::move(mask)};
}

// Train split: normal only. Test split: first half normal, second half
// anomalous with masks; classes cycle within each group.
inline Dataset synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    Dataset ds;
    char buf[32];
    for (int i = 0; i < spec.train_count; ++i) {
        FeatureSample s = synth_sample(spec, seed, i % spec.classes, static_cast<std::uint64_t>(i));
        std::snprintf(buf, sizeof(buf), "train_%04d", i);
        s.id = buf;
        ds.train.push_back(std::move(s));
    }
    const int normal_test = spec.test_count / 2;
    for (int i = 0; i < spec.test_count; ++i) {
        FeatureSample s = synth_sample(spec, seed, i % spec.classes,
                                       0x100000ULL + static_cast<std::uint64_t>(i));
        std::snprintf(buf, sizeof(buf), "test_%04d", i);
        s.id = buf;
        if (i >= normal_test) {
            auto [anom, mask] = inject_anomaly(s, spec, seed ^ (0xbeefULL + static_cast<std::uint64_t>(i)));
            anom.id = s.id;
            ds.test.push_back(std::move(anom));
        } else {
            ds.test.push_back(std::move(s));
        }
    }
    return ds;
}

}  // namespace vqflow
