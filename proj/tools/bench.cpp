// Kernel benchmark: OpenMP-parallel kernels against the serial reference,
// plus a forward/backward pass timing at the default model size.

#include <chrono>
#include <cstdio>

#include "propdec/kernels.hpp"
#include "propdec/model.hpp"
#include "propdec/rng.hpp"

using namespace propdec;
using clock_type = std::chrono::steady_clock;

namespace {

double time_ms(int reps, auto&& fn) {
    fn(); // warm up
    auto t0 = clock_type::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = clock_type::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void bench_matmul(int m, int k, int n, int reps) {
    Rng rng(1);
    std::vector<double> a(size_t(m) * k), b(size_t(k) * n), c(size_t(m) * n);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    double serial = time_ms(reps, [&] { kern::ref::matmul(a.data(), b.data(), c.data(), m, k, n); });
    double parallel = time_ms(reps, [&] { kern::matmul(a.data(), b.data(), c.data(), m, k, n); });
    double gflops = 2.0 * m * k * n / 1e6; // per ms
    std::printf("matmul %4dx%4dx%4d  serial %8.3f ms (%6.2f GF/s)  parallel %8.3f ms (%6.2f GF/s)  speedup %.2fx\n",
                m, k, n, serial, gflops / serial, parallel, gflops / parallel, serial / parallel);
}

} // namespace

int main() {
    std::printf("== kernels: OpenMP vs serial reference ==\n");
    bench_matmul(64, 64, 64, 200);
    bench_matmul(96, 64, 256, 100);
    bench_matmul(256, 64, 320, 50);
    bench_matmul(512, 512, 512, 5);

    std::printf("\n== model forward / backward (default size) ==\n");
    ModelConfig cfg;
    cfg.vocab_size = 320;
    Model model(cfg);
    Rng rng(2);
    std::vector<int> tokens;
    for (int i = 0; i < 48; ++i) tokens.push_back(int(rng.uniform_int(320)));

    double fwd = time_ms(20, [&] { model.forward_logits(tokens); });
    std::printf("forward  (double, 48 tokens): %8.3f ms\n", fwd);

    ForwardTrace<double> tr;
    double fwd_bwd = time_ms(20, [&] {
        forward_pass<double, double>(cfg, model.params, model.layer_scale, tokens, nullptr, tr);
        MatT<double> dlogits(tr.S, cfg.vocab_size);
        dlogits.zero();
        dlogits.at(tr.S - 1, 0) = 1.0;
        std::vector<MatT<double>> dz;
        backward_pass<double, double>(cfg, model.params, model.layer_scale, tokens, nullptr, tr,
                                      dlogits, &dz, nullptr, nullptr);
    });
    std::printf("fwd+bwd  (double, 48 tokens): %8.3f ms\n", fwd_bwd);

    ForwardTrace<Dual> td;
    double dual = time_ms(20, [&] {
        forward_pass<Dual, double>(cfg, model.params, model.layer_scale, tokens, nullptr, td);
        MatT<Dual> dlogits(td.S, cfg.vocab_size);
        dlogits.zero();
        dlogits.at(td.S - 1, 0) = Dual(1.0, 0.0);
        std::vector<MatT<Dual>> dz;
        backward_pass<Dual, double>(cfg, model.params, model.layer_scale, tokens, nullptr, td,
                                    dlogits, &dz, nullptr, nullptr);
    });
    std::printf("fwd+bwd  (dual,   48 tokens): %8.3f ms\n", dual);

    ParamsT<float> shadow;
    shadow.init_shape(cfg);
    ForwardTrace<float> tf;
    double fl = time_ms(20, [&] {
        forward_pass<float, float>(cfg, shadow, model.layer_scale, tokens, nullptr, tf);
        MatT<float> dlogits(tf.S, cfg.vocab_size);
        dlogits.zero();
        dlogits.at(tf.S - 1, 0) = 1.0f;
        ParamGradsT<float> g(cfg);
        std::vector<MatT<float>> dz;
        backward_pass<float, float>(cfg, shadow, model.layer_scale, tokens, nullptr, tf, dlogits,
                                    &dz, &g, nullptr);
    });
    std::printf("fwd+bwd  (float + param grads): %6.3f ms\n", fl);
    return 0;
}
