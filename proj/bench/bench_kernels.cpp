// Serial reference vs OpenMP kernels, plus one full training step.

#include <benchmark/benchmark.h>

#include <vector>

#include "optolab/kernels.hpp"
#include "optolab/rng.hpp"
#include "optolab/taskgen.hpp"
#include "optolab/transformer.hpp"

using namespace optolab;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

template <bool Serial>
void BM_gemm(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const auto a = noise(n * n, 1), b = noise(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : st) {
        if constexpr (Serial) kernels::serial::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
        else kernels::gemm(false, false, n, n, n, a.data(), b.data(), c.data(), false);
        benchmark::DoNotOptimize(c.data());
    }
    st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n * n * n));
}

template <bool Serial>
void BM_softmax(benchmark::State& st) {
    const std::size_t cols = 9, rows = static_cast<std::size_t>(st.range(0)) * cols;
    const auto x = noise(rows * cols, 3);
    std::vector<double> y(rows * cols);
    for (auto _ : st) {
        if constexpr (Serial) kernels::serial::softmax_rows(rows, cols, true, x.data(), y.data());
        else kernels::softmax_rows(rows, cols, true, x.data(), y.data());
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Serial>
void BM_layernorm(benchmark::State& st) {
    const std::size_t cols = 64, rows = static_cast<std::size_t>(st.range(0));
    const auto x = noise(rows * cols, 4);
    std::vector<double> g(cols, 1.0), b(cols, 0.0), out(rows * cols), xhat(rows * cols), inv(rows);
    for (auto _ : st) {
        if constexpr (Serial)
            kernels::serial::layernorm_rows(rows, cols, 1e-5, x.data(), g.data(), b.data(), out.data(), xhat.data(), inv.data());
        else
            kernels::layernorm_rows(rows, cols, 1e-5, x.data(), g.data(), b.data(), out.data(), xhat.data(), inv.data());
        benchmark::DoNotOptimize(out.data());
    }
}

void BM_train_step(benchmark::State& st) {
    const World w = build_world(WorldConfig{});
    ModelConfig mc;
    mc.exemplar_dim = w.config.exemplar_dim;
    ModelParams p = init_params(mc, 1);
    AdamState adam = AdamState::zeros_like(p);
    CounterRng rng(0);
    for (auto _ : st) {
        const SequenceBatch b = sample_batch(w, Split::Train, static_cast<std::size_t>(st.range(0)), rng);
        benchmark::DoNotOptimize(train_step(p, adam, b, plain_loss, AdamConfig{}).loss);
    }
}

}  // namespace

BENCHMARK_TEMPLATE(BM_gemm, true)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK_TEMPLATE(BM_gemm, false)->Name("gemm/omp")->Arg(64)->Arg(256);
BENCHMARK_TEMPLATE(BM_softmax, true)->Name("softmax/serial")->Arg(32 * 8)->Arg(4096);
BENCHMARK_TEMPLATE(BM_softmax, false)->Name("softmax/omp")->Arg(32 * 8)->Arg(4096);
BENCHMARK_TEMPLATE(BM_layernorm, true)->Name("layernorm/serial")->Arg(288)->Arg(8192);
BENCHMARK_TEMPLATE(BM_layernorm, false)->Name("layernorm/omp")->Arg(288)->Arg(8192);
BENCHMARK(BM_train_step)->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
