#pragma once

// One gradient-check case per differentiable operation. Each case draws a
// random instance (shapes included) from the generator it is given, and can
// run its analytic side in double or in float.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"
#include "td/ops.hpp"

namespace td::testkit {

struct OpCase {
  std::string name;
  std::function<GradCheckReport(std::mt19937_64&)> run;      // analytic in double
  std::function<GradCheckReport(std::mt19937_64&)> run_f32;  // analytic in float
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline GradInput input(Shape shape, std::mt19937_64& rng, double margin = 0.0) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return {shape, randn(n, rng, margin), true};
}

template <typename T>
struct Tag {
  using type = T;
};

// `body(tag, rng)` draws an instance and returns grad_check<tag::type>(...).
template <typename Body>
void add_case(std::vector<OpCase>& cases, std::string name, Body body) {
  cases.push_back({std::move(name), [body](std::mt19937_64& rng) { return body(Tag<double>{}, rng); },
                   [body](std::mt19937_64& rng) { return body(Tag<float>{}, rng); }});
}

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;

  add_case(cases, "matmul", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), k = pick(rng, 1, 6), m = pick(rng, 1, 5);
    auto f = [](auto& t, auto& x) { return ops::matmul(t, x[0], x[1]); };
    return grad_check<A>(f, {input({n, k}, rng), input({k, m}, rng)}, rng);
  });

  add_case(cases, "add_bias", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    auto f = [](auto& t, auto& x) { return ops::add_bias(t, x[0], x[1]); };
    return grad_check<A>(f, {input({n, m}, rng), input({m}, rng)}, rng);
  });

  add_case(cases, "linear", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), k = pick(rng, 1, 6), m = pick(rng, 1, 5);
    auto f = [](auto& t, auto& x) { return ops::linear(t, x[0], x[1], x[2]); };
    return grad_check<A>(f, {input({n, k}, rng), input({k, m}, rng), input({m}, rng)}, rng);
  });

  add_case(cases, "add", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    auto f = [](auto& t, auto& x) { return ops::add(t, x[0], x[1]); };
    return grad_check<A>(f, {input({n, m}, rng), input({n, m}, rng)}, rng);
  });

  add_case(cases, "add_same_operand", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    auto f = [](auto& t, auto& x) { return ops::add(t, x[0], x[0]); };
    return grad_check<A>(f, {input({n, m}, rng)}, rng);
  });

  add_case(cases, "scale", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    const double s = std::normal_distribution<double>(0.0, 2.0)(rng);
    auto f = [s](auto& t, auto& x) {
      using T = typename std::decay_t<decltype(x[0])>::value_type;
      return ops::scale(t, x[0], T(s));
    };
    return grad_check<A>(f, {input({n, m}, rng)}, rng);
  });

  add_case(cases, "relu", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    auto f = [](auto& t, auto& x) { return ops::relu(t, x[0]); };
    return grad_check<A>(f, {input({n, m}, rng, 1e-2)}, rng);
  });

  add_case(cases, "layer_norm", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 4), m = pick(rng, 2, 7);
    auto f = [](auto& t, auto& x) { return ops::layer_norm(t, x[0], x[1], x[2]); };
    return grad_check<A>(f, {input({n, m}, rng), input({m}, rng), input({m}, rng)}, rng);
  });

  add_case(cases, "dropout", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    const std::uint64_t seed = rng();
    auto f = [seed](auto& t, auto& x) {
      Rng mask_rng(seed);
      return ops::dropout(t, x[0], 0.3, true, mask_rng);
    };
    return grad_check<A>(f, {input({n, m}, rng)}, rng);
  });

  add_case(cases, "concat", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), a = pick(rng, 1, 4), b = pick(rng, 1, 4);
    auto f = [](auto& t, auto& x) { return ops::concat(t, x[0], x[1]); };
    return grad_check<A>(f, {input({n, a}, rng), input({n, b}, rng)}, rng);
  });

  add_case(cases, "slice_cols", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 2, 7);
    const auto begin = pick(rng, 0, m - 1), end = pick(rng, begin + 1, m);
    auto f = [begin, end](auto& t, auto& x) { return ops::slice_cols(t, x[0], begin, end); };
    return grad_check<A>(f, {input({n, m}, rng)}, rng);
  });

  add_case(cases, "mse", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), m = pick(rng, 1, 6);
    auto f = [](auto& t, auto& x) { return ops::mse(t, x[0], x[1]); };
    return grad_check<A>(f, {input({n, m}, rng), input({n, m}, rng)}, rng);
  });

  add_case(cases, "embedding_bag", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto vocab = pick(rng, 2, 8), d = pick(rng, 1, 5), n = pick(rng, 1, 4);
    std::vector<std::vector<std::size_t>> bags(n);
    for (auto& b : bags) {
      const auto len = pick(rng, 0, 4);
      for (std::size_t i = 0; i < len; ++i) b.push_back(pick(rng, 0, vocab - 1));
    }
    auto f = [bags](auto& t, auto& x) {
      return ops::embedding_bag(t, x[0], std::span<const std::vector<std::size_t>>(bags));
    };
    return grad_check<A>(f, {input({vocab, d}, rng)}, rng);
  });

  add_case(cases, "softmax_cross_entropy", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 5), c = pick(rng, 2, 6);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = pick(rng, 0, c - 1);
    auto f = [labels](auto& t, auto& x) {
      return ops::softmax_cross_entropy(t, x[0], std::span<const std::size_t>(labels));
    };
    return grad_check<A>(f, {input({n, c}, rng)}, rng);
  });

  // A whole channel module: dense -> relu -> layer_norm -> dense.
  add_case(cases, "dense_relu_dense", [](auto tag, std::mt19937_64& rng) {
    using A = typename decltype(tag)::type;
    const auto n = pick(rng, 1, 4), in = pick(rng, 1, 5), hid = pick(rng, 2, 6), out = pick(rng, 1, 4);
    auto f = [](auto& t, auto& x) {
      auto h = ops::relu(t, ops::linear(t, x[0], x[1], x[2]));
      h = ops::layer_norm(t, h, x[3], x[4]);
      return ops::linear(t, h, x[5], x[6]);
    };
    return grad_check<A>(f,
                         {input({n, in}, rng), input({in, hid}, rng), input({hid}, rng, 0.1), input({hid}, rng),
                          input({hid}, rng), input({hid, out}, rng), input({out}, rng)},
                         rng);
  });

  return cases;
}

}  // namespace td::testkit
